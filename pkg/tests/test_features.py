import hashlib
import itertools
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from vidpred.features import (ConfigError, FeatureExtractor, TapSpec, VideoEmbedder, conv_layers,
                              embed_video, extract_features)


def _checksum(stack):
    h = hashlib.sha256()
    for name, feats in stack:
        h.update(name.encode())
        h.update(feats.detach().numpy().tobytes())
    return h.hexdigest()


def test_deterministic():
    img = torch.rand(3, 32, 32)
    spec = TapSpec()
    a, b = extract_features(img, spec), extract_features(img, spec)
    assert a.layer_ids == b.layer_ids
    for (_, x), (_, y) in zip(a, b):
        assert torch.equal(x, y)


def test_identity_first_conv(tmp_path):
    ext = FeatureExtractor(TapSpec(tap_layers=("conv1",)))
    with torch.no_grad():
        w = ext.layers["conv1"].weight
        w.zero_()
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        ext.layers["conv1"].bias.zero_()
    path = tmp_path / "identity.npz"
    ext.save_weights(path)
    spec = TapSpec(tap_layers=("conv1",), weights_source="file", weights_path=str(path))
    img = torch.rand(3, 16, 16)
    feats = extract_features(img, FeatureExtractor(spec))["conv1"]
    assert torch.equal(feats[:3], img)
    assert torch.all(feats[3:] == 0)


def test_zero_image_gives_zero_features():
    stack = extract_features(torch.zeros(2, 3, 32, 32), TapSpec())
    for _, feats in stack:
        assert torch.all(feats == 0)


def test_layer_count_and_shrinking_resolution():
    spec = TapSpec.all_layers("tiny-conv")
    stack = extract_features(torch.rand(2, 3, 32, 32), spec)
    assert len(stack) == len(spec.tap_layers) == 4
    sizes = [f.shape[-1] for _, f in stack]
    assert sizes == sorted(sizes, reverse=True)


def test_vgg_style_all_layers():
    spec = TapSpec.all_layers("vgg11-style")
    assert len(spec.tap_layers) == 8
    stack = extract_features(torch.rand(1, 3, 32, 32), spec)
    assert stack.layer_ids == list(spec.tap_layers)
    sizes = [f.shape[-1] for _, f in stack]
    assert sizes == sorted(sizes, reverse=True)
    assert len(conv_layers("vgg19-style")) == 16


def test_resize_to_input_size():
    spec = TapSpec(tap_layers=("conv1",), input_size=16)
    assert extract_features(torch.rand(3, 40, 40), spec)["conv1"].shape == (16, 16, 16)


def test_bad_config():
    with pytest.raises(ConfigError):
        TapSpec(backbone_id="resnet")
    with pytest.raises(ConfigError):
        TapSpec(tap_layers=("conv9",))
    with pytest.raises(ConfigError):
        TapSpec(tap_layers=("conv2", "conv1"))
    with pytest.raises(ConfigError):
        TapSpec(tap_layers=())


def test_missing_weights_file(tmp_path):
    spec = TapSpec(weights_source="file", weights_path=str(tmp_path / "nope.npz"))
    with pytest.raises(FileNotFoundError):
        FeatureExtractor(spec)


def test_weights_shape_mismatch(tmp_path):
    ext = FeatureExtractor(TapSpec())
    path = tmp_path / "w.npz"
    ext.save_weights(path)
    arrays = dict(np.load(path))
    arrays["conv2.weight"] = arrays["conv2.weight"][:, :, :2]
    np.savez(path, **arrays)
    with pytest.raises(ConfigError, match="conv2.weight"):
        FeatureExtractor(TapSpec(weights_source="file", weights_path=str(path)))


def test_weights_normalization(tmp_path):
    ext = FeatureExtractor(TapSpec(tap_layers=("conv1",)))
    path = tmp_path / "w.npz"
    ext.save_weights(path, normalization={"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]})
    spec = TapSpec(tap_layers=("conv1",), weights_source="file", weights_path=str(path), normalize_input=True)
    img = torch.rand(3, 8, 8)
    expected = ext((img - 0.5) / 0.25)["conv1"]
    assert torch.allclose(FeatureExtractor(spec)(img)["conv1"], expected)


def test_extractor_is_frozen_but_passes_gradients():
    ext = FeatureExtractor(TapSpec())
    assert not any(p.requires_grad for p in ext.parameters())
    x = torch.rand(1, 3, 16, 16, requires_grad=True)
    sum(f.sum() for _, f in ext(x)).backward()
    assert x.grad is not None and x.grad.abs().sum() > 0


def test_reproducible_across_processes():
    code = (
        "import torch, hashlib\n"
        "from vidpred.features import TapSpec, extract_features\n"
        "g = torch.Generator().manual_seed(3)\n"
        "img = torch.rand(2, 3, 32, 32, generator=g)\n"
        "h = hashlib.sha256()\n"
        "for n, f in extract_features(img, TapSpec(seed=11)):\n"
        "    h.update(f.numpy().tobytes())\n"
        "print(h.hexdigest())\n"
    )
    runs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(runs) == 1
    g = torch.Generator().manual_seed(3)
    img = torch.rand(2, 3, 32, 32, generator=g)
    assert _checksum(extract_features(img, TapSpec(seed=11))) == _checksum(
        extract_features(img, TapSpec(seed=11)))


class TestEmbedVideo:
    embedder = VideoEmbedder(TapSpec())

    def test_output_dim(self):
        v = embed_video(torch.rand(4, 3, 32, 32), self.embedder)
        assert v.shape == (self.embedder.output_dim,) == (16 + 32 + 32 + 64,)

    def test_single_frame(self):
        frame = torch.rand(1, 3, 32, 32)
        feats = extract_features(frame, TapSpec())
        pooled = torch.cat([f.mean(dim=(-2, -1)) for _, f in feats], dim=-1)[0]
        np.testing.assert_allclose(embed_video(frame, self.embedder), pooled.double().numpy(), rtol=1e-6)

    def test_identical_frames(self):
        frame = torch.rand(1, 3, 32, 32)
        np.testing.assert_allclose(embed_video(frame.repeat(5, 1, 1, 1), self.embedder),
                                   embed_video(frame, self.embedder), rtol=1e-5, atol=1e-7)

    def test_permutation_invariant_mean(self):
        clip = torch.rand(3, 3, 32, 32)
        ref = embed_video(clip, self.embedder)
        for perm in itertools.permutations(range(3)):
            np.testing.assert_allclose(embed_video(clip[list(perm)], self.embedder), ref, rtol=1e-5, atol=1e-7)

    def test_max_pooling(self):
        emb = VideoEmbedder(TapSpec(), "max")
        clip = torch.rand(3, 3, 32, 32)
        per_frame = np.stack([embed_video(clip[i:i + 1], emb) for i in range(3)])
        np.testing.assert_allclose(embed_video(clip, emb), per_frame.max(axis=0), rtol=1e-5, atol=1e-7)

    def test_empty(self):
        with pytest.raises(ValueError):
            embed_video(torch.zeros(0, 3, 32, 32), self.embedder)

    def test_embedder_id(self):
        assert "tiny-conv" in self.embedder.embedder_id
        json.dumps(self.embedder.embedder_id)
