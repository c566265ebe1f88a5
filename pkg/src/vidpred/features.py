"""Frozen convolutional feature extractors with multi-layer taps.

Used by the perceptual loss, the lpips-style distance and the video embedder
behind FVD. Backbones are built from a layer table; weights are either drawn
from a seeded generator (``random-fixed``) or read from an ``.npz`` file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .losses import FeatureStack

# "M" is a 2x2 max-pool.
_VGG11 = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]
_VGG19 = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
          512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


class ConfigError(ValueError):
    """Invalid backbone or tap configuration."""


def _vgg_table(cfg) -> list[tuple]:
    table, block, idx = [], 1, 1
    for item in cfg:
        if item == "M":
            table.append(("pool",))
            block, idx = block + 1, 1
        else:
            table.append(("conv", f"conv{block}_{idx}", item, 3, 1))
            idx += 1
    return table


BACKBONES: dict[str, list[tuple]] = {
    # name, out_channels, kernel, stride
    "tiny-conv": [
        ("conv", "conv1", 16, 3, 1),
        ("conv", "conv2", 32, 3, 2),
        ("conv", "conv3", 32, 3, 2),
        ("conv", "conv4", 64, 3, 2),
    ],
    "vgg11-style": _vgg_table(_VGG11),
    "vgg19-style": _vgg_table(_VGG19),
}


def conv_layers(backbone_id: str) -> list[str]:
    if backbone_id not in BACKBONES:
        raise ConfigError(f"unknown backbone {backbone_id!r}; known: {sorted(BACKBONES)}")
    return [row[1] for row in BACKBONES[backbone_id] if row[0] == "conv"]


@dataclass(frozen=True)
class TapSpec:
    backbone_id: str = "tiny-conv"
    tap_layers: tuple[str, ...] = ("conv1", "conv2", "conv3", "conv4")
    normalize_input: bool = False
    weights_source: str = "random-fixed"
    weights_path: str | None = None
    seed: int = 0
    in_channels: int = 3
    input_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        known = conv_layers(self.backbone_id)
        if not self.tap_layers:
            raise ConfigError("tap_layers must be nonempty")
        for name in self.tap_layers:
            if name not in known:
                raise ConfigError(f"layer {name!r} is not a conv layer of {self.backbone_id}")
        order = [known.index(n) for n in self.tap_layers]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ConfigError(f"tap_layers must be unique and ordered shallow to deep: {self.tap_layers}")
        if self.weights_source not in ("random-fixed", "file"):
            raise ConfigError(f"weights_source must be 'random-fixed' or 'file', got {self.weights_source!r}")
        if self.weights_source == "file" and not self.weights_path:
            raise ConfigError("weights_source='file' requires weights_path")

    @classmethod
    def all_layers(cls, backbone_id: str, **kwargs) -> "TapSpec":
        """Tap every conv layer of the backbone."""
        return cls(backbone_id=backbone_id, tap_layers=tuple(conv_layers(backbone_id)), **kwargs)


class FeatureExtractor(nn.Module):
    """Frozen backbone returning post-activation conv outputs at the tap layers.

    Gradients flow to the input but never into the backbone weights.
    """

    def __init__(self, spec: TapSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleDict()
        self._plan: list[tuple] = []
        last_tap = conv_layers(spec.backbone_id).index(spec.tap_layers[-1])
        channels, n_conv = spec.in_channels, 0
        for row in BACKBONES[spec.backbone_id]:
            if n_conv > last_tap:
                break
            if row[0] == "pool":
                self._plan.append(("pool", None))
                continue
            _, name, out_ch, k, stride = row
            self.layers[name] = nn.Conv2d(channels, out_ch, k, stride=stride, padding=k // 2)
            self._plan.append(("conv", name))
            channels, n_conv = out_ch, n_conv + 1
        self.register_buffer("norm_mean", torch.zeros(spec.in_channels))
        self.register_buffer("norm_std", torch.ones(spec.in_channels))
        if spec.weights_source == "random-fixed":
            self._init_random(spec.seed)
        else:
            self.load_weights(spec.weights_path)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _init_random(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.layers.values():
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()

    def load_weights(self, path) -> None:
        """Load ``<layer>.weight`` / ``<layer>.bias`` arrays from an ``.npz`` archive.

        An optional ``__meta__`` entry holds JSON with ``backbone_id`` and, if
        the weights expect it, ``normalization: {"mean": [...], "std": [...]}``.
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"weights file not found: {path}")
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
        meta = json.loads(str(arrays.pop("__meta__"))) if "__meta__" in arrays else {}
        if meta.get("backbone_id", self.spec.backbone_id) != self.spec.backbone_id:
            raise ConfigError(
                f"{path}: weights are for {meta['backbone_id']!r}, not {self.spec.backbone_id!r}"
            )
        with torch.no_grad():
            for name, conv in self.layers.items():
                for pname in ("weight", "bias"):
                    key = f"{name}.{pname}"
                    if key not in arrays:
                        raise ConfigError(f"{path}: missing array {key!r}")
                    target = getattr(conv, pname)
                    if tuple(arrays[key].shape) != tuple(target.shape):
                        raise ConfigError(
                            f"{path}: {key} has shape {arrays[key].shape}, expected {tuple(target.shape)}"
                        )
                    target.copy_(torch.from_numpy(arrays[key]))
            norm = meta.get("normalization")
            if norm is not None and self.spec.normalize_input:
                self.norm_mean.copy_(torch.tensor(norm["mean"], dtype=self.norm_mean.dtype))
                self.norm_std.copy_(torch.tensor(norm["std"], dtype=self.norm_std.dtype))

    def save_weights(self, path, normalization: dict | None = None) -> None:
        arrays = {}
        for name, conv in self.layers.items():
            arrays[f"{name}.weight"] = conv.weight.detach().cpu().numpy()
            arrays[f"{name}.bias"] = conv.bias.detach().cpu().numpy()
        meta = {"backbone_id": self.spec.backbone_id}
        if normalization is not None:
            meta["normalization"] = normalization
        arrays["__meta__"] = np.array(json.dumps(meta))
        np.savez(path, **arrays)

    def forward(self, images: Tensor) -> FeatureStack:
        squeeze = images.dim() == 3
        x = images.unsqueeze(0) if squeeze else images
        size = self.spec.input_size
        if size is not None and tuple(x.shape[-2:]) != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        if self.spec.normalize_input:
            x = (x - self.norm_mean.view(1, -1, 1, 1)) / self.norm_std.view(1, -1, 1, 1)
        taps = set(self.spec.tap_layers)
        out = []
        for kind, name in self._plan:
            if kind == "pool":
                x = F.max_pool2d(x, 2)
                continue
            x = F.relu(self.layers[name](x))
            if name in taps:
                out.append((name, x[0] if squeeze else x))
                if len(out) == len(taps):
                    break
        return FeatureStack(out)


_CACHE: dict[tuple[TapSpec, torch.dtype], FeatureExtractor] = {}


def get_extractor(spec: TapSpec, dtype: torch.dtype = torch.float32) -> FeatureExtractor:
    """Shared extractor per (spec, dtype); never mutated after construction."""
    key = (spec, dtype)
    if key not in _CACHE:
        _CACHE[key] = FeatureExtractor(spec).to(dtype=dtype)
    return _CACHE[key]


def extract_features(images: Tensor, spec: TapSpec | FeatureExtractor) -> FeatureStack:
    if isinstance(spec, FeatureExtractor):
        return spec(images)
    return get_extractor(spec, images.dtype)(images)


@dataclass(frozen=True)
class VideoEmbedder:
    """Per-frame features, spatially mean-pooled, then pooled over time."""

    frame_backbone: TapSpec = field(default_factory=TapSpec)
    temporal_pooling: str = "mean"

    def __post_init__(self):
        if self.temporal_pooling not in ("mean", "max"):
            raise ConfigError(f"temporal_pooling must be 'mean' or 'max', got {self.temporal_pooling!r}")

    @property
    def output_dim(self) -> int:
        ext = get_extractor(self.frame_backbone)
        return sum(ext.layers[name].out_channels for name in self.frame_backbone.tap_layers)

    @property
    def embedder_id(self) -> str:
        spec = self.frame_backbone
        return (f"{spec.backbone_id}[{','.join(spec.tap_layers)}]"
                f"/{spec.weights_source}:{spec.weights_path or spec.seed}/{self.temporal_pooling}")

    def frame_embeddings(self, frames: Tensor) -> Tensor:
        """``T x C x H x W`` -> ``T x output_dim``."""
        with torch.no_grad():
            stack = extract_features(frames, self.frame_backbone)
        return torch.cat([feats.mean(dim=(-2, -1)) for _, feats in stack], dim=-1)

    def __call__(self, frames) -> np.ndarray:
        return embed_video(frames, self)


def embed_video(seq, embedder: VideoEmbedder) -> np.ndarray:
    frames = getattr(seq, "frames", seq)
    frames = torch.as_tensor(frames)
    if frames.dim() != 4 or frames.shape[0] < 1:
        raise ValueError("embed_video needs a nonempty T x C x H x W sequence")
    per_frame = embedder.frame_embeddings(frames)
    if embedder.temporal_pooling == "mean":
        pooled = per_frame.mean(dim=0)
    else:
        pooled = per_frame.max(dim=0).values
    return pooled.double().cpu().numpy()
