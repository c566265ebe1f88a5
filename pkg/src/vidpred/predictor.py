"""ResNet-VAE next-frame predictor with residual or attention skip connections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .losses import LOG_VAR_MAX, GaussianImage


@dataclass
class FrameSequence:
    """``T x C x H x W`` frames in [0, 1]."""

    frames: Tensor
    frame_interval: float = 1.0
    # True where a frame was produced by the model rather than observed.
    self_fed: list[bool] | None = None

    def __post_init__(self):
        self.frames = torch.as_tensor(self.frames)
        if self.frames.dim() != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"FrameSequence needs T x C x H x W with T >= 1, got {tuple(self.frames.shape)}")
        if self.self_fed is None:
            self.self_fed = [False] * len(self)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def check(self) -> None:
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("frame values outside [0, 1]")


@dataclass
class LatentSample:
    mean: Tensor
    log_variance: Tensor
    sample: Tensor


@dataclass
class SkipConfig:
    kind: str = "attention"
    resolutions: list[int] = field(default_factory=lambda: [16])
    heads: int = 1
    qk_dim: int = 32

    def __post_init__(self):
        if self.kind not in ("none", "residual", "attention"):
            raise ValueError(f"skip kind must be none, residual or attention, got {self.kind!r}")
        self.resolutions = [int(r) for r in self.resolutions]
        if self.heads < 1 or self.qk_dim % self.heads:
            raise ValueError(f"qk_dim ({self.qk_dim}) must be divisible by heads ({self.heads})")


@dataclass
class PredictorConfig:
    input_frames: int = 6
    channels: int = 3
    image_size: int = 64
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    latent_dim: int = 128
    skip: SkipConfig = field(default_factory=SkipConfig)
    deterministic_latent: bool = True

    def __post_init__(self):
        if isinstance(self.skip, dict):
            self.skip = SkipConfig(**self.skip)
        self.widths = [int(w) for w in self.widths]
        if self.input_frames < 1 or self.latent_dim < 1 or not self.widths:
            raise ValueError("input_frames, latent_dim and widths must be positive/nonempty")
        if self.image_size % 2 ** len(self.widths):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{len(self.widths)}")
        if self.skip.kind != "none":
            bad = [r for r in self.skip.resolutions if r not in self.resolutions]
            if bad:
                raise ValueError(f"skip resolutions {bad} not among encoder resolutions {self.resolutions}")

    @property
    def resolutions(self) -> list[int]:
        """Feature-map sizes after each downsampling stage, large to small."""
        return [self.image_size // 2 ** (i + 1) for i in range(len(self.widths))]

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = (nn.Identity() if in_ch == out_ch and stride == 1
                         else nn.Conv2d(in_ch, out_ch, 1, stride=stride))

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class AttentionSkip(nn.Module):
    """Decoder queries attend over same-resolution encoder features.

    Output is ``decoder + out_proj(softmax(q k^T / sqrt(d_k)) v)``; the
    additive residual path lets the decoder keep its own features. No
    positional encoding is added.
    """

    def __init__(self, dec_ch: int, enc_ch: int, qk_dim: int = 32, heads: int = 1):
        super().__init__()
        if qk_dim % heads:
            raise ValueError("qk_dim must be divisible by heads")
        self.heads, self.qk_dim = heads, qk_dim
        self.query = nn.Conv2d(dec_ch, qk_dim, 1)
        self.key = nn.Conv2d(enc_ch, qk_dim, 1)
        self.value = nn.Conv2d(enc_ch, dec_ch, 1, bias=False)
        self.out = nn.Conv2d(dec_ch, dec_ch, 1, bias=False)
        self.last_weights: Tensor | None = None

    def attention_weights(self, dec: Tensor, enc: Tensor) -> Tensor:
        """``B x heads x R^2 (queries) x R^2 (keys)``, rows sum to one."""
        b, _, h, w = dec.shape
        d_k = self.qk_dim // self.heads
        q = self.query(dec).reshape(b, self.heads, d_k, h * w).transpose(-1, -2)
        k = self.key(enc).reshape(b, self.heads, d_k, h * w)
        return torch.softmax(q @ k / math.sqrt(d_k), dim=-1)

    def forward(self, dec: Tensor, enc: Tensor) -> Tensor:
        if dec.shape[-2:] != enc.shape[-2:]:
            raise ValueError(
                f"attention skip needs matching resolutions, got {tuple(dec.shape[-2:])} "
                f"and {tuple(enc.shape[-2:])}"
            )
        b, c, h, w = dec.shape
        attn = self.attention_weights(dec, enc)
        self.last_weights = attn.detach()
        v = self.value(enc).reshape(b, self.heads, c // self.heads, h * w).transpose(-1, -2)
        mixed = (attn @ v).transpose(-1, -2).reshape(b, c, h, w)
        return dec + self.out(mixed)


def attention_skip(decoder_feats: Tensor, encoder_feats: Tensor, block: AttentionSkip) -> Tensor:
    """Apply ``block`` to unbatched ``C x R x R`` or batched feature maps."""
    if decoder_feats.dim() == 3:
        return block(decoder_feats[None], encoder_feats[None])[0]
    return block(decoder_feats, encoder_feats)


class ResidualSkip(nn.Module):
    def __init__(self, dec_ch: int, enc_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(enc_ch, dec_ch, 1)

    def forward(self, dec, enc):
        return dec + self.proj(enc)


class Predictor(nn.Module):
    """Encodes ``n`` frames stacked on the channel axis, decodes a Gaussian next frame."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = cfg = config
        widths = cfg.widths
        self.stem = nn.Conv2d(cfg.input_frames * cfg.channels, widths[0], 3, padding=1)
        down, ch = [], widths[0]
        for w in widths:
            down.append(ResBlock(ch, w, stride=2))
            ch = w
        self.down = nn.ModuleList(down)
        r_min = cfg.resolutions[-1]
        self.to_latent = nn.Linear(ch * r_min * r_min, 2 * cfg.latent_dim)
        self.fuse = nn.Conv2d(ch + cfg.latent_dim, ch, 1)
        self.mid = ResBlock(ch, ch)

        up, skips = [], nn.ModuleDict()
        dec_widths = list(reversed(widths))  # channels at each resolution, small to large
        for i, res in enumerate(reversed(cfg.resolutions)):
            in_ch = dec_widths[i]
            if cfg.skip.kind != "none" and res in cfg.skip.resolutions:
                if cfg.skip.kind == "attention":
                    skips[str(res)] = AttentionSkip(in_ch, in_ch, cfg.skip.qk_dim, cfg.skip.heads)
                else:
                    skips[str(res)] = ResidualSkip(in_ch, in_ch)
            out_ch = dec_widths[i + 1] if i + 1 < len(dec_widths) else widths[0]
            up.append(ResBlock(in_ch, out_ch))
        self.up = nn.ModuleList(up)
        self.skips = skips
        self.head = nn.Conv2d(widths[0], 2 * cfg.channels, 3, padding=1)

    # -- encoder -------------------------------------------------------
    def _stack(self, frames) -> Tensor:
        frames = getattr(frames, "frames", frames)
        if frames.dim() == 4:
            frames = frames[None]
        cfg = self.config
        expected = (cfg.input_frames, cfg.channels, cfg.image_size, cfg.image_size)
        if tuple(frames.shape[1:]) != expected:
            raise ValueError(f"expected input frames of shape {expected}, got {tuple(frames.shape[1:])}")
        b = frames.shape[0]
        return frames.reshape(b, -1, cfg.image_size, cfg.image_size)

    def encode(self, frames, generator: torch.Generator | None = None,
               deterministic: bool | None = None) -> tuple[list[Tensor], LatentSample]:
        """Returns the feature pyramid (large to small resolution) and latent.

        ``frames`` is ``n x C x H x W``, ``B x n x C x H x W`` or a FrameSequence.
        """
        x = self.stem(self._stack(frames))
        pyramid = []
        for block in self.down:
            x = block(x)
            pyramid.append(x)
        stats = self.to_latent(x.flatten(1))
        mean, log_var = stats.chunk(2, dim=-1)
        log_var = LOG_VAR_MAX * torch.tanh(log_var / LOG_VAR_MAX)
        if deterministic is None:
            deterministic = self.config.deterministic_latent
        if deterministic:
            sample = mean
        else:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            sample = mean + torch.exp(0.5 * log_var) * eps
        return pyramid, LatentSample(mean, log_var, sample)

    # -- decoder -------------------------------------------------------
    def decode(self, latent: LatentSample, pyramid: list[Tensor]) -> GaussianImage:
        resolutions = self.config.resolutions
        if [p.shape[-1] for p in pyramid] != resolutions:
            raise ValueError(
                f"pyramid resolutions {[p.shape[-1] for p in pyramid]} do not match {resolutions}"
            )
        bottom = pyramid[-1]
        z = latent.sample[..., None, None].expand(-1, -1, *bottom.shape[-2:])
        h = self.mid(self.fuse(torch.cat([bottom, z], dim=1)))
        for i, res in enumerate(reversed(resolutions)):
            if str(res) in self.skips:
                h = self.skips[str(res)](h, pyramid[len(resolutions) - 1 - i])
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        mean_logit, log_var = self.head(F.silu(h)).chunk(2, dim=1)
        return GaussianImage(torch.sigmoid(mean_logit), LOG_VAR_MAX * torch.tanh(log_var / LOG_VAR_MAX))

    def forward(self, frames, generator=None, deterministic=None) -> tuple[GaussianImage, LatentSample]:
        pyramid, latent = self.encode(frames, generator, deterministic)
        return self.decode(latent, pyramid), latent

    def predict_next(self, seq, generator=None, deterministic=None) -> tuple[GaussianImage, LatentSample]:
        """Single-step prediction; unbatched input gives unbatched output."""
        frames = getattr(seq, "frames", seq)
        pred, latent = self(frames, generator, deterministic)
        if frames.dim() == 4:
            pred = GaussianImage(pred.mean[0], pred.log_variance[0])
            latent = LatentSample(latent.mean[0], latent.log_variance[0], latent.sample[0])
        return pred, latent

    @torch.no_grad()
    def rollout(self, seed, k: int, generator=None, deterministic=None,
                return_variance: bool = False):
        """Iterate single-step prediction ``k`` times, feeding back the mean.

        Returns a FrameSequence of the ``k`` predicted frames (batched input
        returns a ``B x k x C x H x W`` tensor). With ``return_variance`` the
        per-step predicted variances are returned as well.
        """
        if k < 1:
            raise ValueError(f"rollout needs k >= 1, got {k}")
        frames = getattr(seed, "frames", seed)
        batched = frames.dim() == 5
        window = frames if batched else frames[None]
        n = self.config.input_frames
        if window.shape[1] != n:
            raise ValueError(f"seed must have exactly {n} frames, got {window.shape[1]}")
        means, variances = [], []
        for _ in range(k):
            pred, _ = self(window, generator, deterministic)
            means.append(pred.mean)
            variances.append(pred.variance)
            window = torch.cat([window[:, 1:], pred.mean[:, None]], dim=1)
        out = torch.stack(means, dim=1)
        var = torch.stack(variances, dim=1)
        if not batched:
            out, var = out[0], var[0]
            interval = getattr(seed, "frame_interval", 1.0)
            out = FrameSequence(out, interval, [True] * k)
        return (out, var) if return_variance else out


# -- checkpoints -------------------------------------------------------

def save_checkpoint(path, model: Predictor, progress: dict | None = None,
                    optimizer_state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": model.config.to_dict(),
            "weights": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            "progress": progress or {},
            "optimizer": optimizer_state,
        },
        path,
    )


def load_checkpoint(path) -> tuple[Predictor, dict]:
    """Rebuild the model from its stored config and validate every weight shape.

    Returns ``(model, record)`` where ``record`` carries ``progress`` and
    ``optimizer`` entries.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    record = torch.load(path, map_location="cpu", weights_only=False)
    model = Predictor(PredictorConfig(**record["config"]))
    expected = model.state_dict()
    weights = record["weights"]
    missing = set(expected) - set(weights)
    extra = set(weights) - set(expected)
    if missing or extra:
        raise ValueError(f"{path}: missing weights {sorted(missing)}, unexpected {sorted(extra)}")
    for name, tensor in weights.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise ValueError(
                f"{path}: weight {name} has shape {tuple(tensor.shape)}, config implies "
                f"{tuple(expected[name].shape)}"
            )
    model.load_state_dict(weights)
    return model, record

