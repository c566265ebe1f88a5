"""Evaluation metrics: MSE, PSNR, lpips-style distance and Frechet video distance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .features import TapSpec, VideoEmbedder, embed_video, extract_features

PSNR_CAP_DB = 100.0
PSD_TOL = 1e-8
SQRT_EIG_TOL = 1e-6


class NumericalError(ArithmeticError):
    pass


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def mse(pred, target) -> float:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return float(((pred.double() - target.double()) ** 2).mean())


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if max_value <= 0:
        raise ValueError("max_value must be > 0")
    if err <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value**2 / err))


def psnr(pred, target, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical images."""
    return psnr_from_mse(mse(pred, target), max_value)


def _unit_normalize(feats: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((feats**2).sum(dim=-3, keepdim=True))
    return feats / (norm + eps)


def perceptual_distance(a, b, spec: TapSpec) -> float:
    """lpips-style distance with unit weights.

    Features at each tap are normalised to unit length along channels at
    every spatial position; squared differences are averaged within each
    layer, then over layers. Not calibrated against official LPIPS.
    """
    a, b = _as_tensor(a).float(), _as_tensor(b).float()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa, fb = extract_features(a, spec), extract_features(b, spec)
    per_layer = [((_unit_normalize(x) - _unit_normalize(y)) ** 2).mean() for (_, x), (_, y) in zip(fa, fb)]
    return float(torch.stack(per_layer).mean())


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-10 * max(1.0, np.abs(self.covariance).max())):
            raise ValueError("covariance is not symmetric")


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased sample covariance of ``N x d`` embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 embeddings, got {x.shape[0]}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu, (cov + cov.T) / 2)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    tol = PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"covariance not positive semidefinite (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """``|mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p S_q)^{1/2})``.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix ``S_p^{1/2} S_q S_p^{1/2}``, which is similar to
    ``S_p S_q``.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {p.mean.shape[0]} vs {q.mean.shape[0]}")
    root_p = _psd_sqrt(p.covariance)
    _psd_sqrt(q.covariance)
    inner = root_p @ q.covariance @ root_p
    inner = (inner + inner.T) / 2
    vals = np.linalg.eigvalsh(inner)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -SQRT_EIG_TOL * scale:
        raise NumericalError(f"product of covariances has eigenvalue {vals.min():.3e}")
    trace_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = p.mean - q.mean
    value = float(diff @ diff + np.trace(p.covariance) + np.trace(q.covariance) - 2.0 * trace_sqrt)
    return max(value, 0.0)


@dataclass
class FVDEntry:
    horizon: int
    value: float
    embedder_id: str
    num_clips: int


@dataclass
class MetricReport:
    """Scalar metrics plus FVD entries, each tagged with horizon and embedder."""

    values: dict[str, float] = field(default_factory=dict)
    fvd: list[FVDEntry] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        unknown = set(d) - {"values", "fvd", "metadata"}
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        return cls(dict(d.get("values", {})), [FVDEntry(**e) for e in d.get("fvd", [])],
                   dict(d.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fvd(real_clips, pred_clips, embedder: VideoEmbedder,
        return_embeddings: bool = False):
    """Frechet distance between Gaussians fitted to real and predicted clip embeddings.

    Returns ``(value, FVDEntry)`` (plus the two embedding matrices when
    requested). All clips must share one length, the horizon.
    """
    real_clips, pred_clips = list(real_clips), list(pred_clips)
    if len(real_clips) < 2 or len(pred_clips) < 2:
        raise ValueError("fvd needs at least 2 real and 2 predicted clips")
    lengths = {len(getattr(c, "frames", c)) for c in real_clips + pred_clips}
    if len(lengths) != 1:
        raise ValueError(f"clips must share one length, got {sorted(lengths)}")
    real = np.stack([embed_video(c, embedder) for c in real_clips])
    pred = np.stack([embed_video(c, embedder) for c in pred_clips])
    value = frechet_distance(gaussian_stats(real), gaussian_stats(pred))
    entry = FVDEntry(lengths.pop(), value, embedder.embedder_id, len(pred_clips))
    if return_embeddings:
        return value, entry, real, pred
    return value, entry
