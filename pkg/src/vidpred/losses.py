"""Training objectives for the next-frame predictor.

All functions are pure and operate on torch tensors, either a single image
``C x H x W`` or a batch ``B x C x H x W``. Reductions are a plain mean over
every element, which for equally-shaped samples is the mean over the batch of
the per-image ``1/CHW`` average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import torch
from torch import Tensor

LOG_VAR_MIN = -7.0
LOG_VAR_MAX = 7.0


@dataclass
class GaussianImage:
    """Per-pixel Gaussian prediction: mean in [0, 1] and log-variance."""

    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_variance shape "
                f"{tuple(self.log_variance.shape)}"
            )

    @property
    def variance(self) -> Tensor:
        return torch.exp(self.log_variance)

    def check(self) -> None:
        """Raise ``ValueError`` if any invariant is violated."""
        if not torch.isfinite(self.mean).all() or not torch.isfinite(self.log_variance).all():
            raise ValueError("non-finite values in GaussianImage")
        if self.mean.min() < 0 or self.mean.max() > 1:
            raise ValueError("mean outside [0, 1]")
        if self.log_variance.min() < LOG_VAR_MIN or self.log_variance.max() > LOG_VAR_MAX:
            raise ValueError("log_variance outside [-7, 7]")

    def detach(self) -> "GaussianImage":
        return GaussianImage(self.mean.detach(), self.log_variance.detach())


@dataclass(frozen=True)
class LossWeights:
    reconstruction_weight: float = 1.0
    perceptual_weight: float = 1.0
    latent_kl_weight: float = 1e-4
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("reconstruction_weight", "perceptual_weight", "latent_kl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        _check_alpha(self.alpha)


class FeatureStack:
    """Ordered (layer_id, feature map) pairs, shallow to deep."""

    def __init__(self, layers: Sequence[tuple[str, Tensor]]):
        layers = list(layers)
        if not layers:
            raise ValueError("FeatureStack must contain at least one layer")
        ids = [name for name, _ in layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids in FeatureStack: {ids}")
        self.layers = layers

    @property
    def layer_ids(self) -> list[str]:
        return [name for name, _ in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.layers)

    def __getitem__(self, layer_id: str) -> Tensor:
        for name, feats in self.layers:
            if name == layer_id:
                return feats
        raise KeyError(layer_id)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _check_pair(pred: GaussianImage, target: Tensor) -> None:
    if pred.mean.shape != target.shape:
        raise ValueError(
            f"prediction shape {tuple(pred.mean.shape)} does not match target "
            f"shape {tuple(target.shape)}"
        )


def _reduce(terms: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return terms.mean()
    if reduction == "none":
        return terms
    raise ValueError(f"reduction must be 'mean' or 'none', got {reduction!r}")


def _nll_terms(pred: GaussianImage, target: Tensor) -> tuple[Tensor, Tensor]:
    inv_var = torch.exp(-pred.log_variance)
    return (target - pred.mean) ** 2 * inv_var + pred.log_variance, inv_var


def gaussian_nll(pred: GaussianImage, target: Tensor, reduction: str = "mean") -> Tensor:
    """Mean of ``(x - mu)^2 / sigma^2 + log sigma^2`` over all elements.

    The constant ``log 2 pi`` and the factor 1/2 are dropped, so the value can
    be negative. ``reduction="none"`` returns the per-element terms.
    """
    _check_pair(pred, target)
    terms, _ = _nll_terms(pred, target)
    return _reduce(terms, reduction)


def kl_gaussians(mu1: Tensor, var1: Tensor, mu2: Tensor, var2: Tensor) -> Tensor:
    """Elementwise KL(N(mu1, var1) || N(mu2, var2))."""
    mu1, var1, mu2, var2 = (
        t if torch.is_tensor(t) else torch.as_tensor(t, dtype=torch.float64)
        for t in (mu1, var1, mu2, var2)
    )
    shapes = {tuple(t.shape) for t in (mu1, var1, mu2, var2)}
    if len(shapes) != 1:
        raise ValueError(f"kl_gaussians inputs must share a shape, got {sorted(shapes)}")
    if (var1 <= 0).any() or (var2 <= 0).any():
        raise ValueError("variances must be strictly positive")
    return (
        0.5 * (torch.log(var2) - torch.log(var1))
        + (var1 + (mu1 - mu2) ** 2) / (2 * var2)
        - 0.5
    )


def kl_uncertainty_loss(pred: GaussianImage, target: Tensor, alpha: float = 1.0,
                        reduction: str = "mean") -> Tensor:
    """Gaussian NLL plus ``alpha / sigma^2``, averaged over all elements.

    ``alpha = 1`` is twice the KL from a unit-variance Gaussian centred on the
    target (up to the constant -1); ``alpha = 0`` is exactly :func:`gaussian_nll`.
    For a fixed squared error ``e2`` the per-pixel term is minimised at
    ``sigma^2 = e2 + alpha``, so the variance cannot collapse below ``alpha``.
    """
    _check_pair(pred, target)
    _check_alpha(alpha)
    terms, inv_var = _nll_terms(pred, target)
    if alpha != 0:
        terms = terms + alpha * inv_var
    return _reduce(terms, reduction)


def deep_perceptual_loss(pred_features: FeatureStack, target_features: FeatureStack) -> Tensor:
    """Mean over layers of the per-layer feature MSE."""
    if pred_features.layer_ids != target_features.layer_ids:
        raise ValueError(
            f"layer ids differ: {pred_features.layer_ids} vs {target_features.layer_ids}"
        )
    per_layer = []
    for (name, p), (_, t) in zip(pred_features, target_features):
        if p.shape != t.shape:
            raise ValueError(
                f"layer {name!r}: shape {tuple(p.shape)} vs {tuple(t.shape)}"
            )
        per_layer.append(((p - t) ** 2).mean())
    return torch.stack(per_layer).mean()


def latent_kl(mean: Tensor, log_variance: Tensor) -> Tensor:
    """KL of the posterior N(mean, exp(log_variance)) from N(0, I).

    Summed over latent dimensions, averaged over any leading batch dimension.
    """
    kl = 0.5 * (mean**2 + torch.exp(log_variance) - 1.0 - log_variance)
    return kl.sum(dim=-1).mean()


def total_loss(
    pred: GaussianImage,
    target: Tensor,
    pred_feat: FeatureStack | None,
    target_feat: FeatureStack | None,
    latent_kl_value: Tensor | float,
    w: LossWeights,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of the three training terms.

    Returns ``(total, breakdown)`` where ``breakdown`` holds the unweighted
    ``reconstruction``, ``perceptual`` and ``latent_kl`` terms. Feature stacks
    may be ``None`` when ``w.perceptual_weight`` is zero.
    """
    recon = kl_uncertainty_loss(pred, target, w.alpha)
    if pred_feat is None or target_feat is None:
        if w.perceptual_weight != 0:
            raise ValueError("feature stacks are required when perceptual_weight > 0")
        perc = torch.zeros((), dtype=recon.dtype, device=recon.device)
    else:
        perc = deep_perceptual_loss(pred_feat, target_feat)
    lkl = torch.as_tensor(latent_kl_value, dtype=recon.dtype, device=recon.device)
    total = (
        w.reconstruction_weight * recon
        + w.perceptual_weight * perc
        + w.latent_kl_weight * lkl
    )
    return total, {"reconstruction": recon, "perceptual": perc, "latent_kl": lkl}
