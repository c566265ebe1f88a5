"""Training loop with cycle training.

During cycle training the model's own predicted means replace the newest real
input frames. Those fed-back frames are detached: each prediction step is an
ordinary single-step forward pass on an augmented input, and no gradient flows
back through earlier steps.
"""

from __future__ import annotations

import json
import math
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import SequenceDataset, sample_window
from .features import FeatureExtractor, TapSpec, get_extractor
from .losses import LossWeights, latent_kl, total_loss
from .predictor import Predictor, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_TERMS = ("total", "reconstruction", "perceptual", "latent_kl")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CycleSchedule:
    start_fraction: float = 0.5
    max_self_fed_steps: int = 7
    ramp: str = "stepwise-linear"

    def __post_init__(self):
        if not 0.0 <= self.start_fraction <= 1.0:
            raise ValueError(f"start_fraction must lie in [0, 1], got {self.start_fraction}")
        if self.max_self_fed_steps < 1:
            raise ValueError("max_self_fed_steps must be positive")
        if self.ramp != "stepwise-linear":
            raise ValueError(f"unsupported ramp {self.ramp!r}")


def cycle_steps_for_epoch(schedule: CycleSchedule, epoch: int, total_epochs: int) -> int:
    """Number of self-fed prediction steps used in ``epoch`` (0-based).

    Zero while ``epoch / total_epochs < start_fraction``; from the first epoch
    past that point the count ramps linearly from 1 up to
    ``max_self_fed_steps`` at the final epoch, rounding up. With
    ``start_fraction = 1`` no epoch is self-fed.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    # Smallest epoch with epoch / total >= start_fraction.
    start = math.ceil(Fraction(schedule.start_fraction) * total_epochs)
    if epoch < start:
        return 0
    last = total_epochs - 1
    if last == start:
        return schedule.max_self_fed_steps
    num = (schedule.max_self_fed_steps - 1) * (epoch - start)
    den = last - start
    return 1 + -(-num // den)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule: CycleSchedule = field(default_factory=CycleSchedule)
    seed: int = 0
    checkpoint_every: int = 1
    windows_per_sequence: int = 1
    stochastic_latent: bool = True
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.windows_per_sequence < 1:
            raise ValueError("batch_size, checkpoint_every and windows_per_sequence must be >= 1")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def max_self_fed_steps(self) -> int:
        return max(cycle_steps_for_epoch(self.schedule, e, self.epochs) for e in range(self.epochs))


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=config.learning_rate, betas=config.betas, weight_decay=config.weight_decay)


@dataclass
class StepRecord:
    """Per-prediction bookkeeping from one cycle-training window."""

    loss: Tensor
    breakdown: dict[str, Tensor]
    self_fed: list[bool]  # one flag per input slot, oldest first
    inputs: Tensor | None = None


def cycle_losses(model: Predictor, window: Tensor, s: int, weights: LossWeights,
                 extractor: FeatureExtractor | None = None,
                 generator: torch.Generator | None = None,
                 deterministic: bool | None = None,
                 keep_inputs: bool = False) -> list[StepRecord]:
    """Run the ``s + 1`` predictions of one window and return their losses.

    ``window`` is ``B x L x C x H x W`` (or unbatched) with ``L >= n + s + 1``.
    Step 0 sees real frames; at step ``j`` the ``min(j, n)`` newest input slots
    hold earlier predicted means, detached from the graph.
    """
    if window.dim() == 4:
        window = window[None]
    n = model.config.input_frames
    if s < 0:
        raise ValueError("self-fed steps must be >= 0")
    if window.shape[1] < n + s + 1:
        raise ValueError(f"window of {window.shape[1]} frames too short for n={n}, s={s} (need {n + s + 1})")
    inputs = window[:, :n]
    tags = [False] * n
    records = []
    for j in range(s + 1):
        pred, latent = model(inputs, generator, deterministic)
        target = window[:, n + j]
        if extractor is not None and weights.perceptual_weight > 0:
            pf, tf = extractor(pred.mean), extractor(target)
        else:
            pf = tf = None
        loss, breakdown = total_loss(pred, target, pf, tf,
                                     latent_kl(latent.mean, latent.log_variance), weights)
        records.append(StepRecord(loss, breakdown, list(tags), inputs if keep_inputs else None))
        inputs = torch.cat([inputs[:, 1:], pred.mean.detach()[:, None]], dim=1)
        tags = tags[1:] + [True]
    return records


def training_step(model: Predictor, window: Tensor, s: int, weights: LossWeights,
                  optimizer: torch.optim.Optimizer, extractor: FeatureExtractor | None = None,
                  generator: torch.Generator | None = None,
                  deterministic: bool | None = None) -> dict[str, float]:
    """One parameter update from the mean of the ``s + 1`` step losses."""
    records = cycle_losses(model, window, s, weights, extractor, generator, deterministic)
    loss = torch.stack([r.loss for r in records]).mean()
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    out = {"total": loss.item()}
    for term in LOSS_TERMS[1:]:
        out[term] = float(np.mean([r.breakdown[term].item() for r in records]))
    out["self_fed_inputs"] = [sum(r.self_fed) for r in records]
    return out


@dataclass
class FitResult:
    model: Predictor
    checkpoints: list[Path]
    log_path: Path | None
    log: list[dict]


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch + 1:04d}.pt"


def _epoch_batches(dataset: SequenceDataset, config: TrainConfig, epoch: int) -> list[list[tuple[int, int]]]:
    rng = np.random.default_rng([config.seed, epoch])
    picks = []
    for i, seq in enumerate(dataset.sequences):
        last = len(seq) - dataset.window_length
        picks.extend((i, int(t)) for t in rng.integers(0, last + 1, size=config.windows_per_sequence))
    order = rng.permutation(len(picks))
    picks = [picks[k] for k in order]
    return [picks[k:k + config.batch_size] for k in range(0, len(picks), config.batch_size)]


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def fit(model: Predictor, dataset: SequenceDataset, config: TrainConfig, out_dir=None,
        features: TapSpec | None = None, resume_from=None) -> FitResult:
    """Train ``model`` for ``config.epochs`` epochs.

    Writes one JSON line per epoch to ``out_dir/metrics.jsonl`` and a
    checkpoint every ``checkpoint_every`` epochs plus the final one. With
    ``config.deterministic`` the log is byte-reproducible; ``wall_time`` is
    then written as ``null`` and real timings go to ``timing.jsonl``.
    Resuming from a checkpoint continues the same epoch sequence.
    """
    n = model.config.input_frames
    needed = n + config.max_self_fed_steps() + 1
    shortest = min(len(s) for s in dataset.sequences)
    if shortest < needed:
        raise ConfigError(
            f"sequences must hold at least {needed} frames (n={n} + max self-fed steps "
            f"{config.max_self_fed_steps()} + 1); shortest has {shortest}"
        )
    dataset = dataset.with_window_length(needed)
    if config.deterministic:
        set_deterministic(config.seed)
    weights = config.loss_weights
    extractor = None
    if weights.perceptual_weight > 0:
        extractor = get_extractor(features or TapSpec(in_channels=model.config.channels))
    optimizer = make_optimizer(model, config)

    rows: list[dict] = []
    first_epoch = 0
    if resume_from is not None:
        restored, record = load_checkpoint(resume_from)
        model.load_state_dict(restored.state_dict())
        if record.get("optimizer") is not None:
            optimizer.load_state_dict(record["optimizer"])
        progress = record["progress"]
        rows = [dict(r) for r in progress.get("log", [])]
        first_epoch = progress["epoch"] + 1

    out = Path(out_dir) if out_dir is not None else None
    log_path = timing_path = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
        log_path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        if first_epoch == 0 and timing_path.exists():
            timing_path.unlink()

    checkpoints = []
    model.train()
    for epoch in range(first_epoch, config.epochs):
        t0 = time.perf_counter()
        s = cycle_steps_for_epoch(config.schedule, epoch, config.epochs)
        gen = torch.Generator().manual_seed(int(np.random.default_rng([config.seed, epoch, 1]).integers(2**62)))
        sums = {k: 0.0 for k in LOSS_TERMS}
        batches = _epoch_batches(dataset, config, epoch)
        for batch in batches:
            window = torch.stack([sample_window(dataset, i, t, epoch).frames for i, t in batch])
            window = window.to(dtype=next(model.parameters()).dtype)
            stats = training_step(model, window[:, :n + s + 1], s, weights, optimizer, extractor, gen,
                                  deterministic=not config.stochastic_latent)
            for k in LOSS_TERMS:
                sums[k] += stats[k]
        wall = time.perf_counter() - t0
        row = {"epoch": epoch, "self_fed_steps": s}
        row.update({k: sums[k] / len(batches) for k in LOSS_TERMS})
        row["wall_time"] = None if config.deterministic else wall
        rows.append(row)
        log.info("epoch %d/%d s=%d loss=%.5f", epoch + 1, config.epochs, s, row["total"])
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": wall}) + "\n")
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                path = out / "checkpoints" / checkpoint_name(epoch)
                save_checkpoint(path, model,
                                {"epoch": epoch, "total_epochs": config.epochs, "seed": config.seed,
                                 "log": rows},
                                optimizer.state_dict())
                checkpoints.append(path)
    model.eval()
    return FitResult(model, checkpoints, log_path, rows)
