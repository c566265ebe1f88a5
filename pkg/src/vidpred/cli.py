"""Command line entry point: ``vidpred {train,rollout,evaluate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .data import (SequenceDataset, TransformSpec, load_directory_dataset, make_synthetic_dataset,
                   read_image, sample_window, write_image, IMAGE_SUFFIXES)
from .features import TapSpec, VideoEmbedder
from .metrics import MetricReport, fvd, mse, perceptual_distance, psnr, PSNR_CAP_DB
from .predictor import Predictor, load_checkpoint
from .training import cycle_steps_for_epoch, fit, set_deterministic

log = logging.getLogger("vidpred")

RESOLVED_CONFIG = "config.resolved.toml"


class CommandError(RuntimeError):
    pass


@contextmanager
def output_lock(out: Path):
    """Exclusive lock file so two invocations never share an output directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _versions() -> dict:
    return {"vidpred": __version__, "python": platform.python_version(),
            "torch": torch.__version__, "numpy": np.__version__}


def build_dataset(rc: cfgmod.RunConfig, window_length: int) -> SequenceDataset:
    ds = rc.dataset
    transform = TransformSpec(ds.target_size or rc.predictor.image_size, ds.random_crop, rc.seed)
    if ds.kind == "synthetic":
        return make_synthetic_dataset(ds.synthetic, window_length, transform)
    return load_directory_dataset(ds.path, window_length, transform, rc.predictor.channels)


# -- train ---------------------------------------------------------------

def cmd_train(args) -> int:
    rc = cfgmod.load(args.config).with_overrides(args.seed, args.deterministic, args.out)
    out = Path(rc.output_dir)
    with output_lock(out):
        cfgmod.save(rc.replace(output_dir=str(out)), out / RESOLVED_CONFIG)
        (out / "versions.json").write_text(json.dumps(_versions(), indent=2) + "\n")
        train_cfg = rc.train
        if train_cfg.deterministic:
            set_deterministic(train_cfg.seed)
        torch.manual_seed(train_cfg.seed)
        model = Predictor(rc.predictor)
        needed = rc.predictor.input_frames + train_cfg.max_self_fed_steps() + 1
        dataset = build_dataset(rc, needed)
        result = fit(model, dataset, train_cfg, out, rc.features, resume_from=args.checkpoint)
    print(f"trained {len(result.log)} epochs; log {result.log_path}; "
          f"final checkpoint {result.checkpoints[-1] if result.checkpoints else 'none'}")
    return 0


# -- rollout ---------------------------------------------------------------

def _read_sequence_dir(path: Path, channels: int) -> np.ndarray:
    if not path.is_dir():
        raise CommandError(f"input directory not found: {path}")
    files = sorted((p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
                   key=lambda p: int("".join(ch for ch in p.stem if ch.isdigit()) or 0))
    if not files:
        raise CommandError(f"no image frames in {path}")
    return np.stack([read_image(p, channels) for p in files])


def _save_gif(frames: np.ndarray, path: Path) -> None:
    from PIL import Image

    imgs = []
    for f in frames:
        arr = np.clip(np.rint(f * 255), 0, 255).astype(np.uint8)
        imgs.append(Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)))
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=100, loop=0)


def cmd_rollout(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    c = model.config
    frames = _read_sequence_dir(Path(args.input), c.channels)
    if len(frames) < c.input_frames:
        raise CommandError(f"input has {len(frames)} frames; the model needs n={c.input_frames}")
    if args.steps < 1:
        raise CommandError("--steps must be >= 1")
    seq = SequenceDataset([frames[-c.input_frames:]], c.input_frames, TransformSpec(c.image_size))
    seed_frames = sample_window(seq, 0, 0).frames.to(next(model.parameters()).dtype)
    if args.deterministic:
        set_deterministic(args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    pred, var = model.rollout(seed_frames, args.steps, generator=gen,
                              deterministic=True if args.deterministic else None,
                              return_variance=True)
    out = Path(args.out)
    with output_lock(out):
        pred_np = pred.frames.numpy()
        for t, frame in enumerate(pred_np, 1):
            write_image(out / f"frame_{t:04d}.png", frame)
        _save_gif(pred_np, out / "preview.gif")
        if args.heatmaps:
            import matplotlib

            var_np = var.numpy()
            np.save(out / "variance.npy", var_np)
            per_pixel = var_np.mean(axis=1)
            vmax = float(per_pixel.max()) or 1.0
            for t, v in enumerate(per_pixel, 1):
                rgb = matplotlib.colormaps["magma"](v / vmax)[..., :3].transpose(2, 0, 1)
                write_image(out / f"variance_{t:04d}.png", rgb)
    print(f"wrote {args.steps} frames to {out}")
    return 0


# -- evaluate ----------------------------------------------------------------

def evaluate(model: Predictor, dataset: SequenceDataset, horizons, features: TapSpec,
             max_clips: int = 32, temporal_pooling: str = "mean") -> MetricReport:
    """Single-step MSE/PSNR/lpips-style plus FVD at each horizon.

    For horizon ``h`` each clip pairs the ground truth frames ``n..n+h-1`` of a
    window with the rollout from its first ``n`` frames; windows start every
    ``h`` frames.
    """
    n = model.config.input_frames
    dtype = next(model.parameters()).dtype
    model.eval()
    one = dataset.with_window_length(n + 1)
    starts = one.window_starts()[:max_clips]
    if not starts:
        raise CommandError("dataset has no window of n + 1 frames")
    errs, psnrs, lp = [], [], []
    with torch.no_grad():
        for i, t in starts:
            w = sample_window(one, i, t).frames.to(dtype)
            pred, _ = model.predict_next(w[:n], deterministic=True)
            errs.append(mse(pred.mean, w[n]))
            psnrs.append(psnr(pred.mean, w[n]))
            lp.append(perceptual_distance(pred.mean, w[n], features))
    report = MetricReport(
        values={"mse": float(np.mean(errs)), "psnr": float(np.mean(psnrs)),
                "lpips_style": float(np.mean(lp))},
        metadata={"sample_count": len(starts), "psnr_cap_db": PSNR_CAP_DB,
                  "lpips_label": "lpips-style (unit weights, uncalibrated)"},
    )
    embedder = VideoEmbedder(features, temporal_pooling)
    for h in horizons:
        long_ds = dataset.with_window_length(n + h) if min(len(s) for s in dataset.sequences) >= n + h else None
        if long_ds is None:
            raise CommandError(f"sequences too short for horizon {h} (need {n + h} frames)")
        clips = [(i, t) for i, t in long_ds.window_starts() if t % h == 0][:max_clips]
        if len(clips) < 2:
            raise CommandError(f"horizon {h}: need at least 2 clips, found {len(clips)}")
        real, fake = [], []
        for i, t in clips:
            w = sample_window(long_ds, i, t).frames.to(dtype)
            real.append(w[n:])
            fake.append(model.rollout(w[:n], h, deterministic=True).frames)
        _, entry = fvd(real, fake, embedder)
        report.fvd.append(entry)
    report.metadata["embedder_id"] = embedder.embedder_id
    return report


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    c = model.config
    features = TapSpec(in_channels=c.channels)
    max_clips, pooling = 32, "mean"
    if args.config:
        rc = cfgmod.load(args.config, check_paths=False)
        features, max_clips, pooling = rc.features, rc.metrics.max_clips, rc.metrics.temporal_pooling
    horizons = [int(h) for h in args.horizons.split(",") if h.strip()]
    if args.deterministic:
        set_deterministic(args.seed)
    dataset = load_directory_dataset(args.dataset, c.input_frames + 1, TransformSpec(c.image_size),
                                     c.channels)
    report = evaluate(model, dataset, horizons, features, max_clips, pooling)
    report.metadata.update({"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)})
    out = Path(args.out)
    with output_lock(out):
        report.save(out / "report.json")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


# -- plot --------------------------------------------------------------------

def read_metric_log(path: Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CommandError(f"{path}:{lineno}: malformed log line: {exc}") from None
        if not isinstance(row, dict) or "epoch" not in row or "self_fed_steps" not in row:
            raise CommandError(f"{path}:{lineno}: log row lacks epoch/self_fed_steps")
        rows.append(row)
    if not rows:
        raise CommandError(f"{path}: empty metric log")
    return rows


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src, out = Path(args.path), Path(args.out)
    if not src.is_file():
        raise CommandError(f"no such file: {src}")
    curves = {}
    with output_lock(out):
        if src.suffix == ".jsonl":
            rows = read_metric_log(src)
            epochs = [r["epoch"] for r in rows]
            terms = [k for k in rows[0] if k not in ("epoch", "self_fed_steps", "wall_time")]
            for term in terms + ["self_fed_steps"]:
                ys = [r[term] for r in rows]
                curves[term] = {"epoch": epochs, "value": ys}
                fig, ax = plt.subplots(figsize=(5, 3.5))
                if term == "self_fed_steps":
                    ax.step(epochs, ys, where="post", marker="o")
                    ax.set_ylabel("self-fed steps")
                    name = "schedule.png"
                else:
                    ax.plot(epochs, ys, marker="o")
                    ax.set_ylabel(term)
                    name = f"loss_{term}.png"
                ax.set_xlabel("epoch")
                fig.tight_layout()
                fig.savefig(out / name, dpi=100)
                plt.close(fig)
        else:
            try:
                report = MetricReport.load(src)
            except (ValueError, TypeError, KeyError) as exc:
                raise CommandError(f"{src}: malformed report: {exc}") from None
            if not report.fvd:
                raise CommandError(f"{src}: report has no FVD entries")
            hs = [e.horizon for e in report.fvd]
            vals = [e.value for e in report.fvd]
            curves["fvd"] = {"horizon": hs, "value": vals, "embedder_id": report.fvd[0].embedder_id}
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.bar([str(h) for h in hs], vals)
            ax.set_xlabel("horizon (frames)")
            ax.set_ylabel(f"FVD [{report.fvd[0].embedder_id}]")
            fig.tight_layout()
            fig.savefig(out / "fvd.png", dpi=100)
            plt.close(fig)
        (out / "curves.json").write_text(json.dumps(curves, indent=2) + "\n")
    print(f"wrote plots to {out}")
    return 0


def schedule_curve(rc: cfgmod.RunConfig) -> list[int]:
    t = rc.train
    return [cycle_steps_for_epoch(t.schedule, e, t.epochs) for e in range(t.epochs)]


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidpred", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None, det_default=None):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=det_default)

    t = sub.add_parser("train", help="train a predictor from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="iterate predictions from a directory of frames")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="directory of numbered frames; the last n seed the rollout")
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--heatmaps", action="store_true", help="also write per-pixel variance images")
    common(r, 0, True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("evaluate", help="single-step metrics and FVD at several horizons")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="directory dataset root")
    e.add_argument("--horizons", default="10,50")
    e.add_argument("--config", help="run config supplying the feature extractor and metric settings")
    e.add_argument("--out", required=True)
    common(e, 0, True)
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="plot a metric log (.jsonl) or metric report (.json)")
    pl.add_argument("path")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
