"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Lines are echoed in the pytest terminal summary under "acceptance criteria".
Criterion 7 trains small models and takes a few minutes on one CPU core.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from vidpred import config as cfgmod
from vidpred.cli import main
from vidpred.data import SyntheticSpec, make_synthetic_dataset
from vidpred.features import TapSpec, get_extractor
from vidpred.losses import (FeatureStack, GaussianImage, LossWeights, deep_perceptual_loss, gaussian_nll,
                            kl_gaussians, kl_uncertainty_loss)
from vidpred.metrics import (GaussianStats, frechet_distance, mse, perceptual_distance, psnr,
                             psnr_from_mse)
from vidpred.predictor import AttentionSkip, Predictor, PredictorConfig, SkipConfig, attention_skip
from vidpred.training import CycleSchedule, TrainConfig, cycle_steps_for_epoch, fit

from conftest import ACCEPTANCE_LINES, central_difference, relative_error
from oracles import brute_force_attention, frechet_diagonal, random_psd, stop_gradient_gaps, tiny_predictor


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_loss_minimiser_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2001)
    e2 = rng.uniform(0.0, 1.0, size=50)
    alpha = rng.uniform(0.0, 1.0, size=50)
    alpha[:5] = 0.0  # the over-confident regime
    step = 1e-4
    grid = torch.arange(1, 25001, dtype=torch.float64) * step  # sigma^2 in (0, 2.5]

    def argmin(e2_i, alpha_i):
        pred = GaussianImage(torch.zeros_like(grid), torch.log(grid))
        target = torch.full_like(grid, math.sqrt(e2_i))
        per_pixel = kl_uncertainty_loss(pred, target, float(alpha_i), reduction="none")
        return grid[int(torch.argmin(per_pixel))].item()

    best = np.array([argmin(a, b) for a, b in zip(e2, alpha)])
    gap = np.abs(best - (e2 + alpha))
    floor_ok = bool(np.all(best[alpha > 0] >= alpha[alpha > 0] - step))
    zero_ok = bool(np.all(np.abs(best[alpha == 0] - e2[alpha == 0]) <= 1e-3))
    elapsed = time.perf_counter() - t0
    ok = gap.max() <= 1e-3 and floor_ok and zero_ok and elapsed < 10
    verdict(1, "loss minimiser at e^2 + alpha", ok,
            f"max |d sigma^2| = {gap.max():.1e}, alpha floor {floor_ok}, alpha=0 -> e^2 {zero_ok}, {elapsed:.1f}s")


def test_02_gradients_match_finite_differences():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(2002)
    target = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    mu = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    lv = torch.empty(3, 8, 8, dtype=torch.float64).uniform_(-2, 2, generator=g)
    extractor = get_extractor(TapSpec(tap_layers=("conv1", "conv2")), torch.float64)
    target_feats = extractor(target)
    cases = {
        "nll/mean": (lambda m: gaussian_nll(GaussianImage(m, lv), target), mu),
        "nll/logvar": (lambda v: gaussian_nll(GaussianImage(mu, v), target), lv),
        "kl-unc/mean": (lambda m: kl_uncertainty_loss(GaussianImage(m, lv), target, 1.0), mu),
        "kl-unc/logvar": (lambda v: kl_uncertainty_loss(GaussianImage(mu, v), target, 1.0), lv),
        "perceptual/features": (lambda x: deep_perceptual_loss(
            FeatureStack([("a", x), ("b", x[:, ::2, ::2] ** 2)]),
            FeatureStack([("a", target), ("b", target[:, ::2, ::2])])), mu),
        "perceptual/image": (lambda x: deep_perceptual_loss(extractor(x), target_feats), mu),
    }
    errors = {}
    for name, (fn, x) in cases.items():
        x = x.clone().requires_grad_(True)
        fn(x).backward()
        errors[name] = relative_error(x.grad, central_difference(fn, x.detach()))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 30
    verdict(2, "analytic vs finite-difference gradients", ok,
            f"worst {worst} rel err {errors[worst]:.1e}, {elapsed:.1f}s")


def test_03_kl_and_loss_algebra():
    rng = np.random.default_rng(2003)
    mu1, mu2 = rng.normal(size=1000), rng.normal(size=1000)
    var2 = rng.uniform(0.05, 5.0, size=1000)
    kl = kl_gaussians(torch.tensor(mu1), torch.ones(1000, dtype=torch.float64), torch.tensor(mu2),
                      torch.tensor(var2))
    pred = GaussianImage(torch.tensor(mu2), torch.log(torch.tensor(var2)))
    per_pixel = kl_uncertainty_loss(pred, torch.tensor(mu1), 1.0, reduction="none")
    gap = (2 * kl + 1 - per_pixel).abs().max().item()

    g = torch.Generator().manual_seed(3)
    img = GaussianImage(torch.rand(2, 3, 16, 16, generator=g), torch.randn(2, 3, 16, 16, generator=g))
    tgt = torch.rand(2, 3, 16, 16, generator=g)
    bitwise = (torch.equal(kl_uncertainty_loss(img, tgt, 0.0), gaussian_nll(img, tgt))
               and torch.equal(kl_uncertainty_loss(img, tgt, 0.0, reduction="none"),
                               gaussian_nll(img, tgt, reduction="none")))
    verdict(3, "2 KL + 1 equals the alpha=1 loss; alpha=0 is the NLL", gap <= 1e-10 and bitwise,
            f"max gap {gap:.1e}, bitwise alpha=0 {bitwise}")


def test_04_attention_skip_laws():
    torch.manual_seed(2004)
    block = AttentionSkip(6, 5, qk_dim=4).double()
    dec, enc = torch.randn(2, 6, 4, 4, dtype=torch.float64), torch.randn(2, 5, 4, 4, dtype=torch.float64)
    row_err = (block.attention_weights(dec, enc).sum(-1) - 1).abs().max().item()

    uniform = AttentionSkip(6, 5, qk_dim=4).double()
    with torch.no_grad():
        uniform.query.weight.zero_()
        uniform.query.bias.zero_()
    v = uniform.value(enc)
    spatial_mean = uniform.out(v.mean(dim=(2, 3), keepdim=True).expand_as(v))
    uniform_err = (attention_skip(dec, enc, uniform) - (dec + spatial_mean)).abs().max().item()

    identity = True
    for proj in ("value", "out"):
        zeroed = AttentionSkip(6, 5, qk_dim=4).double()
        with torch.no_grad():
            getattr(zeroed, proj).weight.zero_()
        identity &= torch.equal(attention_skip(dec, enc, zeroed), dec)

    brute_err = 0.0
    for seed in range(10):
        torch.manual_seed(seed)
        small = AttentionSkip(3, 3, qk_dim=2)
        d, e = torch.randn(3, 2, 2), torch.randn(3, 2, 2)
        with torch.no_grad():
            out = attention_skip(d, e, small)
            weights = small.attention_weights(d[None], e[None])[0, 0]
        ref_out, ref_w = brute_force_attention(d, e, small)
        brute_err = max(brute_err, np.abs(out.numpy() - ref_out).max(), np.abs(weights.numpy() - ref_w).max())
    ok = row_err <= 1e-6 and uniform_err <= 1e-6 and identity and brute_err <= 1e-3
    verdict(4, "attention skip laws", ok,
            f"row sum err {row_err:.1e}, uniform err {uniform_err:.1e}, exact identity {identity}, "
            f"2x2 brute-force err {brute_err:.1e}")


def test_05_stop_gradient():
    worst, live_min = 0.0, math.inf
    for s in (1, 2, 3):
        model = tiny_predictor(n=2, seed=10 + s)
        g = torch.Generator().manual_seed(s)
        window = torch.rand(2, 2 + s + 1, 3, 16, 16, generator=g, dtype=torch.float64)
        frozen, live = stop_gradient_gaps(model, window, s)
        worst = max(worst, max(frozen))
        live_min = min(live_min, max(live[1:]))
    verdict(5, "fed-back frames carry no gradient", worst <= 1e-10,
            f"max live-vs-frozen gap {worst:.1e} for s in 1..3; unsevered graph would differ by {live_min:.1e}")


def test_06_schedule_endpoints():
    failures = []
    for n, total in itertools.product((2, 6), (2, 10, 37, 200)):
        sched = CycleSchedule(0.5, n + 1)
        steps = [cycle_steps_for_epoch(sched, e, total) for e in range(total)]
        if any(v != 0 for e, v in enumerate(steps) if e / total < 0.5) or steps[-1] != n + 1:
            failures.append((n, total))
    verdict(6, "schedule is 0 before halfway and n+1 at the end", not failures,
            f"n in (2, 6) x epochs in (2, 10, 37, 200), failures {failures}")


# -- criterion 7 --------------------------------------------------------------

CYCLE_N = 4
CYCLE_HORIZON = 20


def _train_arm(seed: int, start_fraction: float, train_set):
    torch.manual_seed(seed)
    model = Predictor(PredictorConfig(input_frames=CYCLE_N, image_size=32, widths=[16, 32, 64], latent_dim=32,
                                      skip=SkipConfig("attention", [16], 1, 16)))
    config = TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=seed,
                         schedule=CycleSchedule(start_fraction, CYCLE_N + 1), loss_weights=LossWeights())
    t0 = time.perf_counter()
    fit(model, train_set, config)
    return model, time.perf_counter() - t0


def _rollout_errors(model, test_set):
    seqs = torch.stack([torch.as_tensor(np.asarray(s[:])) for s in test_set.sequences])
    with torch.no_grad():
        pred = model.rollout(seqs[:, :CYCLE_N], CYCLE_HORIZON, deterministic=True)
    per_step = ((pred - seqs[:, CYCLE_N:]) ** 2).mean(dim=(0, 2, 3, 4))
    return per_step[0].item(), per_step.mean().item()


@pytest.mark.slow
def test_07_cycle_training_benefit():
    wins, details, slowest = 0, [], 0.0
    for seed in range(3):
        train_set = make_synthetic_dataset(SyntheticSpec(num_sequences=128, length=CYCLE_N + CYCLE_N + 2,
                                                         size=32, seed=100 + seed))
        test_set = make_synthetic_dataset(SyntheticSpec(num_sequences=32, length=CYCLE_N + CYCLE_HORIZON,
                                                        size=32, seed=900 + seed))
        results = {}
        for arm, start in (("cycle", 0.5), ("plain", 1.0)):
            model, seconds = _train_arm(seed, start, train_set)
            slowest = max(slowest, seconds)
            results[arm] = _rollout_errors(model, test_set)
        (c1, c20), (p1, p20) = results["cycle"], results["plain"]
        wins += c20 < p20
        details.append(f"seed {seed}: 20-step {c20:.4f} vs {p20:.4f}, 1-step {c1:.4f} vs {p1:.4f}")
    ok = wins >= 2 and slowest <= 30 * 60
    verdict(7, "cycle training lowers 20-step rollout MSE", ok,
            f"{wins}/3 seeds; cycle vs plain; " + "; ".join(details) + f"; slowest arm {slowest:.0f}s")


# -- criteria 8-10 ------------------------------------------------------------------


def _stats(mu, cov):
    return GaussianStats(np.asarray(mu, float), np.asarray(cov, float))


def test_08_frechet_exactness():
    rng = np.random.default_rng(2008)
    p = _stats(rng.normal(size=5), random_psd(rng, 5))
    same = frechet_distance(p, p)
    shift = abs(frechet_distance(_stats([0], [[1]]), _stats([3], [[1]])) - 9.0)
    scale = abs(frechet_distance(_stats([0], [[1]]), _stats([0], [[4]])) - 1.0)
    diag_err = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 10))
        m1, m2, v1, v2 = rng.normal(size=d), rng.normal(size=d), rng.uniform(0, 3, d), rng.uniform(0, 3, d)
        diag_err = max(diag_err, abs(frechet_distance(_stats(m1, np.diag(v1)), _stats(m2, np.diag(v2)))
                                     - frechet_diagonal(m1, v1, m2, v2)))
    sym_err, min_value = 0.0, math.inf
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        a = _stats(rng.normal(size=d), random_psd(rng, d))
        b = _stats(rng.normal(size=d) * 0.1, random_psd(rng, d))
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        sym_err, min_value = max(sym_err, abs(ab - ba)), min(min_value, ab, ba)
    ok = abs(same) <= 1e-6 and shift <= 1e-8 and scale <= 1e-8 and diag_err <= 1e-8 and sym_err < 1e-8 \
        and min_value >= 0
    verdict(8, "Frechet distance exactness", ok,
            f"self {same:.1e}, 1-D errs {shift:.1e}/{scale:.1e}, diagonal {diag_err:.1e}, "
            f"asymmetry {sym_err:.1e}, min {min_value:.2e} over 1000 instances")


def test_09_metric_closed_forms():
    img = torch.rand(2, 3, 32, 32)
    p20 = psnr_from_mse(0.01, 1.0)
    cap = psnr(img, img)
    lp = perceptual_distance(img, img, TapSpec())
    ok = p20 == 20.0 and cap == 100.0 and lp == 0.0 and mse(img, img) == 0.0
    verdict(9, "metric closed forms", ok, f"psnr(0.01) = {p20!r}, identical = {cap!r} dB, lpips-style self = {lp!r}")


def test_10_cli_reproducible_and_resumable(tmp_path):
    rc = cfgmod.RunConfig(
        predictor=PredictorConfig(input_frames=2, image_size=16, widths=[8, 16], latent_dim=4,
                                  skip=SkipConfig("attention", [8], 1, 8)),
        train=TrainConfig(epochs=4, batch_size=4, learning_rate=1e-3, seed=21, schedule=CycleSchedule(0.5, 3)),
        features=TapSpec(tap_layers=("conv1", "conv2")),
        dataset=cfgmod.DatasetConfig(synthetic=SyntheticSpec(num_sequences=8, length=8, size=16, seed=4)),
    )
    cfg = tmp_path / "run.toml"
    cfgmod.save(rc, cfg)
    codes = [main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / name)])
             for name in ("a", "b")]
    log_a, log_b = (tmp_path / "a" / "metrics.jsonl").read_bytes(), (tmp_path / "b" / "metrics.jsonl").read_bytes()
    codes.append(main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / "r"),
                       "--checkpoint", str(tmp_path / "a" / "checkpoints" / "epoch_0002.pt")]))
    log_r = (tmp_path / "r" / "metrics.jsonl").read_bytes()
    final_a = torch.load(tmp_path / "a" / "checkpoints" / "epoch_0004.pt", weights_only=False)["weights"]
    final_r = torch.load(tmp_path / "r" / "checkpoints" / "epoch_0004.pt", weights_only=False)["weights"]
    same_weights = all(torch.equal(final_a[k], final_r[k]) for k in final_a)
    ok = codes == [0, 0, 0] and log_a == log_b and log_r == log_a and same_weights
    verdict(10, "deterministic training and resume", ok,
            f"exit codes {codes}, logs identical {log_a == log_b}, resumed log identical {log_r == log_a}, "
            f"resumed weights identical {same_weights}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
