"""Cycle training on moving sprites: feed the model its own predictions late in training.

Takes a couple of minutes on one CPU core.
Run: python3 demos/cycle_training.py
"""

import numpy as np
import torch

from vidpred.data import SyntheticSpec, make_synthetic_dataset
from vidpred.predictor import Predictor, PredictorConfig, SkipConfig
from vidpred.training import CycleSchedule, TrainConfig, cycle_steps_for_epoch, fit

n, horizon, epochs = 4, 20, 30
sched = CycleSchedule(start_fraction=0.5, max_self_fed_steps=n + 1)
print("self-fed steps per epoch:", [cycle_steps_for_epoch(sched, e, epochs) for e in range(epochs)])

train = make_synthetic_dataset(SyntheticSpec(num_sequences=128, length=2 * n + 2, size=32, seed=100))
test = make_synthetic_dataset(SyntheticSpec(num_sequences=32, length=n + horizon, size=32, seed=900))
seqs = torch.stack([torch.as_tensor(np.asarray(s[:])) for s in test.sequences])


def train_and_score(start_fraction):
    torch.manual_seed(0)
    model = Predictor(PredictorConfig(input_frames=n, image_size=32, widths=[16, 32, 64], latent_dim=32,
                                      skip=SkipConfig("attention", [16], 1, 16)))
    fit(model, train, TrainConfig(epochs=epochs, batch_size=16, learning_rate=1e-3, seed=0,
                                  schedule=CycleSchedule(start_fraction, n + 1)))
    with torch.no_grad():
        pred = model.rollout(seqs[:, :n], horizon, deterministic=True)
    return ((pred - seqs[:, n:]) ** 2).mean(dim=(0, 2, 3, 4)).numpy()


plain = train_and_score(1.0)  # start_fraction 1 never self-feeds
cycle = train_and_score(0.5)
print("step   plain    cycle")
for t in (0, 4, 9, 14, 19):
    print(f"{t + 1:4d}  {plain[t]:.4f}  {cycle[t]:.4f}")
print(f"mean over {horizon} steps: plain {plain.mean():.4f}, cycle {cycle.mean():.4f}")
