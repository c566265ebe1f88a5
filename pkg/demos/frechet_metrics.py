"""Pixel metrics and the Frechet distance between clip sets.

Run: python3 demos/frechet_metrics.py
"""

import numpy as np
import torch

from vidpred.features import TapSpec, VideoEmbedder
from vidpred.metrics import GaussianStats, frechet_distance, fvd, perceptual_distance, psnr, psnr_from_mse

print("psnr at mse 0.01:", psnr_from_mse(0.01), "dB")
x = torch.rand(3, 32, 32)
print("psnr of an image with itself:", psnr(x, x), "dB (capped)")
print("lpips-style distance, self vs noisy:", perceptual_distance(x, x, TapSpec()),
      perceptual_distance(x, (x + 0.1 * torch.randn_like(x)).clamp(0, 1), TapSpec()))

# 1-D sanity: shifting a unit Gaussian by 3 costs 9, doubling its std costs 1
one = GaussianStats(np.zeros(1), np.eye(1))
print("N(0,1) vs N(3,1):", frechet_distance(one, GaussianStats(np.full(1, 3.0), np.eye(1))))
print("N(0,1) vs N(0,4):", frechet_distance(one, GaussianStats(np.zeros(1), 4 * np.eye(1))))

# clip sets: the same clips score ~0, a brighter set scores higher
g = torch.Generator().manual_seed(0)
real = [torch.rand(8, 3, 32, 32, generator=g) * 0.5 for _ in range(8)]
bright = [c + 0.4 for c in real]
embedder = VideoEmbedder(TapSpec())
print("fvd(real, real):", fvd(real, real, embedder)[0])
print("fvd(real, bright):", fvd(real, bright, embedder)[0], "with", embedder.embedder_id)
