"""Why the alpha term keeps the predicted variance honest.

Run: python3 demos/uncertainty_losses.py
"""

import numpy as np
import torch

from vidpred.losses import GaussianImage, gaussian_nll, kl_uncertainty_loss

# one pixel, squared error 0.04, a grid of candidate variances
e2 = 0.04
var = torch.linspace(1e-3, 1.5, 15000, dtype=torch.float64)
pred = GaussianImage(torch.zeros_like(var), torch.log(var))
target = torch.full_like(var, np.sqrt(e2))

for alpha in (0.0, 0.1, 0.5, 1.0):
    per_pixel = kl_uncertainty_loss(pred, target, alpha, reduction="none")
    best = var[per_pixel.argmin()].item()
    print(f"alpha={alpha:.1f}  best variance {best:.4f}  (e^2 + alpha = {e2 + alpha:.4f})")

# with alpha = 0 the loss is the plain Gaussian NLL, and the variance chases the error to zero
g = torch.Generator().manual_seed(0)
img = GaussianImage(torch.rand(3, 8, 8, generator=g), torch.randn(3, 8, 8, generator=g))
tgt = torch.rand(3, 8, 8, generator=g)
print("alpha=0 equals the NLL bit for bit:", torch.equal(kl_uncertainty_loss(img, tgt, 0.0), gaussian_nll(img, tgt)))

# a perfectly predicted pixel: NLL keeps rewarding smaller variance, alpha stops it
perfect = torch.zeros(1, dtype=torch.float64)
for lv in (-1.0, -3.0, -6.0):
    p = GaussianImage(perfect, torch.full_like(perfect, lv))
    print(f"log var {lv:+.0f}: nll {gaussian_nll(p, perfect).item():+.3f}"
          f"  with alpha=1 {kl_uncertainty_loss(p, perfect, 1.0).item():+.3f}")
