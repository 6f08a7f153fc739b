"""
Entropy, class ratios and the KL prior
======================================

Entropy minimisation alone is happy with any confident prediction, including
one that paints the whole image as background.  The KL term compares the
predicted class ratio with a prior and tells the two apart.
"""

import math

import matplotlib.pyplot as plt
import torch

from srda import losses

H = W = 32
gt = torch.zeros(H, W, dtype=torch.long)
gt[12:20, 8:24] = 1
prior = torch.tensor([1 - gt.float().mean(), gt.float().mean()])
print("prior class ratio", prior.tolist())


def soft(mask, confidence):
    """Probability map putting `confidence` on the labels of `mask`."""
    oh = losses.one_hot(mask, 2).float()
    return confidence * oh + (1 - confidence) * (1 - oh)


candidates = {
    "right, unsure": soft(gt, 0.7),
    "right, confident": soft(gt, 0.99),
    "all background, very confident": soft(torch.zeros_like(gt), 0.999),
}
for name, p in candidates.items():
    t = losses.adaptation_terms(p, prior, lam=1e-2)
    print(f"{name:32s} entropy {t.entropy.item():.4f}  KL {t.kl.item():.4f}  total {t.total.item():.4f}")

# the KL weight needed before the trivial answer stops winning
e_bg, k_bg = (v.item() for v in losses.adaptation_terms(candidates["all background, very confident"], prior, 0)[1:])
e_ok, k_ok = (v.item() for v in losses.adaptation_terms(candidates["right, confident"], prior, 0)[1:])
print(f"trivial solution loses once lambda > {(e_ok - e_bg) / (k_bg - k_ok):.2e}")

# KL(prior || predicted) as the predicted foreground ratio sweeps [0, 1]
ratios = torch.linspace(0.001, 0.999, 200)
kl = [losses.kl_ratio(prior, torch.stack([1 - r, r])).item() for r in ratios]
plt.plot(ratios, kl)
plt.axvline(prior[1].item(), ls="--", c="k", lw=0.8)
plt.yscale("log")
plt.xlabel("predicted foreground ratio")
plt.ylabel("KL(prior || predicted)")
plt.title(f"max entropy per pixel is ln 2 = {math.log(2):.3f}")
plt.savefig("kl_curve.png", dpi=100)
