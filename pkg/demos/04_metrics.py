#!/usr/bin/env python3
"""Evaluation measures on a synthetic prediction.

Run from the repository root:  python3 demos/04_metrics.py
"""
import numpy as np

from mrsynth import metrics
from mrsynth.corpus import build_corpus
from mrsynth.phantom import SequenceParams

item = build_corpus(1, [SequenceParams("T2w", 4000.0, 80.0)], noise_sigma=0.0, seed=0)[0]
gt = item.volume.data
rng = np.random.default_rng(0)

# Intensity metrics compare a prediction with the reference after both are
# clipped and scaled by the reference's 0.5 / 99.5 percentiles.
for sigma in (0.0, 0.01, 0.05, 0.1):
    pred = gt + rng.normal(0, sigma, gt.shape)
    print(f"noise {sigma:4.2f}: psnr {metrics.psnr(pred, gt):6.2f} dB  "
          f"ssim {metrics.ssim(pred, gt):.3f}  pearson {metrics.pearson(pred, gt):.3f}")

# Dice on a thresholded mask.
mask = gt > np.percentile(gt, 60)
shifted = np.roll(mask, 1, axis=0)
print(f"\ndice of a mask with itself {metrics.dice(mask, mask):.3f}, shifted by one voxel "
      f"{metrics.dice(mask, shifted):.3f}")

# ICC between two raters that agree up to noise, with a subsampling CI.
truth = rng.normal(50, 10, 40)
ratings = np.stack([truth + rng.normal(0, 2, 40), truth + 1 + rng.normal(0, 2, 40)], axis=1)
est = metrics.icc(ratings)
print(f"\nICC(2,1) {est.value:.3f}  95% CI [{est.ci_lo:.3f}, {est.ci_hi:.3f}] from {est.n_defined} subsamples")

# Per-class F1 for a 7-way classifier that is right 80% of the time.
classes = ["T1w", "T2w", "FLAIR", "PD", "T1CE", "SWI", "T2star"]
true = rng.choice(classes, 300)
pred = np.where(rng.random(300) < 0.8, true, rng.choice(classes, 300))
print("\nper-class F1 (100 subsamples of 70%)")
for c, e in metrics.f1_bootstrap(pred, true, classes).items():
    print(f"  {c:<7} {e.value:.3f}  [{e.ci_lo:.3f}, {e.ci_hi:.3f}]")
