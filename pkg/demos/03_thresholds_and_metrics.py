"""Calibrate FPR thresholds and evaluate segmentation quality.

Walks through threshold selection on normal validation scores, Dice at the
1/5/10% FPR grid, pooled AUROC/AUPR, and the paired permutation test between
two scoring methods. Run with:

    python demos/03_thresholds_and_metrics.py
"""

import numpy as np

from dpmmad import (
    LabeledScores,
    PairedImageScores,
    auroc,
    aupr,
    dice,
    paired_permutation_test,
    select_threshold,
)

rng = np.random.default_rng(7)

# Pretend these came from scoring held-out data: normals low, anomalies high.
normal_val = rng.gamma(2.0, 0.05, size=20000)
test_normal = rng.gamma(2.0, 0.05, size=8000)
test_anomal = rng.gamma(6.0, 0.08, size=2000)
scores = np.concatenate([test_normal, test_anomal])
labels = np.concatenate([np.zeros(8000, dtype=int), np.ones(2000, dtype=int)])
pooled = LabeledScores(scores, labels)

print(f"pixel AUROC {auroc(pooled):.4f}   pixel AUPR {aupr(pooled):.4f}")

print("\nFPR target   threshold   achieved FPR   Dice")
for target in (0.01, 0.05, 0.10):
    t = select_threshold(normal_val, target)
    achieved = float(np.mean(test_normal > t))
    d = dice(scores > t, labels.astype(bool))
    print(f"{target:10.2f}   {t:9.4f}   {achieved:12.4f}   {d:.4f}")

# Compare two methods image-wise: B is A plus noise and a small handicap.
per_image_a = np.clip(rng.normal(0.92, 0.03, size=40), 0, 1)
per_image_b = np.clip(per_image_a - 0.015 + rng.normal(0, 0.01, size=40), 0, 1)
p = paired_permutation_test(
    PairedImageScores(per_image_a, per_image_b, n_permutations=10000, seed=0)
)
print(f"\npaired permutation test over 40 images: mean diff "
      f"{np.mean(per_image_a - per_image_b):+.4f}, p = {p:.4g}")
