"""Fit an over-truncated mixture and watch the surplus components vanish.

We draw 20k points from a 3-cluster ground truth, hand the model 50
components, and let batched EM figure out that only 3 are needed. Run with:

    python demos/01_fit_synthetic_mixture.py
"""

import numpy as np

from dpmmad import (
    EmbeddingBatch,
    FitConfig,
    SyntheticSpec,
    effective_components,
    fit,
    sample_synthetic,
)

truth = SyntheticSpec(
    true_means=6.0 * np.array([
        [1.0, 0.0, 0, 0, 0, 0, 0, 0],
        [-0.5, 0.9, 0, 0, 0, 0, 0, 0],
        [-0.5, -0.9, 0, 0, 0, 0, 0, 0],
    ]),
    true_vars=np.full((3, 8), 0.01),
    true_weights=np.array([0.5, 0.3, 0.2]),
    count=20000,
    seed=1,
)
batch, labels = sample_synthetic(truth)
print(f"sampled {batch.n} points in {batch.dim} dimensions from 3 clusters")

# Present the data as "images" of 1000 patch embeddings each; the trainer
# repacks them into batches of config.batch_vectors rows.
units = [EmbeddingBatch(batch.data[i : i + 1000]) for i in range(0, batch.n, 1000)]
val, _ = sample_synthetic(SyntheticSpec(
    truth.true_means, truth.true_vars, truth.true_weights, 2000, seed=101
))

config = FitConfig(k=50, gamma=0.2, epochs=20, seed=0)
model, report = fit(units, [val], config)

print("\nepoch  val log-likelihood  surviving components")
for epoch, (ll, eff) in enumerate(zip(report.val_loglik, report.effective_counts)):
    print(f"{epoch:5d}  {ll:18.1f}  {eff:4d}")

weights = model.component_weights()
keep = effective_components(model, t_pi=1e-3)
print(f"\ncomponents with weight > 1e-3: {len(keep)} of {config.k}")
for k in sorted(keep, key=lambda k: -weights[k]):
    nearest = np.argmin(np.linalg.norm(truth.true_means - model.means[k], axis=1))
    err = np.linalg.norm(truth.true_means[nearest] - model.means[k])
    print(
        f"  component {k:2d}: weight {weights[k]:.3f}  "
        f"closest true cluster {nearest} (true weight {truth.true_weights[nearest]}), "
        f"mean error {err:.4f}"
    )
