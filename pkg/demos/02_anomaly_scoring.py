"""Score patch embeddings against a fitted model and build pixel-level maps.

Shows the three proximity metrics, the component-weight threshold, the
patch-to-pixel interpolation, and a rendered PGM you can open in any image
viewer. Run with:

    python demos/02_anomaly_scoring.py
"""

import os
import tempfile

import numpy as np

from dpmmad import (
    EmbeddingBatch,
    FitConfig,
    PatchGrid,
    anomaly_scores,
    component_assignment,
    fit,
    normalize_rows,
    patch_to_pixel,
    render_map_pgm,
)

rng = np.random.default_rng(0)
dim = 16

# Normal patches live in two direction clusters on the unit sphere.
basis, _ = np.linalg.qr(rng.standard_normal((dim, 3)))
normal_dirs, anomaly_dir = basis[:, :2].T, basis[:, 2]


def patches(direction, n):
    raw = direction + 0.05 * rng.standard_normal((n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


train = normalize_rows(EmbeddingBatch(np.concatenate([
    patches(normal_dirs[0], 1500), patches(normal_dirs[1], 1500)
])))
model, _ = fit([train], [train], FitConfig(k=10, epochs=5, batch_vectors=3000, seed=0))
print(f"fitted model: {model.k} components, normalized_input={model.normalized_input}")

# One synthetic "image": an 8x8 patch grid with an anomalous 2x2 blob.
grid_side = 8
image_patches = patches(normal_dirs[0], grid_side * grid_side)
blob = [9, 10, 17, 18]
image_patches[blob] = patches(anomaly_dir, len(blob))
batch = normalize_rows(EmbeddingBatch(image_patches))

for method in ("cosine", "euclidean", "likelihood"):
    scores = anomaly_scores(batch, model, method, t_pi=1e-6)
    print(f"\n{method:10s}: normal median {np.median(np.delete(scores, blob)):8.4f}   "
          f"blob median {np.median(scores[blob]):8.4f}")

assignment = component_assignment(batch, model, "cosine", t_pi=1e-6)
print(f"\ncosine assignment uses components: {sorted(set(assignment.tolist()))}")

# Lift the cosine scores to a 64x64 pixel map and render it.
scores = anomaly_scores(batch, model, "cosine", t_pi=1e-6)
amap = patch_to_pixel(PatchGrid(scores.reshape(grid_side, grid_side)), 64, 64)
out = os.path.join(tempfile.mkdtemp(prefix="dpmmad-demo-"), "anomaly.pgm")
render_map_pgm(amap, out)
print(f"pixel map range [{amap.scores.min():.4f}, {amap.scores.max():.4f}], rendered to {out}")
