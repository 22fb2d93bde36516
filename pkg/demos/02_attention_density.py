# %% [markdown]
# # How dense is an attention map?
#
# Three views of the same question.  Row entropy tells how spread a row is,
# the nuclear norm of the softmax Jacobian tells how much gradient flows
# through it, and the relative distance tells how far across the image the
# weight reaches.

# %%
import math

import numpy as np

from cbvit import analysis
from cbvit.model import ModelConfig, ViT

n = 197  # 14 x 14 patches plus a class token
print(f"uniform row over {n} tokens: entropy {analysis.attention_entropy(np.full(n, 1 / n)):.4f} nats")
print(f"ln {n} = {math.log(n):.4f}")

# %% [markdown]
# The Jacobian of ``softmax(lam * s)`` is ``lam * (diag(a) - a a^T)``.  It is
# symmetric and positive semi-definite, so the nuclear norm is the trace.
# Sparse rows pass almost no gradient; the uniform row passes the most.

# %%
for row in ([1.0, 0.0, 0.0, 0.0], [0.7, 0.1, 0.1, 0.1], [0.25] * 4):
    print(row, "->", round(analysis.nuclear_norm_analytic(row), 4), "svd:", round(analysis.nuclear_norm_svd(row), 4))

report = analysis.verify_uniform_maximality(16, lam=1.0, trials=50_000)
print(f"N=16: best of {report.samples} sampled rows {report.max_found:.6f}, bound {report.bound:.6f}")

# %% [markdown]
# Now a real (untrained) model.  Initial attention is close to uniform, so
# entropies sit just under the bound.

# %%
cfg = ModelConfig(image_size=32, patch_size=8, depth=4, dim=64, heads=4)
model = ViT(cfg, seed=0, dtype=np.float64)
images = np.random.default_rng(1).uniform(0, 255, size=(8, 32, 32, 3))
_, records = model.forward(images)

prof = analysis.entropy_profile(records, exclude_class_token=True, exclude_last_layers=1)
dist = analysis.layer_distances(records, cfg.grid)
for layer, h in zip(prof.layers, prof.per_layer):
    print(f"layer {layer}: entropy {h:.4f} / {prof.bound:.4f}, relative distance {dist[layer]:.4f}")
