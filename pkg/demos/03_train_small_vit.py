# %% [markdown]
# # Training a small ViT with and without broadcasting
#
# The synthetic set draws one of a few shapes per image, at random position,
# size and contrast polarity.  Pixel-level linear read-outs stay near chance,
# while a small transformer learns the shapes in a few epochs.  This script
# trains a vanilla model and a model with the operator after every MLP, then
# compares the per-layer attention entropy.  It takes a couple of minutes on
# one CPU core; pass a smaller epoch count as the first argument to shorten it.

# %%
import sys

import numpy as np

from cbvit.model import ModelConfig
from cbvit.training import TrainConfig, make_synthetic_dataset, thread_limit, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
data = make_synthetic_dataset(seed=0, n=1000, image_size=32, num_classes=3)
print("class counts:", np.bincount(data.labels))

vanilla = ModelConfig(image_size=32, patch_size=8, depth=4, dim=64, heads=4, num_classes=3)
with_cb = vanilla.replace(**{"cb.variant": "cb", "cb.site": "mlp_end"})
tc = TrainConfig(epochs=epochs, batch_size=32, base_lr=5e-4, seed=0)

# %%
results = {}
for name, cfg in (("vanilla", vanilla), ("+cb", with_cb)):
    print(f"--- {name}")
    with thread_limit(0):
        results[name] = train(cfg, tc, data, on_epoch=lambda m: print(f"  epoch {m.epoch}: loss {m.train_loss:.3f} top1 {m.top1:.3f}"))

# %% [markdown]
# Entropy per layer after training (class token included, all layers).

# %%
print("layer  " + "  ".join(f"{name:>8}" for name in results))
for layer in range(vanilla.depth):
    print(f"{layer:5d}  " + "  ".join(f"{r.final.entropy[layer]:8.3f}" for r in results.values()))
