# %% [markdown]
# # Broadcasting context into tokens
#
# A token set is an (N, d) array.  Context broadcasting blends every token
# halfway toward the token mean.  Here we look at what that does to a small
# random set, then at the learnable and gated variants.

# %%
import numpy as np

from cbvit.context import aggregate_context, cb, cb_gate, cb_hybrid, cb_s

rng = np.random.default_rng(0)
x = rng.normal(size=(6, 4))
mu = x.mean(axis=0)
print("token mean       ", np.round(mu, 3))
print("mean after cb    ", np.round(cb(x).mean(axis=0), 3))

# %% [markdown]
# The mean is untouched, and every token's distance from it halves.
# Stacking the operator shrinks the spread geometrically.

# %%
y = x
for k in range(4):
    spread = np.linalg.norm(y - mu, axis=1).mean()
    print(f"after {k} applications: mean distance to centre {spread:.4f}")
    y = cb(y)

# %% [markdown]
# With a per-channel weight vector the model decides how much context each
# channel receives.  A zero weight leaves a channel as it was.

# %%
scale = np.array([1.0, 0.5, 0.0, -0.5])
print(np.round(cb_s(x, scale) - x, 3))  # rows repeat scale * mean

# %% [markdown]
# Other aggregations swap the mean for a max or for the class token.  The
# gate multiplies tokens by ``(class token + 1)``; the hybrid adds that
# product to the plain blend.

# %%
for how in ("mean", "max", "class"):
    print(how.ljust(5), np.round(aggregate_context(x, how), 3))
x0 = x.copy()
x0[0] = 0.0
print("gate with a zero class token is the identity:", np.array_equal(cb_gate(x0), x0))
print("hybrid with a zero class token equals cb:", np.allclose(cb_hybrid(x0), cb(x0)))
