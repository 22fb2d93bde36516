"""Full-model gradient check: reverse mode against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ViT
from .numerics import backward, cross_entropy, finite_diff, relative_error


@dataclass
class TensorCheck:
    name: str
    worst: float
    coord: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


def model_gradient_check(
    model: ViT,
    images: np.ndarray,
    labels: np.ndarray,
    coords_per_tensor: int = 50,
    seed: int = 0,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> list[TensorCheck]:
    """Compare backward() with finite differences at sampled coordinates.

    The model should be float64; every parameter tensor is probed at up to
    ``coords_per_tensor`` distinct coordinates. ``floor`` bounds the
    denominator so that structurally zero gradients (key biases, which
    softmax shift invariance cancels) compare against roundoff, not 0/0.
    """
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=model.dtype)

    def loss_value() -> float:
        logits, _ = model.forward(images)
        return cross_entropy(logits, labels).item()

    model.zero_grad()
    logits, _ = model.forward(images)
    backward(cross_entropy(logits, labels))
    results = []
    for name, param in model.params.items():
        flat = param.data.reshape(-1)
        k = min(coords_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        analytic = param.grad.reshape(-1)[picks]
        saved = flat[picks].copy()

        def f(theta):
            flat[picks] = theta
            return loss_value()

        numeric = finite_diff(f, saved, eps)
        flat[picks] = saved
        err = relative_error(analytic, numeric, floor)
        j = int(np.argmax(err))
        coord = tuple(int(c) for c in np.unravel_index(picks[j], param.shape))
        results.append(TensorCheck(name, float(err[j]), coord, float(analytic[j]), float(numeric[j]), k))
    model.zero_grad()
    return results
