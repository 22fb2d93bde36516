"""Attention density diagnostics.

Entropy is in nats.  The softmax Jacobian of ``a = softmax(lam * s)`` is
``J = lam * (diag(a) - a a^T)``; it is symmetric PSD, so its nuclear norm is
its trace ``lam * sum(a - a**2)``, which peaks at the uniform row.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import AttentionRecord

DIST_TOL = 1e-6


class InvalidDistributionError(ValueError):
    pass


def _check_distribution(a: np.ndarray, tol: float = DIST_TOL) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise InvalidDistributionError("empty distribution")
    if not np.all(np.isfinite(a)):
        raise InvalidDistributionError("distribution contains NaN or Inf")
    if np.any(a < -tol):
        raise InvalidDistributionError("distribution has negative entries")
    if np.any(np.abs(a.sum(axis=-1) - 1.0) > tol):
        raise InvalidDistributionError("distribution does not sum to 1")
    return np.clip(a, 0.0, None)


def attention_entropy(a) -> np.ndarray | float:
    """``-sum a_j ln a_j`` over the last axis with ``0 ln 0 = 0``."""
    a = _check_distribution(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    h = np.clip(h, 0.0, math.log(a.shape[-1]))
    return float(h) if h.ndim == 0 else h


def max_entropy(n: int) -> float:
    return math.log(n)


# ---------------------------------------------------------------------------
# entropy profile
# ---------------------------------------------------------------------------


@dataclass
class EntropyProfile:
    per_layer: list[float]
    model_tag: str = ""
    excludes: dict = field(default_factory=lambda: {"class_token": False, "last_layers": 0})
    layers: list[int] = field(default_factory=list)
    n_included: int = 0

    @property
    def bound(self) -> float:
        return math.log(self.n_included)


def _restrict_to_spatial(A: np.ndarray) -> np.ndarray:
    """Drop the class-token row and column, renormalize the remaining rows."""
    sub = A[..., 1:, 1:]
    return sub / sub.sum(axis=-1, keepdims=True)


def entropy_profile(
    records: Sequence[AttentionRecord],
    *,
    exclude_class_token: bool = False,
    exclude_last_layers: int = 1,
    model_tag: str = "",
) -> EntropyProfile:
    """Per-layer mean row entropy over heads, token rows and batch.

    ``exclude_class_token`` removes the class token from both the query rows
    and the key columns (rows renormalized), so the bound becomes
    ``ln(N - 1)``.  The last ``exclude_last_layers`` layers are dropped.
    """
    if not records:
        raise ValueError("no attention records")
    layers = sorted({r.layer for r in records})
    keep = layers[: len(layers) - exclude_last_layers] if exclude_last_layers else layers
    per_layer, n_included = [], 0
    for layer in keep:
        rows = []
        for r in records:
            if r.layer != layer:
                continue
            A = np.asarray(r.A, dtype=np.float64)
            if exclude_class_token:
                A = _restrict_to_spatial(A)
            n_included = A.shape[-1]
            rows.append(np.asarray(attention_entropy(A)).reshape(-1))
        per_layer.append(float(np.concatenate(rows).mean()))
    if not keep:
        n_included = records[0].A.shape[-1] - (1 if exclude_class_token else 0)
    return EntropyProfile(
        per_layer=per_layer,
        model_tag=model_tag,
        excludes={"class_token": exclude_class_token, "last_layers": exclude_last_layers},
        layers=list(keep),
        n_included=n_included,
    )


# ---------------------------------------------------------------------------
# softmax Jacobian
# ---------------------------------------------------------------------------


def softmax_jacobian(a, lam: float = 1.0) -> np.ndarray:
    a = _check_distribution(a)
    if a.ndim != 1:
        raise InvalidDistributionError("softmax_jacobian expects a single row")
    if not lam > 0:
        raise ValueError("lam must be positive")
    return lam * (np.diag(a) - np.outer(a, a))


def nuclear_norm_analytic(a, lam: float = 1.0):
    """Trace form ``lam * sum(a - a**2)``; vectorized over leading axes."""
    a = _check_distribution(a)
    out = lam * (a - a * a).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def nuclear_norm_svd(a, lam: float = 1.0) -> float:
    """Sum of singular values of the explicit Jacobian (brute-force check)."""
    return float(np.linalg.svd(softmax_jacobian(a, lam), compute_uv=False).sum())


@dataclass
class MaximalityReport:
    n: int
    lam: float
    bound: float
    uniform_value: float
    max_found: float
    argmax: np.ndarray
    margin: float
    samples: int
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _random_simplex(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    # Flat Dirichlet draws mixed with draws concentrated near the centre and
    # near the faces, so the neighbourhood of the maximum is well covered.
    sizes = (count - 2 * (count // 3), count // 3, count // 3)
    parts = [rng.dirichlet(np.full(n, alpha), size=k) for alpha, k in zip((1.0, 100.0, 0.1), sizes) if k]
    return np.concatenate(parts)


def _vertices_and_midpoints(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    mid = np.zeros((len(i), n))
    mid[np.arange(len(i)), i] = 0.5
    mid[np.arange(len(i)), j] = 0.5
    return np.concatenate([np.eye(n), mid])


def verify_uniform_maximality(
    n: int, lam: float = 1.0, trials: int = 100_000, seed: int = 0, tol: float = 1e-12, chunk: int = 25_000
) -> MaximalityReport:
    """Sample the simplex and check nothing beats ``lam * (1 - 1/n)``.

    Every vertex and edge midpoint is probed in addition to ``trials`` random
    distributions.
    """
    if n < 2 or trials < 1:
        raise ValueError("need n >= 2 and trials >= 1")
    rng = np.random.default_rng(seed)
    bound = lam * (1.0 - 1.0 / n)
    batches = [_vertices_and_midpoints(n)]
    batches += [_random_simplex(n, min(chunk, trials - start), rng) for start in range(0, trials, chunk)]
    best, best_row, violations, total = -np.inf, None, 0, 0
    for pts in batches:
        vals = lam * (pts - pts * pts).sum(axis=-1)
        total += len(vals)
        violations += int(np.sum(vals > bound + tol))
        k = int(np.argmax(vals))
        if vals[k] > best:
            best, best_row = float(vals[k]), pts[k]
    return MaximalityReport(
        n=n,
        lam=lam,
        bound=bound,
        uniform_value=nuclear_norm_analytic(np.full(n, 1.0 / n), lam),
        max_found=best,
        argmax=best_row,
        margin=bound - best,
        samples=total,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# spatial range
# ---------------------------------------------------------------------------


def grid_positions(grid: int) -> np.ndarray:
    """``(grid**2, 2)`` row/column coordinates normalized to ``[0, 1]``, row-major."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    idx = np.arange(grid, dtype=np.float64) / max(grid - 1, 1)
    rows, cols = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def relative_distance(A, positions, *, renormalize: bool = False) -> float:
    """Mean over ordered spatial pairs i != j of ``a_ij * |p_i - p_j|_1``.

    ``A`` is ``(..., N, N)`` with the class token at index 0; leading axes
    (heads, batch) are averaged.  With ``renormalize`` each spatial row is
    rescaled to sum to 1 after dropping the class column and self weight.
    """
    A = np.asarray(A, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n_spatial = positions.shape[0]
    if A.shape[-1] != A.shape[-2] or A.shape[-1] != n_spatial + 1:
        raise ValueError(f"attention of size {A.shape[-2:]} does not match {n_spatial} spatial positions plus class token")
    if n_spatial < 2:
        return 0.0
    dist = np.abs(positions[:, None, :] - positions[None, :, :]).sum(axis=-1)
    W = A[..., 1:, 1:].copy()
    W[..., np.arange(n_spatial), np.arange(n_spatial)] = 0.0
    if renormalize:
        s = W.sum(axis=-1, keepdims=True)
        W = np.divide(W, s, out=np.zeros_like(W), where=s > 0)
    per_map = (W * dist).sum(axis=(-1, -2)) / (n_spatial * (n_spatial - 1))
    return float(np.mean(per_map))


def layer_distances(records: Sequence[AttentionRecord], grid: int, **kw) -> dict[int, float]:
    pos = grid_positions(grid)
    out = {}
    for layer in sorted({r.layer for r in records}):
        maps = np.stack([r.A for r in records if r.layer == layer])
        out[layer] = relative_distance(maps, pos, **kw)
    return out


# ---------------------------------------------------------------------------
# dimension scaling weights
# ---------------------------------------------------------------------------


@dataclass
class ScalingStats:
    layer: int
    ratio: Optional[float]  # None when the 90% quantile of |w| is 0
    mean: float
    q10: float
    q90: float


def scaling_stats(weights: dict[int, np.ndarray] | Sequence[np.ndarray]) -> list[ScalingStats]:
    """Quantile ratio ``|w|_0.1 / |w|_0.9`` and signed mean per layer.

    Quantiles interpolate linearly between order statistics.
    """
    items = weights.items() if isinstance(weights, dict) else enumerate(weights)
    out = []
    for layer, w in items:
        w = np.asarray(w, dtype=np.float64).ravel()
        if w.size == 0:
            raise ValueError(f"layer {layer}: empty scaling vector")
        q10, q90 = np.quantile(np.abs(w), [0.1, 0.9], method="linear")
        ratio = float(q10 / q90) if q90 != 0 else None
        out.append(ScalingStats(layer, ratio, float(w.mean()), float(q10), float(q90)))
    return out


# ---------------------------------------------------------------------------
# per-layer CSV
# ---------------------------------------------------------------------------

LAYER_COLUMNS = ("layer", "mean_entropy", "max_entropy_bound", "relative_distance", "lambda_ratio", "lambda_mean")


def nuclear_norm_stats(records: Sequence[AttentionRecord], lam: float) -> dict[int, tuple[float, float]]:
    """Per layer: (mean, max) of the nuclear norm over observed attention rows."""
    out = {}
    for layer in sorted({r.layer for r in records}):
        vals = np.concatenate(
            [np.asarray(nuclear_norm_analytic(r.A, lam)).ravel() for r in records if r.layer == layer]
        )
        out[layer] = (float(vals.mean()), float(vals.max()))
    return out


def write_layer_csv(path, rows: Iterable[dict], extra_columns: Sequence[str] = ()) -> None:
    columns = list(LAYER_COLUMNS) + [c for c in extra_columns if c not in LAYER_COLUMNS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c, "")) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
