"""Desk-scale training, evaluation and robustness probes."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis
from .model import ModelConfig, ViT
from .numerics import NonFiniteError, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate became NaN/Inf; training was aborted."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: Optional[float] = None  # None: 1e-3 * batch_size / 1024
    min_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    seed: int = 0
    label_smoothing: float = 0.0
    precision: str = "float32"
    analysis_batch: int = 128

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not all(0.0 < b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr is not None else 1e-3 * self.batch_size / 1024

    @property
    def dtype(self):
        return np.dtype(self.precision)


@contextlib.contextmanager
def thread_limit(threads: int = 0):
    """Cap BLAS/OpenMP threads; 0 means strictly single-threaded."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, threads)):
        yield


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

SHAPES = ("hbar", "vbar", "plus", "diag", "antidiag", "cross", "frame", "square", "disk", "ring")


def render_mask(shape: str, size: int, cy: float, cx: float, r: float, t: float) -> np.ndarray:
    """Boolean ``(size, size)`` mask of one class shape centred at ``(cy, cx)``."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = y - cy, x - cx
    box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    hbar = (np.abs(dy) <= t) & (np.abs(dx) <= r)
    vbar = (np.abs(dx) <= t) & (np.abs(dy) <= r)
    diag = (np.abs(dy - dx) <= t) & box
    anti = (np.abs(dy + dx) <= t) & box
    radius = np.hypot(dy, dx)
    masks = {
        "hbar": lambda: hbar,
        "vbar": lambda: vbar,
        "plus": lambda: hbar | vbar,
        "diag": lambda: diag,
        "antidiag": lambda: anti,
        "cross": lambda: diag | anti,
        "frame": lambda: box & ~((np.abs(dy) <= r - t - 1) & (np.abs(dx) <= r - t - 1)),
        "square": lambda: box,
        "disk": lambda: radius <= r,
        "ring": lambda: (radius <= r) & (radius >= r - t - 1),
    }
    return masks[shape]()


@dataclass
class SyntheticDataset:
    """Class-conditional shapes on a flat background.

    ``images`` are ``(n, H, W, C)`` uint8, ``labels`` int64.  ``params`` holds
    each sample's ``(cy, cx, r, t, background, foreground)`` so the generator's
    mask rule can be replayed.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    params: Optional[np.ndarray] = None
    generator: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        p = None if self.params is None else self.params[idx]
        return SyntheticDataset(self.images[idx], self.labels[idx], self.num_classes, p, dict(self.generator))

    def pixel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std of pixels scaled to [0, 1]."""
        x = self.images.reshape(-1, self.images.shape[-1]).astype(np.float64) / 255.0
        std = x.std(axis=0)
        return x.mean(axis=0), np.where(std > 0, std, 1.0)


def make_synthetic_dataset(
    seed: int,
    n: int,
    image_size: int = 32,
    num_classes: int = 3,
    channels: int = 3,
    noise: float = 0.04,
) -> SyntheticDataset:
    """Shapes at random position and size with random contrast polarity.

    A shape may be brighter or darker than the background with equal
    probability, so per-pixel class means coincide and a linear read-out of
    raw pixels stays near chance.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in 2..{len(SHAPES)}")
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    if image_size < 8 or channels < 1:
        raise ValueError("image_size must be >= 8 and channels >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = np.empty((n, image_size, image_size, channels), dtype=np.uint8)
    params = np.empty((n, 6))
    for i, label in enumerate(labels):
        r = float(rng.integers(image_size // 5, image_size // 3 + 1))
        t = float(max(1, int(r) // 4))
        cy, cx = (float(v) for v in rng.integers(int(r), image_size - int(r), size=2))
        bg = rng.uniform(0.35, 0.65)
        fg = bg + rng.choice((-1.0, 1.0)) * rng.uniform(0.25, 0.35)
        bg_q, fg_q = np.round(bg * 255) / 255, np.round(fg * 255) / 255
        mask = render_mask(SHAPES[label], image_size, cy, cx, r, t)
        img = np.where(mask, fg_q, bg_q)[..., None].repeat(channels, axis=-1)
        if noise:
            img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        params[i] = (cy, cx, r, t, bg_q, fg_q)
    gen = {"seed": seed, "n": n, "image_size": image_size, "num_classes": num_classes, "channels": channels, "noise": noise}
    return SyntheticDataset(images, labels, num_classes, params, gen)


_MAGIC = b"CBDS"
_DATASET_VERSION = 1


def save_dataset(dataset: SyntheticDataset, path) -> None:
    """Header ``CBDS`` + 6 little-endian int32, then uint8 pixels, then int32 labels."""
    n, h, w, c = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6i", _DATASET_VERSION, n, h, w, c, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.images, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())


def load_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a CBDS dataset file")
    version, n, h, w, c, k = struct.unpack_from("<6i", raw, 4)
    if version != _DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 4 + 24
    npix = n * h * w * c
    if len(raw) != off + npix + 4 * n:
        raise ValueError(f"{path}: truncated or oversized dataset file")
    images = np.frombuffer(raw, np.uint8, npix, off).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, "<i4", n, off + npix).astype(np.int64)
    return SyntheticDataset(images, labels, k)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float | Sequence[float] = 0.0,
    eps: float = 1e-8,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One AdamW update, in place; decay is decoupled from the moments.

    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``
    """
    if t < 1:
        raise ValueError("step index t starts at 1")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and state differ in length")
    b1, b2 = betas
    decays = [weight_decay] * len(params) if np.isscalar(weight_decay) else list(weight_decay)
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v, wd in zip(params, grads, state.m, state.v, decays):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * update
    return params, state


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0, then half-cosine decay to ``min_lr`` at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# evaluation and robustness
# ---------------------------------------------------------------------------


def _as_pairs(data, labels=None):
    if labels is None:
        return data.images, data.labels
    return data, np.asarray(labels)


def evaluate(model: Callable, data, labels=None, topk: Sequence[int] = (1, 5), batch_size: Optional[int] = 256) -> dict[int, float]:
    """Top-k accuracies; ties go to the lowest class index.

    ``model`` is any callable mapping an image batch to ``(B, K)`` logits.
    ``batch_size=None`` passes everything in a single call.
    """
    images, labels = _as_pairs(data, labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    step = len(labels) if batch_size is None else batch_size
    hits = {k: 0 for k in topk}
    for start in range(0, len(labels), step):
        logits = np.asarray(model(images[start : start + step]))
        y = labels[start : start + step]
        order = np.argsort(-logits, axis=1, kind="stable")
        for k in topk:
            hits[k] += int((order[:, : min(k, logits.shape[1])] == y[:, None]).any(axis=1).sum())
    return {k: hits[k] / len(labels) for k in topk}


def input_gradient(model: ViT, images, labels) -> tuple[np.ndarray, float]:
    """d(mean cross-entropy)/d(pixels) and the loss; parameter grads are discarded."""
    x = Tensor(np.asarray(images, dtype=model.dtype), requires_grad=True)
    logits, _ = model.forward(x)
    loss = cross_entropy(logits, np.atleast_1d(labels))
    backward(loss)
    model.zero_grad()
    return x.grad, loss.item()


def fgsm_attack(model: ViT, images, labels, epsilon: float, pixel_range=(0.0, 255.0)) -> np.ndarray:
    """One signed-gradient ascent step of size ``epsilon`` (pixel units), clipped to range."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    images = np.asarray(images, dtype=model.dtype)
    single = images.ndim == 3
    batch = images[None] if single else images
    if epsilon == 0:
        return images.copy()
    grad, _ = input_gradient(model, batch, labels)
    adv = np.clip(batch + epsilon * np.sign(grad), pixel_range[0], pixel_range[1]).astype(model.dtype)
    return adv[0] if single else adv


def center_occlusion(images, mask_fraction: float = 0.5) -> np.ndarray:
    """Zero a centred square of side ``floor(fraction * side)``; works on ``(..., H, W, C)``."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError("mask_fraction must be in [0, 1]")
    out = np.array(images, copy=True)
    h, w = out.shape[-3], out.shape[-2]
    kh, kw = int(math.floor(mask_fraction * h)), int(math.floor(mask_fraction * w))
    top, left = (h - kh) // 2, (w - kw) // 2
    out[..., top : top + kh, left : left + kw, :] = 0
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    top1: float
    top5: float
    entropy: list[float]
    distance: list[float]

    def row(self) -> dict:
        d = {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss, "top1": self.top1, "top5": self.top5}
        d.update({f"entropy_L{i}": v for i, v in enumerate(self.entropy)})
        d.update({f"distance_L{i}": v for i, v in enumerate(self.distance)})
        return d


@dataclass
class TrainResult:
    model: ViT
    metrics: list[MetricsRecord]
    model_config: ModelConfig
    train_config: TrainConfig

    @property
    def final(self) -> MetricsRecord:
        return self.metrics[-1]


def write_metrics_csv(path, metrics: Sequence[MetricsRecord]) -> None:
    rows = [m.row() for m in metrics]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _decays(model: ViT, wd: float) -> list[float]:
    # No decay on biases, norms, scaling vectors and the learned tokens.
    return [0.0 if p.ndim < 2 or name in ("cls_token", "pos_embed") else wd for name, p in model.params.items()]


def diagnostics(model: ViT, images) -> tuple[list[float], list[float]]:
    """Per-layer mean attention entropy (all layers, class token included) and relative distance."""
    _, records = model.forward(images)
    prof = analysis.entropy_profile(records, exclude_last_layers=0)
    dist = analysis.layer_distances(records, model.config.grid)
    return prof.per_layer, [dist[layer] for layer in prof.layers]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: SyntheticDataset,
    eval_dataset: Optional[SyntheticDataset] = None,
    *,
    model: Optional[ViT] = None,
    on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
) -> TrainResult:
    """AdamW + warmup/cosine training with per-epoch metrics.

    Accuracy is measured on ``eval_dataset`` (the training set when omitted);
    the density diagnostics use its first ``analysis_batch`` images.
    """
    if dataset.num_classes != model_config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects {model_config.num_classes}")
    tc = train_config
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    if model is None:
        mean, std = dataset.pixel_stats()
        model = ViT(model_config, seed=tc.seed, dtype=tc.dtype, pixel_mean=mean, pixel_std=std)
    names = list(model.params)
    tensors = [model.params[n] for n in names]
    state = AdamState.zeros_like([t.data for t in tensors])
    decays = _decays(model, tc.weight_decay)
    rng = np.random.default_rng(tc.seed + 1)
    dropout_rng = np.random.default_rng(tc.seed + 2) if model_config.dropout > 0 else None

    n = len(dataset)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    warmup = min(int(round(tc.warmup_epochs * steps_per_epoch)), total - 1)
    probe = eval_dataset.images[: tc.analysis_batch]
    metrics: list[MetricsRecord] = []
    t = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        losses, lr = [], 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            t += 1
            lr = cosine_lr(t, total, warmup, tc.lr, tc.min_lr)
            try:
                logits, _ = model.forward(dataset.images[idx].astype(model.dtype), rng=dropout_rng)
                loss = cross_entropy(logits, dataset.labels[idx], tc.label_smoothing)
                model.zero_grad()
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch + 1}, step {t}: {exc}") from exc
            adamw_step([p.data for p in tensors], [p.grad for p in tensors], state, t, lr, tc.betas, decays)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1}")
        acc = evaluate(model, eval_dataset, topk=(1, 5))
        entropy, distance = diagnostics(model, probe)
        rec = MetricsRecord(epoch + 1, lr, mean_loss, acc[1], acc[5], entropy, distance)
        metrics.append(rec)
        log.info("epoch %d loss %.4f top1 %.4f", rec.epoch, rec.train_loss, rec.top1)
        if on_epoch is not None:
            on_epoch(rec)
    model.zero_grad()
    return TrainResult(model, metrics, model_config, tc)


def config_snapshot(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {"model": model_config.to_dict(), "train": asdict(train_config)}
