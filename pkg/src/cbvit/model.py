"""Vision Transformer with attention recording and context-broadcast placement.

Layout is pre-norm::

    x = x + MSA(LN(x))
    x = x + MLP(LN(x))

Weights are stored ``(in, out)`` so an affine map is ``x @ W + b``.  Images are
channels-last in 8-bit pixel units ``[0, 255]``; the model divides by 255 and
standardizes with its ``pixel_mean``/``pixel_std`` buffers before patching.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import numerics as nx
from .context import AGGREGATIONS, apply_context
from .numerics import InvalidInputError, Tensor

VARIANTS = ("none", "cb", "cb_s", "cb_gate", "cb_hybrid")
SITES = ("mlp_front", "mlp_mid", "mlp_end", "msa", "both_mlp_msa")
UNIFORM_HEAD_MODES = ("none", "replace", "append")
EXTRA_BLOCKS = ("none", "msa", "mlp")


class ConfigError(ValueError):
    """An architectural configuration that cannot be built."""


@dataclass(frozen=True)
class CBPlacement:
    """Which context operator runs where.

    ``layer_mask=None`` means every layer; ``msa_uniform_head`` adds (``append``)
    or substitutes (``replace``) a fixed 1/N attention head in the MSA block of
    the masked layers, independently of ``variant``.
    """

    variant: str = "none"
    site: str = "mlp_end"
    layer_mask: Optional[tuple[int, ...]] = None
    aggregation: str = "mean"
    msa_uniform_head: str = "none"
    exclude_class_from_mean: bool = False
    scale_init: float = 1.0

    def __post_init__(self):
        if self.layer_mask is not None:
            object.__setattr__(self, "layer_mask", tuple(sorted({int(i) for i in self.layer_mask})))
        for name, value, allowed in (
            ("variant", self.variant, VARIANTS),
            ("site", self.site, SITES),
            ("aggregation", self.aggregation, AGGREGATIONS),
            ("msa_uniform_head", self.msa_uniform_head, UNIFORM_HEAD_MODES),
        ):
            if value not in allowed:
                raise ConfigError(f"cb.{name}={value!r} is not one of {allowed}")

    def active(self, layer: int) -> bool:
        return self.layer_mask is None or layer in self.layer_mask

    @property
    def mlp_position(self) -> Optional[str]:
        if self.variant == "none":
            return None
        return {"mlp_front": "front", "mlp_mid": "mid", "mlp_end": "end", "both_mlp_msa": "end"}.get(self.site)

    @property
    def at_msa(self) -> bool:
        return self.variant != "none" and self.site in ("msa", "both_mlp_msa")


def upper_layers(depth: int) -> tuple[int, ...]:
    """Layer mask for the deeper half of the network."""
    return tuple(range(depth // 2, depth))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 4
    dim: int = 64
    heads: int = 4
    head_dim: Optional[int] = None  # default dim // heads
    mlp_ratio: int = 4
    num_classes: int = 3
    cb: CBPlacement = field(default_factory=CBPlacement)
    extra_block: str = "none"
    attn_scale: Optional[float] = None  # default head_dim ** -0.5
    dropout: float = 0.0
    drop_path: float = 0.0
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        if isinstance(self.cb, dict):
            object.__setattr__(self, "cb", CBPlacement(**self.cb))
        for name in ("image_size", "patch_size", "channels", "depth", "dim", "heads", "mlp_ratio", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.head_dim is None and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.extra_block not in EXTRA_BLOCKS:
            raise ConfigError(f"extra_block={self.extra_block!r} is not one of {EXTRA_BLOCKS}")
        if self.cb.layer_mask and (min(self.cb.layer_mask) < 0 or max(self.cb.layer_mask) >= self.depth):
            raise ConfigError(f"cb.layer_mask {self.cb.layer_mask} is outside [0, {self.depth})")
        if self.cb.msa_uniform_head == "replace" and self.heads < 2:
            raise ConfigError("replacing a head with the uniform head needs heads >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.drop_path != 0.0:
            raise ConfigError("drop_path is accepted for config compatibility but only 0 is supported")
        if self.attn_scale is not None and self.attn_scale <= 0:
            raise ConfigError("attn_scale must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_width(self) -> int:
        return self.head_dim if self.head_dim is not None else self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def scale(self) -> float:
        return self.attn_scale if self.attn_scale is not None else self.head_width**-0.5

    def replace(self, **changes) -> "ModelConfig":
        cb_changes = {k[3:]: changes.pop(k) for k in list(changes) if k.startswith("cb.")}
        cfg = dataclasses.replace(self, **changes)
        if cb_changes:
            cfg = dataclasses.replace(cfg, cb=dataclasses.replace(cfg.cb, **cb_changes))
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["cb"]["layer_mask"] is not None:
            d["cb"]["layer_mask"] = list(d["cb"]["layer_mask"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        cb = dict(d.pop("cb", {}))
        if cb.get("layer_mask") is not None:
            cb["layer_mask"] = tuple(cb["layer_mask"])
        return cls(cb=CBPlacement(**cb), **d)


@dataclass
class AttentionRecord:
    """Attention of one head in one layer; ``A`` is ``(..., N, N)`` row-stochastic."""

    layer: int
    head: int
    A: np.ndarray


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _attention_heads(config: ModelConfig, layer: Optional[int]) -> tuple[int, int]:
    """(learned query/key heads, value heads) of one MSA block."""
    mode = config.cb.msa_uniform_head if layer is not None and config.cb.active(layer) else "none"
    if mode == "replace":
        return config.heads - 1, config.heads
    if mode == "append":
        return config.heads, config.heads + 1
    return config.heads, config.heads


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable array, in a fixed order."""
    d, hd = config.dim, config.head_width
    p = config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (p * p * config.channels, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (config.num_tokens, d),
    }

    def msa(prefix: str, layer: Optional[int]):
        hq, hv = _attention_heads(config, layer)
        shapes[prefix + "norm1.weight"] = (d,)
        shapes[prefix + "norm1.bias"] = (d,)
        for name, h in (("q", hq), ("k", hq), ("v", hv)):
            shapes[f"{prefix}attn.{name}.weight"] = (d, h * hd)
            shapes[f"{prefix}attn.{name}.bias"] = (h * hd,)
        shapes[prefix + "attn.proj.weight"] = (hv * hd, d)
        shapes[prefix + "attn.proj.bias"] = (d,)

    def mlp(prefix: str):
        shapes[prefix + "norm2.weight"] = (d,)
        shapes[prefix + "norm2.bias"] = (d,)
        shapes[prefix + "mlp.fc1.weight"] = (d, config.hidden)
        shapes[prefix + "mlp.fc1.bias"] = (config.hidden,)
        shapes[prefix + "mlp.fc2.weight"] = (config.hidden, d)
        shapes[prefix + "mlp.fc2.bias"] = (d,)

    cb = config.cb
    for i in range(config.depth):
        prefix = f"blocks.{i}."
        msa(prefix, i)
        mlp(prefix)
        if cb.variant == "cb_s" and cb.active(i):
            if cb.at_msa:
                shapes[prefix + "cb.msa_scale"] = (d,)
            if cb.mlp_position is not None:
                shapes[prefix + "cb.mlp_scale"] = (config.hidden if cb.mlp_position == "mid" else d,)
    if config.extra_block == "msa":
        msa("extra.", None)
    elif config.extra_block == "mlp":
        mlp("extra.")
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_scale"):
            value = np.full(shape, config.cb.scale_init)
        elif leaf == "bias":
            value = np.zeros(shape)
        elif name.startswith(("norm", "extra.norm")) or ".norm" in name:
            value = np.ones(shape)
        else:
            value = _trunc_normal(rng, shape, config.init_std)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def compensated_head_dim(config: ModelConfig) -> tuple[int, int]:
    """Head width that brings a ``replace`` model back to the vanilla parameter count.

    Returns ``(head_dim, parameter_gap)`` where the gap is the compensated
    model's count minus the vanilla count (integer widths rarely match exactly).
    """
    vanilla = config.replace(**{"cb.msa_uniform_head": "none"})
    target = ViT.count(vanilla)
    best = None
    for hd in range(vanilla.head_width, 4 * vanilla.head_width + 1):
        cand = config.replace(head_dim=hd, **{"cb.msa_uniform_head": "replace"})
        gap = ViT.count(cand) - target
        if best is None or abs(gap) < abs(best[1]):
            best = (hd, gap)
    return best


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def patch_embed(images: Tensor, params: dict, config: ModelConfig) -> Tensor:
    """``(B, H, W, C)`` images -> ``(B, N, d)`` tokens with class token and positions."""
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, config.channels):
        raise InvalidInputError(
            f"expected images of shape (B, {config.image_size}, {config.image_size}, {config.channels}), got {images.shape}"
        )
    b, g, p, c = images.shape[0], config.grid, config.patch_size, config.channels
    patches = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * c)
    tokens = _linear(patches, params, "patch_embed")
    cls = params["cls_token"].reshape(1, 1, config.dim).broadcast_to((b, 1, config.dim))
    return nx.concat([cls, tokens], axis=1) + params["pos_embed"]


def _split_heads(x: Tensor, heads: int, hd: int) -> Tensor:
    b, n = x.shape[0], x.shape[1]
    return x.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)


def msa_forward(
    x: Tensor, params: dict, prefix: str, config: ModelConfig, layer: Optional[int]
) -> tuple[Tensor, np.ndarray, list[int]]:
    """Multi-head self-attention on already-normalized tokens.

    Returns the block output, the learned heads' attention ``(B, h, N, N)`` and
    their head indices.  The uniform head (if any) is not recorded: its
    attention is 1/N by construction.
    """
    b, n, d = x.shape
    if d != config.dim:
        raise InvalidInputError(f"token width {d} != model dim {config.dim}")
    hd = config.head_width
    hq, hv = _attention_heads(config, layer)
    mode = config.cb.msa_uniform_head if layer is not None and config.cb.active(layer) else "none"
    q = _split_heads(_linear(x, params, prefix + "attn.q"), hq, hd)
    k = _split_heads(_linear(x, params, prefix + "attn.k"), hq, hd)
    v = _split_heads(_linear(x, params, prefix + "attn.v"), hv, hd)
    attn = nx.softmax_rows(q @ k.swapaxes(-1, -2), config.scale)
    if mode == "none":
        heads_out = attn @ v
        head_ids = list(range(hq))
    else:
        if mode == "replace":
            v_uniform, v_learned, head_ids = v[:, 0:1], v[:, 1:], list(range(1, hv))
        else:
            v_uniform, v_learned, head_ids = v[:, hq:], v[:, :hq], list(range(hq))
        uniform = v_uniform.mean(axis=-2, keepdims=True).broadcast_to((b, 1, n, hd))
        learned = attn @ v_learned
        parts = [uniform, learned] if mode == "replace" else [learned, uniform]
        heads_out = nx.concat(parts, axis=1)
    merged = heads_out.transpose(0, 2, 1, 3).reshape(b, n, hv * hd)
    out = _linear(merged, params, prefix + "attn.proj")
    cb = config.cb
    if layer is not None and cb.at_msa and cb.active(layer):
        out = apply_context(
            out,
            cb.variant,
            scale=params.get(prefix + "cb.msa_scale"),
            aggregation=cb.aggregation,
            exclude_class=cb.exclude_class_from_mean,
        )
    return out, attn.data, head_ids


def mlp_forward(
    x: Tensor,
    params: dict,
    prefix: str,
    config: ModelConfig,
    layer: Optional[int],
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """FC1 -> GELU -> FC2 with the context op at Front, Mid or End."""
    cb = config.cb
    position = cb.mlp_position if layer is not None and cb.active(layer) else None

    def ctx(t: Tensor) -> Tensor:
        return apply_context(
            t,
            cb.variant,
            scale=params.get(prefix + "cb.mlp_scale"),
            aggregation=cb.aggregation,
            exclude_class=cb.exclude_class_from_mean,
        )

    if position == "front":
        x = ctx(x)
    h = _dropout(nx.gelu(_linear(x, params, prefix + "mlp.fc1")), config.dropout, rng)
    if position == "mid":
        h = ctx(h)
    y = _dropout(_linear(h, params, prefix + "mlp.fc2"), config.dropout, rng)
    if position == "end":
        y = ctx(y)
    return y


def _norm(x: Tensor, params: dict, name: str, eps: float) -> Tensor:
    return nx.layer_norm(x, params[name + ".weight"], params[name + ".bias"], eps)


def vit_forward(
    model: "ViT", images, *, rng: Optional[np.random.Generator] = None
) -> tuple[Tensor, list[AttentionRecord]]:
    """Logits ``(B, num_classes)`` and one record per (layer, learned head).

    ``rng`` enables dropout (training mode); without it the pass is deterministic.
    """
    cfg, params = model.config, model.params
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    x = (x * (1.0 / 255.0) - model.pixel_mean) * (1.0 / model.pixel_std)
    x = patch_embed(x, params, cfg)
    records: list[AttentionRecord] = []

    def record(layer: int, attn: np.ndarray, head_ids: list[int]):
        records.extend(AttentionRecord(layer, h, attn[:, j]) for j, h in enumerate(head_ids))

    for i in range(cfg.depth):
        prefix = f"blocks.{i}."
        a, attn, head_ids = msa_forward(_norm(x, params, prefix + "norm1", cfg.ln_eps), params, prefix, cfg, i)
        record(i, attn, head_ids)
        x = x + _dropout(a, cfg.dropout, rng)
        x = x + mlp_forward(_norm(x, params, prefix + "norm2", cfg.ln_eps), params, prefix, cfg, i, rng)
    if cfg.extra_block == "msa":
        a, attn, head_ids = msa_forward(_norm(x, params, "extra.norm1", cfg.ln_eps), params, "extra.", cfg, None)
        record(cfg.depth, attn, head_ids)
        x = x + a
    elif cfg.extra_block == "mlp":
        x = x + mlp_forward(_norm(x, params, "extra.norm2", cfg.ln_eps), params, "extra.", cfg, None, rng)
    x = _norm(x, params, "norm", cfg.ln_eps)
    logits = _linear(x[:, 0, :], params, "head")
    return logits, records


class ViT:
    """Parameters plus config; ``model(images)`` returns plain logits."""

    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        dtype=np.float32,
        params: Optional[dict[str, Tensor]] = None,
        pixel_mean=None,
        pixel_std=None,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        expected = parameter_shapes(config)
        if params is None:
            params = init_parameters(config, seed, self.dtype)
        else:
            problems = [n for n in expected if n not in params or tuple(params[n].shape) != expected[n]]
            problems += [n for n in params if n not in expected]
            if problems:
                raise ConfigError(f"parameters do not match config: {sorted(problems)}")
            params = {n: params[n] for n in expected}
        self.params = params
        c = config.channels
        self.pixel_mean = np.zeros(c, self.dtype) if pixel_mean is None else np.asarray(pixel_mean, self.dtype)
        self.pixel_std = np.ones(c, self.dtype) if pixel_std is None else np.asarray(pixel_std, self.dtype)

    @staticmethod
    def count(config: ModelConfig) -> int:
        return int(sum(math.prod(s) for s in parameter_shapes(config).values()))

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, images, *, rng=None):
        return vit_forward(self, images, rng=rng)

    def __call__(self, images) -> np.ndarray:
        return self.forward(images)[0].data

    def with_config(self, config: ModelConfig) -> "ViT":
        """Same weights (shared, not copied) under another compatible config."""
        return ViT(config, dtype=self.dtype, params=self.params, pixel_mean=self.pixel_mean, pixel_std=self.pixel_std)

    def astype(self, dtype) -> "ViT":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=True) for n, p in self.params.items()}
        return ViT(self.config, dtype=dtype, params=params, pixel_mean=self.pixel_mean, pixel_std=self.pixel_std)

    def scaling_weights(self) -> dict[int, np.ndarray]:
        """Per-layer dimension-scaling vectors of a ``cb_s`` model (MLP site first)."""
        out = {}
        for i in range(self.config.depth):
            for site in ("mlp_scale", "msa_scale"):
                name = f"blocks.{i}.cb.{site}"
                if name in self.params:
                    out[i] = self.params[name].data
                    break
        return out
