"""Context broadcasting: token-sequence transforms that inject uniform attention.

All operators act on the token axis ``-2`` of an ``(..., N, d)`` array, so the
same code handles a single sequence and a batch.  Passing a :class:`Tensor`
keeps the result differentiable; passing an ndarray returns an ndarray.

Row 0 is the class token wherever an operator needs one.
"""

from __future__ import annotations

from .numerics import InvalidInputError, Tensor, as_tensor

AGGREGATIONS = ("mean", "max", "class")


def _check_tokens(x: Tensor) -> None:
    if x.ndim < 2:
        raise InvalidInputError(f"expected (..., N, d) tokens, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise InvalidInputError("empty token sequence")


def _wrap(fn):
    def inner(x, *args, **kwargs):
        plain = not isinstance(x, Tensor)
        x = as_tensor(x)
        _check_tokens(x)
        out = fn(x, *args, **kwargs)
        return out.data if plain else out

    inner.__name__ = fn.__name__
    inner.__qualname__ = fn.__qualname__
    inner.__doc__ = fn.__doc__
    return inner


def _token_mean(x: Tensor, exclude_class: bool) -> Tensor:
    if exclude_class and x.shape[-2] > 1:
        return x[..., 1:, :].mean(axis=-2, keepdims=True)
    return x.mean(axis=-2, keepdims=True)


def _context(x: Tensor, method: str, exclude_class: bool) -> Tensor:
    if method == "mean":
        return _token_mean(x, exclude_class)
    if method == "max":
        body = x[..., 1:, :] if exclude_class and x.shape[-2] > 1 else x
        return body.max(axis=-2, keepdims=True)
    if method == "class":
        return x[..., 0:1, :]
    raise InvalidInputError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")


@_wrap
def aggregate_context(x, method: str = "mean", exclude_class: bool = False):
    """Collapse the token axis into one context vector of width d.

    ``mean`` is the column mean, ``max`` the column-wise maximum, ``class``
    returns row 0 verbatim.
    """
    ctx = _context(x, method, exclude_class)
    return ctx.reshape(ctx.shape[:-2] + ctx.shape[-1:])


@_wrap
def cb(x, aggregation: str = "mean", exclude_class: bool = False):
    """Average every token with the context vector: ``(x_i + ctx) / 2``.

    With the default mean aggregation this is
    ``0.5 * X + 0.5 * X.mean(token_axis)``.
    """
    return 0.5 * x + 0.5 * _context(x, aggregation, exclude_class)


@_wrap
def cb_s(x, scale, aggregation: str = "mean", exclude_class: bool = False):
    """Add the context scaled per channel: ``x_i + scale * ctx``."""
    scale = as_tensor(scale, x.dtype)
    if scale.shape != (x.shape[-1],):
        raise InvalidInputError(f"scale has shape {scale.shape}, tokens have width {x.shape[-1]}")
    return x + scale * _context(x, aggregation, exclude_class)


@_wrap
def cb_gate(x):
    """Gate every token (the class token included) by ``x_0 + 1``."""
    return x * (x[..., 0:1, :] + 1.0)


@_wrap
def cb_hybrid(x, aggregation: str = "mean", exclude_class: bool = False):
    """``x_i * x_0 + cb(X)_i`` for every token i."""
    return x * x[..., 0:1, :] + cb(x, aggregation, exclude_class)


def apply_context(x: Tensor, variant: str, *, scale=None, aggregation: str = "mean", exclude_class: bool = False):
    """Dispatch on a variant name; ``none`` returns ``x`` unchanged."""
    if variant == "none":
        return x
    if variant == "cb":
        return cb(x, aggregation, exclude_class)
    if variant == "cb_s":
        if scale is None:
            raise InvalidInputError("cb_s needs a scale vector")
        return cb_s(x, scale, aggregation, exclude_class)
    if variant == "cb_gate":
        return cb_gate(x)
    if variant == "cb_hybrid":
        return cb_hybrid(x, aggregation, exclude_class)
    raise InvalidInputError(f"unknown context variant {variant!r}")

