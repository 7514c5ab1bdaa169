"""Differentiable operations.

Each op computes its forward value with numpy and, when recording, registers a
vector-Jacobian product on the tape.  ``REGISTRY`` lists the primitive op
kinds; the gradient tests walk it so a new op cannot slip in unchecked.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ContractError, DegenerateVectorError, DimensionError
from .tensor import Tensor, as_tensor, make_result

NORM_FLOOR = 1e-12
LN_EPS = 1e-5

REGISTRY: list[str] = []


def _register(kind: str) -> str:
    REGISTRY.append(kind)
    return kind


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are incompatible") from None


# -- elementwise binary -----------------------------------------------------

ADD = _register("add")
SUB = _register("sub")
MUL = _register("mul")
DIV = _register("div")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, ADD)
    sa, sb = a.shape, b.shape
    return make_result(ADD, a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, SUB)
    sa, sb = a.shape, b.shape
    return make_result(SUB, a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, MUL)
    ad, bd = a.data, b.data
    return make_result(MUL, ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                       saved=(ad, bd))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, DIV)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(DIV, out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                       saved=(ad, bd))


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


# -- elementwise unary ------------------------------------------------------

NEG = _register("neg")
EXP = _register("exp")
LOG = _register("log")
SQRT = _register("sqrt")
RELU = _register("relu")
SIGMOID = _register("sigmoid")
GELU = _register("gelu")


def neg(a: Tensor) -> Tensor:
    return make_result(NEG, -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(EXP, out, (a,), lambda g: (g * out,), saved=(out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(LOG, np.log(x), (a,), lambda g: (g / x,), saved=(x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(SQRT, out, (a,), lambda g: (g * 0.5 / out,), saved=(out,))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = a.data
    return make_result(RELU, np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), saved=(x,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(SIGMOID, out, (a,), lambda g: (g * out * (1.0 - out),), saved=(out,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return make_result(GELU, x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), saved=(x,))


# -- linear algebra ---------------------------------------------------------

MATMUL = _register("matmul")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules.

    1-D operands are promoted (row vector on the left, column on the right)
    and the promoted axis is dropped from the result.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operands not allowed, got {a.shape} and {b.shape}")
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],) if b.ndim > 1 else ())
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(MATMUL, np.matmul(ad, bd), (a, b), vjp, saved=(ad, bd))


# -- reductions -------------------------------------------------------------

SUM = _register("sum")
MEAN = _register("mean")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(SUM, np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(MEAN, np.mean(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


# -- shape ------------------------------------------------------------------

RESHAPE = _register("reshape")
TRANSPOSE = _register("transpose")
INDEX = _register("index")
CONCAT = _register("concat")
BROADCAST = _register("broadcast_to")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_result(RESHAPE, out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(TRANSPOSE, np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result(INDEX, np.array(a.data[idx]), (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(CONCAT, out, tensors, vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return make_result(BROADCAST, out, (a,), lambda g: (_unbroadcast(g, src),))


# -- normalisation / probability -------------------------------------------

SOFTMAX = _register("softmax")
LOG_SOFTMAX = _register("log_softmax")
LAYER_NORM = _register("layer_norm")
NORMALIZE = _register("normalize")
BCE_LOGITS = _register("bce_with_logits")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(SOFTMAX, out, (a,), vjp, saved=(out,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(LOG_SOFTMAX, out, (a,), vjp, saved=(p,))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(LAYER_NORM, xhat * gd + bias.data, (a, gain, bias), vjp, saved=(xhat, inv))


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length.

    Raises DegenerateVectorError if any norm is below ``NORM_FLOOR``.
    """
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm < NORM_FLOOR):
        raise DegenerateVectorError(f"vector norm below {NORM_FLOOR:g} (min norm {float(norm.min()):.3g})")
    u = x / norm

    def vjp(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(NORMALIZE, u, (a,), vjp, saved=(u, norm))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean per-entry binary cross-entropy between sigmoid(logits) and soft targets."""
    y = as_tensor(targets).data
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ContractError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    # softplus(z) - y z, stable for large |z|
    loss = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z
    n = z.size
    p = _sigmoid(z)
    return make_result(BCE_LOGITS, np.array(loss.mean()), (logits,), lambda g: (g * (p - y) / n,), saved=(p, y))


# -- composites -------------------------------------------------------------


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors of equal dimension (scalar tensor)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim: expected two vectors of equal length, got {a.shape} and {b.shape}")
    return sum(mul(normalize(a), normalize(b)))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` (n, d) and ``b`` (m, d)."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix: row dimensions differ for {a.shape} and {b.shape}")
    return matmul(normalize(a), swapaxes(normalize(b), -1, -2))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy over the leading rows against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_cls = logits.shape[-1]
    flat = reshape(logits, (-1, n_cls))
    if flat.shape[0] != labels.size:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows but {labels.size} labels")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise ContractError(f"cross_entropy: labels must lie in [0, {n_cls})")
    onehot = np.zeros(flat.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return neg(mean(sum(mul(log_softmax(flat), onehot), axis=-1)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def patchify3d(volume: Tensor, patch: tuple[int, int, int]) -> Tensor:
    """Gather non-overlapping (pD, pH, pW) patches of ``(..., D, H, W)`` into
    ``(..., n_patches, pD*pH*pW)``; patches and voxels both in row-major order."""
    from ..errors import ConfigError

    *lead, D, H, W = volume.shape
    pD, pH, pW = patch
    for axis, n, p in (("D", D, pD), ("H", H, pH), ("W", W, pW)):
        if p <= 0 or n % p:
            raise ConfigError(f"patch extent {p} does not divide {axis}={n}")
    nD, nH, nW = D // pD, H // pH, W // pW
    k = len(lead)
    x = reshape(volume, (*lead, nD, pD, nH, pH, nW, pW))
    lead_axes = tuple(range(k))
    x = transpose(x, lead_axes + (k, k + 2, k + 4, k + 1, k + 3, k + 5))
    return reshape(x, (*lead, nD * nH * nW, pD * pH * pW))


def conv3d(volume: Tensor, weight: Tensor, bias: Tensor | None, patch: tuple[int, int, int]) -> Tensor:
    """Stride-equals-kernel 3D convolution producing one token per patch.

    ``weight`` has shape (out_dim, pD, pH, pW); output is (..., n_tokens, out_dim).
    """
    out_dim = weight.shape[0]
    if tuple(weight.shape[1:]) != tuple(patch):
        raise DimensionError(f"conv3d: kernel {weight.shape[1:]} does not match patch {tuple(patch)}")
    tokens = patchify3d(volume, patch)
    w = transpose(reshape(weight, (out_dim, -1)))
    return linear(tokens, w, bias)


def patchify2d(images: Tensor, patch: tuple[int, int]) -> Tensor:
    """``(..., H, W)`` -> ``(..., n_patches, pH*pW)``."""
    *lead, H, W = images.shape
    vol = reshape(images, (*lead, 1, H, W))
    return patchify3d(vol, (1, *patch))
