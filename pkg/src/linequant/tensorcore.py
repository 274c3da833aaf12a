"""Dense-tensor numerical core with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 by default, float64 for verification).
Differentiable operations executed while a Tape is active are recorded in
execution order; backward() replays the records in reverse and accumulates
gradients into the leaves that requested them. Execution is deterministic:
no implicit randomness, fixed reduction orders.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DegenerateWeightsError,
    DimensionError,
    LabelError,
)

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def clear_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Tape:
    """Ordered record of executed differentiable operations.

    Reverse execution order is a valid topological order of the graph, so
    backward() simply walks the records back to front.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._ops)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(data, dtype=data.dtype)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        _TAPES[-1]._ops.append((out, parents, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls keep accumulating until the leaf grads are cleared.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape._ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, gp in zip(parents, vjp(g)):
            if gp is None or not parent.requires_grad:
                continue
            if parent._leaf:
                parent.grad = gp if parent.grad is None else parent.grad + gp
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = gp if prev is None else prev + gp


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _emit(data, (a, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _coerce(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _emit(data.astype(x.data.dtype, copy=False), (x,), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    x = _coerce(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of bounds for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _emit(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gain, bias)."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.sum(axis=-1, keepdims=True) * (1.0 / d)
            - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * (1.0 / d))
        )
        flat = (-1, d)
        dgain = (g * xhat).reshape(flat).sum(axis=0)
        dbias = g.reshape(flat).sum(axis=0)
        return dx, dgain, dbias

    return _emit(data, (x, gain, bias), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise LabelError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {int(ids.min())}, max {int(ids.max())}"
        )
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(data, (table,), vjp)


def unfold(x: Tensor, kernel: tuple[int, int], stride: tuple[int, int],
           padding: tuple[int, int]) -> Tensor:
    """im2col: (B,C,H,W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"unfold expects a B x C x H x W tensor, got {x.shape}")
    b, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kernel} larger than padded input {hp}x{wp} (input {h}x{w}, padding {padding})"
        )
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((b, c, hp, wp), dtype=x.data.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x.data
    else:
        xp = x.data
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    data = cols.reshape(b, c * kh * kw, oh * ow)

    def vjp(g):
        gc = g.reshape(b, c, kh, kw, oh, ow)
        gp = np.zeros((b, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gc[:, :, i, j]
        if ph or pw:
            gp = gp[:, :, ph:hp - ph, pw:wp - pw]
        return (gp,)

    return _emit(data, (x,), vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D convolution realized as unfold followed by a matrix product.

    x: (B, C, H, W); weight: (OC, C, kh, kw); bias: (OC,) or None.
    Output spatial extents follow floor((dim + 2*pad - kernel) / stride) + 1.
    """
    x, weight = _coerce(x), _coerce(weight)
    oc, c_w, kh, kw = weight.shape
    if x.shape[1] != c_w:
        raise DimensionError(f"conv2d channels disagree: input {x.shape} vs weight {weight.shape}")
    b, _, h, w = x.shape
    cols = unfold(x, (kh, kw), stride, padding)
    oh = (h + 2 * padding[0] - kh) // stride[0] + 1
    ow = (w + 2 * padding[1] - kw) // stride[1] + 1
    wmat = reshape(weight, (oc, c_w * kh * kw))
    out = matmul(wmat, cols)  # (B, OC, OH*OW) via broadcasting
    if bias is not None:
        out = add(out, reshape(_coerce(bias), (oc, 1)))
    return reshape(out, (b, oc, oh, ow))


def maxpool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling; extents must divide evenly."""
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    kh, kw = kernel
    if h % kh or w % kw:
        raise DimensionError(f"pool kernel {kernel} does not divide input {h}x{w}")
    oh, ow = h // kh, w // kw
    windows = x.data.reshape(b, c, oh, kh, ow, kw).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, oh, ow, kh * kw)
    idx = windows.argmax(axis=-1)  # first maximum wins on ties
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(b, c, h, w),)

    return _emit(data, (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _emit(data, tuple(parts), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _emit(data, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _coerce(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)
    original = x.data.shape

    def vjp(g):
        return (g.reshape(original),)

    return _emit(data, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    x = _coerce(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape) * np.ones_like(x.data),)

    return _emit(data, (x,), vjp)


def cross_entropy(logits: Tensor, targets, position_weights=None) -> Tensor:
    """Weighted mean of per-position negative log likelihoods.

    logits: (N, k); targets: N integer class ids; position_weights: N
    non-negative weights (None means uniform). Returns
    sum_i w_i * (-log softmax(logits_i)[t_i]) / sum_i w_i.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects N x k logits, got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(
            f"target out of range [0, {k}): min {int(targets.min())}, max {int(targets.max())}"
        )
    if position_weights is None:
        weights = np.ones(n, dtype=logits.data.dtype)
    else:
        weights = np.asarray(
            position_weights.data if isinstance(position_weights, Tensor) else position_weights,
            dtype=logits.data.dtype,
        )
        if weights.shape != (n,):
            raise DimensionError(f"weights shape {weights.shape} != ({n},)")
        if (weights < 0).any():
            raise DegenerateWeightsError("position weights must be non-negative")
    wsum = weights.sum()
    if not wsum > 0:
        raise DegenerateWeightsError("position weights sum to zero")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), targets] - lse
    data = np.asarray(-(weights * logp).sum() / wsum, dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (g * (weights / wsum)[:, None] * p,)

    return _emit(data, (logits,), vjp)


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    f maps the given Tensors to a scalar Tensor. Inputs should be float64;
    each is marked requires_grad and perturbed elementwise in place.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(tape, out)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            fp = f(*inputs).item()
            flat[i] = original - eps
            fm = f(*inputs).item()
            flat[i] = original
            numeric[i] = (fp - fm) / (2.0 * eps)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        err = np.abs(analytic - numeric) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
