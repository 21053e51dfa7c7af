"""Minimal dense reverse-mode automatic differentiation on numpy float64 arrays.

Graphs are recorded dynamically: every operation on a :class:`Tensor` that
requires a gradient stores its parents and a vector-Jacobian product (VJP).
VJPs are themselves written with tensor operations, so calling :func:`grad`
with ``create_graph=True`` yields gradients that can be differentiated again.
That single extra level is what differentiating through unrolled inner
gradient steps needs.

Ops that can turn finite inputs into NaN/Inf (exp, log, power, div) check
their results, as do :func:`grad` and the evaluation helpers on the values
they return. ``STRICT_FINITE = True`` extends the check to every operation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteValue, NonScalarOutput, ShapeMismatch

MASK_VALUE = -1e9
STRICT_FINITE = False

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """An immutable float64 array plus (optionally) the record of how it was made."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    # one reduction instead of a boolean temporary; NaN/Inf always survive a sum
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NonFiniteValue(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: tuple, vjp, op: str, risky: bool = False) -> Tensor:
    if risky or STRICT_FINITE:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------- broadcasting


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    if x.shape == tuple(shape):
        return x
    nlead = x.ndim - len(shape)
    axes = tuple(range(nlead)) + tuple(
        i + nlead for i, s in enumerate(shape) if s == 1 and x.shape[i + nlead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if nlead:
        data = data.reshape(data.shape[nlead:])
    src_shape = x.shape

    def vjp(g, out):
        return (broadcast_to(g, src_shape),)

    return _make(data, (x,), vjp, "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    if x.shape == tuple(shape):
        return x
    src_shape = x.shape

    def vjp(g, out):
        return (sum_to(g, src_shape),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), vjp, "broadcast_to")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(mul(g, div(out, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div", risky=True)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, out: (neg(g),), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g, out):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    with np.errstate(all="ignore"):
        data = a.data**p
    return _make(data, (a,), vjp, "power", risky=True)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), lambda g, out: (mul(g, out),), "exp", risky=True)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g, out: (div(g, a),), "log", risky=True)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def vjp(g, out):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _make(data, (a,), vjp, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, out):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _make(np.tanh(a.data), (a,), vjp, "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g, out: (mul(g, mask),), "relu")


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g, out: (mul(g, sign),), "abs")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape
    data = a.data.reshape(shape)
    if data.shape == src_shape:
        return a
    return _make(data, (a,), lambda g, out: (reshape(g, src_shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, out: (transpose(g, inv),), "transpose")


def _is_basic(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in index)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    elif data.base is not None:
        data = data.copy()

    def vjp(g, out):
        return (scatter(g, src_shape, index),)

    return _make(data, (a,), vjp, "getitem")


def scatter(a, shape: tuple, index) -> Tensor:
    """zeros(shape) with ``a`` accumulated at ``index`` (adjoint of getitem)."""
    a = as_tensor(a)
    data = np.zeros(shape)
    if _is_basic(index):
        data[index] += a.data
    else:
        np.add.at(data, index, a.data)

    def vjp(g, out):
        return (getitem(g, index),)

    return _make(data, (a,), vjp, "scatter")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, out):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(data, tensors, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    shape = a.shape[:-2] + (a.shape[-2] + 2 * pad, a.shape[-1] + 2 * pad)
    index = (Ellipsis, slice(pad, pad + a.shape[-2]), slice(pad, pad + a.shape[-1]))
    return scatter(a, shape, index)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}") from exc

    def vjp(g, out):
        ga = sum_to(matmul(g, b.swapaxes(-1, -2)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(a.swapaxes(-1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out):
        inner = tsum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _make(data, (a,), vjp, "softmax")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    y = mul(xc, power(add(var, eps), -0.5))
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis.

    ``weight`` is [..., d_in, d_out] whose leading axes (possibly none) match
    the leading axes of ``x``; everything in between is flattened so each
    leading slice is a single matrix product. ``bias`` is [..., 1, d_out].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    lead, (d_in, d_out) = weight.shape[:-2], weight.shape[-2:]
    if x.shape[:len(lead)] != lead or x.shape[-1] != d_in:
        raise ShapeMismatch(f"linear {x.shape} with weight {weight.shape}")
    y = matmul(reshape(x, lead + (-1, d_in)), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, x.shape[:-1] + (d_out,))


def _im2col_index(channels: int, height: int, width: int, k: int):
    """Gather indices mapping a padded [C, H+k-1, W+k-1] grid to [H*W, C*k*k] patches."""
    rows = np.arange(height)[:, None, None, None, None]
    cols = np.arange(width)[None, :, None, None, None]
    ch = np.arange(channels)[None, None, :, None, None]
    di = np.arange(k)[None, None, None, :, None]
    dj = np.arange(k)[None, None, None, None, :]
    shape = (height, width, channels, k, k)
    ci = np.broadcast_to(ch, shape).reshape(height * width, channels * k * k)
    ri = np.broadcast_to(rows + di, shape).reshape(height * width, channels * k * k)
    cj = np.broadcast_to(cols + dj, shape).reshape(height * width, channels * k * k)
    return ci, ri, cj


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' 2-D convolution (cross-correlation) with zero padding.

    x: [..., C_in, H, W]; weight: [lead..., C_out, C_in, k, k] where ``lead``
    matches the first axes of x (one filter bank per leading slice); bias:
    [lead..., C_out]. Returns [..., H*W, C_out] with cells in row-major order,
    the token layout the spatial encoder consumes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    c_in, h, w = x.shape[-3:]
    lead = weight.shape[:-4]
    c_out, c_w, k, k2 = weight.shape[-4:]
    if c_w != c_in or k != k2 or k % 2 != 1 or x.shape[:len(lead)] != lead:
        raise ShapeMismatch(f"conv2d input {x.shape} weight {weight.shape}")
    xp = pad2d(x, k // 2)
    ci, ri, cj = _im2col_index(c_in, h, w, k)
    patches = getitem(xp, (Ellipsis, ci, ri, cj))  # [..., H*W, C*k*k]
    wmat = reshape(weight, lead + (c_out, c_in * k * k)).swapaxes(-1, -2)
    b = None if bias is None else reshape(bias, lead + (1, c_out))
    return linear(patches, wmat, b)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask letting position i attend to positions <= i."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def attention(q, k, v, mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is an additive array (0 allowed, MASK_VALUE disallowed) broadcast
    against the [..., Lq, Lk] logits.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention q{q.shape} k{k.shape} v{v.shape}")
    logits = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        logits = add(logits, mask)
    return matmul(softmax(logits, axis=-1), v)


# ---------------------------------------------------------------- differentiation


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list:
    """Reverse-mode gradients of ``output`` with respect to each of ``inputs``.

    Without ``grad_output`` the output must be a scalar. Inputs the output does
    not depend on get zero gradients. With ``create_graph`` the returned
    tensors are themselves differentiable.
    """
    if grad_output is None:
        if output.size != 1:
            raise NonScalarOutput(f"output has shape {output.shape}")
        grad_output = np.ones(output.shape)
    grad_output = as_tensor(grad_output)
    wanted = {id(t) for t in inputs}
    grads: dict = {}
    if output.requires_grad:
        grads[id(output)] = grad_output
        with set_grad_enabled(create_graph):
            for node in reversed(_toposort(output)):
                key = id(node)
                g = grads.get(key) if key in wanted else grads.pop(key, None)
                if g is None or node._vjp is None:
                    continue
                for parent, pg in zip(node._parents, node._vjp(g, node)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pk = id(parent)
                    grads[pk] = add(grads[pk], pg) if pk in grads else pg
    elif id(output) in wanted:
        grads[id(output)] = grad_output
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        else:
            _check_finite(g.data, "grad")
        out.append(g)
    return out


def evaluate(fn: Callable[[Mapping[str, Tensor]], Tensor],
             bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Forward value of ``fn`` at ``bindings`` (no graph recorded)."""
    with no_grad():
        out = fn({k: Tensor(v) for k, v in bindings.items()}).data.copy()
    _check_finite(out, "evaluate")
    return out


def value_and_grad(fn: Callable[[Mapping[str, Tensor]], Tensor],
                   bindings: Mapping[str, np.ndarray]) -> tuple:
    """Scalar value of ``fn`` and a name -> gradient map for every binding."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in bindings.items()}
    with set_grad_enabled(True):
        out = fn(leaves)
    if out.size != 1:
        raise NonScalarOutput(f"output has shape {out.shape}")
    _check_finite(out.data, "value_and_grad")
    names = list(leaves)
    gs = grad(out, [leaves[k] for k in names])
    return float(out.data), {k: g.data for k, g in zip(names, gs)}


def numeric_grad(fn: Callable[[Mapping[str, Tensor]], Tensor],
                 bindings: Mapping[str, np.ndarray], step: float = 1e-5,
                 names: Iterable[str] | None = None) -> dict:
    """Central finite differences of a scalar ``fn``; the reference for gradient checks."""
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    result = {}
    for name in names or base:
        arr = base[name]
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            fp = float(evaluate(fn, base))
            arr[i] = orig - step
            fm = float(evaluate(fn, base))
            arr[i] = orig
            g[i] = (fp - fm) / (2 * step)
        result[name] = g
    return result


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maximized."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
