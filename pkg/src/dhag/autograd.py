"""Minimal dense tensors with reverse-mode automatic differentiation.

Every value is a float64 numpy array. Operations record a closure that maps
the upstream gradient to one gradient per parent; :meth:`Tensor.backward`
replays those closures in reverse topological order.
"""

import contextlib
import math
import threading
import warnings

import numpy as np

from .exceptions import DimensionError, LabelError, NonFiniteError, StateError


COSINE_EPS = 1e-12
PROB_CLAMP = 1e-7

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors built by user code are leaves. Tensors returned by operations on
    grad-requiring inputs remember their parents and a backward rule.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every grad-requiring leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"backward root is not finite: {self.data!r}")
        if not self.requires_grad:
            raise StateError("root does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    # iterative DFS; recursion would overflow on long graphs
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _is_scalar_constant(value):
    return isinstance(value, (int, float, np.floating, np.integer))


def _binary_shapes(a, b, opname):
    """Equal shapes, or ``b`` is a trailing vector broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_rows(g, broadcast):
    if not broadcast:
        return g
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b):
    if _is_scalar_constant(b):
        c = float(b)
        return Tensor._result(a.data + c, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    bc = _binary_shapes(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, _reduce_rows(g, bc)))


def sub(a, b):
    if _is_scalar_constant(b):
        c = float(b)
        return Tensor._result(a.data - c, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    bc = _binary_shapes(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -_reduce_rows(g, bc)))


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if _is_scalar_constant(b):
        c = float(b)
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    bc = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, _reduce_rows(g * ad, bc)))


def div(a, b):
    if _is_scalar_constant(b):
        c = float(b)
        return Tensor._result(a.data / c, (a,), lambda g: (g / c,))
    a, b = as_tensor(a), as_tensor(b)
    bc = _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b), lambda g: (g / bd, _reduce_rows(-g * out / bd, bc)))


def matmul(a, b):
    """Matrix product of 2-D tensors, or a batched product of 3-D tensors."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise DimensionError(f"matmul: shape mismatch {ad.shape} @ {bd.shape}")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._result(ad @ bd, (a, b), backward)


def transpose(a):
    """Swap the last two axes."""
    return Tensor._result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    src = a.data.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def elementwise(op, a, b=None):
    """Dispatch by name: add, sub, mul, sigmoid, relu, tanh."""
    unary = {"sigmoid": sigmoid, "relu": relu, "tanh": tanh}
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in unary:
        return unary[op](as_tensor(a))
    if op in binary:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        return binary[op](as_tensor(a), b if _is_scalar_constant(b) else as_tensor(b))
    raise ValueError(f"unknown elementwise op {op!r}")


def sum(a, axis=None):
    src = a.data.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def take(a, index):
    """Slice ``a[index]`` along the first axis."""
    src = a.data.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return Tensor._result(a.data[index], (a,), backward)


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward)


def concat_channel(a, noise):
    """Append a column to ``a``; the appended column receives no gradient."""
    if a.ndim != 2:
        raise DimensionError(f"concat_channel expects a matrix, got {a.shape}")
    nd = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if nd.ndim == 1:
        nd = nd[:, None]
    if nd.shape[0] != a.shape[0]:
        raise DimensionError(f"concat_channel: {a.shape[0]} rows vs {nd.shape[0]} noise rows")
    d = a.shape[1]
    out = np.concatenate([a.data, nd], axis=1)
    return Tensor._result(out, (a,), lambda g: (g[:, :d],))


def row_l2_norm(a):
    """Euclidean norm along the last axis; the subgradient at a zero row is 0."""
    x = a.data
    norms = np.sqrt(np.sum(x * x, axis=-1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        return (x * scale[..., None],)

    return Tensor._result(norms, (a,), backward)


def cosine_sim(a, b):
    """a.b / (|a||b| + 1e-12); zero vectors give 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim expects equal-length vectors, got {a.shape}, {b.shape}")
    na, nb = row_l2_norm(a), row_l2_norm(b)
    if na.data == 0.0 or nb.data == 0.0:
        warnings.warn("cosine similarity with a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
    dot = sum(mul(a, b))
    return div(dot, add(mul(na, nb), COSINE_EPS))


def bce(p, y):
    """Elementwise binary cross-entropy with the probability clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("bce labels must be 0 or 1")
    p = as_tensor(p)
    if y.shape != p.shape:
        y = np.broadcast_to(y, p.shape)
    raw = p.data
    pc = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1.0 - PROB_CLAMP)
    out = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def backward(g):
        return (g * inside * (-y / pc + (1.0 - y) / (1.0 - pc)),)

    return Tensor._result(out, (p,), backward)


def grad_reverse(a):
    """Identity forward, negated gradient backward."""
    return Tensor._result(a.data, (a,), lambda g: (-g,))


def conv1d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (m, in_ch, len) with ``weight`` (out_ch, in_ch, width)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv1d: input {xd.shape} incompatible with kernels {wd.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv1d: stride must be >= 1 and padding >= 0")
    m, c, length = xd.shape
    width = wd.shape[2]
    padded_len = length + 2 * padding
    if padded_len < width:
        raise DimensionError(f"conv1d: kernel width {width} exceeds padded length {padded_len}")
    out_len = (padded_len - width) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    # windows[m, c, pos, k] = xp[m, c, pos*stride + k]
    idx = np.arange(out_len)[:, None] * stride + np.arange(width)[None, :]
    windows = xp[:, :, idx]
    out = np.einsum("mcpk,ock->mop", windows, wd) + bias.data[None, :, None]

    def backward(g):
        gw = np.einsum("mop,mcpk->ock", g, windows)
        gb = g.sum(axis=(0, 2))
        gwin = np.einsum("mop,ock->mcpk", g, wd)
        gxp = np.zeros_like(xp)
        for k in range(width):
            gxp[:, :, k : k + stride * (out_len - 1) + 1 : stride] += gwin[:, :, :, k]
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), backward)


def grad_check(f, x, h=1e-5):
    """Largest relative gap between analytic and central-difference gradients of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor. ``x`` is perturbed in place and restored.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    x.requires_grad = True
    x.grad = None
    root = f(x)
    if not np.isfinite(root.data).all():
        raise NonFiniteError("f(x) is not finite")
    if root.requires_grad:
        root.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near entry {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
