"""Dense tensors with reverse-mode automatic differentiation.

Each differentiable op records its parents and a backward rule on the output
tensor.  :func:`backward` orders the recorded graph topologically (the tape),
walks it once in reverse, accumulates gradients into leaves, and then releases
the tape so a second backward over the same graph raises instead of silently
double-counting.
"""
import contextlib
import threading

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` (np.float32 or np.float64) inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("precision must be float32 or float64")
    prev = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_spent")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""
        self._spent = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{g})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf.  ``decay`` marks whether AdamW weight decay applies."""

    __slots__ = ("decay",)

    def __init__(self, data, decay=True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or default_dtype())


def _make(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    # mutual broadcasting (both operands expanded) is rejected
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} would both need expanding")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim == 0:
            return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
        b = Tensor(c)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), bw, "mul")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def gelu(a):
    x = a.data

    def bw(g):
        return (K.gelu_bwd(x, np.ascontiguousarray(g)),)

    return _make(K.gelu_fwd(x), (a,), bw, "gelu")


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=ax))

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), bw, "concat")


def slice_(a, idx):
    shape, dtype = a.shape, a.dtype
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(out, (a,), bw, "slice")


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def embedding_lookup(table, ids):
    """Rows of ``table`` (V, D) gathered by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding_lookup: ids outside [0, {v})")

    def bw(g):
        full = np.zeros((v, d), dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


# --------------------------------------------------------------------------
# linear algebra and normalisation
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # weight matrix shared across batch: one big GEMM
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a, axis=-1, causal=False):
    """Max-subtracted softmax.  ``causal`` masks keys after each query row.

    For a causal softmax over scores of shape (..., Tq, Tk) the last query is
    aligned with the last key, so query i may see keys 0..i + (Tk - Tq).
    """
    ax = axis % a.ndim
    if ax != a.ndim - 1:
        moved = transpose(a, _swap_last(a.ndim, ax))
        return transpose(softmax(moved, -1, causal), _swap_last(a.ndim, ax))
    shape = a.shape
    tq = shape[-2] if causal else 0
    y = K.softmax_fwd(_rows(a.data), tq)

    def bw(g):
        return (K.softmax_bwd(y, _rows(g)).reshape(shape),)

    return _make(y.reshape(shape), (a,), bw, "softmax")


def _swap_last(n, ax):
    axes = list(range(n))
    axes[ax], axes[-1] = axes[-1], axes[ax]
    return tuple(axes)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    shape = x.shape
    xr = _rows(x.data)
    y, mu, rstd = K.layernorm_fwd(xr, gain.data, bias.data, eps)

    def bw(g):
        dx, dg, db = K.layernorm_bwd(_rows(g), xr, mu, rstd, gain.data)
        return dx.reshape(shape), dg, db

    return _make(y.reshape(shape), (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over positions where ``mask == 1``.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` share the leading
    shape.  Positions with mask 0 may hold any target id, including padding.
    """
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    mask = np.ones(lead) if mask is None else np.asarray(mask)
    if mask.shape != lead:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs mask {mask.shape}")
    mask = mask.astype(logits.dtype).reshape(-1)
    count = float(mask.sum())
    if count <= 0:
        raise ContractError("cross_entropy: mask selects no supervised positions")
    tgt = np.where(mask > 0, targets.reshape(-1), 0)
    if tgt.min() < 0 or tgt.max() >= v:
        raise ShapeError(f"cross_entropy: target ids outside [0, {v})")
    lr = _rows(logits.data)
    loss, lse = K.xent_fwd(lr, tgt, mask)
    shape = logits.shape

    def bw(g):
        return (K.xent_bwd(lr, tgt, mask, lse, float(np.asarray(g).reshape(-1)[0]) / count).reshape(shape),)

    return _make(np.asarray(loss, dtype=logits.dtype).reshape(()), (logits,), bw, "cross_entropy")


def straight_through(hard, soft):
    """Forward value of ``hard`` with the gradient of ``soft``."""
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _make(np.asarray(hard, dtype=soft.dtype), (soft,), lambda g: (g,), "straight_through")


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._spent:
            raise ContractError("graph contains tensors whose backward already ran")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the graph itself is single-use.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._spent:
        raise ContractError("backward already ran on this graph; recompute the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._parents = ()
        node._backward = None
        node._spent = True
