"""Dense tensors with a reverse-mode gradient tape.

Every primitive returns a new :class:`Tensor` whose ``_backward`` closure
pushes the upstream gradient into its parents.  Training runs in float32;
``precision(np.float64)`` switches newly created tensors to float64 for
oracle tests.
"""
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import ContractError, EmptyTapeError, ParameterError, ShapeError

LN_EPS = 1e-6

_state = {"dtype": np.float32, "grad": True}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype!r}")
    _state["dtype"] = dtype


@contextmanager
def precision(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


class Tensor:
    """An n-d float array that records how it was produced."""

    def __init__(self, data, requires_grad=False, _prev=(), _op=""):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = _prev
        self._op = _op
        self._backward = None

    @classmethod
    def _wrap(cls, data, parents, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._backward = None
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
        else:
            out.requires_grad = False
            out._prev = ()
        return out

    # -- basic properties --------------------------------------------------
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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data, (), "detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g

    # -- backward ----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise EmptyTapeError("loss is not connected to any tensor that requires grad")
        order = tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate buffers are not kept

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tape(loss):
    """Nodes reachable from ``loss`` that take part in differentiation, inputs first."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor._wrap(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))
        out._backward = _backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor._wrap(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(-g, b.shape))
        out._backward = _backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor._wrap(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))
        out._backward = _backward
    return out


def scale(a, c):
    c = float(c)
    out = Tensor._wrap(a.data * a.data.dtype.type(c), (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * g.dtype.type(c))
    return out


def matmul(a, b):
    """``a @ b`` for operands with ndim >= 2; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor._wrap(data, (a, b), "matmul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                if b.ndim == 2:
                    a._accum(g @ b.data.T)
                else:
                    a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                if b.ndim == 2:
                    k = a.shape[-1]
                    b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = _backward
    return out


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = Tensor._wrap(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: a._accum(np.transpose(g, inv))
    return out


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    out = Tensor._wrap(data, (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g.reshape(a.shape))
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: mismatched shapes {shapes}") from None
    out = Tensor._wrap(data, tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _backward(g):
            for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
                t._accum(piece)
        out._backward = _backward
    return out


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx):
    basic = _is_basic_index(idx)
    out = Tensor._wrap(a.data[idx], (a,), "getitem")
    if out.requires_grad:
        def _backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accum(full)
        out._backward = _backward
    return out


def _rowwise(a, name):
    if a.ndim == 0:
        raise ShapeError(f"{name}: needs at least 1-d input")
    return np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    y = _kernels.kernel("softmax_fwd")(_rowwise(a, "softmax")).reshape(a.shape)
    out = Tensor._wrap(y, (a,), "softmax")
    if out.requires_grad:
        def _backward(g):
            gx = _kernels.kernel("softmax_bwd")(y.reshape(-1, a.shape[-1]),
                                                np.ascontiguousarray(g).reshape(-1, a.shape[-1]))
            a._accum(gx.reshape(a.shape))
        out._backward = _backward
    return out


def log_softmax(a):
    y = _kernels.kernel("log_softmax_fwd")(_rowwise(a, "log_softmax")).reshape(a.shape)
    out = Tensor._wrap(y, (a,), "log_softmax")
    if out.requires_grad:
        def _backward(g):
            gx = _kernels.kernel("log_softmax_bwd")(y.reshape(-1, a.shape[-1]),
                                                    np.ascontiguousarray(g).reshape(-1, a.shape[-1]))
            a._accum(gx.reshape(a.shape))
        out._backward = _backward
    return out


def layer_norm(x, weight, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then apply ``weight``/``bias``."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs affine {weight.shape}/{bias.shape}")
    y, xhat, rstd = _kernels.kernel("layernorm_fwd")(_rowwise(x, "layer_norm"), weight.data,
                                                     bias.data, float(eps))
    out = Tensor._wrap(y.reshape(x.shape), (x, weight, bias), "layer_norm")
    if out.requires_grad:
        def _backward(g):
            dx, dw, db = _kernels.kernel("layernorm_bwd")(
                np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, weight.data)
            x._accum(dx.reshape(x.shape))
            weight._accum(dw)
            bias._accum(db)
        out._backward = _backward
    return out


def gelu(a):
    """Exact GeLU: x * Phi(x)."""
    x = np.ascontiguousarray(a.data)
    y, cdf = _kernels.kernel("gelu_fwd")(x)
    out = Tensor._wrap(y, (a,), "gelu")
    if out.requires_grad:
        out._backward = lambda g: a._accum(_kernels.kernel("gelu_bwd")(x, cdf, g))
    return out


def relu(a):
    mask = a.data > 0
    out = Tensor._wrap(a.data * mask, (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * mask)
    return out


def exp(a):
    y = np.exp(a.data)
    out = Tensor._wrap(y, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * y)
    return out


def log(a):
    out = Tensor._wrap(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g / a.data)
    return out


def sum_(a, axis=None, keepdims=False):
    out = Tensor._wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum")
    if out.requires_grad:
        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def mean(a, axis=None, keepdims=False):
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    out = Tensor._wrap(data, (a,), "mean")
    if out.requires_grad:
        n = a.data.size // max(data.size, 1)

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g / g.dtype.type(n), a.shape))
        out._backward = _backward
    return out


def im2col(x, k, stride=1, pad=0):
    """Unfold B x C x H x W into (B*OH*OW) x (C*k*k) patch rows (row order b, oy, ox)."""
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected B x C x H x W, got {x.shape}")
    H, W = x.shape[2:]
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"im2col: kernel {k} larger than padded input {x.shape}")
    cols = _kernels.kernel("im2col")(np.ascontiguousarray(x.data), k, stride, pad)
    out = Tensor._wrap(cols, (x,), "im2col")
    if out.requires_grad:
        shape = x.shape
        out._backward = lambda g: x._accum(
            _kernels.kernel("col2im")(np.ascontiguousarray(g), shape, k, stride, pad))
    return out


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def truncated_normal(shape, std, cutoff, rng):
    """Normal(0, std^2) samples restricted to [-cutoff*std, cutoff*std] by rejection."""
    if std <= 0 or cutoff <= 0:
        raise ParameterError(f"std and cutoff must be positive, got std={std}, cutoff={cutoff}")
    shape = tuple(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return (out * std).astype(_state["dtype"])


def init_truncated_normal(shape, std, cutoff, rng):
    return Tensor(truncated_normal(shape, std, cutoff, rng), requires_grad=True)
