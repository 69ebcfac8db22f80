"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation executed while gradients are enabled is
appended to the active :class:`Graph`.  :func:`backward` walks that record in
exact reverse execution order and accumulates ``grad`` on every leaf tensor
that requires it.

Precision is fixed when a tensor is constructed (``dtype``); ops never mix
precisions.  Training runs in float32, verification in float64.
"""

import contextlib
import math

import numpy as np

from . import kernels

DEFAULT_EPS = 1e-5

_default_dtype = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised for misuse of the tape (non-scalar or detached loss)."""


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype)
        data = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Op:
    __slots__ = ("name", "out", "parents", "backward")

    def __init__(self, name, out, parents, backward):
        self.name = name
        self.out = out
        self.parents = parents
        self.backward = backward


class Graph:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.ops = []

    def __len__(self):
        return len(self.ops)

    def clear(self):
        for op in self.ops:
            op.out._op = None
        self.ops = []

    def contains(self, tensor):
        op = tensor._op
        return op is not None and any(o is op for o in self.ops)


_graph = Graph()
_grad_enabled = True
# op-name -> callable(grads) -> grads; test hook for negative controls
_adjoint_faults = {}


def current_graph():
    return _graph


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def fault_injection(op_name, corrupt):
    """Corrupt the adjoint of ``op_name`` inside the block (checker self-test)."""
    _adjoint_faults[op_name] = corrupt
    try:
        yield
    finally:
        _adjoint_faults.pop(op_name, None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def record(name, data, parents, backward):
    """Wrap ``data`` as the output of op ``name`` and put it on the tape.

    ``backward(grad)`` must return one gradient (or ``None``) per parent.
    This is the extension point for ops defined outside this module.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        op = _Op(name, out, tuple(parents), backward)
        out._op = op
        _graph.ops.append(op)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), backward)


def matmul(a, b):
    """Matrix product of ``a`` (..., k) and ``b`` (k, n)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


# below this many multiply-adds per matrix pair, einsum beats np.matmul's
# per-matrix dispatch (the point-wise attention works on 1 x d_k blocks)
_SMALL_BMM = 4096


def _batched(x, y):
    if x.shape[-2] * x.shape[-1] * y.shape[-1] <= _SMALL_BMM:
        return np.einsum("...ik,...kj->...ij", x, y)
    return np.matmul(x, y)


def bmm(a, b):
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(_batched(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_batched(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return record("bmm", _batched(ad, bd), (a, b), backward)


def transpose(a, axes):
    inverse = np.argsort(axes)
    return record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def linear(x, weight, bias=None, relu=False):
    """``x @ weight + bias`` as one tape entry, optionally followed by relu.

    The fused relu clamps the product in place and masks the incoming
    gradient, saving a separate elementwise pass and tape entry.
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    # stacked (..., k) @ (k, n) runs as many small products; one 2-D GEMM is much faster
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(*lead, wd.shape[1])
    if bias is not None:
        out += bias.data
    if relu:
        np.maximum(out, 0, out=out)

    def backward(g):
        if relu:
            # subgradient 0 at exactly 0
            g = g * (out > 0)
        g2 = g.reshape(-1, g.shape[-1])
        # exact zeros upstream (e.g. a softmax over one key) need no matmuls;
        # the first row settles the common nonzero case cheaply
        if not g2[:1].any() and not g2.any():
            gx = np.zeros_like(xd) if x.requires_grad else None
            gw = np.zeros_like(wd) if weight.requires_grad else None
            if bias is None:
                return gx, gw
            return gx, gw, (np.zeros_like(bias.data) if bias.requires_grad else None)
        gx = None
        if x.requires_grad:
            # a single output column is an outer product; BLAS handles k=1 poorly
            gx = g2 * wd[:, 0] if wd.shape[1] == 1 else g2 @ wd.T
            gx = gx.reshape(xd.shape)
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = np.ones(len(g2), dtype=g2.dtype) @ g2 if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("linear_relu" if relu else "linear", out, parents, backward)


def linear_cat(parts, weight, bias=None, relu=False):
    """``linear(concat(parts), weight, bias)`` without building the concatenation.

    Each part is (batch, k_i) or a single (1, k_i) row shared by the whole
    batch; a shared row contributes one product that is added like a bias.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("linear_cat: no inputs")
    widths = [p.shape[-1] for p in parts]
    if int(np.sum(widths)) != weight.shape[0]:
        raise DimensionError(f"linear_cat: input widths {widths} do not sum to weight rows {weight.shape[0]}")
    rows = [p.data.reshape(-1, k) for p, k in zip(parts, widths)]
    n = max(len(r) for r in rows)
    if any(len(r) not in (1, n) for r in rows):
        raise DimensionError(f"linear_cat: batch sizes {[len(r) for r in rows]} do not broadcast")
    full = [len(r) == n for r in rows]
    if not any(full):
        raise DimensionError("linear_cat: needs at least one batch input")
    edges = np.cumsum([0] + widths)
    wd = weight.data
    blocks = [wd[a:b] for a, b in zip(edges[:-1], edges[1:])]
    shared = np.zeros(wd.shape[1], dtype=wd.dtype) if bias is None else bias.data.copy()
    out = None
    for r, w, f in zip(rows, blocks, full):
        if not f:
            shared += r[0] @ w
        elif out is None:
            out = r @ w
        else:
            out += r @ w
    out += shared
    if relu:
        np.maximum(out, 0, out=out)

    def backward(g):
        if relu:
            g = g * (out > 0)
        gsum = np.ones(n, dtype=g.dtype) @ g if (bias is not None or not all(full)) else None
        grads = []
        for p, r, w, f in zip(parts, rows, blocks, full):
            if not p.requires_grad:
                grads.append(None)
            elif f:
                grads.append((g @ w.T).reshape(p.shape))
            else:
                grads.append((w @ gsum).reshape(p.shape))
        if weight.requires_grad:
            grads.append(np.concatenate([r.T @ g if f else np.outer(r[0], gsum)
                                         for r, f in zip(rows, full)], axis=0))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(gsum if bias.requires_grad else None)
        return tuple(grads)

    parents = (*parts, weight) if bias is None else (*parts, weight, bias)
    return record("linear_cat", out, parents, backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(sizes)):
            idx = [slice(None)] * ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(a, index):
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            # fancy indices may repeat
            np.add.at(full, index, g)
        return (full,)

    return record("slice", np.ascontiguousarray(a.data[index]), (a,), backward)


def reshape(a, shape):
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (materialized); backward sums."""
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {old} to {tuple(shape)}") from None
    return record("expand", np.ascontiguousarray(data), (a,), lambda g: (_unbroadcast(g, old),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return record("sum", out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a):
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def relu(a):
    out = np.maximum(a.data, 0)
    # subgradient 0 at exactly 0
    return record("relu", out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    if a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), backward)


def square_norm(a):
    """Sum of squares of all entries."""
    x = a.data
    return record("square_norm", np.asarray(np.sum(x * x), dtype=x.dtype), (a,), lambda g: (2.0 * g * x,))


def layernorm(x, gain, bias, eps=DEFAULT_EPS):
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layernorm needs at least 2 features, got {d}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    out, xhat, rstd = kernels.layernorm_forward(x2, gain.data, bias.data, eps)

    def backward(g):
        dx, dgain, dbias = kernels.layernorm_backward(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data
        )
        return dx.reshape(lead + (d,)), dgain, dbias

    return record("layernorm", out.reshape(lead + (d,)), (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss, retain_graph=False):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate additively into existing ``grad`` arrays.  The
    tape is cleared afterwards unless ``retain_graph`` is set.
    """
    global _graph
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    op = loss._op
    if op is None or not loss.requires_grad:
        raise GraphError("loss is detached from the graph")
    ops = _graph.ops
    # locate the producing op; it is almost always the last one recorded
    end = len(ops) - 1
    while end >= 0 and ops[end] is not op:
        end -= 1
    if end < 0:
        raise GraphError("loss was not produced on the live graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for i in range(end, -1, -1):
        node = ops[i]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        corrupt = _adjoint_faults.get(node.name)
        if corrupt is not None:
            pgrads = corrupt(pgrads)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._op is None:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    if not retain_graph:
        _graph.clear()


def clear_graph():
    _graph.clear()


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(f, params, step=1e-5, n_coords=None, rng=None, return_details=False):
    """Max relative error between analytic and central-difference gradients.

    ``f()`` must rebuild the graph and return a scalar tensor on each call.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  When
    ``n_coords`` is given, that many coordinates are sampled uniformly across
    all parameters; otherwise every coordinate is checked.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient_check requires float64 parameters")
        p.grad = None
    clear_graph()
    loss = f()
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    details = []
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = f().data.item()
            flat[j] = orig - step
            fm = f().data.item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if math.isnan(err):
                err = math.inf
            worst = max(worst, err)
            details.append((i, j, ana, num, err))
    for p in params:
        p.grad = None
    if return_details:
        return worst, details
    return worst
