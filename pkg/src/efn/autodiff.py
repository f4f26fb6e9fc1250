"""Array-valued reverse-mode automatic differentiation.

A :class:`Tape` records every operation applied to tracked tensors in
creation order, which is already a topological order.  ``backward`` walks
the records once in reverse, accumulating vector-Jacobian products.

Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from efn.special import lgamma_array, digamma_array


class NumericalError(FloatingPointError):
    """A tracked operation produced a non-finite value."""

    def __init__(self, message, node_id=None, op=None):
        super().__init__(message)
        self.node_id = node_id
        self.op = op


class UnsupportedPrimitiveError(TypeError):
    pass


class NondifferentiableError(ValueError):
    pass


# --------------------------------------------------------------------------
# flat parameter storage


@dataclass
class ParamVector:
    """Named, disjoint slices over one flat float64 vector."""

    data: np.ndarray
    segments: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        covered = 0
        for name, (offset, shape) in self.segments.items():
            if offset != covered:
                raise ValueError(f"segment {name!r} is not contiguous with the previous one")
            covered += int(np.prod(shape, dtype=np.int64))
        if covered != self.data.size:
            raise ValueError(f"segments cover {covered} values but vector has {self.data.size}")

    @classmethod
    def from_layout(cls, layout, data=None):
        """Build from an ordered ``[(name, shape), ...]`` layout."""
        segments = {}
        offset = 0
        for name, shape in layout:
            shape = tuple(int(s) for s in shape)
            segments[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64))
        if data is None:
            data = np.zeros(offset)
        return cls(np.asarray(data, dtype=np.float64), segments)

    @classmethod
    def from_arrays(cls, arrays):
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        layout = [(k, v.shape) for k, v in arrays.items()]
        flat = np.concatenate([v.ravel() for v in arrays.values()]) if arrays else np.zeros(0)
        return cls.from_layout(layout, flat)

    @property
    def layout(self):
        return [(name, shape) for name, (_, shape) in self.segments.items()]

    def __len__(self):
        return self.data.size

    def __getitem__(self, name):
        offset, shape = self.segments[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.data[offset:offset + size].reshape(shape)

    def with_data(self, data):
        return ParamVector(np.array(data, dtype=np.float64), dict(self.segments))

    def copy(self):
        return self.with_data(self.data.copy())


# --------------------------------------------------------------------------
# tape and tensors


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.leaves = []
        self.kinks = []
        self.check_finite = check_finite
        self.param_layout = None

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None, offset=0):
        """Register a trainable input and return its tracked tensor."""
        value = np.asarray(value, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(("leaf", (), (), None))
        self.leaves.append((node_id, name, offset, value.shape))
        return Tensor(value, self, node_id)

    def _add(self, op, ids, shapes, vjp):
        self.nodes.append((op, ids, shapes, vjp))
        return len(self.nodes) - 1


class Tensor:
    """A float64 array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("value", "tape", "id")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, node_id=-1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.id = node_id

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # ndarray (op) Tensor lands here; route plain arithmetic to the tape
        op = _UFUNC_PRIMITIVES.get(ufunc.__name__)
        if op is not None and method == "__call__" and not kwargs:
            return op(*inputs)
        raise UnsupportedPrimitiveError(
            f"numpy ufunc {ufunc.__name__!r} is not a supported primitive; use efn.autodiff ops"
        )

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitiveError(
            f"numpy function {func.__name__!r} is not a supported primitive"
        )

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f", node={self.id}" if self.tracked else ""
        return f"Tensor({self.value!r}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

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

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def record(op, value, parents, vjp):
    """Register a custom primitive.

    ``vjp(g)`` must return one gradient (or None) per parent, shaped like
    the parent or broadcastable back to it.
    """
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Tensor(value)
    value = np.asarray(value, dtype=np.float64)
    if tape.check_finite and not np.isfinite(value).all():
        node_id = len(tape.nodes)
        raise NumericalError(f"non-finite value produced by {op!r} at node {node_id}", node_id, op)
    ids = tuple(p.id if p.tape is tape else -1 for p in parents)
    shapes = tuple(p.value.shape for p in parents)
    return Tensor(value, tape, tape._add(op, ids, shapes, vjp))


# --------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a):
    a = as_tensor(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def reciprocal(a):
    a = as_tensor(a)
    out = 1.0 / a.value
    return record("reciprocal", out, (a,), lambda g: (-g * out * out,))


def div(a, b):
    return mul(a, reciprocal(b))


def square(a):
    a = as_tensor(a)
    av = a.value
    return record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d; use dot for vectors")

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return record("matmul", av @ bv, (a, b), vjp)


def dot(a, b):
    """Inner product over the last axis."""
    return tsum(mul(a, b), axis=-1)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return record("log", out, (a,), lambda g: (g / av,))


def softplus(a):
    """log(1 + e^a), computed without overflow."""
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return record("softplus", out, (a,), lambda g: (g * sig,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def tabs(a):
    a = as_tensor(a)
    av = a.value
    if a.tape is not None and np.any(av == 0.0):
        a.tape.kinks.append(len(a.tape.nodes))
    return record("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def lgamma(a):
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise ValueError("lgamma is only supported for positive arguments")
    return record("lgamma", lgamma_array(av), (a,), lambda g: (g * digamma_array(av),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return record("logsumexp", out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.value.shape
    return record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return record(
        "swapaxes", np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


def getitem(a, index):
    a = as_tensor(a)
    shape = a.value.shape

    advanced = _is_advanced(index)

    def vjp(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record("getitem", a.value[index], (a,), vjp)


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tuple(tensors), vjp)


def tri_logabsdet(a):
    """log|det| of a (batch of) triangular matrices: sum of log|diag|."""
    a = as_tensor(a)
    av = a.value
    diag = np.diagonal(av, axis1=-2, axis2=-1)
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(diag)).sum(axis=-1)

    def vjp(g):
        full = np.zeros(av.shape)
        idx = np.arange(av.shape[-1])
        full[..., idx, idx] = np.asarray(g)[..., None] / diag
        return (full,)

    return record("tri_logabsdet", out, (a,), vjp)


_UFUNC_PRIMITIVES = {
    "add": add, "subtract": sub, "multiply": mul, "true_divide": div, "divide": div,
    "matmul": matmul, "negative": neg,
}

SUPPORTED_PRIMITIVES = (
    "add", "sub", "neg", "mul", "reciprocal", "square", "matmul", "tanh", "exp", "log",
    "softplus", "sqrt", "abs", "lgamma", "sum", "logsumexp", "reshape", "swapaxes",
    "getitem", "concat", "tri_logabsdet",
)


# --------------------------------------------------------------------------
# driving a program


def forward_record(program: Callable, inputs: ParamVector, check_finite=True):
    """Evaluate ``program`` on tracked copies of the segments of ``inputs``.

    ``program`` receives a dict mapping segment names to tracked tensors and
    must build its result only from efn.autodiff primitives.

    Returns:
        (value, tape): the output tensor and the tape that produced it.
    """
    tape = Tape(check_finite=check_finite)
    tape.param_layout = inputs.layout
    params = {}
    for name, (offset, shape) in inputs.segments.items():
        params[name] = tape.leaf(inputs[name].copy(), name, offset)
    out = program(params)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitiveError(
            f"program returned {type(out).__name__}, expected a Tensor built from supported primitives"
        )
    tape.output = out
    return out, tape


def backward(tape: Tape, output: Tensor | None = None) -> ParamVector:
    """Gradient of the scalar ``output`` w.r.t. every leaf on ``tape``."""
    if output is None:
        output = getattr(tape, "output", None)
    if output is None or output.tape is not tape:
        raise ValueError("output tensor is not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {output.value.shape}")
    nodes = tape.nodes
    grads = [None] * len(nodes)
    grads[output.id] = np.ones_like(output.value)
    for i in range(output.id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        op, ids, shapes, vjp = nodes[i]
        if vjp is None:
            continue
        parent_grads = vjp(g)
        for pid, shape, pg in zip(ids, shapes, parent_grads):
            if pid < 0 or pg is None:
                continue
            pg = _unbroadcast(np.asarray(pg), shape)
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        grads[i] = None

    if tape.param_layout is not None:
        result = ParamVector.from_layout(tape.param_layout)
    else:
        result = ParamVector.from_layout([(name or str(nid), shp) for nid, name, _, shp in tape.leaves])
    leaf_grads = {}
    for nid, name, offset, shape in tape.leaves:
        # grads[nid] was cleared after being consumed; leaves have no vjp so it survives
        leaf_grads[name or str(nid)] = grads[nid]
    for name, (offset, shape) in result.segments.items():
        g = leaf_grads.get(name)
        if g is not None:
            size = int(np.prod(shape, dtype=np.int64))
            result.data[offset:offset + size] = np.asarray(g).ravel()
    return result


def value_and_grad(program, inputs: ParamVector):
    out, tape = forward_record(program, inputs)
    return float(out.value), backward(tape, out)


def finite_diff_check(program, inputs: ParamVector, step=1e-5):
    """Max relative error between tape gradients and central differences.

    Raises:
        NondifferentiableError: the program evaluated abs at exactly zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out, tape = forward_record(program, inputs)
    if tape.kinks:
        raise NondifferentiableError(f"abs evaluated at 0 (node {tape.kinks[0]}); gradient undefined")
    g_ad = backward(tape, out).data

    def f(x):
        val, _ = forward_record(program, inputs.with_data(x), check_finite=False)
        return float(val.value)

    x0 = inputs.data
    g_fd = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        g_fd[i] = (f(xp) - f(xm)) / (2.0 * step)
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8)))
