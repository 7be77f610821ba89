"""Reverse-mode automatic differentiation on a replayable tape.

Every differentiable computation in this package is recorded on a
:class:`Tape`: a topologically ordered list of nodes, each holding its
operation kind, operand node ids, cached forward value, and any static
parameters.  Values are float64 numpy arrays in row-major order, and all
operations are deterministic, so re-executing a tape reproduces its
cached values bit for bit (see :meth:`Tape.replay`).

Conventions, fixed here so numerical results are reproducible:

* subgradient of ``relu`` at 0 is 0;
* ``minimum`` breaks ties in favor of its first operand;
* ``absdiff`` has subgradient 0 where the operands are equal;
* binary elementwise ops broadcast only when one operand's shape is a
  trailing suffix of the other's (leading batch dimensions); general
  numpy broadcasting (size-1 stretching) is rejected;
* ``matmul`` is strict 2-D;
* everything is float64; there is no fusion and no device placement.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "Tape",
    "forward",
    "backward",
    "grad_check",
    "as_tensor",
]

# A Tensor is a C-contiguous float64 numpy array; shape () is a scalar.
Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation."""


def as_tensor(x) -> Tensor:
    """Coerce ``x`` to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _suffix_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    """Output shape for an elementwise binary op under the suffix rule.

    Shapes must be identical, or the smaller shape must equal a trailing
    suffix of the larger (the smaller operand is then repeated over the
    leading dimensions).  Anything else is rejected.
    """
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not match under the "
                     "suffix broadcast rule")


def _reduce_to(grad: Tensor, shape: tuple) -> Tensor:
    """Sum a gradient over the leading axes broadcast added."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


class _Node:
    __slots__ = ("op", "inputs", "value", "params", "requires_grad")

    def __init__(self, op, inputs, value, params, requires_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.params = params
        self.requires_grad = requires_grad


class Tape:
    """Append-only record of a computation, in topological order.

    Nodes are referred to by integer id (their index).  Leaves are
    created with :meth:`leaf` (differentiable) or :meth:`constant`;
    every other node is appended by :meth:`apply` with its forward value
    computed eagerly and cached.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    # -- construction -------------------------------------------------

    def leaf(self, value, requires_grad: bool = True) -> int:
        """Record an input array; differentiable unless told otherwise."""
        v = as_tensor(value)
        self.nodes.append(_Node("leaf", (), v, None, requires_grad))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        """Record a non-differentiable input array."""
        return self.leaf(value, requires_grad=False)

    def apply(self, op: str, *inputs: int, **params) -> int:
        """Apply a primitive to existing nodes and record the result."""
        fn = _FORWARD.get(op)
        if fn is None:
            raise ValueError(f"unknown op kind: {op!r}")
        vals = [self.nodes[i].value for i in inputs]
        out = fn(vals, params)
        rg = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(_Node(op, inputs, out, params or None, rg))
        return len(self.nodes) - 1

    # -- access -------------------------------------------------------

    def value(self, node: int) -> Tensor:
        return self.nodes[node].value

    def __len__(self) -> int:
        return len(self.nodes)

    # -- convenience wrappers (thin sugar over apply) -------------------

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def minimum(self, a, b):
        return self.apply("minimum", a, b)

    def relu(self, a):
        return self.apply("relu", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def softmax(self, a, axis: int):
        return self.apply("softmax", a, axis=axis)

    def sum(self, a, axis=None):
        return self.apply("sum", a, axis=axis)

    def mean(self, a, axis=None):
        return self.apply("mean", a, axis=axis)

    def scale(self, a, factor: float):
        return self.apply("scale", a, factor=float(factor))

    def absdiff(self, a, b):
        return self.apply("absdiff", a, b)

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(shape))

    def slice(self, a, axis: int, start: int, stop: int):
        return self.apply("slice", a, axis=axis, start=start, stop=stop)

    def index(self, a, axis: int, i: int):
        return self.apply("index", a, axis=axis, i=i)

    # -- replay ---------------------------------------------------------

    def replay(self) -> list[Tensor]:
        """Re-execute every recorded op from the leaf values.

        Returns the recomputed value list; with deterministic primitives
        it is bit-identical to the cached values.
        """
        vals: list[Tensor] = []
        for node in self.nodes:
            if node.op == "leaf":
                vals.append(node.value)
            else:
                fn = _FORWARD[node.op]
                vals.append(fn([vals[i] for i in node.inputs],
                               node.params or {}))
        return vals


def forward(tape: Tape, op_kind: str, operands: Sequence[int], **params) -> int:
    """Record ``op_kind`` applied to ``operands`` on ``tape``; return node id."""
    return tape.apply(op_kind, *operands, **params)


def backward(tape: Tape, output: int) -> dict[int, Tensor]:
    """Gradient of a scalar output with respect to every differentiable leaf.

    Walks the tape in reverse topological order accumulating adjoints.
    Returns ``{leaf id: gradient array}`` covering every leaf created
    with ``requires_grad=True`` (zeros for leaves the output does not
    depend on).  Raises ``ValueError`` if the output is not a scalar.
    """
    nodes = tape.nodes
    out_val = nodes[output].value
    if out_val.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape "
                         f"{out_val.shape}")
    grads: list[Tensor | None] = [None] * len(nodes)
    grads[output] = np.ones_like(out_val)
    for i in range(output, -1, -1):
        node = nodes[i]
        g = grads[i]
        if g is None or node.op == "leaf" or not node.requires_grad:
            continue
        bfn = _BACKWARD[node.op]
        in_vals = [nodes[j].value for j in node.inputs]
        in_grads = bfn(g, node.value, in_vals, node.params or {})
        for j, ig in zip(node.inputs, in_grads):
            if ig is None or not nodes[j].requires_grad:
                continue
            if grads[j] is None:
                grads[j] = ig
            else:
                grads[j] = grads[j] + ig
        grads[i] = None  # free memory as we go
    result = {}
    for i, node in enumerate(nodes):
        if node.op == "leaf" and node.requires_grad:
            g = grads[i]
            result[i] = np.zeros_like(node.value) if g is None else g
    return result


def grad_check(f: Callable[[Tape, list[int]], int],
               point: Sequence,
               step: float = 1e-6) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` receives a tape and the leaf ids for ``point`` (a list of
    arrays) and must return the id of a scalar output built from the
    primitives in this module.  The point must avoid subgradient kinks.
    Returns the maximum over all coordinates of
    ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    arrays = [as_tensor(p) for p in point]

    def run(values):
        tape = Tape()
        ids = [tape.leaf(v) for v in values]
        out = f(tape, ids)
        return tape, ids, out

    tape, ids, out = run(arrays)
    gmap = backward(tape, out)
    worst = 0.0
    for k, base in enumerate(arrays):
        g_ad = gmap[ids[k]]
        flat = base.reshape(-1)
        for idx in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[k].reshape(-1)[idx] = flat[idx] + step
            hi = float(_t3(run(bumped)))
            bumped[k].reshape(-1)[idx] = flat[idx] - step
            lo = float(_t3(run(bumped)))
            g_fd = (hi - lo) / (2.0 * step)
            g = float(g_ad.reshape(-1)[idx])
            err = abs(g - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


def _t3(triple):
    tape, _, out = triple
    return tape.value(out)


# -- primitive forward implementations ---------------------------------

def _f_matmul(vals, params):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} "
                         f"and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and "
                         f"{b.shape} disagree")
    return a @ b


def _f_add(vals, params):
    a, b = vals
    _suffix_broadcast(a, b, "add")
    return a + b


def _f_sub(vals, params):
    a, b = vals
    _suffix_broadcast(a, b, "sub")
    return a - b


def _f_mul(vals, params):
    a, b = vals
    _suffix_broadcast(a, b, "mul")
    return a * b


def _f_minimum(vals, params):
    a, b = vals
    _suffix_broadcast(a, b, "minimum")
    return np.minimum(a, b)


def _f_relu(vals, params):
    return np.maximum(vals[0], 0.0)


def _f_tanh(vals, params):
    return np.tanh(vals[0])


def _f_sigmoid(vals, params):
    x = vals[0]
    # Evaluate from the side that cannot overflow exp().
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _f_softmax(vals, params):
    x = vals[0]
    axis = params["axis"]
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _f_sum(vals, params):
    axis = params.get("axis")
    return np.asarray(vals[0].sum(axis=axis))


def _f_mean(vals, params):
    axis = params.get("axis")
    return np.asarray(vals[0].mean(axis=axis))


def _f_scale(vals, params):
    return vals[0] * params["factor"]


def _f_absdiff(vals, params):
    a, b = vals
    _suffix_broadcast(a, b, "absdiff")
    return np.abs(a - b)


def _f_reshape(vals, params):
    return np.ascontiguousarray(vals[0]).reshape(params["shape"])


def _f_slice(vals, params):
    x = vals[0]
    axis, start, stop = params["axis"], params["start"], params["stop"]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    return x[tuple(sl)]


def _f_index(vals, params):
    x = vals[0]
    sl = [slice(None)] * x.ndim
    sl[params["axis"]] = params["i"]
    return x[tuple(sl)]


_FORWARD = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "minimum": _f_minimum,
    "relu": _f_relu,
    "tanh": _f_tanh,
    "sigmoid": _f_sigmoid,
    "softmax": _f_softmax,
    "sum": _f_sum,
    "mean": _f_mean,
    "scale": _f_scale,
    "absdiff": _f_absdiff,
    "reshape": _f_reshape,
    "slice": _f_slice,
    "index": _f_index,
}


# -- primitive backward implementations --------------------------------
# Each returns one gradient per input (None where not differentiable).

def _b_matmul(g, out, vals, params):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _b_add(g, out, vals, params):
    a, b = vals
    return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]


def _b_sub(g, out, vals, params):
    a, b = vals
    return [_reduce_to(g, a.shape), _reduce_to(-g, b.shape)]


def _b_mul(g, out, vals, params):
    a, b = vals
    return [_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)]


def _b_minimum(g, out, vals, params):
    a, b = vals
    take_a = a <= b  # ties go to the first operand
    ga = np.where(take_a, g, 0.0)
    gb = np.where(take_a, 0.0, g)
    return [_reduce_to(ga, a.shape), _reduce_to(gb, b.shape)]


def _b_relu(g, out, vals, params):
    # Subgradient at the kink is 0: strict inequality.
    return [g * (vals[0] > 0.0)]


def _b_tanh(g, out, vals, params):
    return [g * (1.0 - out * out)]


def _b_sigmoid(g, out, vals, params):
    return [g * out * (1.0 - out)]


def _b_softmax(g, out, vals, params):
    axis = params["axis"]
    inner = (g * out).sum(axis=axis, keepdims=True)
    return [out * (g - inner)]


def _b_sum(g, out, vals, params):
    x = vals[0]
    axis = params.get("axis")
    if axis is None:
        return [np.broadcast_to(g, x.shape).copy()]
    return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]


def _b_mean(g, out, vals, params):
    x = vals[0]
    axis = params.get("axis")
    if axis is None:
        scale = 1.0 / x.size
        return [np.broadcast_to(g * scale, x.shape).copy()]
    scale = 1.0 / x.shape[axis]
    return [np.broadcast_to(np.expand_dims(g * scale, axis), x.shape).copy()]


def _b_scale(g, out, vals, params):
    return [g * params["factor"]]


def _b_absdiff(g, out, vals, params):
    a, b = vals
    s = np.sign(a - b)  # 0 where equal: subgradient 0 at the kink
    return [_reduce_to(g * s, a.shape), _reduce_to(-g * s, b.shape)]


def _b_reshape(g, out, vals, params):
    return [g.reshape(vals[0].shape)]


def _b_slice(g, out, vals, params):
    x = vals[0]
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[params["axis"]] = slice(params["start"], params["stop"])
    gx[tuple(sl)] = g
    return [gx]


def _b_index(g, out, vals, params):
    x = vals[0]
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[params["axis"]] = params["i"]
    gx[tuple(sl)] = g
    return [gx]


_BACKWARD = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "minimum": _b_minimum,
    "relu": _b_relu,
    "tanh": _b_tanh,
    "sigmoid": _b_sigmoid,
    "softmax": _b_softmax,
    "sum": _b_sum,
    "mean": _b_mean,
    "scale": _b_scale,
    "absdiff": _b_absdiff,
    "reshape": _b_reshape,
    "slice": _b_slice,
    "index": _b_index,
}
