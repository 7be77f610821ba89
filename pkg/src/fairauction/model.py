"""Allocation and payment networks with feasibility and IR built in.

An :class:`AuctionModel` holds two disjoint feedforward networks over the
flattened bid matrix.  The allocation head ends in softmaxes with a dummy
slot so no item is overallocated (and, for unit-demand bidders, no agent
overfilled); the payment head emits a fraction in [0,1] that multiplies
the bidder's allocated value, which makes truthful participation
individually rational for any weights.

Bidder types:

* ``additive``: for each item, a softmax over n+1 logits (agents plus a
  dummy "unallocated" slot); the dummy mass is discarded.
* ``unit-demand``: elementwise minimum of that item-wise softmax and an
  agent-wise softmax over m+1 slots per agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .diffcore import Tape, as_tensor

__all__ = [
    "AuctionModel",
    "PaymentVector",
    "ModelNodes",
    "payment_amounts",
    "utilities",
    "utility_nodes",
    "check_allocation",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "fairauction-v1"

BIDDER_TYPES = ("additive", "unit-demand")


class PaymentVector(NamedTuple):
    fraction: np.ndarray  # p-tilde, sigmoid output in [0,1]
    amount: np.ndarray    # fraction times allocated value


class ModelNodes(NamedTuple):
    """Tape node ids for one forward pass over a batch of bids."""
    z: int        # (batch, n, m) allocation
    fraction: int  # (batch, n) payment fractions
    payment: int   # (batch, n) payments, fraction * sum_j z*bids


@dataclass
class AuctionModel:
    """Weights plus topology; immutable during inference."""

    bidder_type: str
    n: int
    m: int
    hidden_layers: int
    hidden_width: int = 100
    alloc_weights: list = field(default_factory=list)  # [W0, b0, W1, b1, ...]
    pay_weights: list = field(default_factory=list)

    def validate(self):
        if self.bidder_type not in BIDDER_TYPES:
            raise ValueError(f"bidder_type must be one of {BIDDER_TYPES}, "
                             f"got {self.bidder_type!r}")
        if self.n < 1 or self.m < 1:
            raise ValueError("need at least one agent and one item")
        if self.hidden_layers < 1:
            raise ValueError("need at least one hidden layer")
        for name, arr in self.weight_arrays():
            want = self._expected_shape(name)
            if arr.shape != want:
                raise ValueError(f"weight {name} has shape {arr.shape}, "
                                 f"expected {want}")

    # -- topology -------------------------------------------------------

    def alloc_output_size(self) -> int:
        if self.bidder_type == "additive":
            return (self.n + 1) * self.m
        return (self.n + 1) * self.m + self.n * (self.m + 1)

    def _layer_dims(self, out_size: int) -> list:
        dims = [self.n * self.m]
        dims += [self.hidden_width] * self.hidden_layers
        dims.append(out_size)
        return dims

    def _expected_shape(self, name: str) -> tuple:
        head, kind, idx = name.split("_")[0], name.split("_")[1][0], int(name.split("_")[1][1:])
        out = self.alloc_output_size() if head == "alloc" else self.n
        dims = self._layer_dims(out)
        if kind == "w":
            return (dims[idx], dims[idx + 1])
        return (dims[idx + 1],)

    def weight_arrays(self) -> list:
        """(name, array) pairs in canonical checkpoint order."""
        out = []
        for head, ws in (("alloc", self.alloc_weights), ("pay", self.pay_weights)):
            for i in range(0, len(ws), 2):
                out.append((f"{head}_w{i // 2}", ws[i]))
                out.append((f"{head}_b{i // 2}", ws[i + 1]))
        return out

    def replace_weights(self, arrays: list) -> None:
        """Install new weight arrays, in weight_arrays() order."""
        k = len(self.alloc_weights)
        self.alloc_weights = list(arrays[:k])
        self.pay_weights = list(arrays[k:])

    @classmethod
    def init(cls, bidder_type: str, n: int, m: int, hidden_layers: int,
             rng: np.random.Generator, hidden_width: int = 100) -> "AuctionModel":
        """Seeded init: W ~ U(-1,1)/sqrt(fan_in), biases zero."""
        model = cls(bidder_type, n, m, hidden_layers, hidden_width)
        model.validate()

        def make(dims):
            ws = []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                scale = 1.0 / np.sqrt(fan_in)
                ws.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
                ws.append(np.zeros(fan_out))
            return ws

        model.alloc_weights = make(model._layer_dims(model.alloc_output_size()))
        model.pay_weights = make(model._layer_dims(model.n))
        return model

    # -- tape forward -----------------------------------------------------

    def register_weights(self, tape: Tape, requires_grad: bool = False) -> list:
        """Put every weight array on the tape; ids in weight_arrays() order."""
        return [tape.leaf(arr, requires_grad=requires_grad)
                for _, arr in self.weight_arrays()]

    def forward_nodes(self, tape: Tape, bids: int,
                      weight_nodes: list | None = None) -> ModelNodes:
        """Record the full forward pass for a (batch, n, m) bid node."""
        bshape = tape.value(bids).shape
        if len(bshape) != 3 or bshape[1:] != (self.n, self.m):
            raise ValueError(f"bids shape {bshape} does not match model "
                             f"(batch, {self.n}, {self.m})")
        batch = bshape[0]
        if weight_nodes is None:
            weight_nodes = self.register_weights(tape)
        k = len(self.alloc_weights)
        alloc_nodes, pay_nodes = weight_nodes[:k], weight_nodes[k:]

        x = tape.reshape(bids, (batch, self.n * self.m))

        def stack(h, nodes):
            last = len(nodes) // 2 - 1
            for i in range(0, len(nodes), 2):
                h = tape.add(tape.matmul(h, nodes[i]), nodes[i + 1])
                if i // 2 != last:
                    h = tape.tanh(h)
            return h

        logits = stack(x, alloc_nodes)
        if self.bidder_type == "additive":
            grid = tape.reshape(logits, (batch, self.n + 1, self.m))
            soft = tape.softmax(grid, axis=1)
            z = tape.slice(soft, axis=1, start=0, stop=self.n)
        else:
            cut = (self.n + 1) * self.m
            itm = tape.reshape(tape.slice(logits, 1, 0, cut),
                               (batch, self.n + 1, self.m))
            itm = tape.slice(tape.softmax(itm, axis=1), 1, 0, self.n)
            agt = tape.reshape(tape.slice(logits, 1, cut, cut + self.n * (self.m + 1)),
                               (batch, self.n, self.m + 1))
            agt = tape.slice(tape.softmax(agt, axis=2), 2, 0, self.m)
            z = tape.minimum(itm, agt)

        frac = tape.sigmoid(stack(x, pay_nodes))
        spend = tape.sum(tape.mul(z, bids), axis=2)
        pay = tape.mul(frac, spend)
        return ModelNodes(z=z, fraction=frac, payment=pay)

    # -- numpy-facing inference -------------------------------------------

    def allocate(self, bids) -> np.ndarray:
        """Allocation matrix for one bid profile (n, m) or a batch."""
        b, single = _lift(bids, self.n, self.m)
        tape = Tape()
        nodes = self.forward_nodes(tape, tape.constant(b))
        z = tape.value(nodes.z)
        return z[0] if single else z

    def payments(self, bids, alloc, valuations=None) -> PaymentVector:
        """Payment fractions and amounts; valuations default to the bids."""
        b, single = _lift(bids, self.n, self.m)
        v = b if valuations is None else _lift(valuations, self.n, self.m)[0]
        z, _ = _lift3(alloc, self.n, self.m)
        tape = Tape()
        nodes = self.forward_nodes(tape, tape.constant(b))
        frac = tape.value(nodes.fraction)
        amount = payment_amounts(frac, z, v)
        if single:
            return PaymentVector(frac[0], amount[0])
        return PaymentVector(frac, amount)


def payment_amounts(fraction, alloc, valuations) -> np.ndarray:
    """p_i = fraction_i * sum_j z_ij v_ij, batched over leading dims."""
    f = as_tensor(fraction)
    z = as_tensor(alloc)
    v = as_tensor(valuations)
    return f * (z * v).sum(axis=-1)


def utilities(valuations, alloc, payments) -> np.ndarray:
    """u_i = sum_j v_ij z_ij - p_i, batched over any leading dims."""
    v = as_tensor(valuations)
    z = as_tensor(alloc)
    p = as_tensor(payments)
    if v.shape != z.shape:
        raise ValueError(f"valuations shape {v.shape} != allocation shape "
                         f"{z.shape}")
    return (v * z).sum(axis=-1) - p


def utility_nodes(tape: Tape, nodes: ModelNodes, valuations: int) -> int:
    """Tape version of :func:`utilities` for a forward pass's outputs."""
    val = tape.sum(tape.mul(nodes.z, valuations), axis=2)
    return tape.sub(val, nodes.payment)


def check_allocation(z, bidder_type: str, tol: float = 1e-9) -> None:
    """Raise if z violates the allocation-matrix invariants."""
    z = as_tensor(z)
    if z.min() < -tol or z.max() > 1.0 + tol:
        raise AssertionError(f"allocation entries outside [0,1]: "
                             f"min {z.min()}, max {z.max()}")
    col = z.sum(axis=-2)
    if col.max() > 1.0 + tol:
        raise AssertionError(f"column sum {col.max()} exceeds 1")
    if bidder_type == "unit-demand":
        row = z.sum(axis=-1)
        if row.max() > 1.0 + tol:
            raise AssertionError(f"row sum {row.max()} exceeds 1")


def _lift(bids, n: int, m: int):
    b = as_tensor(bids)
    if b.shape == (n, m):
        return b[None, :, :], True
    if b.ndim == 3 and b.shape[1:] == (n, m):
        return b, False
    raise ValueError(f"bids shape {b.shape} does not match ({n}, {m})")


def _lift3(arr, n: int, m: int):
    a = as_tensor(arr)
    if a.shape == (n, m):
        return a[None, :, :], True
    if a.ndim == 3 and a.shape[1:] == (n, m):
        return a, False
    raise ValueError(f"array shape {a.shape} does not match ({n}, {m})")


# -- checkpoint io --------------------------------------------------------

def save_checkpoint(model: AuctionModel, path) -> None:
    """Write weights as text; 17 significant digits round-trips float64."""
    lines = [f"{CHECKPOINT_MAGIC} {model.bidder_type} {model.n} {model.m} "
             f"{model.hidden_layers} {model.hidden_width}"]
    for name, arr in model.weight_arrays():
        mat = arr if arr.ndim == 2 else arr.reshape(1, -1)
        lines.append(f"block {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join("%.17g" % x for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> AuctionModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 6 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    model = AuctionModel(bidder_type=head[1], n=int(head[2]), m=int(head[3]),
                         hidden_layers=int(head[4]), hidden_width=int(head[5]))
    blocks = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != "block":
            raise ValueError(f"{path}: expected block header at line {i + 1}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        if i + rows >= len(lines):
            raise ValueError(f"{path}: block {name} truncated")
        data = np.array([[float(x) for x in lines[i + 1 + r].split()]
                         for r in range(rows)])
        if data.shape != (rows, cols):
            raise ValueError(f"{path}: block {name} malformed")
        blocks[name] = data
        i += 1 + rows

    def collect(head_name, out_size):
        ws = []
        dims = model._layer_dims(out_size)
        for layer in range(len(dims) - 1):
            w = blocks.pop(f"{head_name}_w{layer}", None)
            b = blocks.pop(f"{head_name}_b{layer}", None)
            if w is None or b is None:
                raise ValueError(f"{path}: missing {head_name} layer {layer}")
            ws.append(w)
            ws.append(b.reshape(-1))
        return ws

    model.alloc_weights = collect("alloc", model.alloc_output_size())
    model.pay_weights = collect("pay", model.n)
    if blocks:
        raise ValueError(f"{path}: unexpected blocks {sorted(blocks)}")
    model.validate()
    return model
