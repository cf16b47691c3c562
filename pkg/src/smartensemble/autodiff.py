"""A small reverse-mode differentiation tape over float64 numpy arrays.

Every operation records a node on a :class:`Tape`; nodes are appended in
evaluation order, so the insertion order is already a topological order and
:meth:`Tape.backward` simply walks the list in reverse.

The op set is deliberately narrow: no broadcasting beyond adding a bias row
to every row of a matrix. :func:`custom_node` lets callers splice in a value
whose Jacobian is computed elsewhere (this is how the knapsack layer plugs its
Monte-Carlo Jacobian into the chain rule).

Example
-------
>>> tape = Tape()
>>> x = tape.leaf([3.0])
>>> loss = sum_all(mul(x, x))
>>> grads = tape.backward(loss)
>>> float(x.grad[0])
6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

NLL_DELTA = 1e-12
NORM_GUARD = 1e-12


class Tensor:
    """A float64 array recorded on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape", "grad", "name")

    def __init__(self, data, requires_grad=False, tape=None, node_id=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Tape:
    """Ordered record of operations. Single writer; not thread safe."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, requires_grad=True, name=None) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, tape=self, name=name)
        t.node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), t, None))
        return t

    def constant(self, data, name=None) -> Tensor:
        return self.leaf(data, requires_grad=False, name=name)

    def record(self, op, inputs, value, backward) -> Tensor:
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=requires_grad, tape=self)
        out.node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), out, backward if requires_grad else None))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) for every node that requires grad.

        Fills ``.grad`` on each leaf with ``requires_grad=True`` and returns a
        ``{node_id: gradient}`` map. Gradients are recomputed from scratch on
        every call, so calling twice gives identical results.
        """
        if loss.tape is not self:
            raise ContractError("loss tensor belongs to a different tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.get(node.output.node_id)
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi
        for node in self.nodes:
            t = node.output
            if node.op == "leaf" and t.requires_grad:
                t.grad = grads.get(t.node_id, np.zeros_like(t.data))
        return grads


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors:
        if not isinstance(t, Tensor) or t.tape is None:
            raise ContractError("operands must be Tensors recorded on a tape")
        if t.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    tape = _tape_of(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return tape.record("matmul", (a, b), A @ B, backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-t bias vector to every row of an r x t matrix."""
    tape = _tape_of(x, bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add {bias.shape} to rows of {x.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return tape.record("add_bias", (x, bias), x.data + bias.data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape("add", a, b)
    return tape.record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    tape = _tape_of(a, b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return tape.record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def sum_all(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    shape = x.shape
    return tape.record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    positive = x.data > 0
    return tape.record("relu", (x,), np.where(positive, x.data, 0.0), lambda g: (g * positive,))


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis (rows of a matrix, or a single vector)."""
    tape = _tape_of(x)
    if x.data.ndim not in (1, 2) or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: expected a vector or matrix, got {x.shape}")
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return tape.record("softmax", (x,), y, backward)


def nll_loss(probs: Tensor, label) -> Tensor:
    """Negative log-likelihood of already-normalised probabilities.

    ``probs`` of shape (c,) takes an integer label; shape (batch, c) takes one
    label per row and returns the batch mean.
    """
    tape = _tape_of(probs)
    p = probs.data
    if p.ndim == 1:
        label = int(label)
        if not 0 <= label < p.shape[0]:
            raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
        picked = p[label] + NLL_DELTA

        def backward(g):
            out = np.zeros_like(p)
            out[label] = -float(g) / picked
            return (out,)

        return tape.record("nll", (probs,), np.asarray(-np.log(picked)), backward)
    if p.ndim != 2:
        raise DimensionError(f"nll_loss: expected (c,) or (batch, c), got {p.shape}")
    labels = np.asarray(label, dtype=np.int64).reshape(-1)
    if labels.shape[0] != p.shape[0]:
        raise DimensionError(f"nll_loss: {labels.shape[0]} labels for probs of shape {p.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise IndexError(f"labels out of range for {p.shape[1]} classes")
    rows = np.arange(p.shape[0])
    picked = p[rows, labels] + NLL_DELTA
    batch = p.shape[0]

    def backward(g):
        out = np.zeros_like(p)
        out[rows, labels] = -float(g) / (picked * batch)
        return (out,)

    return tape.record("nll", (probs,), np.asarray(-np.log(picked).mean()), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (or the single vector) to unit Euclidean norm.

    Rows with norm <= 1e-12 pass through unchanged, with identity gradient.
    """
    tape = _tape_of(x)
    X = x.data
    norms = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    ok = norms > NORM_GUARD
    safe = np.where(ok, norms, 1.0)
    Y = np.where(ok, X / safe, X)

    def backward(g):
        projected = (g - Y * (g * Y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(ok, projected, g),)

    return tape.record("normalize", (x,), Y, backward)


def mask_columns(P: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of P with a matrix whose rows all equal b.

    P is (c, n) with b (n,), or a batch (batch, c, n) with b (batch, n).
    """
    tape = _tape_of(P, b)
    Pd, bd = P.data, b.data
    if Pd.ndim != bd.ndim + 1 or Pd.shape[:-2] != bd.shape[:-1] or Pd.shape[-1] != bd.shape[-1]:
        raise DimensionError(f"mask_columns: mask {bd.shape} does not match columns of {Pd.shape}")
    B = bd[..., None, :]

    def backward(g):
        return g * B, (g * Pd).sum(axis=-2)

    return tape.record("mask_columns", (P, b), Pd * B, backward)


def sum_columns(x: Tensor) -> Tensor:
    """Sum over the last axis: (c, n) -> (c,), (batch, c, n) -> (batch, c)."""
    tape = _tape_of(x)
    shape = x.shape
    if len(shape) < 2:
        raise DimensionError(f"sum_columns: need at least 2 dims, got {shape}")
    return tape.record(
        "sum_columns", (x,), x.data.sum(axis=-1), lambda g: (np.broadcast_to(g[..., None], shape).copy(),)
    )


def custom_node(value, inp: Tensor, jacobian, op="custom") -> Tensor:
    """Emit ``value`` verbatim, with d(value)/d(inp) given by ``jacobian``.

    Accepted Jacobian layouts:

    * ``(value.size, inp.size)`` -- a dense Jacobian of the flattened arrays;
    * ``(batch, n_out, n_in)`` -- one block per row when ``value`` is
      (batch, n_out) and ``inp`` is (batch, n_in).
    """
    tape = _tape_of(inp)
    value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    J = np.asarray(jacobian, dtype=np.float64)
    in_shape = inp.shape
    batched = (
        J.ndim == 3
        and value.ndim == 2
        and len(in_shape) == 2
        and J.shape == (value.shape[0], value.shape[1], in_shape[1])
        and in_shape[0] == value.shape[0]
    )
    if batched:

        def backward(g):
            return (np.einsum("bo,boi->bi", g, J),)

    elif J.shape == (value.size, inp.size):

        def backward(g):
            return ((g.reshape(-1) @ J).reshape(in_shape),)

    else:
        raise DimensionError(
            f"custom_node: jacobian {J.shape} does not fit value {value.shape} and input {in_shape}"
        )
    return tape.record(op, (inp,), value.copy(), backward)


def numerical_gradient(fn, x: np.ndarray, h=1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
