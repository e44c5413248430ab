"""Minimal dense computation engine with reverse-mode differentiation.

Everything is a 2-D float32 array. Graphs are define-by-run: calling an op
computes the forward value eagerly and records a closure for the backward
pass, so "running forward" and "building the graph" are the same step and
the graph is rebuilt from scratch for every batch. `backward` walks the
recorded graph from a scalar (1x1) loss node and accumulates gradients
into every reachable node that requires them.

Also provides the Adam optimizer, a named parameter store with the
initialization rules used across the package, and the binary checkpoint
format (magic "SIDK") shared by models and codebooks.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

CHECKPOINT_MAGIC = b"SIDK"
CHECKPOINT_VERSION = 1


class GraphError(ValueError):
    """Structural problem in a computation graph; names the offending node."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"node '{node}': {message}")
        self.node = node


class NonFiniteError(GraphError):
    """An op produced NaN or Inf; names the node and the first bad batch row."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite and no usable checkpoint exists."""


_node_ids = itertools.count()


class Node:
    """A 2-D float32 value in the graph plus its backward closure.

    `grad` is populated by `backward` and always matches `value` in shape.
    """

    __slots__ = ("value", "name", "inputs", "grad", "requires_grad", "_backward")

    def __init__(self, value, name, inputs=(), backward=None, requires_grad=False):
        self.value = value
        self.name = name
        self.inputs = tuple(inputs)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name}, shape={self.value.shape})"


def _as_matrix(x, name):
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise GraphError(f"expected a 2-D array, got ndim={arr.ndim}", name)
    return arr


def _check_finite(value, name):
    if not np.all(np.isfinite(value)):
        bad = np.where(~np.isfinite(value).all(axis=1))[0]
        raise NonFiniteError(
            f"non-finite output at batch row {int(bad[0])}", name)


def _make(opname, value, inputs, backward, name=None):
    name = name or f"{opname}#{next(_node_ids)}"
    _check_finite(value, name)
    req = any(i.requires_grad for i in inputs)
    return Node(value, name, inputs, backward if req else None, req)


def leaf(x, name=None, requires_grad=False):
    """Wrap an array as a graph input. Gradients flow only if requested."""
    name = name or f"leaf#{next(_node_ids)}"
    value = _as_matrix(x, name)
    _check_finite(value, name)
    return Node(value, name, (), None, requires_grad)


def constant(x, name=None):
    return leaf(x, name, requires_grad=False)


def _unbroadcast(g, shape):
    # Sum gradient back down to the operand's original (possibly size-1) axes.
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True, dtype=DTYPE)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True, dtype=DTYPE)
    if out.shape != shape:
        raise GraphError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _binary(opname, a, b, fn, da, db, name=None):
    try:
        with np.errstate(all="ignore"):
            value = fn(a.value, b.value).astype(DTYPE, copy=False)
    except ValueError as exc:
        raise GraphError(
            f"shape mismatch {a.shape} vs {b.shape} in {opname}: {exc}",
            name or opname) from None

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.grad += _unbroadcast(da(g, a.value, b.value), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(db(g, a.value, b.value), b.shape)

    return _make(opname, value, (a, b), backward, name)


def add(a, b, name=None):
    return _binary("add", a, b, np.add,
                   lambda g, av, bv: g,
                   lambda g, av, bv: g, name)


def sub(a, b, name=None):
    return _binary("sub", a, b, np.subtract,
                   lambda g, av, bv: g,
                   lambda g, av, bv: -g, name)


def mul(a, b, name=None):
    return _binary("mul", a, b, np.multiply,
                   lambda g, av, bv: g * bv,
                   lambda g, av, bv: g * av, name)


def div(a, b, name=None):
    return _binary("div", a, b, np.divide,
                   lambda g, av, bv: g / bv,
                   lambda g, av, bv: -g * av / (bv * bv), name)


def matmul(a, b, name=None):
    if a.shape[1] != b.shape[0]:
        raise GraphError(
            f"matmul shape mismatch {a.shape} @ {b.shape}", name or "matmul")
    value = a.value @ b.value

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _make("matmul", value, (a, b), backward, name)


def transpose(a, name=None):
    def backward(out):
        if a.requires_grad:
            a.grad += out.grad.T
    return _make("transpose", np.ascontiguousarray(a.value.T), (a,), backward, name)


def scale(a, c, name=None):
    c = float(c)

    def backward(out):
        if a.requires_grad:
            a.grad += out.grad * DTYPE(c)
    return _make("scale", a.value * DTYPE(c), (a,), backward, name)


def _unary(opname, a, fn, dfn, name=None):
    with np.errstate(all="ignore"):
        value = fn(a.value).astype(DTYPE, copy=False)

    def backward(out):
        if a.requires_grad:
            a.grad += dfn(out.grad, a.value, value)
    return _make(opname, value, (a,), backward, name)


def relu(a, name=None):
    # Subgradient at 0 is taken as 0.
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0), name)


def tanh(a, name=None):
    return _unary("tanh", a, np.tanh,
                  lambda g, x, y: g * (1.0 - y * y), name)


def sigmoid(a, name=None):
    def fwd(x):
        return 1.0 / (1.0 + np.exp(-x))
    return _unary("sigmoid", a, fwd,
                  lambda g, x, y: g * y * (1.0 - y), name)


def softplus(a, name=None):
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x),
                  lambda g, x, y: g / (1.0 + np.exp(-x)), name)


def log(a, name=None):
    return _unary("log", a, np.log, lambda g, x, y: g / x, name)


def sqrt(a, name=None):
    return _unary("sqrt", a, np.sqrt, lambda g, x, y: g / (2.0 * y), name)


def square(a, name=None):
    return _unary("square", a, np.square, lambda g, x, y: g * 2.0 * x, name)


def softmax_rows(a, name=None):
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def backward(out):
        if a.requires_grad:
            g = out.grad
            s = out.value
            a.grad += s * (g - (g * s).sum(axis=1, keepdims=True))
    return _make("softmax_rows", value.astype(DTYPE), (a,), backward, name)


def log_softmax_rows(a, name=None):
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = shifted - lse

    def backward(out):
        if a.requires_grad:
            g = out.grad
            s = np.exp(out.value)
            a.grad += g - s * g.sum(axis=1, keepdims=True)
    return _make("log_softmax_rows", value.astype(DTYPE), (a,), backward, name)


def concat_cols(nodes, name=None):
    value = np.concatenate([n.value for n in nodes], axis=1)
    offsets = np.cumsum([0] + [n.shape[1] for n in nodes])

    def backward(out):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            if n.requires_grad:
                n.grad += out.grad[:, lo:hi]
    return _make("concat", value, tuple(nodes), backward, name)


def slice_cols(a, start, stop, name=None):
    if not (0 <= start <= stop <= a.shape[1]):
        raise GraphError(
            f"slice [{start}:{stop}] out of range for {a.shape}", name or "slice")
    value = np.ascontiguousarray(a.value[:, start:stop])

    def backward(out):
        if a.requires_grad:
            g = np.zeros(a.shape, dtype=DTYPE)
            g[:, start:stop] = out.grad
            a.grad += g
    return _make("slice", value, (a,), backward, name)


def sum_all(a, name=None):
    value = np.array([[a.value.sum(dtype=DTYPE)]], dtype=DTYPE)

    def backward(out):
        if a.requires_grad:
            a.grad += np.full(a.shape, out.grad[0, 0], dtype=DTYPE)
    return _make("sum", value, (a,), backward, name)


def mean_all(a, name=None):
    n = a.value.size
    value = np.array([[a.value.sum(dtype=DTYPE) / n]], dtype=DTYPE)

    def backward(out):
        if a.requires_grad:
            a.grad += np.full(a.shape, out.grad[0, 0] / n, dtype=DTYPE)
    return _make("mean", value, (a,), backward, name)


def sum_axis1(a, name=None):
    value = a.value.sum(axis=1, keepdims=True, dtype=DTYPE)

    def backward(out):
        if a.requires_grad:
            a.grad += np.broadcast_to(out.grad, a.shape)
    return _make("sum_axis1", value, (a,), backward, name)


def sum_axis0(a, name=None):
    value = a.value.sum(axis=0, keepdims=True, dtype=DTYPE)

    def backward(out):
        if a.requires_grad:
            a.grad += np.broadcast_to(out.grad, a.shape)
    return _make("sum_axis0", value, (a,), backward, name)


def reshape(a, rows, cols, name=None):
    if rows * cols != a.value.size:
        raise GraphError(
            f"cannot reshape {a.shape} to ({rows}, {cols})", name or "reshape")
    value = a.value.reshape(rows, cols)

    def backward(out):
        if a.requires_grad:
            a.grad += out.grad.reshape(a.shape)
    return _make("reshape", value, (a,), backward, name)


def repeat_rows(a, k, name=None):
    value = np.repeat(a.value, k, axis=0)

    def backward(out):
        if a.requires_grad:
            n, m = a.shape
            a.grad += out.grad.reshape(n, k, m).sum(axis=1, dtype=DTYPE)
    return _make("repeat_rows", value, (a,), backward, name)


def segment_sum_rows(a, k, name=None):
    """Sum consecutive blocks of k rows; adjoint of repeat_rows."""
    n, m = a.shape
    if n % k != 0:
        raise GraphError(f"row count {n} not divisible by {k}", name or "segment_sum")
    value = a.value.reshape(n // k, k, m).sum(axis=1, dtype=DTYPE)

    def backward(out):
        if a.requires_grad:
            a.grad += np.repeat(out.grad, k, axis=0)
    return _make("segment_sum", value, (a,), backward, name)


def gather_rows(table, indices, name=None):
    """Row lookup into a parameter table; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise GraphError(
            f"index out of range for table with {table.shape[0]} rows",
            name or "gather")
    value = table.value[idx]

    def backward(out):
        if table.requires_grad:
            np.add.at(table.grad, idx, out.grad)
    return _make("gather", value, (table,), backward, name)


def stop_gradient(a, name=None):
    """Forward-identity node that blocks all gradient flow through it."""
    node = Node(a.value, name or f"stop_gradient#{next(_node_ids)}",
                (a,), None, requires_grad=False)
    return node


def backward(loss):
    """Populate `grad` on every node that the scalar loss depends on."""
    if loss.shape != (1, 1):
        raise GraphError(f"loss must be 1x1, got {loss.shape}", loss.name)

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.requires_grad:
                stack.append((inp, False))

    for node in order:
        node.grad = np.zeros(node.shape, dtype=DTYPE)
    loss.grad = np.ones((1, 1), dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)


# ---------------------------------------------------------------------------
# Parameters and optimization


class ParamStore:
    """Named float32 parameter arrays shared across per-batch graphs."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self._arrays: dict[str, np.ndarray] = {}

    def weight(self, name, fan_in, fan_out):
        """Glorot-uniform weight matrix: U(+-sqrt(6/(fan_in+fan_out)))."""
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arr = self.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return self.add(name, arr)

    def zeros(self, name, rows, cols):
        return self.add(name, np.zeros((rows, cols)))

    def table(self, name, rows, cols, scale=0.01):
        return self.add(name, self.rng.normal(0.0, scale, size=(rows, cols)))

    def add(self, name, array):
        if name in self._arrays:
            raise KeyError(f"parameter '{name}' already registered")
        self._arrays[name] = np.asarray(array, dtype=DTYPE).reshape(
            array.shape if np.ndim(array) == 2 else (1, -1))
        return self._arrays[name]

    def node(self, name):
        """Fresh graph leaf backed by the stored array."""
        return Node(self._arrays[name], name, (), None, requires_grad=True)

    def get(self, name):
        return self._arrays[name]

    def set(self, name, array):
        self._arrays[name] = np.asarray(array, dtype=DTYPE)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def __contains__(self, name):
        return name in self._arrays

    def count(self, prefix=""):
        return sum(a.size for n, a in self._arrays.items() if n.startswith(prefix))

    def snapshot(self):
        return {n: a.copy() for n, a in self._arrays.items()}

    def restore(self, snap):
        for n, a in snap.items():
            self._arrays[n][...] = a


@dataclass
class AdamState:
    """Adam optimizer state; moment shapes mirror the parameter shapes."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(state, params, grads):
    """Apply one bias-corrected Adam update in place.

    `params` maps names to float32 arrays (mutated), `grads` maps the same
    names to gradient arrays. Returns the state for chaining.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", name)
        if g.shape != p.shape:
            raise GraphError(f"gradient shape {g.shape} != param {p.shape}", name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        with np.errstate(over="ignore", invalid="ignore"):
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p -= DTYPE(state.lr) * (m / c1) / (np.sqrt(v / c2) + DTYPE(state.eps))
    return state


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SIDK", version u32 LE, then one record per
# tensor: name length u32, UTF-8 name, rows u32, cols u32, row-major f32
# little-endian payload. Records run to end of file.


class CheckpointError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def save_checkpoint(path, arrays):
    """Write named 2-D float32 arrays; the write is atomic via rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
            if arr.ndim != 2:
                raise CheckpointError(f"tensor '{name}' is not 2-D")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}", offset=0)
    if len(data) < 8:
        raise CheckpointError("truncated header", offset=len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}", offset=4)
    arrays = {}
    pos = 8
    while pos < len(data):
        if pos + 4 > len(data):
            raise CheckpointError("truncated record header", offset=pos)
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len + 8 > len(data):
            raise CheckpointError("truncated record", offset=pos)
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise CheckpointError(
                f"truncated payload for '{name}': expected {nbytes} bytes, "
                f"have {len(data) - pos}", offset=pos)
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos)
        arrays[name] = arr.reshape(rows, cols).astype(DTYPE)
        pos += nbytes
    return arrays
