"""Dense/sparse linear algebra with reverse-mode gradients.

Everything downstream (graph propagation, sequence encoding, the
prediction layer) expresses its math through the ops in this module, so
that one backward() call yields gradients for every trainable table.

Conventions:
  * float64 storage, row-major.
  * vectors are rows; projections multiply on the right (x @ W).
  * ops record a tape; `backward(loss)` fills `.grad` on every tensor
    with requires_grad=True that the loss depends on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A hyperparameter is outside its allowed range."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    """A dense array plus the tape bookkeeping needed for reverse mode.

    Tensors produced by ops are treated as immutable; only the optimizer
    writes into `.data` (of leaf parameters) between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the heavy lifting lives in the module functions
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, filling `.grad` buffers.

    Gradients accumulate (+=) into existing buffers so parameters must be
    zeroed between optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    # iterative topological order over the tape
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in flowing:
                flowing[id(p)] = flowing[id(p)] + pg
            else:
                flowing[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _lift(x)
    out = np.maximum(x.data, floor)
    mask = x.data > floor
    return _make(out, (x,), lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _make(out, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """x where x >= 0, slope*x otherwise, elementwise."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = _lift(x)
    factor = np.where(x.data >= 0.0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _lift(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def concat(tensors, axis: int = -1) -> Tensor:
    parts = [_lift(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(out, tuple(parts), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; ties route gradient to the first maximum."""
    x = _lift(x)
    out = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis)
        return (gx,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in np.matmul."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# softmax family


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _lift(x)
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    out = x.data - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# indexed ops (embedding lookups and graph aggregation)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of x; index may have any shape, output gains its axes."""
    x = _lift(x)
    idx = np.asarray(index, dtype=np.int64)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), vjp)


def take_per_row(x: Tensor, index) -> Tensor:
    """out[i] = x[i, index[i]] for a 2-D x."""
    x = _lift(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_per_row expects (n, m) and (n,), got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(out, (x,), vjp)


def segment_sum(x: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of x into n_segments buckets given per-row segment ids.

    Accumulation order is the row order of x, fixed, so results are
    reproducible bit for bit.
    """
    x = _lift(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment ids {ids.shape} do not match rows of {x.shape}")
    out = np.zeros((n_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, ids, x.data)
    return _make(out, (x,), lambda g: (g[ids],))


def segment_softmax(scores: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Softmax of a score vector within each segment (stable per-segment)."""
    scores = _lift(scores)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if scores.ndim != 1 or ids.shape[0] != scores.shape[0]:
        raise ShapeError(f"segment_softmax expects matching 1-D inputs, got {scores.shape} and {ids.shape}")
    seg_max = np.full(n_segments, -np.inf, dtype=DTYPE)
    np.maximum.at(seg_max, ids, scores.data)
    e = np.exp(scores.data - seg_max[ids])
    denom = np.zeros(n_segments, dtype=DTYPE)
    np.add.at(denom, ids, e)
    y = e / denom[ids]

    def vjp(g):
        weighted = np.zeros(n_segments, dtype=DTYPE)
        np.add.at(weighted, ids, g * y)
        return (y * (g - weighted[ids]),)

    return _make(y, (scores,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return _lift(x)
    x = _lift(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# layer normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain & bias."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    centered = sub(x, tmean(x, axis=-1, keepdims=True))
    variance = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normalized = div(centered, sqrt(add(variance, eps)))
    return add(mul(normalized, gain), bias)


# ---------------------------------------------------------------------------
# sparse matrices


@dataclass
class SparseMatrix:
    """Row-sorted COO matrix with unique (row, col) entries."""

    n_rows: int
    n_cols: int
    rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    vals: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=DTYPE))

    @classmethod
    def from_entries(cls, n_rows: int, n_cols: int, entries) -> "SparseMatrix":
        """Build from (row, col, value) triples; sorts and validates."""
        entries = sorted(entries, key=lambda e: (e[0], e[1]))
        rows = np.array([e[0] for e in entries], dtype=np.int64)
        cols = np.array([e[1] for e in entries], dtype=np.int64)
        vals = np.array([e[2] for e in entries], dtype=DTYPE)
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
                raise ShapeError(f"sparse entry outside {n_rows}x{n_cols} bounds")
            keys = rows * n_cols + cols
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (row, col) entry in sparse matrix")
        return cls(n_rows, n_cols, rows, cols, vals)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, idx, idx.copy(), np.ones(n, dtype=DTYPE))

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols), dtype=DTYPE)
        dense[self.rows, self.cols] = self.vals
        return dense

    def row_sums(self) -> np.ndarray:
        sums = np.zeros(self.n_rows, dtype=DTYPE)
        np.add.at(sums, self.rows, self.vals)
        return sums


def sparse_dense_matmul(s: SparseMatrix, d) -> Tensor:
    """s @ d for row-sorted sparse s and dense d.

    The sparse values act as fixed coefficients: gradient flows to the
    dense operand only.
    """
    d = _lift(d)
    if d.ndim != 2 or d.shape[0] != s.n_cols:
        raise ShapeError(f"sparse {s.n_rows}x{s.n_cols} cannot multiply dense {d.shape}")
    out = np.zeros((s.n_rows, d.shape[1]), dtype=DTYPE)
    np.add.at(out, s.rows, s.vals[:, None] * d.data[s.cols])

    def vjp(g):
        gd = np.zeros_like(d.data)
        np.add.at(gd, s.cols, s.vals[:, None] * g[s.rows])
        return (gd,)

    return _make(out, (d,), vjp)


# ---------------------------------------------------------------------------
# initialization and optimization


def xavier_init(shape, seed, requires_grad: bool = False) -> Tensor:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), deterministic per seed.

    fan_in is the product of all leading axes and fan_out the last axis;
    for 1-D shapes both fans equal the length.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"xavier_init needs a nonempty positive shape, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in = int(np.prod(shape[:-1]))
        fan_out = shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=requires_grad)


@dataclass
class AdamState:
    """First/second-moment buffers plus hyperparameters for Adam."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 0.001, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, grads: dict | None, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    `grads` maps parameter names to arrays; pass None to read each
    tensor's `.grad` (missing gradients count as zero).
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if grads is None:
            g = p.grad
        else:
            g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
