"""Deterministic numeric core: 2-D float64 values, a reverse-mode tape over
a fixed set of primitives, masked-linear layers, Adam, and seeded RNG.

Every differentiable primitive records one closure on the tape; backward
runs the closures in exact reverse order and accumulates into ``.grad``
buffers. The op set is deliberately small -- just what the classifiers in
this package need -- rather than a general autodiff system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import DimensionError, TrainingDivergedError, ValidationError

BCE_EPS = 1e-7


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator: identical stream for identical seed on every
    platform, independent of thread scheduling."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Value:
    """A 2-D float64 array together with its gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"Value must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Tape:
    """Records backward closures; replays them in exact reverse order."""

    def __init__(self):
        self._steps = []

    def record(self, fn) -> None:
        self._steps.append(fn)

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, loss: Value) -> None:
        if loss.shape != (1, 1):
            raise DimensionError(f"backward expects a scalar (1,1) loss, got {loss.shape}")
        loss.grad[...] = 1.0
        for fn in reversed(self._steps):
            fn()


class MaskIndex:
    """Precompiled sparse view of a binary mask.

    Stores the unmasked coordinates in column-major order plus a CSC-style
    column pointer, and the flat indices used for sparsity-aware Adam
    updates. Construction validates that every entry is exactly 0 or 1.
    """

    __slots__ = ("shape", "rows", "cols", "col_ptr", "flat", "dense")

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValidationError("mask entries must be exactly 0 or 1")
        m = mask.astype(np.float64)
        rows, cols = np.nonzero(m.T)[::-1] if False else (None, None)
        # column-major walk so entries are grouped per output unit
        cols_t, rows_t = np.nonzero(m.T)
        self.shape = m.shape
        self.rows = np.ascontiguousarray(rows_t, dtype=np.int64)
        self.cols = np.ascontiguousarray(cols_t, dtype=np.int64)
        counts = np.bincount(self.cols, minlength=m.shape[1])
        self.col_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.flat = (self.rows * m.shape[1] + self.cols).astype(np.int64)
        self.dense = m

    @property
    def nnz(self) -> int:
        return self.rows.size


# ---------------------------------------------------------------------------
# Differentiable primitives
# ---------------------------------------------------------------------------


def matmul(tape: Tape | None, a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Value(a.data @ b.data)
    if tape is not None:
        def backward():
            a.grad += out.grad @ b.data.T
            b.grad += a.data.T @ out.grad
        tape.record(backward)
    return out


def add_bias(tape: Tape | None, x: Value, b: Value) -> Value:
    if b.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: x {x.shape}, b {b.shape}")
    out = Value(x.data + b.data)
    if tape is not None:
        def backward():
            x.grad += out.grad
            b.grad += out.grad.sum(axis=0, keepdims=True)
        tape.record(backward)
    return out


def masked_linear(tape: Tape | None, x: Value, w: Value, b: Value, mask: "MaskIndex | np.ndarray") -> Value:
    """y = x @ (M * W) + b.

    Gradients at masked positions are identically zero: the weight
    gradient is M * (x^T dL/dy), computed only at unmasked coordinates.
    """
    mi = mask if isinstance(mask, MaskIndex) else MaskIndex(mask)
    if w.shape != mi.shape:
        raise DimensionError(f"masked_linear: W {w.shape} vs mask {mi.shape}")
    if x.shape[1] != mi.shape[0]:
        raise DimensionError(f"masked_linear: x {x.shape} vs mask {mi.shape}")
    if b.shape != (1, mi.shape[1]):
        raise DimensionError(f"masked_linear: b {b.shape} vs mask {mi.shape}")
    y = backend.masked_matmul(x.data, w.data, mi.rows, mi.cols, mi.col_ptr)
    out = Value(y + b.data)
    if tape is not None:
        def backward():
            x.grad += backend.masked_matmul_bwd_x(out.grad, w.data, mi.rows, mi.cols, mi.col_ptr, mi.shape[0])
            w.grad += backend.masked_matmul_bwd_w(x.data, out.grad, mi.rows, mi.cols, mi.col_ptr)
            b.grad += out.grad.sum(axis=0, keepdims=True)
        tape.record(backward)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = ("tanh", "relu", "sigmoid", "leaky_relu")


def activation(tape: Tape | None, x: Value, kind: str, slope: float = 0.2) -> Value:
    """Elementwise nonlinearity with its analytic derivative on the tape."""
    if kind == "tanh":
        y = np.tanh(x.data)
        dydx = 1.0 - y * y
    elif kind == "relu":
        y = np.maximum(x.data, 0.0)
        dydx = (x.data > 0.0).astype(np.float64)
    elif kind == "sigmoid":
        y = _sigmoid(x.data)
        dydx = y * (1.0 - y)
    elif kind == "leaky_relu":
        pos = x.data > 0.0
        y = np.where(pos, x.data, slope * x.data)
        dydx = np.where(pos, 1.0, slope)
    else:
        raise ValidationError(f"unknown activation kind: {kind!r}")
    out = Value(y)
    if tape is not None:
        def backward():
            x.grad += out.grad * dydx
        tape.record(backward)
    return out


def bce_loss(tape: Tape | None, p: Value, y: np.ndarray) -> Value:
    """Mean unweighted binary cross-entropy; p clamped to [eps, 1-eps]
    before the logs (eps = 1e-7), so the loss is always finite."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape[0], -1)
    if y.shape != p.shape:
        raise DimensionError(f"bce_loss: p {p.shape}, y {y.shape}")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.data.size
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n)
    out = Value([[loss]])
    if tape is not None:
        inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)
        def backward():
            dp = (pc - y) / (pc * (1.0 - pc)) / n
            p.grad += out.grad[0, 0] * dp * inside
        tape.record(backward)
    return out


def gather_rows(tape: Tape | None, x: Value, idx: np.ndarray) -> Value:
    out = Value(x.data[idx])
    if tape is not None:
        def backward():
            backend.scatter_add_rows(x.grad, idx, out.grad)
        tape.record(backward)
    return out


def segment_sum(tape: Tape | None, x: Value, indptr: np.ndarray) -> Value:
    """Sum rows of x per segment; rows must already be sorted by segment.
    Empty segments produce zero rows."""
    out = Value(backend.segment_sum(x.data, indptr))
    if tape is not None:
        ids = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
        def backward():
            x.grad += out.grad[ids]
        tape.record(backward)
    return out


def segment_mean(tape: Tape | None, x: Value, indptr: np.ndarray) -> Value:
    """Per-segment mean of rows; an empty segment yields a zero row."""
    counts = np.diff(indptr)
    scale = 1.0 / np.maximum(counts, 1)
    out = Value(backend.segment_sum(x.data, indptr) * scale[:, None])
    if tape is not None:
        ids = np.repeat(np.arange(indptr.size - 1), counts)
        sc = scale[ids][:, None]
        def backward():
            x.grad += out.grad[ids] * sc
        tape.record(backward)
    return out


def segment_softmax(tape: Tape | None, scores: Value, indptr: np.ndarray) -> Value:
    """Softmax within each segment of a (n,1) score column."""
    if scores.shape[1] != 1:
        raise DimensionError(f"segment_softmax expects a column, got {scores.shape}")
    a = backend.segment_softmax(scores.data[:, 0], indptr)
    out = Value(a[:, None])
    if tape is not None:
        ids = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
        def backward():
            g = out.grad[:, 0]
            inner = backend.segment_sum((g * a)[:, None], indptr)[:, 0]
            scores.grad[:, 0] += a * (g - inner[ids])
        tape.record(backward)
    return out


def scale_rows(tape: Tape | None, x: Value, s: Value) -> Value:
    """Multiply row i of x by scalar s[i, 0]."""
    if s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: x {x.shape}, s {s.shape}")
    out = Value(x.data * s.data)
    if tape is not None:
        def backward():
            x.grad += out.grad * s.data
            s.grad += (out.grad * x.data).sum(axis=1, keepdims=True)
        tape.record(backward)
    return out


def add(tape: Tape | None, a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    out = Value(a.data + b.data)
    if tape is not None:
        def backward():
            a.grad += out.grad
            b.grad += out.grad
        tape.record(backward)
    return out


def scale(tape: Tape | None, x: Value, c: float) -> Value:
    out = Value(x.data * c)
    if tape is not None:
        def backward():
            x.grad += out.grad * c
        tape.record(backward)
    return out


def concat_cols(tape: Tape | None, parts: list[Value]) -> Value:
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    out = Value(np.hstack([p.data for p in parts]))
    if tape is not None:
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])
        def backward():
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                p.grad += out.grad[:, lo:hi]
        tape.record(backward)
    return out


def block_mean_rows(tape: Tape | None, x: Value, block: int) -> Value:
    """Mean over consecutive row blocks of fixed size (graph readout pool)."""
    n, d = x.shape
    if n % block != 0:
        raise DimensionError(f"block_mean_rows: {n} rows not divisible by block {block}")
    out = Value(x.data.reshape(n // block, block, d).mean(axis=1))
    if tape is not None:
        def backward():
            x.grad += np.repeat(out.grad / block, block, axis=0)
        tape.record(backward)
    return out


def sym_spmm(tape: Tape | None, indptr: np.ndarray, indices: np.ndarray, data: np.ndarray, x: Value) -> Value:
    """Sparse @ dense for a *symmetric* CSR matrix (the backward pass
    reuses the same arrays, which is only correct under symmetry)."""
    n = indptr.size - 1
    if x.shape[0] != n:
        raise DimensionError(f"sym_spmm: matrix is {n}x{n}, x is {x.shape}")
    out = Value(backend.csr_matmul(indptr, indices, data, x.data))
    if tape is not None:
        def backward():
            x.grad += backend.csr_matmul(indptr, indices, data, out.grad)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------


def glorot_init(rows: int, cols: int, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValidationError(f"glorot_init: fans must be >= 1, got ({fan_in}, {fan_out})")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(rows, cols))


def masked_glorot_init(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sparsity-aware Glorot for a masked layer.

    Entry (i, j) uses fan_in = unmasked incoming connections of unit j
    (column sum) and fan_out = unmasked outgoing connections of input i
    (row sum); dense fans would over-shrink weights in layers that are
    mostly masked. The result is pre-multiplied by the mask, so masked
    weights start (and stay) exactly zero.
    """
    m = np.asarray(mask, dtype=np.float64)
    fan_in = np.maximum(m.sum(axis=0), 1.0)   # per output unit
    fan_out = np.maximum(m.sum(axis=1), 1.0)  # per input unit
    limit = np.sqrt(6.0 / (fan_in[None, :] + fan_out[:, None]))
    return rng.uniform(-1.0, 1.0, size=m.shape) * limit * m


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    idx: np.ndarray | None = None  # flat indices to touch (sparse masks); None = all

    @classmethod
    def for_param(cls, param: Value, learning_rate: float = 1e-3, idx: np.ndarray | None = None) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                   learning_rate=learning_rate, idx=idx)


def adam_step(param: Value, grad: np.ndarray, state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place.

    With ``state.idx`` set, only those flat positions are touched; for
    masked layers the skipped positions have exactly-zero gradients and
    moments, so the restriction changes nothing but the work done.
    """
    if grad.shape != param.data.shape:
        raise DimensionError(f"adam_step: grad {grad.shape} vs param {param.data.shape}")
    state.t += 1
    gflat = grad.ravel()
    check = gflat if state.idx is None else gflat[state.idx]
    if not np.isfinite(check).all():
        raise TrainingDivergedError(f"non-finite gradient at optimizer step {state.t}", step=state.t)
    idx = state.idx if state.idx is not None else np.arange(gflat.size, dtype=np.int64)
    backend.adam_update(param.data.ravel(), gflat, state.m.ravel(), state.v.ravel(),
                        idx, state.t, state.learning_rate, state.beta1, state.beta2, state.eps)


class Adam:
    """Adam over a list of parameters, with optional per-parameter sparse
    index sets (from :class:`MaskIndex`)."""

    def __init__(self, params: list[Value], learning_rate: float = 1e-3,
                 masks: "list[MaskIndex | None] | None" = None):
        masks = masks or [None] * len(params)
        self.params = params
        self.states = [AdamState.for_param(p, learning_rate, mi.flat if mi is not None else None)
                       for p, mi in zip(params, masks)]

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            adam_step(p, p.grad, st)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
