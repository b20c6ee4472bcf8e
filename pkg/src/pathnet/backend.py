"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time. Set ``PATHNET_NUMBA=0`` in the
environment to force the numpy path (useful on machines where numba is
unavailable or JIT warm-up is unwanted). ``backend_name()`` reports which
path is active. Both paths compute the same quantities; floating-point
results can differ in the last bits because summation order differs.

Sparse connectivity is passed around as flat index arrays (see
``MaskIndex`` in :mod:`pathnet.engine`) or CSR ``indptr``/``indices``
pairs. Segment kernels expect their per-row values sorted by segment.
"""

from __future__ import annotations

import os

import numpy as np

_FALSEY = ("0", "false", "no", "off")


def _numba_requested() -> bool:
    return os.environ.get("PATHNET_NUMBA", "1").strip().lower() not in _FALSEY


# ---------------------------------------------------------------------------
# Pure-numpy implementations
# ---------------------------------------------------------------------------


def _masked_matmul_np(x, w, rows, cols, col_ptr):
    mw = np.zeros_like(w)
    mw[rows, cols] = w[rows, cols]
    return x @ mw


def _masked_matmul_bwd_x_np(dy, w, rows, cols, col_ptr, n_in):
    mw = np.zeros_like(w)
    mw[rows, cols] = w[rows, cols]
    return dy @ mw.T


def _masked_matmul_bwd_w_np(x, dy, rows, cols, col_ptr):
    dw = x.T @ dy
    out = np.zeros_like(dw)
    out[rows, cols] = dw[rows, cols]
    return out


def _adam_update_np(p, g, m, v, idx, step, lr, beta1, beta2, eps):
    gs = g[idx]
    m[idx] = beta1 * m[idx] + (1.0 - beta1) * gs
    v[idx] = beta2 * v[idx] + (1.0 - beta2) * gs * gs
    mhat = m[idx] / (1.0 - beta1**step)
    vhat = v[idx] / (1.0 - beta2**step)
    p[idx] = p[idx] - lr * mhat / (np.sqrt(vhat) + eps)


def _csr_matmul_np(indptr, indices, data, x):
    n = indptr.size - 1
    if indices.size == 0:
        return np.zeros((n, x.shape[1]))
    gathered = data[:, None] * x[indices]
    cs = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(gathered, axis=0)])
    return cs[indptr[1:]] - cs[indptr[:-1]]


def _segment_sum_np(values, indptr):
    n = indptr.size - 1
    if values.shape[0] == 0:
        return np.zeros((n, values.shape[1]))
    cs = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(values, axis=0)])
    return cs[indptr[1:]] - cs[indptr[:-1]]


def _segment_softmax_np(scores, indptr):
    out = np.empty_like(scores)
    if scores.size == 0:
        return out
    counts = np.diff(indptr)
    nonempty = counts > 0
    starts = indptr[:-1][nonempty]
    reps = counts[nonempty]
    maxima = np.maximum.reduceat(scores, starts)
    z = np.exp(scores - np.repeat(maxima, reps))
    denom = np.repeat(np.add.reduceat(z, starts), reps)
    out[:] = z / denom
    return out


def _scatter_add_rows_np(out, idx, values):
    np.add.at(out, idx, values)


_NUMPY_IMPL = {
    "masked_matmul": _masked_matmul_np,
    "masked_matmul_bwd_x": _masked_matmul_bwd_x_np,
    "masked_matmul_bwd_w": _masked_matmul_bwd_w_np,
    "adam_update": _adam_update_np,
    "csr_matmul": _csr_matmul_np,
    "segment_sum": _segment_sum_np,
    "segment_softmax": _segment_softmax_np,
    "scatter_add_rows": _scatter_add_rows_np,
}


# ---------------------------------------------------------------------------
# Numba implementations
# ---------------------------------------------------------------------------

_NUMBA_IMPL = None

if _numba_requested():
    try:
        from numba import njit
    except ImportError:
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _masked_matmul_nb(x, w, rows, cols, col_ptr):
            b, n_out = x.shape[0], col_ptr.size - 1
            y = np.zeros((b, n_out))
            for j in range(n_out):
                for k in range(col_ptr[j], col_ptr[j + 1]):
                    i = rows[k]
                    wij = w[i, j]
                    for s in range(b):
                        y[s, j] += x[s, i] * wij
            return y

        @njit(cache=True)
        def _masked_matmul_bwd_x_nb(dy, w, rows, cols, col_ptr, n_in):
            b = dy.shape[0]
            dx = np.zeros((b, n_in))
            for j in range(col_ptr.size - 1):
                for k in range(col_ptr[j], col_ptr[j + 1]):
                    i = rows[k]
                    wij = w[i, j]
                    for s in range(b):
                        dx[s, i] += dy[s, j] * wij
            return dx

        @njit(cache=True)
        def _masked_matmul_bwd_w_nb(x, dy, rows, cols, col_ptr):
            dw = np.zeros((x.shape[1], dy.shape[1]))
            b = x.shape[0]
            for j in range(col_ptr.size - 1):
                for k in range(col_ptr[j], col_ptr[j + 1]):
                    i = rows[k]
                    acc = 0.0
                    for s in range(b):
                        acc += x[s, i] * dy[s, j]
                    dw[i, j] = acc
            return dw

        @njit(cache=True)
        def _adam_update_nb(p, g, m, v, idx, step, lr, beta1, beta2, eps):
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for n in range(idx.size):
                k = idx[n]
                gk = g[k]
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk
                p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)

        @njit(cache=True)
        def _csr_matmul_nb(indptr, indices, data, x):
            n, d = indptr.size - 1, x.shape[1]
            y = np.zeros((n, d))
            for i in range(n):
                for k in range(indptr[i], indptr[i + 1]):
                    j = indices[k]
                    a = data[k]
                    for c in range(d):
                        y[i, c] += a * x[j, c]
            return y

        @njit(cache=True)
        def _segment_sum_nb(values, indptr):
            n, d = indptr.size - 1, values.shape[1]
            y = np.zeros((n, d))
            for i in range(n):
                for k in range(indptr[i], indptr[i + 1]):
                    for c in range(d):
                        y[i, c] += values[k, c]
            return y

        @njit(cache=True)
        def _segment_softmax_nb(scores, indptr):
            out = np.empty_like(scores)
            for i in range(indptr.size - 1):
                lo, hi = indptr[i], indptr[i + 1]
                if hi == lo:
                    continue
                mx = scores[lo]
                for k in range(lo + 1, hi):
                    if scores[k] > mx:
                        mx = scores[k]
                total = 0.0
                for k in range(lo, hi):
                    out[k] = np.exp(scores[k] - mx)
                    total += out[k]
                for k in range(lo, hi):
                    out[k] /= total
            return out

        @njit(cache=True)
        def _scatter_add_rows_nb(out, idx, values):
            for e in range(idx.size):
                i = idx[e]
                for c in range(values.shape[1]):
                    out[i, c] += values[e, c]

        _NUMBA_IMPL = {
            "masked_matmul": _masked_matmul_nb,
            "masked_matmul_bwd_x": _masked_matmul_bwd_x_nb,
            "masked_matmul_bwd_w": _masked_matmul_bwd_w_nb,
            "adam_update": _adam_update_nb,
            "csr_matmul": _csr_matmul_nb,
            "segment_sum": _segment_sum_nb,
            "segment_softmax": _segment_softmax_nb,
            "scatter_add_rows": _scatter_add_rows_nb,
        }

_ACTIVE = _NUMBA_IMPL if _NUMBA_IMPL is not None else _NUMPY_IMPL

masked_matmul = _ACTIVE["masked_matmul"]
masked_matmul_bwd_x = _ACTIVE["masked_matmul_bwd_x"]
masked_matmul_bwd_w = _ACTIVE["masked_matmul_bwd_w"]
adam_update = _ACTIVE["adam_update"]
csr_matmul = _ACTIVE["csr_matmul"]
segment_sum = _ACTIVE["segment_sum"]
segment_softmax = _ACTIVE["segment_softmax"]
scatter_add_rows = _ACTIVE["scatter_add_rows"]


def backend_name() -> str:
    """Return ``"numba"`` or ``"numpy"``, whichever set of kernels is live."""
    return "numba" if _ACTIVE is _NUMBA_IMPL else "numpy"


def implementations() -> dict[str, dict]:
    """Both kernel sets keyed by backend name (for benchmarks and tests)."""
    impls = {"numpy": _NUMPY_IMPL}
    if _NUMBA_IMPL is not None:
        impls["numba"] = _NUMBA_IMPL
    return impls
