"""Fused CSR attention kernels (numba).

Rows are independent; within a row, entries are accumulated in stored
(column-sorted) order, so results do not depend on the thread count. The
column scatter of the backward pass is done as a second row-parallel sweep
over the transposed pattern, which avoids atomics.
"""

from __future__ import annotations

import numba as nb
import numpy as np

# TBB shipped with some distributions is too old for numba; the others are fine.
nb.config.THREADING_LAYER = "workqueue"


@nb.njit(parallel=True, cache=True)
def attention_forward(qs, k, v, indptr, indices):
    """qs: (N, H, dh) pre-scaled queries. Returns (p (nnz, H), out (N, H, dh))."""
    n, heads, dh = qs.shape
    nnz = indices.shape[0]
    p = np.empty((nnz, heads), dtype=qs.dtype)
    out = np.zeros((n, heads, dh), dtype=qs.dtype)
    for i in nb.prange(n):
        a, b = indptr[i], indptr[i + 1]
        m = np.full(heads, -np.inf)
        for e in range(a, b):
            j = indices[e]
            for h in range(heads):
                s = 0.0
                for c in range(dh):
                    s += qs[i, h, c] * k[j, h, c]
                p[e, h] = s
                if s > m[h]:
                    m[h] = s
        tot = np.zeros(heads)
        for e in range(a, b):
            for h in range(heads):
                w = np.exp(p[e, h] - m[h])
                p[e, h] = w
                tot[h] += w
        for e in range(a, b):
            j = indices[e]
            for h in range(heads):
                w = p[e, h] / tot[h]
                p[e, h] = w
                for c in range(dh):
                    out[i, h, c] += w * v[j, h, c]
    return p, out


@nb.njit(parallel=True, cache=True)
def attention_backward(dout, qs, k, v, p, indptr, indices, perm):
    """Gradients w.r.t. pre-scaled queries, keys and values."""
    n, heads, dh = qs.shape
    nnz = indices.shape[0]
    ds = np.empty((nnz, heads), dtype=qs.dtype)
    dqs = np.zeros((n, heads, dh), dtype=qs.dtype)
    for i in nb.prange(n):
        a, b = indptr[i], indptr[i + 1]
        rowdot = np.zeros(heads)
        for e in range(a, b):
            j = indices[e]
            for h in range(heads):
                s = 0.0
                for c in range(dh):
                    s += dout[i, h, c] * v[j, h, c]
                ds[e, h] = s
                rowdot[h] += p[e, h] * s
        for e in range(a, b):
            j = indices[e]
            for h in range(heads):
                g = p[e, h] * (ds[e, h] - rowdot[h])
                ds[e, h] = g
                for c in range(dh):
                    dqs[i, h, c] += g * k[j, h, c]
    dk = np.zeros((n, heads, dh), dtype=qs.dtype)
    dv = np.zeros((n, heads, dh), dtype=qs.dtype)
    # entry perm[s] is (indices[s], j) for the slots s of row j
    for j in nb.prange(n):
        for s in range(indptr[j], indptr[j + 1]):
            e = perm[s]
            i = indices[s]
            for h in range(heads):
                g = ds[e, h]
                w = p[e, h]
                for c in range(dh):
                    dk[j, h, c] += g * qs[i, h, c]
                    dv[j, h, c] += w * dout[i, h, c]
    return dqs, dk, dv


def set_threads(n: int) -> None:
    nb.set_num_threads(max(1, min(int(n), nb.config.NUMBA_NUM_THREADS)))
