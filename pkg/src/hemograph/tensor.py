"""Dense kernels with hand-written backward passes.

Every differentiable op comes as a forward function returning ``(out, cache)``
and a matching ``*_backward`` taking the upstream gradient and the cache.
Arrays are plain numpy ``(rows, cols)`` matrices (or ``(N, H, d_h)`` for
per-head attention tensors); dtype follows the inputs, binary64 for gradient
checks and binary32 for training.

The masked attention is evaluated only on the stored entries of a CSR
pattern: SDDMM for the scores, a softmax over each row's stored entries and
an SpMM against the values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .graph import Adjacency

RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class EmptyRowError(ValueError):
    """An attention row has no stored entries; the softmax would be undefined."""


# ---------------------------------------------------------------------------
# Elementwise and dense layers
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def relu(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dy: np.ndarray, x: np.ndarray):
    return dy * (x > 0)


def gelu(x: np.ndarray):
    """tanh approximation of GeLU."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: np.ndarray, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS):
    if x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rmsnorm: x {x.shape}, gain {gain.shape}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.einsum("...i,...i->...", x, x)[..., None] / d + eps)
    xn = x * r
    return xn * gain, (xn, r)


def rmsnorm_backward(dy: np.ndarray, cache, gain: np.ndarray):
    xn, r = cache
    dgain = np.sum(dy * xn, axis=0)
    dxn = dy * gain
    dot = np.einsum("...i,...i->...", dxn, xn)[..., None] / xn.shape[-1]
    dx = r * (dxn - xn * dot)
    return dx, dgain


def gated_mlp(x, Wl, bl, Wr, br, Wf, bf):
    """``Wf(GeLU(x Wl + bl) * (x Wr + br)) + bf``."""
    if Wl.shape != Wr.shape or Wf.shape != (Wl.shape[1], Wl.shape[0]):
        raise ShapeError(f"gated_mlp: Wl {Wl.shape}, Wr {Wr.shape}, Wf {Wf.shape}")
    left, _ = linear(x, Wl, bl)
    right, _ = linear(x, Wr, br)
    act, gcache = gelu(left)
    h = act * right
    y, _ = linear(h, Wf, bf)
    return y, (x, act, right, h, gcache)


def gated_mlp_backward(dy, cache, Wl, Wr, Wf):
    x, act, right, h, gcache = cache
    dh, dWf, dbf = linear_backward(dy, h, Wf)
    dleft = gelu_backward(dh * right, gcache)
    dright = dh * act
    dxl, dWl, dbl = linear_backward(dleft, x, Wl)
    dxr, dWr, dbr = linear_backward(dright, x, Wr)
    return dxl + dxr, {"Wl": dWl, "bl": dbl, "Wr": dWr, "br": dbr, "Wf": dWf, "bf": dbf}


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over all entries of the squared difference, and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Sparse masked attention
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Pattern:
    rows: np.ndarray
    cols: np.ndarray
    starts: np.ndarray
    perm: np.ndarray  # transpose permutation


def _pattern(mask: Adjacency) -> _Pattern:
    pat = mask._cache.get("attention")
    if pat is None:
        deg = mask.degrees()
        if np.any(deg == 0):
            raise EmptyRowError(f"attention row {int(np.argmax(deg == 0))} has no neighbours")
        pat = _Pattern(mask.rows(), mask.indices, mask.indptr[:-1], mask.transpose_perm())
        mask._cache["attention"] = pat
    return pat


def sddmm(q: np.ndarray, k: np.ndarray, pat: _Pattern) -> np.ndarray:
    """Scores ``q_i . k_j`` on stored entries only; (nnz, H)."""
    return np.einsum("ehd,ehd->eh", q[pat.rows], k[pat.cols])


def row_softmax(scores: np.ndarray, pat: _Pattern) -> np.ndarray:
    m = np.maximum.reduceat(scores, pat.starts, axis=0)
    p = np.exp(scores - m[pat.rows])
    return p / np.add.reduceat(p, pat.starts, axis=0)[pat.rows]


def spmm(p: np.ndarray, v: np.ndarray, pat: _Pattern) -> np.ndarray:
    """``out_i = sum_j p_ij v_j``; (N, H, d_h)."""
    return np.add.reduceat(p[:, :, None] * v[pat.cols], pat.starts, axis=0)


def sparse_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: Adjacency):
    """Masked scaled dot-product attention over (N, H, d_h) heads sharing ``mask``.

    Fused kernel; :func:`sddmm`, :func:`row_softmax` and :func:`spmm` are the
    same computation stage by stage.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise ShapeError(f"sparse_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[0] != mask.n_nodes:
        raise ShapeError(f"sparse_attention: {q.shape[0]} rows for a {mask.n_nodes}-node mask")
    pat = _pattern(mask)
    scale = 1.0 / math.sqrt(q.shape[2])
    qs = np.ascontiguousarray(q * scale)
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v)
    p, out = _kernels.attention_forward(qs, k, v, mask.indptr, pat.cols)
    return out, (qs, k, v, p, mask.indptr, pat, scale)


def sparse_attention_backward(dout: np.ndarray, cache):
    qs, k, v, p, indptr, pat, scale = cache
    dqs, dk, dv = _kernels.attention_backward(np.ascontiguousarray(dout, dtype=qs.dtype),
                                              qs, k, v, p, indptr, pat.cols, pat.perm)
    return dqs * scale, dk, dv


def dense_masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, dense_mask: np.ndarray):
    """Reference: full score matrix with masked-out logits set to -inf."""
    scale = 1.0 / math.sqrt(q.shape[2])
    out = np.empty_like(v)
    for h in range(q.shape[1]):
        s = (q[:, h] @ k[:, h].T) * scale
        s = np.where(dense_mask, s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        out[:, h] = (e / e.sum(axis=1, keepdims=True)) @ v[:, h]
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"{name:<28s} {err:.3e}" for name, err in sorted(self.errors.items())]
        lines.append(f"max {self.max_error:.3e} (tol {self.tolerance:.1e}) "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_diff_check(f, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      tolerance: float, max_entries: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare analytic ``grads`` of the scalar ``f(params)`` with central differences.

    The step for entry ``theta`` is ``1e-5 * (1 + |theta|)``. The error of a block
    is ``max |analytic - numeric| / max(max |numeric|, 1e-12)``. ``max_entries``
    subsamples large blocks.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, theta in params.items():
        if theta.dtype != np.float64:
            raise TypeError("finite differences run in binary64 only")
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            h = 1e-5 * (1.0 + abs(old))
            flat[i] = old + h
            fp = f(params)
            flat[i] = old - h
            fm = f(params)
            flat[i] = old
            num[n] = (fp - fm) / (2 * h)
        ana = np.asarray(grads[name], dtype=np.float64).reshape(-1)[idx]
        scale = max(np.abs(num).max(initial=0.0), 1e-12)
        errors[name] = float(np.abs(ana - num).max(initial=0.0) / scale)
    return GradCheckReport(errors, tolerance)
