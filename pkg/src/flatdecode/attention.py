"""Decode-phase attention for one query step against a K/V cache.

Three row kernels:

* ``attention_reference``: all-float64 oracle.
* ``decode_attention_sync``: K/V rows split into p chunks, each chunk keeps
  (max, exp-sum, weighted accumulator), chunks joined with max rescaling.
* ``decode_attention_async``: chunks share one precalibrated scaling factor,
  accumulate independently with no max and no rescaling, and the whole row
  falls back to the synchronized kernel when any logit leaves the calibrated
  band.

``batch_decode_attention`` applies a kernel per query row and instruments the
join: it counts executed rescale multiplications and max reductions, which is
how the "no synchronization work on the fast path" claim is made testable.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .backend import njit, prange, use_numba, apply_worker_count
from .matrix import ShapeError
from .softmax import ScalingCalibration, chunk_bounds

MODES = ("reference", "sync", "async")


class PartialAttnState(NamedTuple):
    """One worker's chunk accumulation: num = sum e^(x-phi) * v, den = sum e^(x-phi).

    overflow_index is the first out-of-band global element index, or -1. When
    it is set, num/den are zeroed; the row is recomputed anyway.
    """

    num: np.ndarray
    den: np.float32
    overflow_index: int = -1

    @property
    def overflowed(self) -> bool:
        return self.overflow_index >= 0


@dataclass(frozen=True)
class AttentionConfig:
    p: int
    scale: float
    calib: Optional[ScalingCalibration] = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"partition count must be >= 1, got {self.p}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


@dataclass
class AttnStats:
    rows_recomputed: int = 0
    rescale_ops: int = 0     # executed e^(m_chunk - m_global) partial-result multiplies
    max_ops: int = 0         # executed max reductions (per-chunk and global)


def _check_qkv(Q, K, V):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must be 2-D")
    if K.shape != V.shape:
        raise ShapeError(f"K and V shapes disagree: {K.shape} vs {V.shape}")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"head dims disagree: Q {Q.shape} vs K {K.shape}")
    if K.shape[0] < 1:
        raise ShapeError("K/V cache must hold at least one row")


def attention_reference(Q, K, V, scale) -> np.ndarray:
    """softmax(scale * Q K^T) V with every intermediate in float64."""
    Q = np.ascontiguousarray(Q, dtype=np.float32)
    K = np.ascontiguousarray(K, dtype=np.float32)
    V = np.ascontiguousarray(V, dtype=np.float32)
    _check_qkv(Q, K, V)
    S = float(scale) * (Q.astype(np.float64) @ K.astype(np.float64).T)
    E = np.exp(S - S.max(axis=1, keepdims=True))
    P = E / E.sum(axis=1, keepdims=True)
    return (P @ V.astype(np.float64)).astype(np.float32)


# --- synchronized chunk partials -------------------------------------------

@njit(parallel=True, cache=True)
def _sync_partials_njit(Q, K, V, scale, bounds, m_out, l_out, acc_out):
    M, d = Q.shape
    p = bounds.size - 1
    for t in prange(M * p):
        r = t // p
        j = t % p
        lo = bounds[j]
        hi = bounds[j + 1]
        x = np.empty(hi - lo, dtype=np.float32)
        m = np.float32(-np.inf)
        for i in range(lo, hi):
            acc = np.float32(0.0)
            for c in range(d):
                acc += Q[r, c] * K[i, c]
            xi = scale * acc
            x[i - lo] = xi
            if xi > m:
                m = xi
        l = np.float32(0.0)
        accv = np.zeros(d, dtype=np.float32)
        for i in range(lo, hi):
            e = np.exp(x[i - lo] - m)
            l += e
            for c in range(d):
                accv[c] += e * V[i, c]
        m_out[r, j] = m
        l_out[r, j] = l
        for c in range(d):
            acc_out[r, j, c] = accv[c]


def _sync_partials_numpy(Q, K, V, scale, bounds, m_out, l_out, acc_out):
    p = bounds.size - 1
    for j in range(p):
        lo, hi = bounds[j], bounds[j + 1]
        X = np.float32(scale) * (Q @ K[lo:hi].T)
        m = X.max(axis=1)
        E = np.exp(X - m[:, None])
        m_out[:, j] = m
        l_out[:, j] = E.sum(axis=1, dtype=np.float32)
        acc_out[:, j, :] = E @ V[lo:hi]


def _sync_partials(Q, K, V, scale, bounds):
    M, d = Q.shape
    p = bounds.size - 1
    m = np.empty((M, p), dtype=np.float32)
    l = np.empty((M, p), dtype=np.float32)
    acc = np.empty((M, p, d), dtype=np.float32)
    if use_numba():
        apply_worker_count()
        _sync_partials_njit(Q, K, V, np.float32(scale), bounds, m, l, acc)
    else:
        _sync_partials_numpy(Q, K, V, scale, bounds, m, l, acc)
    return m, l, acc


def _sync_join(m, l, acc, stats: AttnStats):
    """Rescale every chunk's partials to the row max and divide. Counts the
    synchronization work it performs."""
    M, p = m.shape
    m_row = m.max(axis=1)
    stats.max_ops += M * p + M          # per-chunk maxima plus the global one
    num = np.zeros((M, acc.shape[2]), dtype=np.float32)
    den = np.zeros(M, dtype=np.float32)
    for j in range(p):                   # join in chunk-index order
        f = np.exp(m[:, j] - m_row)
        num += f[:, None] * acc[:, j, :]
        den += f * l[:, j]
        stats.rescale_ops += 2 * M       # one acc rescale + one l rescale per row
    return num / den[:, None]


# --- asynchronized chunk partials ------------------------------------------

@njit(parallel=True, cache=True)
def _async_partials_njit(Q, K, V, scale, phi, a, b, bounds, num_out, den_out, viol_out):
    M, d = Q.shape
    p = bounds.size - 1
    for t in prange(M * p):
        r = t // p
        j = t % p
        lo = bounds[j]
        hi = bounds[j + 1]
        den = 0.0
        num = np.zeros(d, dtype=np.float64)
        viol = -1
        for i in range(lo, hi):
            acc = np.float32(0.0)
            for c in range(d):
                acc += Q[r, c] * K[i, c]
            ti = scale * acc - phi
            if ti <= a or ti >= b:
                viol = i             # worker terminates its chunk here
                break
            e = np.exp(ti)
            den += e
            for c in range(d):
                num[c] += e * V[i, c]
        if viol >= 0:
            den_out[r, j] = 0.0
            for c in range(d):
                num_out[r, j, c] = 0.0
        else:
            den_out[r, j] = den
            for c in range(d):
                num_out[r, j, c] = num[c]
        viol_out[r, j] = viol


def _async_partials_numpy(Q, K, V, scale, phi, a, b, bounds, num_out, den_out, viol_out):
    p = bounds.size - 1
    for j in range(p):
        lo, hi = bounds[j], bounds[j + 1]
        T = np.float32(scale) * (Q @ K[lo:hi].T) - np.float32(phi)
        outside = (T <= np.float32(a)) | (T >= np.float32(b))
        bad = outside.any(axis=1)
        with np.errstate(over="ignore", under="ignore"):
            E = np.exp(T)
        E[bad] = 0.0
        den_out[:, j] = E.sum(axis=1, dtype=np.float64)
        num_out[:, j, :] = E.astype(np.float64) @ V[lo:hi].astype(np.float64)
        viol_out[:, j] = np.where(bad, lo + np.argmax(outside, axis=1), -1)


def _async_partials(Q, K, V, cfg: AttentionConfig, bounds):
    M, d = Q.shape
    p = bounds.size - 1
    num = np.empty((M, p, d), dtype=np.float64)
    den = np.empty((M, p), dtype=np.float64)
    viol = np.empty((M, p), dtype=np.int64)
    c = cfg.calib
    if use_numba():
        apply_worker_count()
        _async_partials_njit(Q, K, V, np.float32(cfg.scale), np.float32(c.phi),
                             np.float32(c.a), np.float32(c.b), bounds, num, den, viol)
    else:
        _async_partials_numpy(Q, K, V, cfg.scale, c.phi, c.a, c.b, bounds, num, den, viol)
    # round chunk states to their stored f32 form; a chunk whose state is not
    # f32-representable is treated like a bounds violation (recompute path)
    num32 = num.astype(np.float32)
    den32 = den.astype(np.float32)
    unrep = ~(np.isfinite(den32) & np.isfinite(num32).all(axis=2))
    if unrep.any():
        viol = viol.copy()
        viol[unrep & (viol < 0)] = bounds[:-1][np.nonzero(unrep & (viol < 0))[1]]
    return num32, den32, viol


def async_chunk_state(q, K, V, lo: int, hi: int, cfg: AttentionConfig) -> PartialAttnState:
    """One worker's state for K/V rows [lo, hi) of a single query row."""
    Q = np.ascontiguousarray(q, dtype=np.float32).reshape(1, -1)
    bounds = np.array([lo, hi], dtype=np.int64)
    num, den, viol = _async_partials(Q, K, V, cfg, bounds)
    return PartialAttnState(num[0, 0], np.float32(den[0, 0]), int(viol[0, 0]))


# --- row kernels and the batch wrapper --------------------------------------

def _prep(Q, K, V, cfg: AttentionConfig):
    Q = np.ascontiguousarray(Q, dtype=np.float32)
    K = np.ascontiguousarray(K, dtype=np.float32)
    V = np.ascontiguousarray(V, dtype=np.float32)
    _check_qkv(Q, K, V)
    bounds = chunk_bounds(K.shape[0], cfg.p)
    return Q, K, V, bounds


def _batch_sync(Q, K, V, cfg, stats: AttnStats):
    Q, K, V, bounds = _prep(Q, K, V, cfg)
    m, l, acc = _sync_partials(Q, K, V, cfg.scale, bounds)
    return _sync_join(m, l, acc, stats)


def _batch_async(Q, K, V, cfg, stats: AttnStats):
    if cfg.calib is None:
        raise ValueError("async mode requires a ScalingCalibration")
    Q, K, V, bounds = _prep(Q, K, V, cfg)
    num, den, viol = _async_partials(Q, K, V, cfg, bounds)
    redo = (viol >= 0).any(axis=1)
    M, p, d = num.shape
    out = np.empty((M, d), dtype=np.float32)
    ok = ~redo
    if ok.any():
        # the whole point: plain addition across chunks, no max, no rescale
        num_row = np.zeros((int(ok.sum()), d), dtype=np.float64)
        den_row = np.zeros(int(ok.sum()), dtype=np.float64)
        for j in range(p):
            num_row += num[ok, j, :]
            den_row += den[ok, j]
        out[ok] = (num_row / den_row[:, None]).astype(np.float32)
    if redo.any():
        stats.rows_recomputed += int(redo.sum())
        out[redo] = _batch_sync(Q[redo], K, V, cfg, stats)
    return out


def decode_attention_sync(q, K, V, cfg: AttentionConfig) -> np.ndarray:
    """Synchronized split-cache attention for one query row."""
    stats = AttnStats()
    o = _batch_sync(np.reshape(q, (1, -1)), K, V, cfg, stats)
    return o[0]


def decode_attention_async(q, K, V, cfg: AttentionConfig):
    """Unified-scaling attention for one query row.

    Returns (output, recomputed). The output always matches the reference:
    if any chunk logit leaves the calibrated band, all partials for the row
    are discarded and the row is recomputed with the synchronized kernel.
    """
    stats = AttnStats()
    o = _batch_async(np.reshape(q, (1, -1)), K, V, cfg, stats)
    return o[0], stats.rows_recomputed > 0


def batch_decode_attention(Q, K, V, cfg: AttentionConfig, mode: str):
    """Apply the selected row kernel to every query row.

    Returns (O, AttnStats). In async mode the rescale/max counters reflect
    only the work done inside recomputed rows.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    stats = AttnStats()
    if mode == "reference":
        return attention_reference(Q, K, V, cfg.scale), stats
    if mode == "sync":
        return _batch_sync(Q, K, V, cfg, stats), stats
    return _batch_async(Q, K, V, cfg, stats), stats
