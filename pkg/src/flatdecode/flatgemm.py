"""Flat GEMM (M much smaller than N, K): M padded to 8, N tiled in parallel,
K tiled sequentially per task, optional double-buffered tile staging.

Tile selection is driven by the compute/traffic ratio of a (B_N, B_K) tiling:
traffic per tile is the staged A and B panels, ratio = 2MK / (K + MK/B_N + M).
The ratio grows with B_N while the task parallelism N/B_N shrinks, so small-N
shapes get a parallelism-preserving tile and large-N shapes get a wide tile
plus double buffering.
"""

from dataclasses import dataclass

import numpy as np

from .backend import njit, prange, use_numba, apply_worker_count
from .matrix import GemmShape, ShapeError, pad_rows, validate_shape

MICROKERNEL_ROWS = 8       # register-block height; also the M padding multiple
MICROKERNEL_WIDTH = 8      # b_n is quantized to multiples of this (plus 1/2/4 for tiny N)
DEFAULT_B_K = 32


@dataclass(frozen=True)
class TileConfig:
    b_n: int
    b_k: int
    m_pad: int = MICROKERNEL_ROWS
    double_buffer: bool = False

    def __post_init__(self):
        if self.b_n < 1 or self.b_k < 1 or self.m_pad < 1:
            raise ValueError(f"tile sizes must be >= 1, got {self}")


@dataclass(frozen=True)
class CostEstimate:
    """Work and traffic of one tiled flat GEMM.

    ``bytes`` counts f32 elements moved (a constant factor of 4 off true
    bytes; the compute/traffic ratio is what drives decisions either way).
    """

    flops: int
    bytes: float
    intensity: float
    parallelism: float


def arithmetic_intensity(shape: GemmShape, b_n: int, b_k: int) -> CostEstimate:
    """Cost model for a (b_n, b_k) tiling of shape.

    Tiled count: each of the (N*K)/(B_N*B_K) tiles stages an M x B_K panel of
    A and a B_K x B_N panel of B, plus one M x N output pass. The closed form
    2MK / (K + MK/B_N + M) is the same quantity; both are computed in f64 and
    agree to rounding.
    """
    validate_shape(shape)
    m, n, k = shape
    if not (1 <= b_n <= n and 1 <= b_k <= k):
        raise ValueError(f"invalid tile ({b_n}, {b_k}) for shape {shape}")
    flops = 2 * m * n * k
    n_tiles = (n * k) / (b_n * b_k)
    traffic = (m * b_k + b_n * b_k) * n_tiles + m * n
    return CostEstimate(
        flops=flops,
        bytes=traffic,
        intensity=flops / traffic,
        parallelism=n / b_n,
    )


def _width_candidates(n: int):
    cands = [w for w in (1, 2, 4) if w <= n]
    cands += list(range(MICROKERNEL_WIDTH, n + 1, MICROKERNEL_WIDTH))
    return cands


def select_tile(shape: GemmShape, workers: int, parallel_target: int = None) -> TileConfig:
    """Pick a tile for the shape given the worker count.

    Small N is parallelism-bounded: choose b_n so N/b_n lands nearest the
    occupancy target (default 4x workers). Large N is memory-bounded: take
    the widest b_n that still keeps one tile per worker, and double-buffer
    the tile staging to hide the loads.
    """
    validate_shape(shape)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if parallel_target is None:
        parallel_target = 4 * workers
    n, k = shape.n, shape.k
    b_k = min(DEFAULT_B_K, k)
    cands = _width_candidates(n)

    if n <= parallel_target * MICROKERNEL_WIDTH:
        feasible = [w for w in cands if n / w >= workers] or cands
        b_n = min(feasible, key=lambda w: (abs(n / w - parallel_target), w))
        return TileConfig(b_n=b_n, b_k=b_k, double_buffer=False)

    feasible = [w for w in cands if n / w >= workers]
    b_n = max(feasible)  # intensity is strictly increasing in b_n
    return TileConfig(b_n=b_n, b_k=b_k, double_buffer=True)


# --- pipeline schedule -------------------------------------------------------

def double_buffer_pipeline(n_k_tiles: int):
    """Event schedule for double-buffered K-tile staging.

    Two staging buffers alternate: tile t computes out of buffer t%2 while
    tile t+1 is already staged in the other buffer. Guarantees, for every t:
    fill(t) precedes compute(t), and compute(t) precedes the refill of its
    buffer with tile t+2. One tile degenerates to fill+compute.
    """
    if n_k_tiles < 1:
        raise ValueError("need at least one K tile")
    events = [("fill", 0, 0)]
    if n_k_tiles > 1:
        events.append(("fill", 1, 1))
    for t in range(n_k_tiles):
        events.append(("compute", t, t % 2))
        if t + 2 < n_k_tiles:
            events.append(("fill", t + 2, (t + 2) % 2))
    return events


def _single_buffer_schedule(n_k_tiles: int):
    events = []
    for t in range(n_k_tiles):
        events.append(("fill", t, 0))
        events.append(("compute", t, 0))
    return events


# --- kernels ------------------------------------------------------------------

@njit(cache=True)
def _stage(A, B, bufA, bufB, s, k0, kl, n0, w):
    for mm in range(A.shape[0]):
        for kk in range(kl):
            bufA[s, mm, kk] = A[mm, k0 + kk]
    for kk in range(kl):
        for j in range(w):
            bufB[s, kk, j] = B[k0 + kk, n0 + j]


@njit(cache=True)
def _tile_mac(C, bufA, bufB, s, kl, n0, w):
    # 8-row register block; k ascending so the accumulation order never
    # depends on the tiling
    Mp = bufA.shape[1]
    for rb in range(0, Mp, MICROKERNEL_ROWS):
        r1 = min(rb + MICROKERNEL_ROWS, Mp)
        for kk in range(kl):
            for mm in range(rb, r1):
                a = bufA[s, mm, kk]
                for j in range(w):
                    C[mm, n0 + j] += a * bufB[s, kk, j]


@njit(parallel=True, cache=True)
def _flat_gemm_njit(A, B, C, bn, bk, double_buffer):
    Mp, K = A.shape
    N = B.shape[1]
    n_tiles = (N + bn - 1) // bn
    k_tiles = (K + bk - 1) // bk
    for ti in prange(n_tiles):
        n0 = ti * bn
        w = min(bn, N - n0)
        bufA = np.empty((2, Mp, bk), dtype=np.float32)
        bufB = np.empty((2, bk, bn), dtype=np.float32)
        if double_buffer:
            _stage(A, B, bufA, bufB, 0, 0, min(bk, K), n0, w)
            if k_tiles > 1:
                k0 = bk
                _stage(A, B, bufA, bufB, 1, k0, min(bk, K - k0), n0, w)
            for t in range(k_tiles):
                k0 = t * bk
                _tile_mac(C, bufA, bufB, t % 2, min(bk, K - k0), n0, w)
                if t + 2 < k_tiles:
                    k0 = (t + 2) * bk
                    _stage(A, B, bufA, bufB, (t + 2) % 2, k0, min(bk, K - k0), n0, w)
        else:
            for t in range(k_tiles):
                k0 = t * bk
                kl = min(bk, K - k0)
                _stage(A, B, bufA, bufB, 0, k0, kl, n0, w)
                _tile_mac(C, bufA, bufB, 0, kl, n0, w)


def _flat_gemm_numpy(A, B, C, bn, bk, double_buffer, recorder=None):
    Mp, K = A.shape
    N = B.shape[1]
    n_tiles = (N + bn - 1) // bn
    k_tiles = (K + bk - 1) // bk
    for ti in range(n_tiles):
        n0 = ti * bn
        w = min(bn, N - n0)
        bufA = np.empty((2, Mp, bk), dtype=np.float32)
        bufB = np.empty((2, bk, bn), dtype=np.float32)
        schedule = (double_buffer_pipeline(k_tiles) if double_buffer
                    else _single_buffer_schedule(k_tiles))
        for op, t, s in schedule:
            k0 = t * bk
            kl = min(bk, K - k0)
            if op == "fill":
                bufA[s, :, :kl] = A[:, k0:k0 + kl]
                bufB[s, :kl, :w] = B[k0:k0 + kl, n0:n0 + w]
            else:
                C[:, n0:n0 + w] += bufA[s, :, :kl] @ bufB[s, :kl, :w]
            if recorder is not None:
                recorder.append((op, ti, t, s))


def flat_gemm(a: np.ndarray, b: np.ndarray, cfg: TileConfig, record_events=None) -> np.ndarray:
    """Tiled flat GEMM; result equals the f64 oracle to f32 accumulation error.

    M is zero-padded to cfg.m_pad rows and truncated on return, so padding is
    transparent. Double buffering changes only the staging schedule, never the
    arithmetic order, so its output is bit-identical to the single-buffer path.

    Passing a list as ``record_events`` runs the schedule-driven (numpy)
    executor and appends (op, n_tile, k_tile, buffer) events to it.
    """
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    M = a.shape[0]
    N = b.shape[1]
    K = b.shape[0]
    bn = min(cfg.b_n, N)
    bk = min(cfg.b_k, K)
    A = pad_rows(np.ascontiguousarray(a, dtype=np.float32), cfg.m_pad)
    B = np.ascontiguousarray(b, dtype=np.float32)
    C = np.zeros((A.shape[0], N), dtype=np.float32)
    if record_events is not None:
        _flat_gemm_numpy(A, B, C, bn, bk, cfg.double_buffer, recorder=record_events)
    elif use_numba():
        apply_worker_count()
        _flat_gemm_njit(A, B, C, bn, bk, cfg.double_buffer)
    else:
        _flat_gemm_numpy(A, B, C, bn, bk, cfg.double_buffer)
    return C[:M]
