"""Heuristic GEMM dispatch: three implementations, offline profiling of the
per-shape inflection points M1/M2, a persisted lookup table, and the runtime
three-way choice.

ImplA streams B once per output row with no cross-row blocking (the GEMV
regime), ImplB is the flat GEMM from ``flatgemm``, ImplC is a conventional
three-level blocked GEMM with a 64-row M tile. None of them is ever assumed
faster: the decision flow measures, per [N, K] shape, the smallest M where
ImplB overtakes ImplA (M1) and where ImplC overtakes ImplB (M2).
"""

import platform
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .backend import njit, prange, use_numba, apply_worker_count, worker_count, active_backend
from .matrix import GemmShape, ShapeError
from .flatgemm import flat_gemm, select_tile
from .timing import measure, median_mad

DEFAULT_M_SWEEP = (1, 2, 4, 8, 16, 32, 64, 128, 256)
DEFAULT_REPS = 7
DEFAULT_WARMUP = 2
_GEMV_PANEL = 256
_BLOCK_M = 64      # conventional-GEMM M tile
_BLOCK_N = 64
_BLOCK_K = 64

TABLE_MAGIC = "flatdecode-dispatch"
TABLE_VERSION = "v1"


class KernelChoice(Enum):
    IMPL_A = "ImplA"
    IMPL_B = "ImplB"
    IMPL_C = "ImplC"


class UnknownShape(KeyError):
    def __init__(self, n, k):
        self.n = n
        self.k = k
        super().__init__(f"no dispatch entry for [N={n}, K={k}]")


class TimingUnstable(RuntimeError):
    pass


# --- ImplA: row-replicated streaming dot products ----------------------------

@njit(parallel=True, cache=True)
def _gemv_rows_njit(A, B, C, panel):
    M, K = A.shape
    N = B.shape[1]
    panels = (N + panel - 1) // panel
    for t in prange(M * panels):
        r = t // panels
        j0 = (t % panels) * panel
        w = min(panel, N - j0)
        out = np.zeros(w, dtype=np.float32)
        for k in range(K):
            a = A[r, k]
            for j in range(w):
                out[j] += a * B[k, j0 + j]
        for j in range(w):
            C[r, j0 + j] = out[j]


def impl_a_gemv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vector-oriented path: each row is an independent GEMV over B panels.

    No M padding and no register blocking across rows; correct for any M but
    only sensible when M is small.
    """
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    A = np.ascontiguousarray(a, dtype=np.float32)
    B = np.ascontiguousarray(b, dtype=np.float32)
    C = np.empty((A.shape[0], B.shape[1]), dtype=np.float32)
    if use_numba():
        apply_worker_count()
        _gemv_rows_njit(A, B, C, _GEMV_PANEL)
    else:
        for r in range(A.shape[0]):
            C[r] = A[r] @ B
    return C


# --- ImplC: conventional blocked GEMM ----------------------------------------

@njit(parallel=True, cache=True)
def _blocked_gemm_njit(A, B, C, bm, bn, bk):
    M, K = A.shape
    N = B.shape[1]
    m_tiles = (M + bm - 1) // bm
    n_tiles = (N + bn - 1) // bn
    k_tiles = (K + bk - 1) // bk
    for t in prange(m_tiles * n_tiles):
        m0 = (t // n_tiles) * bm
        n0 = (t % n_tiles) * bn
        m1 = min(m0 + bm, M)
        n1 = min(n0 + bn, N)
        for kt in range(k_tiles):
            k0 = kt * bk
            k1 = min(k0 + bk, K)
            for k in range(k0, k1):
                for mm in range(m0, m1):
                    a = A[mm, k]
                    for j in range(n0, n1):
                        C[mm, j] += a * B[k, j]


def impl_c_blocked(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Three-level blocked GEMM, parallel over (M, N) tile pairs."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    A = np.ascontiguousarray(a, dtype=np.float32)
    B = np.ascontiguousarray(b, dtype=np.float32)
    M, K = A.shape
    N = B.shape[1]
    C = np.zeros((M, N), dtype=np.float32)
    if use_numba():
        apply_worker_count()
        _blocked_gemm_njit(A, B, C, _BLOCK_M, _BLOCK_N, _BLOCK_K)
    else:
        for m0 in range(0, M, _BLOCK_M):
            m1 = min(m0 + _BLOCK_M, M)
            for n0 in range(0, N, _BLOCK_N):
                n1 = min(n0 + _BLOCK_N, N)
                for k0 in range(0, K, _BLOCK_K):
                    k1 = min(k0 + _BLOCK_K, K)
                    C[m0:m1, n0:n1] += A[m0:m1, k0:k1] @ B[k0:k1, n0:n1]
    return C


def impl_b_flat(a: np.ndarray, b: np.ndarray, workers: int = None) -> np.ndarray:
    """The flat GEMM path under its own tile heuristic."""
    if workers is None:
        workers = worker_count()
    shape = GemmShape(a.shape[0], b.shape[1], b.shape[0])
    return flat_gemm(a, b, select_tile(shape, workers))


IMPLEMENTATIONS = {
    KernelChoice.IMPL_A: impl_a_gemv,
    KernelChoice.IMPL_B: impl_b_flat,
    KernelChoice.IMPL_C: impl_c_blocked,
}


def run_kernel(choice: KernelChoice, a, b) -> np.ndarray:
    return IMPLEMENTATIONS[choice](a, b)


# --- dispatch table -----------------------------------------------------------

@dataclass(frozen=True)
class DispatchEntry:
    n: int
    k: int
    m1: int
    m2: int

    def __post_init__(self):
        if not 1 <= self.m1 <= self.m2:
            raise ValueError(f"need 1 <= m1 <= m2, got m1={self.m1}, m2={self.m2}")


@dataclass
class DispatchTable:
    fingerprint: str
    version: str = TABLE_VERSION
    entries: dict = field(default_factory=dict)

    def add(self, entry: DispatchEntry):
        self.entries[(entry.n, entry.k)] = entry

    def lookup(self, n: int, k: int) -> DispatchEntry:
        try:
            return self.entries[(n, k)]
        except KeyError:
            raise UnknownShape(n, k) from None


def dispatch(m: int, n: int, k: int, table: DispatchTable) -> KernelChoice:
    """Total, deterministic three-way choice: ImplA below M1, ImplB in
    [M1, M2), ImplC from M2 up. Unknown (n, k) is an error, never a default."""
    e = table.lookup(n, k)
    if m < e.m1:
        return KernelChoice.IMPL_A
    if m < e.m2:
        return KernelChoice.IMPL_B
    return KernelChoice.IMPL_C


def default_fingerprint(workers: int = None) -> str:
    if workers is None:
        workers = worker_count()
    return f"{platform.system().lower()}-{platform.machine()}-{active_backend()}-{workers}w"


def save_table(table: DispatchTable, path) -> None:
    with open(path, "w") as f:
        f.write(f"{TABLE_MAGIC} {table.version} {table.fingerprint}\n")
        for (n, k) in sorted(table.entries):
            e = table.entries[(n, k)]
            f.write(f"{e.n} {e.k} {e.m1} {e.m2}\n")


def load_table(path, expected_fingerprint: str = None) -> DispatchTable:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}:1: empty dispatch table file")
    head = lines[0].split(maxsplit=2)
    if len(head) != 3 or head[0] != TABLE_MAGIC:
        raise ValueError(f"{path}:1: bad header {lines[0]!r}")
    if head[1] != TABLE_VERSION:
        raise ValueError(f"{path}:1: unsupported version {head[1]!r} (want {TABLE_VERSION})")
    table = DispatchTable(fingerprint=head[2])
    for i, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{i}: expected 'N K M1 M2', got {line!r}")
        try:
            n, k, m1, m2 = (int(v) for v in parts)
            table.add(DispatchEntry(n=n, k=k, m1=m1, m2=m2))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    if expected_fingerprint is not None and table.fingerprint != expected_fingerprint:
        warnings.warn(
            f"dispatch table fingerprint {table.fingerprint!r} does not match "
            f"this environment ({expected_fingerprint!r}); timings may not transfer",
            stacklevel=2,
        )
    return table


# --- decision flow --------------------------------------------------------------

def _first_sustained(costs_new, costs_old, start=0):
    """Index of the first sweep point from ``start`` where new <= old and the
    win persists for all larger sampled points.

    Persistence allows single-point noise flips but not two consecutive ones;
    the initial win must itself hold at two consecutive points (or be the
    last point of the sweep)."""
    n = len(costs_new)
    for i in range(start, n):
        if costs_new[i] > costs_old[i]:
            continue
        if i < n - 1 and costs_new[i + 1] > costs_old[i + 1]:
            continue
        relapsed = any(costs_new[j] > costs_old[j] and costs_new[j + 1] > costs_old[j + 1]
                       for j in range(i + 1, n - 1))
        if not relapsed:
            return i
    return None


def _time_impl(fn, reps, warmup, context):
    for _ in range(3):
        samples = measure(fn, reps=reps, warmup=warmup)
        med, mad = median_mad(samples)
        if med == 0.0 or mad <= 0.2 * med:
            return med, mad
        warmup = 1  # already hot; just remeasure
    raise TimingUnstable(f"timing noise above 20% of median for {context}")


def profile_shape(n: int, k: int, m_sweep=DEFAULT_M_SWEEP, reps: int = DEFAULT_REPS,
                  workers: int = None, warmup: int = DEFAULT_WARMUP, timers=None,
                  seed: int = 0, details: list = None) -> DispatchEntry:
    """Measure the three implementations over an ascending M sweep and locate
    the inflection points.

    M1 is the first sweep point where ImplB's median run time overtakes
    ImplA's and keeps the lead for the rest of the sweep (single-point noise
    flips are forgiven, two consecutive are not); M2 likewise for ImplC over
    ImplB, searched from M1 upward. If ImplB never wins, the band collapses
    (m1 == m2) at the direct ImplA-to-ImplC crossover; with no crossover at
    all both points land one step beyond the sweep. ``timers`` substitutes
    analytic cost functions {impl name: f(m) -> seconds} for wall-clock
    measurement. Per-point medians are appended to ``details`` when a list
    is passed.
    """
    m_sweep = list(m_sweep)
    if len(m_sweep) < 2 or any(b <= a for a, b in zip(m_sweep, m_sweep[1:])):
        raise ValueError("m_sweep must be ascending with at least 2 points")
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if workers is None:
        workers = worker_count()

    names = [c.value for c in KernelChoice]
    medians = {name: [] for name in names}
    rng = np.random.default_rng(seed)
    for m in m_sweep:
        if timers is None:
            a = rng.standard_normal((m, k), dtype=np.float32)
            b = rng.standard_normal((k, n), dtype=np.float32)
            runs = {
                "ImplA": lambda: impl_a_gemv(a, b),
                "ImplB": lambda: impl_b_flat(a, b, workers),
                "ImplC": lambda: impl_c_blocked(a, b),
            }
        point = {"m": m}
        for name in names:
            if timers is not None:
                med, mad = float(timers[name](m)), 0.0
            else:
                med, mad = _time_impl(runs[name], reps, warmup,
                                      f"{name} at M={m} [N={n}, K={k}]")
            medians[name].append(med)
            point[name] = med
            point[f"{name}_mad"] = mad
        if details is not None:
            details.append(point)

    beyond = 2 * m_sweep[-1]
    i1 = _first_sustained(medians["ImplB"], medians["ImplA"])
    if i1 is None:
        # ImplB never wins: empty band at the direct A-to-C crossover
        iac = _first_sustained(medians["ImplC"], medians["ImplA"])
        m1 = m2 = m_sweep[iac] if iac is not None else beyond
    else:
        # the B-to-C crossover is only meaningful inside B's regime
        i2 = _first_sustained(medians["ImplC"], medians["ImplB"], start=i1)
        m1 = m_sweep[i1]
        m2 = max(m1, m_sweep[i2]) if i2 is not None else beyond
    return DispatchEntry(n=n, k=k, m1=m1, m2=m2)
