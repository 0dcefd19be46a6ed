"""Softmax kernels: full-vector reference, chunked with synchronized max
rescaling, and chunk-independent with a fixed scaling factor.

The fixed-scaling-factor variant (``softmax_unified``) removes the running
max entirely: every exponential is e^(x_i - phi) for one precalibrated phi,
so chunks can be accumulated without ever rescaling each other. The price is
an overflow risk, which ``calibrate`` bounds statistically and
``check_bounds`` polices at runtime.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

# f32 exp overflows just above 88.72; staying below 88.0 / above -87.0 leaves
# headroom for accumulation and subnormal underflow
EXP_OVERFLOW_BOUND = 88.0
EXP_UNDERFLOW_BOUND = -87.0

NEG_INF = np.float32(-np.inf)


class SoftmaxOverflow(Exception):
    """A scaled exponential (or the running sum) left float32 range."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"exp overflow at element {index}")


class DegenerateSumError(Exception):
    """All scaled exponentials underflowed to zero; no renormalization is attempted."""


class UncalibratableRange(Exception):
    """Sample spread too wide for the f32 exponent budget; the unified-scaling
    technique is not applied to such distributions."""


class PartialSoftmaxState(NamedTuple):
    """Running (max, scaled exp-sum) over the elements absorbed so far."""

    m: np.float32
    l: np.float32


def identity_state() -> PartialSoftmaxState:
    return PartialSoftmaxState(NEG_INF, np.float32(0.0))


def _is_empty(s: PartialSoftmaxState) -> bool:
    return s.l == 0.0 and np.isneginf(s.m)


def state_from_logits(x) -> PartialSoftmaxState:
    """Single-pass state for a logit vector: m = max, l = sum of e^(x-m)."""
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        return identity_state()
    m = np.float32(x.max())
    l = np.float32(np.exp(x - m).sum(dtype=np.float32))
    return PartialSoftmaxState(m, l)


def merge_states(s1: PartialSoftmaxState, s2: PartialSoftmaxState) -> PartialSoftmaxState:
    """Combine two partial states: the one with the smaller max is rescaled.

    Commutative bit-for-bit; associative up to a final ulp or so of l.
    """
    if _is_empty(s1):
        return s2
    if _is_empty(s2):
        return s1
    m = max(s1.m, s2.m)
    t1 = np.float32(np.exp(np.float32(s1.m - m))) * s1.l
    t2 = np.float32(np.exp(np.float32(s2.m - m))) * s2.l
    return PartialSoftmaxState(np.float32(m), np.float32(t1 + t2))


def _check_vector(x, name="x"):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite elements")
    return x


def softmax_reference_f64(x) -> np.ndarray:
    """Max-subtracted softmax in float64; the oracle side of every comparison."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_reference(x) -> np.ndarray:
    """Full-vector softmax, float64 internally, rounded to float32."""
    x = _check_vector(x)
    return softmax_reference_f64(x).astype(np.float32)


def chunk_bounds(n: int, p: int) -> np.ndarray:
    """Offsets of p contiguous equal chunks of n; the last takes the remainder."""
    if not 1 <= p <= n:
        raise ValueError(f"partition count must be in [1, {n}], got {p}")
    base = n // p
    bounds = np.arange(p + 1, dtype=np.int64) * base
    bounds[p] = n
    return bounds


def partial_softmax_sync(x, p: int) -> np.ndarray:
    """Chunked softmax with synchronized max rescaling.

    Each chunk keeps its own (max, exp-sum) state; states are merged pairwise
    in chunk order and every chunk's exponentials are rescaled by
    e^(chunk max - global max) before the final division. p = 1 degenerates
    to the reference path.
    """
    x = _check_vector(x)
    bounds = chunk_bounds(x.size, p)
    if p == 1:
        return softmax_reference(x)

    exps = []
    states = []
    for j in range(p):
        xc = x[bounds[j]:bounds[j + 1]]
        m_j = np.float32(xc.max())
        e_j = np.exp(xc - m_j)
        exps.append(e_j)
        states.append(PartialSoftmaxState(m_j, np.float32(e_j.sum(dtype=np.float32))))

    merged = states[0]
    for s in states[1:]:
        merged = merge_states(merged, s)

    out = np.empty_like(x)
    for j in range(p):
        scale = np.float32(np.exp(np.float32(states[j].m - merged.m)))
        out[bounds[j]:bounds[j + 1]] = exps[j] * scale / merged.l
    return out


def softmax_unified(x, phi) -> np.ndarray:
    """Softmax with a fixed scaling factor instead of the max.

    out_i = e^(x_i - phi) / sum_j e^(x_j - phi). No max is computed and no
    chunk would ever need rescaling, which is the whole point; the caller is
    responsible for phi being safe (see ``check_bounds``/``calibrate``).

    Raises SoftmaxOverflow at the first element whose scaled exponential (or
    the running sum) is not representable in float32, and DegenerateSumError
    when every exponential underflows to zero.
    """
    x = _check_vector(x)
    phi = np.float32(phi)
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(x - phi)
    bad = np.nonzero(~np.isfinite(e))[0]
    if bad.size:
        raise SoftmaxOverflow(int(bad[0]))
    # accumulate in f64: the calibration bound b < 88 keeps each term
    # representable, and the widened sum cannot overflow in f64
    total = e.sum(dtype=np.float64)
    if total == 0.0:
        raise DegenerateSumError("all scaled exponentials underflowed to zero")
    if not np.isfinite(np.float32(total)):
        over = np.nonzero(np.cumsum(e, dtype=np.float64) > np.finfo(np.float32).max)[0]
        raise SoftmaxOverflow(int(over[0]))
    return (e / total).astype(np.float32)


@dataclass(frozen=True)
class ScalingCalibration:
    """Unified scaling factor with its validity band.

    (a, b) bound the shifted logit x - phi: values with a < x - phi < b are
    safe for the no-max path; anything outside triggers recomputation.
    coverage is the fraction of the calibration samples inside the band.
    """

    phi: float
    a: float
    b: float
    coverage: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a}, b={self.b}")
        if self.b >= EXP_OVERFLOW_BOUND:
            raise ValueError(f"b={self.b} breaks the f32 exponent bound {EXP_OVERFLOW_BOUND}")
        if self.a <= EXP_UNDERFLOW_BOUND:
            raise ValueError(f"a={self.a} breaks the f32 underflow bound {EXP_UNDERFLOW_BOUND}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must be in [0, 1], got {self.coverage}")


def check_bounds(x, calib: ScalingCalibration) -> Optional[int]:
    """First index with x_i - phi outside the open band (a, b); None if all safe.

    A violation is a normal outcome: it is the signal to fall back to the
    synchronized scheme.
    """
    x = np.asarray(x, dtype=np.float32)
    t = x - np.float32(calib.phi)
    viol = (t <= np.float32(calib.a)) | (t >= np.float32(calib.b))
    idx = np.nonzero(viol)[0]
    return int(idx[0]) if idx.size else None


def _counted_coverage(samples: np.ndarray, phi, a, b) -> float:
    t = samples - np.float32(phi)
    inside = (t > np.float32(a)) & (t < np.float32(b))
    return float(inside.sum()) / samples.size


def calibrate(samples, target_coverage: float, margin: float = 1.0) -> ScalingCalibration:
    """Fit a scaling factor and validity band to a sample of logits.

    phi anchors at the lower empirical quantile of the requested coverage
    band; the band is the quantile spread plus ``margin`` on each side.
    Bounds are widened sample-by-sample until the counted coverage reaches
    the target, so the reported coverage is guaranteed on the calibration
    set. Raises UncalibratableRange when the required b would break the f32
    exponent budget.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float32).ravel()
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    if not 0.5 < target_coverage <= 1.0:
        raise ValueError(f"target_coverage must be in (0.5, 1], got {target_coverage}")
    if not 0.0 < margin < -EXP_UNDERFLOW_BOUND:
        raise ValueError(f"margin must be in (0, {-EXP_UNDERFLOW_BOUND})")

    s = np.sort(samples.astype(np.float64))
    n = s.size
    q_lo = (1.0 - target_coverage) / 2.0
    q_hi = 1.0 - q_lo
    phi = float(np.quantile(s, q_lo, method="linear"))
    hi = float(np.quantile(s, q_hi, method="linear"))
    a = -float(margin)
    b = (hi - phi) + float(margin)

    # widen toward the extremes until the strict count meets the target;
    # quantile interpolation can leave it a hair short on small samples
    lo_i = int(np.searchsorted(s, phi, side="left"))
    hi_i = int(np.searchsorted(s, hi, side="right")) - 1
    while _counted_coverage(samples, phi, a, b) < target_coverage:
        if lo_i == 0 and hi_i == n - 1 and phi <= s[0] and hi >= s[-1]:
            break
        lo_i = max(0, lo_i - 1)
        hi_i = min(n - 1, hi_i + 1)
        phi = min(phi, float(s[lo_i]))
        hi = max(hi, float(s[hi_i]))
        b = (hi - phi) + float(margin)

    if float(np.float32(b)) >= EXP_OVERFLOW_BOUND:
        raise UncalibratableRange(
            f"required upper bound {b:.3g} exceeds the f32 exponent budget "
            f"{EXP_OVERFLOW_BOUND}; unified scaling is not applicable to this range"
        )
    coverage = _counted_coverage(samples, phi, a, b)
    return ScalingCalibration(phi=float(np.float32(phi)), a=float(np.float32(a)),
                              b=float(np.float32(b)), coverage=coverage)


# --- calibration file: one line, "phi a b coverage", decimal floats

def save_calibration(calib: ScalingCalibration, path) -> None:
    with open(path, "w") as f:
        f.write(f"{calib.phi!r} {calib.a!r} {calib.b!r} {calib.coverage!r}\n")


def load_calibration(path) -> ScalingCalibration:
    with open(path) as f:
        line = f.readline().strip()
    parts = line.split()
    if len(parts) != 4:
        raise ValueError(f"{path}: expected 'phi a b coverage', got {line!r}")
    phi, a, b, coverage = (float(v) for v in parts)
    return ScalingCalibration(phi=phi, a=a, b=b, coverage=coverage)
