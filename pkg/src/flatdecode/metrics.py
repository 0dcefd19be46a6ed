"""Error metrics for kernel-vs-oracle comparisons.

Softmax outputs are compared element-relative (every element of a softmax has
a well-conditioned relative error). Matrix kernels accumulate in f32, so
elements that land near zero by cancellation carry absolute, not relative,
error; those are compared against the row magnitude instead.
"""

import numpy as np


def rel_error_elementwise(actual, oracle, floor: float = 1e-12) -> float:
    """max |actual - oracle| / max(|oracle|, floor) over all elements."""
    a = np.asarray(actual, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    return float((np.abs(a - o) / np.maximum(np.abs(o), floor)).max())


def rel_error_rowwise(actual, oracle, floor: float = 1e-8) -> float:
    """max over rows of (max row |diff|) / max(row magnitude, floor).

    Row magnitude is the largest |oracle| element of the row, the natural
    scale of a row computed by f32 accumulation.
    """
    a = np.asarray(actual, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
        o = o[None, :]
    diff = np.abs(a - o).max(axis=1)
    scale = np.maximum(np.abs(o).max(axis=1), floor)
    return float((diff / scale).max())
