"""Median-of-reps wall-clock measurement for kernel profiling."""

import time

import numpy as np


def median_mad(samples):
    """Median and median absolute deviation of a sample list."""
    s = np.asarray(samples, dtype=np.float64)
    med = float(np.median(s))
    mad = float(np.median(np.abs(s - med)))
    return med, mad


def measure(fn, reps: int, warmup: int = 2):
    """Time fn() reps times on the monotonic clock, discarding warmup runs."""
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out
