"""Dense row-major float32 matrices, zero padding, and the float64 GEMM oracle.

A "matrix" throughout this package is a 2-D C-contiguous float32 ndarray.
``as_matrix`` is the checked constructor; kernels operate on the raw arrays
and may produce non-finite values internally (overflow detection depends on
that), so finiteness is enforced on inputs only.
"""

from typing import NamedTuple

import numpy as np

from .backend import njit, use_numba


class ShapeError(ValueError):
    pass


class GemmShape(NamedTuple):
    m: int
    n: int
    k: int


def validate_shape(shape: GemmShape) -> GemmShape:
    if shape.m < 1 or shape.n < 1 or shape.k < 1:
        raise ShapeError(f"GEMM dims must be >= 1, got {shape}")
    return shape


def as_matrix(data, rows: int = None, cols: int = None, checked: bool = True) -> np.ndarray:
    """Return a C-contiguous float32 matrix, validating the type invariants.

    With ``checked`` (the default) non-finite elements are rejected. Pass
    rows/cols to reshape flat input or to assert the expected shape.
    """
    a = np.ascontiguousarray(data, dtype=np.float32)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ShapeError("rows and cols must be given together")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"matrix dims must be >= 1, got {a.shape}")
    if checked and not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(f"non-finite element at ({bad[0]}, {bad[1]})")
    return a


def pad_rows(a: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad to the smallest row count that is a multiple of ``multiple``.

    Already-aligned input is returned as-is (matrices are immutable by
    convention, so sharing is safe). Original rows are preserved bit-exactly.
    """
    if multiple < 1:
        raise ValueError("padding multiple must be >= 1")
    rows = a.shape[0]
    padded = ((rows + multiple - 1) // multiple) * multiple
    if padded == rows:
        return a
    out = np.zeros((padded, a.shape[1]), dtype=np.float32)
    out[:rows] = a
    return out


@njit(cache=True)
def _gemm_oracle_njit(a64, b64, c64):
    m, k = a64.shape
    n = b64.shape[1]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a64[i, kk] * b64[kk, j]
            c64[i, j] = acc


def _gemm_oracle_numpy(a64, b64, c64):
    # outer-product accumulation keeps the per-element order ascending in k,
    # matching the scalar loop bit-for-bit
    k = a64.shape[1]
    for kk in range(k):
        c64 += np.outer(a64[:, kk], b64[kk, :])


def gemm_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference GEMM: float64 accumulation in ascending-k order, rounded to
    float32 at the end. Single-threaded and bit-deterministic; every kernel
    in this package is checked against it.
    """
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    c64 = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    if use_numba():
        _gemm_oracle_njit(a64, b64, c64)
    else:
        _gemm_oracle_numpy(a64, b64, c64)
    return c64.astype(np.float32)


# --- binary matrix files: u32 rows, u32 cols (little-endian), then
# --- rows*cols float32 values row-major

def save_matrix(a: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(np.array(a.shape, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    rows, cols = np.frombuffer(raw[:8], dtype="<u4")
    rows, cols = int(rows), int(cols)
    expect = 8 + rows * cols * 4
    if len(raw) != expect:
        raise ValueError(f"{path}: expected {expect} bytes for {rows}x{cols}, got {len(raw)}")
    data = np.frombuffer(raw[8:], dtype="<f4").astype(np.float32)
    return as_matrix(data, rows, cols, checked=False)
