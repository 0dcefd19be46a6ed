import numpy as np
import pytest

from flatdecode.matrix import (GemmShape, ShapeError, as_matrix, gemm_oracle,
                               load_matrix, pad_rows, save_matrix, validate_shape)


class TestAsMatrix:
    def test_checked_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix([[1.0, np.nan], [0.0, 1.0]])

    def test_checked_rejects_inf(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix([[np.inf, 0.0]])

    def test_unchecked_allows_inf(self):
        a = as_matrix([[np.inf, 0.0]], checked=False)
        assert np.isinf(a[0, 0])

    def test_reshape_and_dtype(self):
        a = as_matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
        assert a.shape == (2, 3)
        assert a.dtype == np.float32
        assert a.flags.c_contiguous

    def test_rejects_wrong_dims(self):
        with pytest.raises(ShapeError):
            as_matrix(np.zeros((2, 2, 2)))
        with pytest.raises(ShapeError):
            as_matrix(np.zeros((0, 3)))

    def test_shape_validation(self):
        validate_shape(GemmShape(1, 1, 1))
        with pytest.raises(ShapeError):
            validate_shape(GemmShape(0, 4, 4))


class TestPadRows:
    def test_pads_3x4_to_8(self):
        a = np.arange(12, dtype=np.float32).reshape(3, 4)
        out = pad_rows(a, 8)
        assert out.shape == (8, 4)
        assert np.array_equal(out[:3], a)
        assert not out[3:].any()

    def test_aligned_input_returned_unchanged(self):
        a = np.ones((8, 4), dtype=np.float32)
        assert pad_rows(a, 8) is a

    def test_row_sums_of_padded_ones(self):
        out = pad_rows(np.ones((5, 2), dtype=np.float32), 4)
        assert out.shape == (8, 2)
        assert out.sum(axis=1).tolist() == [2, 2, 2, 2, 2, 0, 0, 0]

    def test_invalid_multiple(self):
        with pytest.raises(ValueError):
            pad_rows(np.ones((2, 2), dtype=np.float32), 0)


def _triple_loop_f64(a, b):
    # independent of the library's oracle on purpose
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += float(a[i, kk]) * float(b[kk, j])
            out[i][j] = acc
    return np.array(out, dtype=np.float64).astype(np.float32)


class TestGemmOracle:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 5), dtype=np.float32)
        assert np.array_equal(gemm_oracle(np.eye(3, dtype=np.float32), b), b)

    def test_hand_arithmetic(self):
        a = np.array([[1.0, 2.0]], dtype=np.float32)
        b = np.array([[3.0], [4.0]], dtype=np.float32)
        assert gemm_oracle(a, b).tolist() == [[11.0]]

    def test_matches_independent_triple_loop(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((7, 5), dtype=np.float32)
        b = rng.standard_normal((5, 9), dtype=np.float32)
        assert np.array_equal(gemm_oracle(a, b), _triple_loop_f64(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gemm_oracle(np.ones((2, 3), dtype=np.float32), np.ones((4, 2), dtype=np.float32))

    def test_padding_transparency(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 6), dtype=np.float32)
        b = rng.standard_normal((6, 4), dtype=np.float32)
        padded = gemm_oracle(pad_rows(a, 8), b)
        assert np.array_equal(padded[:3], gemm_oracle(a, b))
        assert not padded[3:].any()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 11), dtype=np.float32)
        b = rng.standard_normal((11, 7), dtype=np.float32)
        assert np.array_equal(gemm_oracle(a, b), gemm_oracle(a, b))


class TestMatrixFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 5), dtype=np.float32)
        path = tmp_path / "m.bin"
        save_matrix(a, path)
        assert np.array_equal(load_matrix(path), a)

    def test_header_is_little_endian_u32(self, tmp_path):
        path = tmp_path / "m.bin"
        save_matrix(np.zeros((2, 300), dtype=np.float32), path)
        raw = path.read_bytes()
        assert raw[:8] == (2).to_bytes(4, "little") + (300).to_bytes(4, "little")
        assert len(raw) == 8 + 2 * 300 * 4

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        save_matrix(np.zeros((4, 4), dtype=np.float32), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError, match="expected"):
            load_matrix(path)
