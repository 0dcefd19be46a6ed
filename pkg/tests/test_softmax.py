import math

import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings, strategies as st

from flatdecode.metrics import rel_error_elementwise
from flatdecode.softmax import (DegenerateSumError, ScalingCalibration,
                                SoftmaxOverflow, UncalibratableRange, calibrate, check_bounds,
                                identity_state, load_calibration, merge_states,
                                partial_softmax_sync, save_calibration, softmax_reference,
                                softmax_reference_f64, softmax_unified, state_from_logits)

logit_vectors = st.lists(st.floats(-40.0, 40.0, width=32), min_size=1, max_size=200).map(
    lambda v: np.array(v, dtype=np.float32))


class TestReference:
    @pytest.mark.parametrize("c", [0.0, 5.0, -100.0, 3.75])
    def test_constant_vector_is_uniform(self, c):
        out = softmax_reference(np.full(4, c, dtype=np.float32))
        assert np.array_equal(out, np.full(4, 0.25, dtype=np.float32))

    def test_log3_example(self):
        out = softmax_reference(np.array([0.0, math.log(3.0)], dtype=np.float32))
        assert np.allclose(out, [0.25, 0.75], rtol=1e-6)

    def test_matches_scipy_in_f64(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-30, 30, 64).astype(np.float32)
        ours = softmax_reference_f64(x)
        theirs = scipy.special.softmax(x.astype(np.float64))
        assert np.abs(ours - theirs).max() <= 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-20, 20, 513).astype(np.float32)
        assert abs(float(softmax_reference(x).sum(dtype=np.float64)) - 1.0) <= 1e-6

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax_reference(np.array([], dtype=np.float32))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            softmax_reference(np.array([1.0, np.inf], dtype=np.float32))


class TestMergeStates:
    def test_identity_element(self):
        s = state_from_logits(np.array([1.5, -2.0], dtype=np.float32))
        for merged in (merge_states(s, identity_state()), merge_states(identity_state(), s)):
            assert merged.m == s.m and merged.l == s.l

    def test_merge_equals_direct_state(self):
        s1 = state_from_logits(np.array([1.0, 2.0], dtype=np.float32))
        s2 = state_from_logits(np.array([3.0, 4.0], dtype=np.float32))
        merged = merge_states(s1, s2)
        direct = state_from_logits(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))
        assert merged.m == direct.m
        assert abs(float(merged.l) - float(direct.l)) <= 2 * float(np.spacing(direct.l))

    @given(logit_vectors, logit_vectors)
    @settings(max_examples=200, deadline=None)
    def test_commutative_bitwise(self, xs, ys):
        s1, s2 = state_from_logits(xs), state_from_logits(ys)
        ab, ba = merge_states(s1, s2), merge_states(s2, s1)
        assert ab.m == ba.m and ab.l == ba.l

    @given(logit_vectors, logit_vectors, logit_vectors)
    @settings(max_examples=200, deadline=None)
    def test_associative_within_two_ulps(self, xs, ys, zs):
        a, b, c = (state_from_logits(v) for v in (xs, ys, zs))
        l1 = merge_states(merge_states(a, b), c).l
        l2 = merge_states(a, merge_states(b, c)).l
        assert abs(float(l1) - float(l2)) <= 2 * float(np.spacing(max(l1, l2)))


class TestPartialSync:
    def test_p1_identical_to_reference(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-15, 15, 37).astype(np.float32)
        assert np.array_equal(partial_softmax_sync(x, 1), softmax_reference(x))

    def test_small_example_p2(self):
        x = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
        assert np.abs(partial_softmax_sync(x, 2) - softmax_reference(x)).max() <= 1e-6

    def test_p_equals_len(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-10, 10, 33).astype(np.float32)
        assert np.abs(partial_softmax_sync(x, x.size) - softmax_reference(x)).max() <= 1e-6

    @pytest.mark.parametrize("p", [0, -1, 100])
    def test_invalid_partition(self, p):
        with pytest.raises(ValueError):
            partial_softmax_sync(np.ones(5, dtype=np.float32), p)

    @given(logit_vectors, st.data())
    @settings(max_examples=150, deadline=None)
    def test_independent_of_partition_count(self, x, data):
        p = data.draw(st.integers(1, x.size))
        base = partial_softmax_sync(x, 1)
        assert np.abs(partial_softmax_sync(x, p) - base).max() <= 1e-6


class TestUnified:
    def test_phi_invariance_example(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        o1 = softmax_unified(x, 0.0)
        o2 = softmax_unified(x, 2.0)
        assert np.argmax(o1) == np.argmax(o2)
        assert np.abs(o1 - o2).max() <= 1e-6

    def test_all_at_phi_is_uniform(self):
        out = softmax_unified(np.full(5, 3.25, dtype=np.float32), 3.25)
        assert np.all(out == out[0])
        assert abs(float(out.sum(dtype=np.float64)) - 1.0) <= 1e-6

    def test_overflow_reports_first_index(self):
        with pytest.raises(SoftmaxOverflow) as exc:
            softmax_unified(np.array([100.0], dtype=np.float32), 0.0)
        assert exc.value.index == 0

    def test_overflow_index_skips_safe_prefix(self):
        with pytest.raises(SoftmaxOverflow) as exc:
            softmax_unified(np.array([1.0, 2.0, 95.0, 99.0], dtype=np.float32), 0.0)
        assert exc.value.index == 2

    def test_degenerate_sum(self):
        with pytest.raises(DegenerateSumError):
            softmax_unified(np.array([-200.0, -150.0], dtype=np.float32), 0.0)

    @given(st.lists(st.floats(-80.0, 80.0, width=32), min_size=1, max_size=300),
           st.floats(-5.0, 5.0))
    @settings(max_examples=200, deadline=None)
    def test_matches_reference_within_safe_band(self, vals, phi):
        # all |x - phi| <= 80 by construction
        x = np.array(vals, dtype=np.float32) + np.float32(phi)
        ref = softmax_reference_f64(x)
        assert rel_error_elementwise(softmax_unified(x, phi), ref) <= 1e-5

    @given(st.lists(st.floats(-20.0, 20.0, width=32), min_size=2, max_size=300),
           st.floats(-30.0, 30.0), st.floats(-30.0, 30.0))
    @settings(max_examples=200, deadline=None)
    def test_phi_invariance_property(self, vals, phi1, phi2):
        x = np.array(vals, dtype=np.float32)
        o1 = softmax_unified(x, phi1)
        o2 = softmax_unified(x, phi2)
        assert rel_error_elementwise(o2, o1.astype(np.float64)) <= 1e-5
        # argmax identity needs the top-2 logits separated by more than f32
        # exp resolution; sub-ulp ties round to equal weights for some phi
        # and not others
        top2 = np.sort(x)[-2:]
        if top2[1] - top2[0] > 4 * np.spacing(np.abs(x).max() + np.float32(1.0)):
            assert np.argmax(o1) == np.argmax(o2)


class TestCheckBounds:
    def test_worked_example_in_band(self):
        calib = ScalingCalibration(phi=6.0, a=-3.0, b=3.0, coverage=1.0)
        assert check_bounds(np.array([4.0, 5.0, 6.0, 7.0], dtype=np.float32), calib) is None

    def test_worked_example_violation_third_element(self):
        calib = ScalingCalibration(phi=6.0, a=-3.0, b=3.0, coverage=1.0)
        y = np.array([4.0, 5.0, 9.5, 7.0], dtype=np.float32)
        assert check_bounds(y, calib) == 2

    def test_single_safe_value(self):
        calib = ScalingCalibration(phi=0.0, a=-1.0, b=1.0, coverage=1.0)
        assert check_bounds(np.array([0.5], dtype=np.float32), calib) is None

    def test_boundary_is_a_violation(self):
        calib = ScalingCalibration(phi=0.0, a=-1.0, b=1.0, coverage=1.0)
        assert check_bounds(np.array([1.0], dtype=np.float32), calib) == 0
        assert check_bounds(np.array([-1.0], dtype=np.float32), calib) == 0

    @given(st.lists(st.floats(-50.0, 50.0, width=32), min_size=1, max_size=100),
           st.floats(-10.0, 10.0), st.floats(1.0, 80.0))
    @settings(max_examples=150, deadline=None)
    def test_pass_implies_unified_never_overflows(self, vals, phi, b):
        calib = ScalingCalibration(phi=phi, a=-80.0, b=b, coverage=1.0)
        x = np.array(vals, dtype=np.float32)
        if check_bounds(x, calib) is None:
            softmax_unified(x, calib.phi)  # must not raise SoftmaxOverflow


class TestCalibrate:
    def test_constant_samples(self):
        calib = calibrate(np.full(1000, 2.5), 0.999, margin=1.0)
        assert calib.phi == pytest.approx(2.5)
        assert calib.coverage == 1.0
        assert calib.a == -1.0 and calib.b == pytest.approx(1.0)

    def test_normal_samples_frozen_seed(self):
        rng = np.random.default_rng(0)
        samples = rng.normal(0.0, 2.0, 1_000_000)
        calib = calibrate(samples, 0.9999, margin=1.0)
        assert calib.coverage >= 0.9999
        # quantile spread of N(0, 2) at 1e-4 two-sided: ~2 * 3.9 sigma
        assert calib.b - calib.a <= 2 * (3.9 * 2) + 2 * 1.0
        t = samples - calib.phi
        counted = float(((t > calib.a) & (t < calib.b)).mean())
        assert counted == pytest.approx(calib.coverage)

    def test_huge_spread_uncalibratable(self):
        rng = np.random.default_rng(1)
        samples = rng.uniform(-1e6, 1e6, 10_000)
        with pytest.raises(UncalibratableRange):
            calibrate(samples, 0.9999)

    def test_target_validation(self):
        with pytest.raises(ValueError):
            calibrate(np.ones(10), 0.4)
        with pytest.raises(ValueError):
            calibrate(np.array([]), 0.999)

    @given(st.lists(st.floats(-30.0, 30.0, width=32), min_size=10, max_size=400),
           st.floats(0.6, 0.9999))
    @settings(max_examples=100, deadline=None)
    def test_coverage_always_met_on_calibration_set(self, vals, target):
        samples = np.array(vals, dtype=np.float32)
        calib = calibrate(samples, target)
        t = samples - np.float32(calib.phi)
        counted = float(((t > np.float32(calib.a)) & (t < np.float32(calib.b))).mean())
        assert counted >= target
        assert counted == pytest.approx(calib.coverage)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        samples = rng.normal(0, 1, 10_000)
        assert calibrate(samples, 0.999) == calibrate(samples, 0.999)


class TestCalibrationFile:
    def test_roundtrip(self, tmp_path):
        calib = ScalingCalibration(phi=-7.5, a=-1.0, b=16.25, coverage=0.99995)
        path = tmp_path / "calib.txt"
        save_calibration(calib, path)
        assert load_calibration(path) == calib
        assert path.read_text().endswith("\n")

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("1.0 2.0\n")
        with pytest.raises(ValueError):
            load_calibration(path)


class TestCalibrationInvariants:
    def test_bounds_ordering_enforced(self):
        with pytest.raises(ValueError):
            ScalingCalibration(phi=0.0, a=3.0, b=-3.0, coverage=1.0)

    def test_exponent_budget_enforced(self):
        with pytest.raises(ValueError):
            ScalingCalibration(phi=0.0, a=-1.0, b=95.0, coverage=1.0)
        with pytest.raises(ValueError):
            ScalingCalibration(phi=0.0, a=-90.0, b=1.0, coverage=1.0)
