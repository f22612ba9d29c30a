import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hdvnet.density import (MINE_REFERENCE_THRESHOLDS, StateThresholds, T0, assign_groups,
                            calibrate_states, density_histogram, density_profile,
                            estimate_density, group_thresholds, inherent_state,
                            jitter_duplicates, remaining_fraction, state_map)
from hdvnet.errors import CalibrationError, DegenerateNeighborhood
from hdvnet.spatial import NeighborTable

from oracles import exhaustive_calibration, scan_groups, scan_states


def _table(k, radii):
    radii = np.asarray(radii, float)
    return NeighborTable(k=k, indices=np.zeros((len(radii), k), int), radii=radii)


class TestEstimate:
    def test_unit_radius(self):
        assert estimate_density(_table(4, [1.0])).rho[0] == pytest.approx(4 / (4 * math.pi / 3), rel=1e-12)
        assert estimate_density(_table(4, [1.0])).rho[0] == pytest.approx(0.95493, abs=1e-5)

    def test_half_metre_k16(self):
        assert estimate_density(_table(16, [0.5])).rho[0] == pytest.approx(30.558, abs=1e-3)

    def test_zero_radius(self):
        with pytest.raises(DegenerateNeighborhood):
            estimate_density(_table(4, [1.0, 0.0]))

    def test_duplicates_with_jitter(self):
        xyz = np.r_[np.zeros((20, 3)), np.random.default_rng(0).random((30, 3))]
        with pytest.raises(DegenerateNeighborhood):
            density_profile(xyz, k=8)
        prof = density_profile(xyz, k=8, jitter=True)
        assert np.all(prof.rho > 0) and np.all(np.isfinite(prof.rho))
        assert np.array_equal(jitter_duplicates(xyz), jitter_duplicates(xyz))

    def test_cubic_lattice(self):
        s = 0.06
        g = np.stack(np.meshgrid(*[np.arange(14) * s] * 3, indexing="ij"), -1).reshape(-1, 3)
        med = np.median(density_profile(g, k=16).rho)
        assert 0.5 < med / (1 / s ** 3) < 2.0

    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0))
    def test_scale_covariance(self, seed, scale):
        xyz = np.random.default_rng(seed).random((60, 3))
        a = density_profile(xyz, k=5).rho
        b = density_profile(xyz * scale, k=5).rho
        np.testing.assert_allclose(b, a * scale ** -3, rtol=1e-9)

    def test_closed_form_neighbourhoods(self):
        # point 0 at the centre of a shell of radius r: its k-th neighbour lies at exactly r
        for r, k in [(0.25, 6), (2.0, 6), (1.5, 6)]:
            dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
            xyz = np.r_[np.zeros((1, 3)), r * dirs, 10 * r * dirs]
            rho = density_profile(xyz, k=k).rho[0]
            assert abs(rho - k / (4 / 3 * math.pi * r ** 3)) <= 1e-12 * rho


class TestGroups:
    def test_values(self):
        gt = group_thresholds(17)
        assert len(gt) == 18 and gt[0] == T0 == 2e6
        assert gt[2] == 125_000.0
        assert gt[9] == pytest.approx(7.629, abs=1e-3)
        for i in range(1, 18):
            assert gt[i] == gt[i - 1] / 4

    def test_boundaries(self):
        gt = group_thresholds(17)
        assert assign_groups([3e6], gt)[0] == 0
        assert assign_groups([2e6], gt)[0] == 1
        assert assign_groups([1e-9], gt)[0] == 18

    @given(st.lists(st.floats(1e-8, 1e8), min_size=1, max_size=60))
    def test_linear_scan(self, rho):
        gt = group_thresholds(17)
        np.testing.assert_array_equal(assign_groups(rho, gt), scan_groups(rho, gt))

    @given(st.floats(1e-8, 1e8), st.floats(1e-8, 1e8))
    def test_monotone(self, a, b):
        gt = group_thresholds(17)
        ga, gb = assign_groups([a, b], gt)
        if a > b:
            assert ga <= gb


class TestStates:
    T = np.array([30558.0, 1739.0, 31.0, 1.9, 0.12, 0.0])

    def test_reference_values(self):
        assert MINE_REFERENCE_THRESHOLDS == (30558, 1739, 31, 1.9, 0.12, 0)

    def test_between(self):
        assert inherent_state([100.0], self.T)[0] == 2

    def test_upper_bound_inclusive(self):
        # I^(d) holds t_d < rho <= t_{d-1}: t_0 itself is state 1, t_1 itself is state 2
        assert inherent_state([30558.0], self.T)[0] == 1
        assert inherent_state([1739.0], self.T)[0] == 2
        assert inherent_state([30558.0001], self.T)[0] == 0

    @given(st.lists(st.floats(1e-9, 1e9), min_size=1, max_size=80))
    def test_partition(self, rho):
        s = inherent_state(rho, self.T)
        np.testing.assert_array_equal(s, scan_states(rho, self.T))
        masks = [s == d for d in range(6)]
        assert np.all(np.sum(masks, axis=0) == 1)

    def test_threshold_invariants(self):
        with pytest.raises(CalibrationError):
            StateThresholds(t=[5, 4, 4, 2, 1, 0])
        with pytest.raises(CalibrationError):
            StateThresholds(t=[5, 4, 3, 2, 1, 0.5])

    def test_state_map_covers_all_groups(self):
        gt = group_thresholds(17)
        th = StateThresholds(t=np.r_[gt[[2, 5, 8, 10, 12]], 0.0])
        m = state_map(th.t)
        assert sorted(m) == list(range(19))
        assert m[0] == 0 and m[3] == 1 and m[18] == 5
        assert all(m[g] <= m[g + 1] for g in range(18))

    def test_json_round_trip(self, tmp_path):
        th = StateThresholds(t=self.T, k_used=12)
        th.save(tmp_path / "t.json")
        back = StateThresholds.load(tmp_path / "t.json")
        assert np.array_equal(back.t, th.t) and back.k_used == 12 and back.delta_max == 17


class TestCalibrate:
    def test_empty(self):
        with pytest.raises(CalibrationError):
            calibrate_states([], [1, 0.25, 0.06, 0.01, 0.005])

    def test_exact_quarter(self):
        # groups 4 and 5 in equal parts: thinning to threshold t_4 keeps 1/2 + 1/8
        gt = group_thresholds(17)
        rho = np.r_[np.full(50, gt[4] * 1.5), np.full(50, gt[5] * 1.5)]
        th = calibrate_states([rho], [1.0, 0.625, 0.1, 0.01, 0.001])
        assert th.t[1] == gt[4]

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
    def test_exhaustive_oracle(self, seed, n_profiles):
        rng = np.random.default_rng(seed)
        rhos = [10 ** rng.uniform(-2, 6, size=rng.integers(5, 60)) for _ in range(n_profiles)]
        f = np.sort(rng.uniform(0.001, 1.0, 5))[::-1]
        if np.any(np.diff(f) >= 0):
            return
        th = calibrate_states(rhos, f)
        np.testing.assert_array_equal(th.t, exhaustive_calibration(np.concatenate(rhos), f, 17))
        assert np.all(np.diff(th.t) < 0) and th.t[-1] == 0
        gt = set(group_thresholds(17))
        assert all(v in gt for v in th.t[:-1])

    def test_two_slope_histogram(self):
        gt = group_thresholds(17)
        rng = np.random.default_rng(1)
        groups = np.r_[rng.integers(3, 6, 800), rng.integers(6, 14, 200)]
        rho = gt[np.minimum(groups, 17)] * 1.5
        f = [1, 0.25, 0.0625, 0.015625, 0.0078125]
        assert list(calibrate_states([rho], f).t) == exhaustive_calibration(rho, f, 17)

    def test_remaining_fraction(self):
        assert remaining_fraction([3, 3], 3) == 1.0
        assert remaining_fraction([3, 5], 4) == pytest.approx(0.625)


class TestHistogram:
    def test_single_group(self):
        h = density_histogram(np.full(10, 3))
        assert h[3] == 100.0 and h.sum() == 100.0

    def test_two_groups(self):
        h = density_histogram(np.r_[np.zeros(5, int), np.full(5, 18)])
        assert h[0] == 50.0 and h[18] == 50.0

    @given(st.lists(st.integers(0, 18), min_size=1, max_size=200))
    def test_sums_to_100(self, groups):
        assert abs(density_histogram(np.array(groups)).sum() - 100.0) <= 1e-9
