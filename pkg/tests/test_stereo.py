import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densemap.camera import CameraModel
from densemap.stereo import (
    CostVolume,
    StereoParams,
    census_signature,
    census_transform,
    cost_volume,
    diffusion_tensor,
    disparity_to_depth,
    estimate_disparity,
    tgv_disparity,
    tgv_energy,
    winner_take_all,
)
from densemap.synthetic import slanted_plane_pair

import oracles

CROP = (slice(6, -6), slice(6, -30))  # drop borders and columns whose match leaves the left image


@pytest.fixture(scope="module")
def slanted():
    left, right, truth = slanted_plane_pair()
    params = StereoParams(d_min=0, d_max=40)
    return estimate_disparity(left, right, params), truth, cost_volume(left, right, params)


@pytest.fixture(scope="module")
def constant():
    left, right, truth = slanted_plane_pair(a=0.0, b=0.0, c=7.0, seed=3)
    return estimate_disparity(left, right, StereoParams(d_min=0, d_max=40)), truth


class TestCensus:
    def test_ramp_signature(self):
        img = np.tile(np.arange(3.0), (3, 1)).T  # rows 0, 1, 2
        bits = census_signature(img, 1, 1, window=3)
        assert "".join(str(int(b)) for b in bits) == "11100000"
        assert census_transform(img, 3)[1, 1] == 0b11100000

    def test_left_right_split(self):
        img = np.array([[0.0, 1.0, 2.0]] * 3)
        bits = census_signature(img, 1, 1, window=3)
        assert "".join(str(int(b)) for b in bits) == "10010100"

    def test_constant_patch_is_all_zero(self):
        assert not census_transform(np.full((9, 9), 0.4)).any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.2, 5.0), st.floats(0.1, 3.0), st.floats(-1, 1))
    def test_monotone_invariance(self, seed, gamma, gain, bias):
        img = np.random.default_rng(seed).random((12, 15))
        assert np.array_equal(census_transform(img), census_transform(gain * img ** gamma + bias))

    def test_matches_brute_force(self):
        img = np.random.default_rng(5).integers(0, 6, (11, 13)).astype(float)
        codes = census_transform(img)
        for y in range(11):
            for x in range(13):
                bits = oracles.brute_census(img, x, y, 5)
                assert int(codes[y, x]) == int("".join(map(str, bits)), 2)


class TestCostVolume:
    def test_identical_images_zero_cost_at_zero_disparity(self):
        img = np.random.default_rng(0).random((20, 30))
        vol = cost_volume(img, img, StereoParams(d_min=0, d_max=4))
        assert not vol.costs[..., 0].any()

    def test_complementary_signatures_cost_full_length(self):
        img = np.random.default_rng(1).random((20, 30))
        vol = cost_volume(-img, img, StereoParams(d_min=0, d_max=0))
        # away from the clamped border every comparison flips
        assert np.all(vol.costs[2:-2, 2:-2, 0] == 24)

    def test_shift_is_recovered(self):
        img = np.random.default_rng(2).random((30, 60))
        left = np.roll(img, 7, axis=1)  # left(x + 7) = right(x)
        vol = cost_volume(left, img, StereoParams(d_min=0, d_max=15))
        assert not vol.costs[2:-2, 2:45, 7].any()
        # raw noise has census ties at local extrema, so a few pixels match elsewhere too
        k = np.argmin(vol.costs[5:-5, 5:40], axis=-1)
        assert np.mean(vol.disparities[k] == 7) > 0.95

    def test_out_of_range_samples_cost_maximum(self):
        img = np.random.default_rng(3).random((10, 10))
        vol = cost_volume(img, img, StereoParams(d_min=0, d_max=3))
        assert np.all(vol.costs[:, -1, 1:] == 24)

    def test_empty_range_is_rejected(self):
        img = np.zeros((8, 8))
        with pytest.raises(ValueError):
            StereoParams(window=4)
        with pytest.raises(ValueError):
            cost_volume(img, img, StereoParams(d_min=5, d_max=4))
        with pytest.raises(ValueError):
            tgv_disparity(CostVolume(np.zeros((8, 8, 0)), 5, 4), np.zeros((8, 8, 2, 2)), StereoParams())


class TestTensor:
    def test_identity_where_flat(self):
        T = diffusion_tensor(np.full((5, 5), 0.3))
        assert np.array_equal(T, np.broadcast_to(np.eye(2), (5, 5, 2, 2)))

    def test_horizontal_edge(self):
        img = np.tile(np.arange(5.0), (5, 1))  # unit gradient along x
        T = diffusion_tensor(img)[2, 2]
        np.testing.assert_allclose(T, np.diag([np.exp(-4.0), 1.0]), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_gradient_direction_is_damped(self, seed):
        img = np.random.default_rng(seed).random((6, 6))
        gy, gx = np.gradient(img)
        g = np.array([gx[3, 3], gy[3, 3]])
        T = diffusion_tensor(img)[3, 3]
        n = g / np.linalg.norm(g)
        perp = np.array([-n[1], n[0]])
        np.testing.assert_allclose(T @ perp, perp, atol=1e-12)
        np.testing.assert_allclose(T @ n, np.exp(-4 * np.linalg.norm(g)) * n, atol=1e-12)
        np.testing.assert_allclose(T, T.T)


class TestSolver:
    def test_large_lambda_reduces_to_winner_take_all(self):
        rng = np.random.default_rng(4)
        costs = rng.permuted(np.tile(np.arange(9.0), (12, 14, 1)), axis=-1)  # no ties
        vol = CostVolume(costs, 0, 8)
        params = StereoParams(d_min=0, d_max=8, lambda_2d=1e6)
        d = tgv_disparity(vol, np.broadcast_to(np.eye(2), (12, 14, 2, 2)).copy(), params).disparity
        wta = winner_take_all(vol)
        assert np.array_equal(np.rint(d), np.rint(wta))
        assert np.abs(d - wta).max() < 0.01

    def test_slanted_plane(self, slanted):
        est, truth, vol = slanted
        err = np.abs(est.disparity - truth)[CROP]
        assert np.median(err) < 0.5
        # the regularized solution beats the raw cost minimum
        assert np.median(err) < np.median(np.abs(winner_take_all(vol) - truth)[CROP])

    def test_constant_disparity(self, constant):
        est, _ = constant
        d = est.disparity[CROP]
        assert abs(np.median(d) - 7.0) < 0.1
        assert np.abs(d - 7.0).max() < 0.5
        assert np.abs(est.slope[CROP]).mean() < 0.05

    def test_output_is_finite_and_clamped(self, slanted):
        est, _, _ = slanted
        assert np.isfinite(est.disparity).all() and np.isfinite(est.slope).all()
        assert est.disparity.min() >= -1 and est.disparity.max() <= 41

    def test_planar_field_is_cheaper_than_staircase(self):
        ys, xs = np.mgrid[0:24, 0:24].astype(float)
        plane = 0.3 * xs + 0.1 * ys
        stairs = np.floor(plane / 2) * 2
        T = np.broadcast_to(np.eye(2), (24, 24, 2, 2)).copy()
        up_plane, low_plane = tgv_energy(plane, T, 1.0, 5.0)
        up_stairs, low_stairs = tgv_energy(stairs, T, 1.0, 5.0)
        assert low_plane <= up_plane + 1e-9 and low_stairs <= up_stairs + 1e-9
        assert up_plane <= low_stairs


class TestDepthConversion:
    cam = CameraModel(540.0, 540.0, 300.0, 200.0, 640, 480, baseline=0.5)

    def test_example(self):
        assert disparity_to_depth(np.array([[50.0]]), self.cam).depths[0, 0] == pytest.approx(5.4)

    def test_small_disparity_is_invalid(self):
        depth = disparity_to_depth(np.array([[0.0, 1e-4, -2.0]]), self.cam)
        assert not depth.valid.any()

    @given(st.floats(0.01, 500))
    def test_reciprocal(self, d):
        z = disparity_to_depth(np.array([[d]]), self.cam).depths[0, 0]
        assert z * d == pytest.approx(540.0 * 0.5)

    def test_needs_baseline(self):
        with pytest.raises(ValueError):
            disparity_to_depth(np.ones((2, 2)), CameraModel(1.0, 1.0, 0.5, 0.5, 2, 2))
