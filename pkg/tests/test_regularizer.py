import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from densemap.regularizer import (
    ObservedLattice,
    RegParams,
    RegState,
    dual_step,
    energy,
    map_energy,
    masked_divergence,
    masked_gradient,
    primal_step,
    regularize,
    relax_step,
)
from densemap.voxel_store import BlockMap

import oracles


def _line(values, observed=None):
    u = np.zeros((len(values), 1, 1))
    u[:, 0, 0] = values
    omega = np.ones(u.shape, bool) if observed is None else np.array(observed, bool).reshape(u.shape)
    return u, omega


class TestMaskedGradient:
    def test_interior_difference(self):
        u, omega = _line([0.4, 0.7, 0.1])
        assert masked_gradient(u, omega, (0, 0, 0))[0] == pytest.approx(0.3)

    def test_unobserved_neighbor(self):
        u, omega = _line([0.4, 0.7, 0.1], [1, 0, 1])
        assert masked_gradient(u, omega, (0, 0, 0))[0] == 0.0

    def test_lattice_edge(self):
        u, omega = _line([0.4, 0.7, 0.1])
        assert masked_gradient(u, omega, (2, 0, 0))[0] == 0.0


class TestMaskedDivergence:
    def _p(self, px):
        p = np.zeros((len(px), 1, 1, 3))
        p[:, 0, 0, 0] = px
        return p

    def test_interior(self):
        _, omega = _line([0, 0, 0, 0])
        assert masked_divergence(self._p([0.0, 0.5, 0.2, 0.0]), omega, (2, 0, 0)) == pytest.approx(-0.3)

    def test_unobserved_center(self):
        _, omega = _line([0, 0, 0, 0], [1, 1, 0, 1])
        assert masked_divergence(self._p([0.1, 0.5, 0.2, 0.7]), omega, (2, 0, 0)) == 0.0

    def test_unobserved_left_neighbor(self):
        _, omega = _line([0, 0, 0, 0], [1, 0, 1, 1])
        assert masked_divergence(self._p([0.1, 0.5, 0.2, 0.7]), omega, (2, 0, 0)) == pytest.approx(0.2)

    def test_first_voxel_has_no_incoming_edge(self):
        _, omega = _line([0, 0, 0])
        assert masked_divergence(self._p([0.3, 0.9, 0.0]), omega, (0, 0, 0)) == pytest.approx(0.3)

    def test_last_voxel_has_no_outgoing_edge(self):
        _, omega = _line([0, 0, 0])
        assert masked_divergence(self._p([0.0, 0.4, 99.0]), omega, (2, 0, 0)) == pytest.approx(-0.4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 0.9))
def test_dense_operators_are_negative_adjoint(seed, density):
    rng = np.random.default_rng(seed)
    omega = rng.random((9, 7, 8)) < density
    u = rng.normal(size=omega.shape) * omega
    p = rng.normal(size=omega.shape + (3,))
    lhs = np.sum(masked_gradient(u, omega) * p)
    rhs = np.sum(u * masked_divergence(p, omega))
    assert abs(lhs + rhs) <= 1e-9 * max(1.0, abs(lhs), abs(rhs))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 0.9), st.tuples(*[st.integers(-12, 12)] * 3))
def test_lattice_operators_match_dense_grid(seed, density, offset):
    rng = np.random.default_rng(seed)
    shape = (13, 10, 11)
    w = (rng.random(shape) < density).astype(float)
    f = rng.uniform(-1, 1, shape)
    bm = oracles.map_from_dense(BlockMap, f, w, offset=offset)
    lat = ObservedLattice(bm)
    u = lat.gather(bm.f)
    p = rng.normal(size=(lat.size, 3))
    # scatter lattice quantities into the dense frame and compare
    dense_f, _, omega = bm.to_dense(np.asarray(offset), np.asarray(offset) + np.array(shape) - 1)
    assert np.array_equal(omega, w > 0)
    coords = np.argwhere(omega)
    order = {tuple(c): i for i, c in enumerate(coords.tolist())}
    pool_coords = np.concatenate([bm.block_voxel_coords(s) for s in range(bm.block_count)])[lat.index]
    perm = np.array([order[tuple(c)] for c in (pool_coords - np.asarray(offset)).tolist()])
    P = np.zeros(shape + (3,))
    P[tuple(coords[perm].T)] = p
    g_dense = oracles.dense_grad(dense_f, omega)[tuple(coords[perm].T)]
    np.testing.assert_allclose(lat.gradient(u), g_dense, atol=1e-12)
    d_dense = oracles.dense_div(P, omega)[tuple(coords[perm].T)]
    np.testing.assert_allclose(lat.divergence(p), d_dense, atol=1e-12)
    assert abs(np.sum(lat.gradient(u) * p) + np.sum(u * lat.divergence(p))) < 1e-9 * max(1, np.abs(p).sum())


def _state(f, w, u=None, p=None, u_hat=None):
    f = np.asarray(f, float)
    bm = oracles.map_from_dense(BlockMap, f.reshape(-1, 1, 1), np.asarray(w, float).reshape(-1, 1, 1))
    lat = ObservedLattice(bm)
    state = RegState.initial(lat, lat.gather(bm.f), lat.gather(bm.w))
    if u is not None:
        state.u = np.asarray(u, float)
        state.u_hat = state.u.copy() if u_hat is None else np.asarray(u_hat, float)
    if p is not None:
        state.p = np.asarray(p, float)
    return state


class TestSteps:
    def test_dual_ascent(self):
        s = _state([0, 0], [1, 1], u=[0.0, 1.0])
        dual_step(s, 0.5)
        np.testing.assert_allclose(s.p[0], [0.5, 0, 0])

    def test_dual_projection(self):
        s = _state([0, 0], [1, 1], u=[0.0, 0.0], p=[[3.0, 4.0, 0.0], [0, 0, 0]])
        dual_step(s, 0.5)
        np.testing.assert_allclose(s.p[0], [0.6, 0.8, 0.0])

    def test_dual_unchanged_for_flat_field(self):
        s = _state([0.3, 0.3], [1, 1], p=[[0.2, -0.1, 0.0], [0, 0, 0]])
        dual_step(s, 0.5)
        np.testing.assert_allclose(s.p[0], [0.2, -0.1, 0.0])

    def test_primal_proximal_step(self):
        s = _state([0.2], [1], u=[0.5])
        primal_step(s, 1 / 6, 0.8)
        assert s.u[0] == pytest.approx((0.5 + (0.8 / 6) * 0.2) / (1 + 0.8 / 6))
        assert s.u[0] == pytest.approx(0.4647, abs=1e-4)

    def test_primal_fixed_point(self):
        s = _state([0.2, -0.4], [3, 1], u=[0.2, -0.4])
        primal_step(s, 1 / 6, 0.8)
        np.testing.assert_allclose(s.u, [0.2, -0.4])

    def test_unobserved_voxels_are_not_in_the_state(self):
        s = _state([0.2, 0.9, -0.4], [1, 0, 2])
        assert s.lattice.size == 2
        np.testing.assert_allclose(s.f, [0.2, -0.4])

    @pytest.mark.parametrize("theta,prev,cur,expect", [(1.0, 0.4, 0.5, 0.6), (1.0, 0.5, 0.5, 0.5), (0.0, 0.4, 0.5, 0.5)])
    def test_relaxation(self, theta, prev, cur, expect):
        s = _state([0.0], [1])
        s.u_prev = np.array([prev])
        s.u = np.array([cur])
        relax_step(s, theta)
        assert s.u_hat[0] == pytest.approx(expect)

    def test_literal_relaxation_uses_previous_relaxed_value(self):
        s = _state([0.0], [1])
        s.u_prev = np.array([0.4])
        s.u_hat = np.array([0.1])
        s.u = np.array([0.5])
        relax_step(s, 1.0, "literal")
        assert s.u_hat[0] == pytest.approx(0.9)


class TestEnergy:
    def test_constant_field(self):
        bm = oracles.map_from_dense(BlockMap, np.full((5, 4, 3), 0.3), np.ones((5, 4, 3)))
        assert map_energy(bm, 0.8) == 0.0

    def test_two_voxels(self):
        s = _state([0.0, 1.0], [1, 1])
        assert energy(s.lattice, s.f, s.f, s.w, 123.0) == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        f = rng.uniform(-1, 1, (8, 8, 8))
        w = rng.integers(0, 4, (8, 8, 8)).astype(float)
        u = rng.uniform(-1, 1, (8, 8, 8))
        bm = oracles.map_from_dense(BlockMap, f, w)
        lat = ObservedLattice(bm)
        # order lattice values like the pool: local index x + 8y + 64z
        u_pool = np.zeros_like(bm.f)
        u_pool[0] = u.transpose(2, 1, 0).ravel()
        expect = oracles.dense_energy(u, f, w, w > 0, 0.8)
        got = energy(lat, lat.gather(u_pool), lat.gather(bm.f), lat.gather(bm.w), 0.8)
        assert got == pytest.approx(expect, rel=1e-12)


def _noisy_sphere(seed=0, n=32, noise=0.15):
    rng = np.random.default_rng(seed)
    c = (np.indices((n, n, n)) - n / 2 + 0.5) * 0.1
    dist = np.sqrt((c ** 2).sum(0)) - 1.0
    f = np.clip(dist / 0.3, -1, 1) + rng.normal(0, noise, (n, n, n))
    w = rng.integers(1, 6, (n, n, n)).astype(float)
    w[rng.random((n, n, n)) < 0.2] = 0.0  # holes in the observed set
    return np.clip(f, -1, 1), w


class TestRegularize:
    def test_zero_iterations_leave_map_unchanged(self):
        f, w = _noisy_sphere(n=16)
        bm = oracles.map_from_dense(BlockMap, f, w)
        before = bm.f.copy()
        stats = regularize(bm, RegParams(iterations=0))
        assert np.array_equal(bm.f, before)
        assert stats.iterations == 0 and stats.initial_energy == stats.final_energy

    def test_empty_domain_is_an_error(self):
        bm = BlockMap(0.1)
        bm.allocate_block((0, 0, 0))
        with pytest.raises(ValueError):
            regularize(bm, RegParams())

    def test_matches_dense_solver_and_lowers_energy(self):
        f, w = _noisy_sphere()
        bm = oracles.map_from_dense(BlockMap, f, w, offset=(-16, -16, -16))
        stats = regularize(bm, RegParams(lam=0.8, iterations=200))
        expect = oracles.dense_tv_solver(f, w, w > 0, lam=0.8, iterations=200)
        got, _, _ = bm.to_dense((-16, -16, -16), (15, 15, 15))
        assert np.abs(got - np.where(w > 0, expect, 0.0)).max() <= 1e-5
        assert stats.final_energy < stats.initial_energy

    def test_unobserved_voxels_and_weights_untouched(self):
        f, w = _noisy_sphere(n=16, seed=4)
        bm = oracles.map_from_dense(BlockMap, f, w)
        bm.f[~bm.observed] = 0.123  # stale values must survive bit for bit
        before = (bm.f.copy(), bm.w.copy(), bm.observed.copy())
        regularize(bm, RegParams(iterations=50))
        hidden = ~before[2]
        assert np.array_equal(bm.f[hidden], before[0][hidden])
        assert np.array_equal(bm.w, before[1]) and np.array_equal(bm.observed, before[2])

    def test_components_are_independent(self):
        rng = np.random.default_rng(2)
        f = rng.uniform(-1, 1, (20, 8, 8))
        w = np.ones((20, 8, 8))
        w[9:11] = 0.0  # two slabs separated by an unobserved gap
        bm_a = oracles.map_from_dense(BlockMap, f, w)
        f2 = f.copy()
        f2[:9] = rng.uniform(-1, 1, (9, 8, 8))
        bm_b = oracles.map_from_dense(BlockMap, f2, w)
        assert len(np.unique(ObservedLattice(bm_a).components())) == 2
        regularize(bm_a, RegParams(iterations=100))
        regularize(bm_b, RegParams(iterations=100))
        ra, _, _ = bm_a.to_dense((0, 0, 0), (19, 7, 7))
        rb, _, _ = bm_b.to_dense((0, 0, 0), (19, 7, 7))
        assert np.array_equal(ra[11:], rb[11:])
        assert not np.array_equal(ra[:9], rb[:9])

    def test_constant_field_is_preserved(self):
        w = np.ones((12, 12, 12))
        w[3:6, 3:6, 3:6] = 0
        bm = oracles.map_from_dense(BlockMap, np.full((12, 12, 12), -0.37), w)
        regularize(bm, RegParams(iterations=200))
        assert np.abs(bm.f[bm.observed] + 0.37).max() <= 1e-9

    def test_dual_feasibility_every_iteration(self):
        f, w = _noisy_sphere(n=16, seed=9)
        bm = oracles.map_from_dense(BlockMap, f, w)
        worst = []
        regularize(bm, RegParams(iterations=60), callback=lambda k, s: worst.append(np.linalg.norm(s.p, axis=1).max()))
        assert len(worst) == 60 and max(worst) <= 1 + 1e-9

    def test_zero_initialization_flag(self):
        f, w = _noisy_sphere(n=16, seed=5)
        bm = oracles.map_from_dense(BlockMap, f, w)
        seen = []
        regularize(bm, RegParams(iterations=1, init="zero"), callback=lambda k, s: seen.append(s.u_prev.copy()))
        assert not seen[0].any()

    def test_params_for_voxel_size(self):
        assert RegParams.for_voxel_size(0.1).lam == 0.8
        assert RegParams.for_voxel_size(0.2).lam == 0.4
        with pytest.raises(ValueError):
            RegParams(relaxation="other")


@settings(max_examples=15, deadline=None)
@given(arrays(np.float64, (6, 5, 4), elements=st.floats(-1, 1)), st.integers(0, 2 ** 32 - 1))
def test_energy_never_increases(f, seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(0, 3, f.shape).astype(float)
    if not (w > 0).any():
        w[0, 0, 0] = 1.0
    bm = oracles.map_from_dense(BlockMap, f, w)
    stats = regularize(bm, RegParams(iterations=200))
    assert stats.final_energy <= stats.initial_energy + 1e-9
