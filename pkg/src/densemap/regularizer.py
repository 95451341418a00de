"""TV-L2 denoising of the fused TSDF restricted to observed voxels.

Minimizes ``sum |grad u| + lam * sum w (f - u)^2`` over the observed set with
the first-order primal-dual scheme.  A gradient component lives on the lattice
edge from a voxel to its ``+axis`` neighbor and exists only when both ends are
observed; the divergence is built from the same edges, so it is exactly the
negative adjoint of the gradient and nothing leaks across unobserved space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .voxel_store import BLOCK_SIZE, BLOCK_VOXELS, BlockMap

log = logging.getLogger(__name__)

_STRIDES = (1, BLOCK_SIZE, BLOCK_SIZE * BLOCK_SIZE)
_UNIT = np.eye(3, dtype=np.int64)


@dataclass(frozen=True)
class RegParams:
    lam: float = 0.8
    sigma_p: float = 0.5
    tau: float = 1.0 / 6.0
    theta: float = 1.0
    iterations: int = 200
    init: str = "data"  # "data": u = u_hat = f; "zero": u = u_hat = 0
    relaxation: str = "standard"  # "standard": extrapolate from previous u; "literal": from previous u_hat

    def __post_init__(self):
        for name in ("lam", "sigma_p", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.init not in ("data", "zero"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.relaxation not in ("standard", "literal"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")

    @classmethod
    def for_voxel_size(cls, voxel_size: float, **overrides) -> "RegParams":
        from .config import default_lambda_3d

        overrides.setdefault("lam", default_lambda_3d(voxel_size))
        return cls(**overrides)


# -- dense-grid operators -------------------------------------------------


def _edge_mask(omega: np.ndarray, axis: int) -> np.ndarray:
    valid = np.zeros_like(omega, dtype=bool)
    lo = [slice(None)] * omega.ndim
    hi = [slice(None)] * omega.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    valid[tuple(lo)] = omega[tuple(lo)] & omega[tuple(hi)]
    return valid


def masked_gradient(u: np.ndarray, omega: np.ndarray, coords=None) -> np.ndarray:
    """Forward differences that vanish on edges touching unobserved voxels.

    ``u`` and ``omega`` are ``[x, y, z]`` grids.  Returns a ``u.shape + (3,)``
    field, or the 3-vector at ``coords`` when given.
    """
    u = np.asarray(u, dtype=np.float64)
    omega = np.asarray(omega, dtype=bool)
    grad = np.zeros(u.shape + (u.ndim,))
    for a in range(u.ndim):
        valid = _edge_mask(omega, a)
        diff = np.zeros_like(u)
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        diff[tuple(lo)] = u[tuple(hi)] - u[tuple(lo)]
        grad[..., a] = np.where(valid, diff, 0.0)
    if coords is not None:
        return grad[tuple(coords)]
    return grad


def masked_divergence(p: np.ndarray, omega: np.ndarray, coords=None):
    """Negative adjoint of :func:`masked_gradient` for a ``(..., 3)`` dual field."""
    p = np.asarray(p, dtype=np.float64)
    omega = np.asarray(omega, dtype=bool)
    div = np.zeros(omega.shape)
    for a in range(omega.ndim):
        q = np.where(_edge_mask(omega, a), p[..., a], 0.0)
        div += q
        lo = [slice(None)] * omega.ndim
        hi = [slice(None)] * omega.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        div[tuple(hi)] -= q[tuple(lo)]
    if coords is not None:
        return float(div[tuple(coords)])
    return div


# -- sparse lattice over the observed voxels of a BlockMap ---------------


class ObservedLattice:
    """Neighbor tables for the observed voxels of a BlockMap.

    ``index`` holds the flat pool positions (``slot * 512 + local``) of the
    observed voxels; ``next[a][i]`` is the compact index of voxel ``i``'s
    ``+a`` neighbor when it is observed, else -1 (absent blocks count as
    unobserved).  ``prev`` is the inverse map.
    """

    def __init__(self, block_map: BlockMap):
        n = block_map.block_count
        observed = block_map.observed.reshape(-1)
        self.index = np.flatnonzero(observed)
        self.size = len(self.index)
        compact = np.full(n * BLOCK_VOXELS + 1, -1, dtype=np.int64)  # trailing -1 absorbs missing neighbors
        compact[self.index] = np.arange(self.size)

        slot = self.index // BLOCK_VOXELS
        local = self.index % BLOCK_VOXELS
        local_xyz = np.stack([local % BLOCK_SIZE, (local // BLOCK_SIZE) % BLOCK_SIZE, local // BLOCK_SIZE ** 2], axis=1)
        coords = block_map.block_coords
        self.next = np.full((3, self.size), -1, dtype=np.int64)
        self.prev = np.full((3, self.size), -1, dtype=np.int64)
        for a in range(3):
            neighbor_slot = block_map.slots_for(coords + _UNIT[a]) if n else np.zeros(0, np.int64)
            inner = local_xyz[:, a] < BLOCK_SIZE - 1
            target = np.where(inner, slot * BLOCK_VOXELS + local + _STRIDES[a], -1)
            seam = ~inner
            nb = neighbor_slot[slot[seam]]
            target[seam] = np.where(nb >= 0, nb * BLOCK_VOXELS + local[seam] - (BLOCK_SIZE - 1) * _STRIDES[a], -1)
            nxt = compact[np.where(target >= 0, target, n * BLOCK_VOXELS)]
            self.next[a] = nxt
            has = nxt >= 0
            self.prev[a, nxt[has]] = np.flatnonzero(has)
        self.edge = self.next >= 0
        self.has_prev = self.prev >= 0
        # per axis: edge tails and heads; heads are unique within one axis
        self.tails = [np.flatnonzero(self.edge[a]) for a in range(3)]
        self.heads = [self.next[a, t] for a, t in enumerate(self.tails)]

    def gather(self, field: np.ndarray) -> np.ndarray:
        """Values of a pool-shaped ``(blocks, 512)`` field at the observed voxels."""
        return field.reshape(-1)[self.index]

    def scatter(self, field: np.ndarray, values: np.ndarray) -> None:
        field.reshape(-1)[self.index] = values

    def gradient(self, u: np.ndarray) -> np.ndarray:
        g = np.zeros((self.size, 3))
        for a in range(3):
            t = self.tails[a]
            g[t, a] = u[self.heads[a]] - u[t]
        return g

    def divergence(self, p: np.ndarray) -> np.ndarray:
        div = np.zeros(self.size)
        for a in range(3):
            t = self.tails[a]
            q = p[t, a]
            div[t] += q
            div[self.heads[a]] -= q
        return div

    def components(self) -> np.ndarray:
        """Connected-component label per observed voxel (6-connectivity)."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        rows = np.concatenate(self.tails)
        cols = np.concatenate(self.heads)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.size, self.size))
        return connected_components(graph, directed=False)[1]


# -- primal-dual iteration ------------------------------------------------


@dataclass
class RegState:
    lattice: ObservedLattice
    f: np.ndarray
    w: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    p: np.ndarray
    u_prev: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, lattice: ObservedLattice, f: np.ndarray, w: np.ndarray, init: str = "data") -> "RegState":
        u = f.copy() if init == "data" else np.zeros_like(f)
        return cls(lattice, f, w, u, u.copy(), np.zeros((lattice.size, 3)))


@dataclass
class RegStats:
    initial_energy: float
    final_energy: float
    iterations: int
    observed_voxels: int
    energies: list = field(default_factory=list)


def dual_step(state: RegState, sigma_p: float) -> None:
    p = state.p + sigma_p * state.lattice.gradient(state.u_hat)
    norm = np.sqrt(np.einsum("ij,ij->i", p, p))
    state.p = p / np.maximum(1.0, norm)[:, None]


def primal_step(state: RegState, tau: float, lam: float) -> None:
    state.u_prev = state.u
    # divergence is minus the gradient's adjoint, so descent adds it
    u_tilde = state.u + tau * state.lattice.divergence(state.p)
    a = tau * lam * state.w
    state.u = (u_tilde + a * state.f) / (1.0 + a)


def relax_step(state: RegState, theta: float, mode: str = "standard") -> None:
    anchor = state.u_prev if mode == "standard" else state.u_hat
    state.u_hat = state.u + theta * (state.u - anchor)


def energy(lattice: ObservedLattice, u: np.ndarray, f: np.ndarray, w: np.ndarray, lam: float) -> float:
    g = lattice.gradient(u)
    tv = np.sqrt(np.einsum("ij,ij->i", g, g)).sum()
    return float(tv + lam * np.sum(w * (f - u) ** 2))


def map_energy(block_map: BlockMap, lam: float) -> float:
    """Energy of the map's current f taken as u (data term zero)."""
    lattice = ObservedLattice(block_map)
    f = lattice.gather(block_map.f)
    return energy(lattice, f, f, lattice.gather(block_map.w), lam)


def regularize(
    block_map: BlockMap,
    params: RegParams,
    callback: Optional[Callable[[int, RegState], None]] = None,
) -> RegStats:
    """Denoise the observed voxels in place; weights and unobserved voxels are untouched."""
    lattice = ObservedLattice(block_map)
    if lattice.size == 0:
        raise ValueError("map has no observed voxels to regularize")
    f = lattice.gather(block_map.f)
    w = lattice.gather(block_map.w)
    state = RegState.initial(lattice, f, w, params.init)
    e0 = energy(lattice, f, f, w, params.lam)
    stats = RegStats(e0, e0, 0, lattice.size)
    if params.iterations == 0:
        return stats
    for k in range(params.iterations):
        dual_step(state, params.sigma_p)
        primal_step(state, params.tau, params.lam)
        relax_step(state, params.theta, params.relaxation)
        if callback is not None:
            callback(k, state)
    stats.iterations = params.iterations
    stats.final_energy = energy(lattice, state.u, f, w, params.lam)
    log.info("regularized %d voxels: energy %.4g -> %.4g", lattice.size, e0, stats.final_energy)
    lattice.scatter(block_map.f, np.clip(state.u, -1.0, 1.0))
    return stats
