"""Census-cost stereo with tensor-weighted TGV regularization.

The non-convex matching cost is decoupled from the convex regularizer by an
auxiliary disparity ``a``:

    alpha1 |T grad d - v| + alpha2 |grad v| + (d - a)^2 / (2 theta) + lam * cost(a)

The (d, v) part is solved with primal-dual iterations, the ``a`` part by
exhaustive search over integer disparities plus a parabola fit, while
``theta`` shrinks geometrically so ``d`` and ``a`` meet.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, DepthMap

log = logging.getLogger(__name__)

TENSOR_EPS = 1e-6
DISPARITY_EPS = 1e-3


@dataclass(frozen=True)
class StereoParams:
    lambda_2d: float = 0.5
    alpha1: float = 1.0
    alpha2: float = 5.0
    beta: float = 1.0
    gamma: float = 4.0
    window: int = 5
    d_min: int = 0
    d_max: int = 128
    iterations: int = 200
    warps: int = 10
    theta_start: float = 10.0  # in squared pixels per unit Hamming cost; small values trap census ties
    theta_end: float = 0.001
    step: float = 0.25  # primal and dual step; step**2 * 16 <= 1 bounds the operator norm

    def __post_init__(self):
        for name in ("lambda_2d", "alpha1", "alpha2", "beta", "gamma", "theta_start", "theta_end", "step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("census window must be odd and >= 3")
        if self.iterations < 0 or self.warps < 1:
            raise ValueError("iterations must be >= 0 and warps >= 1")


@dataclass
class CostVolume:
    costs: np.ndarray  # (H, W, D)
    d_min: int
    d_max: int

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1)


@dataclass
class DisparityMap:
    disparity: np.ndarray
    slope: np.ndarray  # auxiliary planar field, (H, W, 2)


# -- census ---------------------------------------------------------------


def _window_offsets(window: int):
    r = window // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def census_signature(img: np.ndarray, x: int, y: int, window: int = 5) -> np.ndarray:
    """Bits of one pixel's census signature, row-major over the window without the center.

    A bit is set when the neighbor is darker than the center; samples outside
    the image are clamped to the nearest edge pixel.
    """
    img = np.asarray(img, np.float64)
    h, w = img.shape
    center = img[y, x]
    bits = [img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)] < center for dy, dx in _window_offsets(window)]
    return np.array(bits, dtype=bool)


def census_transform(img: np.ndarray, window: int = 5) -> np.ndarray:
    """Packed census codes, ``(H, W)`` uint64; first window bit is the most significant."""
    img = np.asarray(img, np.float64)
    offsets = _window_offsets(window)
    if len(offsets) > 64:
        raise ValueError("census window too large to pack into 64 bits")
    r = window // 2
    padded = np.pad(img, r, mode="edge")
    h, w = img.shape
    codes = np.zeros((h, w), np.uint64)
    for dy, dx in offsets:
        neighbor = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        codes = (codes << np.uint64(1)) | (neighbor < img).astype(np.uint64)
    return codes


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(a, b)).astype(np.float64)


def cost_volume(left: np.ndarray, right: np.ndarray, params: StereoParams) -> CostVolume:
    """Census Hamming cost with the right image as reference.

    ``cost[y, x, k]`` compares right pixel ``(x, y)`` with left pixel
    ``(x + d, y)`` for ``d = d_min + k``; samples outside the left image cost
    the full signature length.
    """
    if left.shape != right.shape:
        raise ValueError("stereo pair dimensions differ")
    if params.d_max < params.d_min:
        raise ValueError("empty disparity range")
    cl = census_transform(left, params.window)
    cr = census_transform(right, params.window)
    h, w = right.shape
    nbits = params.window ** 2 - 1
    disparities = np.arange(params.d_min, params.d_max + 1)
    costs = np.full((h, w, len(disparities)), float(nbits))
    xs = np.arange(w)
    for k, d in enumerate(disparities):
        src = xs + d
        ok = (src >= 0) & (src < w)
        if ok.any():
            costs[:, ok, k] = hamming(cr[:, ok], cl[:, src[ok]])
    return CostVolume(costs, int(params.d_min), int(params.d_max))


# -- appearance tensor ----------------------------------------------------


def diffusion_tensor(img: np.ndarray, beta: float = 1.0, gamma: float = 4.0, eps: float = TENSOR_EPS) -> np.ndarray:
    """Per-pixel ``exp(-gamma |g|^beta) n n^T + n_perp n_perp^T`` with ``g`` the image gradient.

    Flat pixels (``|g| < eps``) get the identity.  Returns ``(H, W, 2, 2)``
    with components ordered (x, y).
    """
    img = np.asarray(img, np.float64)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    flat = mag < eps
    safe = np.where(flat, 1.0, mag)
    nx = np.where(flat, 1.0, gx / safe)
    ny = np.where(flat, 0.0, gy / safe)
    s = np.where(flat, 1.0, np.exp(-gamma * mag ** beta))
    T = np.empty(img.shape + (2, 2))
    T[..., 0, 0] = s * nx * nx + ny * ny
    T[..., 1, 1] = s * ny * ny + nx * nx
    T[..., 0, 1] = T[..., 1, 0] = (s - 1.0) * nx * ny
    return T


# -- discrete operators on images (x = axis 1, y = axis 0) ---------------


def _grad(u: np.ndarray) -> np.ndarray:
    g = np.zeros(u.shape + (2,))
    g[:, :-1, 0] = u[:, 1:] - u[:, :-1]
    g[:-1, :, 1] = u[1:, :] - u[:-1, :]
    return g


def _div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_grad`."""
    px, py = p[..., 0], p[..., 1]
    d = np.zeros(px.shape)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def _grad_vec(v: np.ndarray) -> np.ndarray:
    return np.concatenate([_grad(v[..., 0]), _grad(v[..., 1])], axis=-1)


def _div_vec(q: np.ndarray) -> np.ndarray:
    return np.stack([_div(q[..., 0:2]), _div(q[..., 2:4])], axis=-1)


def _apply(T: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", T, v)


def _project(p: np.ndarray, radius: float) -> np.ndarray:
    norm = np.sqrt(np.sum(p * p, axis=-1, keepdims=True))
    return p / np.maximum(1.0, norm / radius)


def _norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def tgv_energy(d: np.ndarray, tensor: np.ndarray, alpha1: float, alpha2: float, iterations: int = 2000,
               slope: np.ndarray = None):
    """Regularizer value ``min_v alpha1|T grad d - v| + alpha2|grad v|``.

    Minimizes over the slope field with primal-dual iterations.  Returns
    ``(upper, lower)``: the primal value at the final slope field and a dual
    certificate that bounds the true minimum from below.
    """
    b = _apply(tensor, _grad(np.asarray(d, np.float64)))
    v = np.zeros(b.shape) if slope is None else np.array(slope, np.float64)
    v_bar = v.copy()
    p = np.zeros_like(b)
    q = np.zeros(b.shape[:-1] + (4,))
    s = 1.0 / math.sqrt(10.0)
    for _ in range(iterations):
        p = _project(p + s * (b - v_bar), alpha1)
        q = _project(q + s * _grad_vec(v_bar), alpha2)
        v_old = v
        v = v + s * (p + _div_vec(q))
        v_bar = 2 * v - v_old
    upper = float(alpha1 * _norms(b - v).sum() + alpha2 * _norms(_grad_vec(v)).sum())
    # dual certificate: any q with |q| <= alpha2 and |div q| <= alpha1 gives <-div q, b> <= min
    pp = -_div_vec(_project(q, alpha2))
    scale = min(1.0, alpha1 / max(_norms(pp).max(), 1e-300))
    lower = float(scale * np.sum(pp * b))
    return upper, lower


# -- solver ---------------------------------------------------------------


def _point_search(d: np.ndarray, volume: CostVolume, theta: float, lam: float) -> np.ndarray:
    """Exact minimizer of coupling + lam * cost over integer disparities, refined by a parabola."""
    disp = volume.disparities.astype(np.float64)
    total = (disp[None, None, :] - d[..., None]) ** 2 / (2.0 * theta) + lam * volume.costs
    k = np.argmin(total, axis=-1)
    a = disp[k]
    inner = (k > 0) & (k < len(disp) - 1)
    kk = np.clip(k, 1, max(len(disp) - 2, 1))
    if len(disp) >= 3:
        e0 = np.take_along_axis(total, (kk - 1)[..., None], -1)[..., 0]
        e1 = np.take_along_axis(total, kk[..., None], -1)[..., 0]
        e2 = np.take_along_axis(total, (kk + 1)[..., None], -1)[..., 0]
        curv = e0 - 2 * e1 + e2
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(curv > 0, 0.5 * (e0 - e2) / curv, 0.0)
        a = np.where(inner, a + np.clip(off, -0.5, 0.5), a)
    return a


def winner_take_all(volume: CostVolume, refine: bool = True) -> np.ndarray:
    """Integer argmin of the cost per pixel, optionally parabola-refined."""
    disp = volume.disparities.astype(np.float64)
    k = np.argmin(volume.costs, axis=-1)
    a = disp[k]
    if not refine or len(disp) < 3:
        return a
    inner = (k > 0) & (k < len(disp) - 1)
    kk = np.clip(k, 1, len(disp) - 2)
    c = volume.costs
    e0 = np.take_along_axis(c, (kk - 1)[..., None], -1)[..., 0]
    e1 = np.take_along_axis(c, kk[..., None], -1)[..., 0]
    e2 = np.take_along_axis(c, (kk + 1)[..., None], -1)[..., 0]
    curv = e0 - 2 * e1 + e2
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(curv > 0, 0.5 * (e0 - e2) / curv, 0.0)
    return np.where(inner, a + np.clip(off, -0.5, 0.5), a)


def tgv_disparity(volume: CostVolume, tensor: np.ndarray, params: StereoParams) -> DisparityMap:
    """Sub-pixel disparity minimizing the tensor-TGV + census energy."""
    h, w, n = volume.costs.shape
    if n == 0 or volume.d_max < volume.d_min:
        raise ValueError("empty disparity range")
    if tensor.shape[:2] != (h, w):
        raise ValueError("tensor field and cost volume sizes differ")
    a = winner_take_all(volume)
    d = a.copy()
    v = np.zeros((h, w, 2))
    d_bar, v_bar = d.copy(), v.copy()
    p = np.zeros((h, w, 2))
    q = np.zeros((h, w, 4))
    s = params.step
    warps = params.warps
    inner = max(1, params.iterations // warps) if params.iterations else 0
    ratio = (params.theta_end / params.theta_start) ** (1.0 / max(warps - 1, 1))
    lo, hi = volume.d_min - 1.0, volume.d_max + 1.0
    for k in range(warps):
        theta = params.theta_start * ratio ** k
        for _ in range(inner):
            p = _project(p + s * (_apply(tensor, _grad(d_bar)) - v_bar), params.alpha1)
            q = _project(q + s * _grad_vec(v_bar), params.alpha2)
            d_old, v_old = d, v
            d = (d + s * _div(_apply(tensor, p)) + (s / theta) * a) / (1.0 + s / theta)
            v = v + s * (p + _div_vec(q))
            d_bar = 2 * d - d_old
            v_bar = 2 * v - v_old
        a = _point_search(d, volume, theta, params.lambda_2d)
    d = np.clip(np.nan_to_num(d, nan=lo), lo, hi)
    return DisparityMap(d, np.nan_to_num(v))


def estimate_disparity(left: np.ndarray, right: np.ndarray, params: StereoParams) -> DisparityMap:
    """Full stereo step on a rectified pair; the right image is the reference view."""
    volume = cost_volume(left, right, params)
    tensor = diffusion_tensor(right, params.beta, params.gamma)
    return tgv_disparity(volume, tensor, params)


def disparity_to_depth(disparity, cam: CameraModel, d_eps: float = DISPARITY_EPS) -> DepthMap:
    if not cam.baseline > 0:
        raise ValueError("camera baseline must be positive for triangulation")
    d = disparity.disparity if isinstance(disparity, DisparityMap) else np.asarray(disparity, np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(d > d_eps, cam.fx * cam.baseline / d, np.nan)
    return DepthMap(depth)
