"""TSDF integration of depth maps and laser ray scans into a BlockMap."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import CameraModel, DepthMap, Pose
from .voxel_store import BLOCK_SIZE, BLOCK_VOXELS, LOCAL_OFFSETS, BlockMap, local_index

# t values within this distance of a segment's end do not start a new cell
_T_EPS = 1e-9


@dataclass(frozen=True)
class FusionParams:
    mu: float = 1.0
    max_weight: float = 100.0
    max_range: float = 25.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("truncation distance mu must be positive")
        if not self.max_weight >= 1:
            raise ValueError("max_weight must be >= 1")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")


@dataclass
class FusionStats:
    blocks_allocated: int = 0
    voxels_updated: int = 0
    pixels_skipped: int = 0

    def __iadd__(self, other: "FusionStats") -> "FusionStats":
        self.blocks_allocated += other.blocks_allocated
        self.voxels_updated += other.voxels_updated
        self.pixels_skipped += other.pixels_skipped
        return self


def sdf_from_depth(d_xy, z_c):
    """Signed distance along the optical axis: positive in front of the surface."""
    return d_xy - z_c


def tsdf_update(f_prev: float, w_prev: float, u_sdf: float, params: FusionParams):
    """Running-average update of one voxel; returns ``(f, w)``."""
    if w_prev < 0:
        raise ValueError("weights are non-negative")
    if u_sdf < -params.mu:
        return f_prev, w_prev
    u_tsdf = min(max(u_sdf, -params.mu), params.mu) / params.mu
    f = (u_tsdf + w_prev * f_prev) / (w_prev + 1.0)
    w = min(w_prev + 1.0, params.max_weight)
    return f, w


def _update_arrays(f_prev, w_prev, u_sdf, mu, max_weight):
    """Array form of :func:`tsdf_update`; only call it on voxels with u_sdf >= -mu."""
    u_tsdf = np.clip(u_sdf, -mu, mu) / mu
    f = (u_tsdf + w_prev * f_prev) / (w_prev + 1.0)
    w = np.minimum(w_prev + 1.0, max_weight)
    return f, w


def traverse_lattice(start: np.ndarray, end: np.ndarray, cell_size: float, origin=(0.0, 0.0, 0.0)):
    """Cells of a regular lattice crossed by each segment ``start -> end``.

    Exact 3D DDA run in lock-step over all segments.  Returns ``(ray_index,
    cells)`` with one row per (segment, cell) pair; each segment lists its cells
    in traversal order and never repeats one.
    """
    start = np.atleast_2d(np.asarray(start, np.float64))
    end = np.atleast_2d(np.asarray(end, np.float64))
    origin = np.asarray(origin, np.float64)
    p0 = (start - origin) / cell_size
    p1 = (end - origin) / cell_size
    delta = p1 - p0
    cur = np.floor(p0).astype(np.int64)
    step = np.sign(delta).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):  # subnormal deltas give inf, as intended
        inv = np.where(delta != 0, 1.0 / np.abs(delta), np.inf)
        boundary = np.where(step > 0, cur + 1, cur).astype(np.float64)
        t_max = np.where(delta != 0, (boundary - p0) / delta, np.inf)
    t_max = np.where(t_max < 0, 0.0, t_max)

    n = len(start)
    ray_ids = [np.arange(n)]
    cells = [cur.copy()]
    active = np.arange(n)
    limit = int(np.max(np.abs(np.floor(p1) - np.floor(p0)).sum(axis=1), initial=0)) + 4
    for _ in range(limit):
        axis = np.argmin(t_max[active], axis=1)
        t = t_max[active, axis]
        go = t < 1.0 - _T_EPS
        active = active[go]
        if active.size == 0:
            break
        axis = axis[go]
        cur[active, axis] += step[active, axis]
        t_max[active, axis] += inv[active, axis]
        ray_ids.append(active.copy())
        cells.append(cur[active].copy())
    ray_idx = np.concatenate(ray_ids)
    cell_arr = np.concatenate(cells)
    order = np.argsort(ray_idx, kind="stable")
    return ray_idx[order], cell_arr[order]


def _frustum_blocks(block_map: BlockMap, cam: CameraModel, pose: Pose, far: float) -> np.ndarray:
    """Slots of blocks that may contain a voxel center projecting into the image."""
    n = block_map.block_count
    if n == 0:
        return np.zeros(0, np.int64)
    vs = block_map.voxel_size
    lo = block_map.block_coords * (BLOCK_SIZE * vs) + block_map.origin + 0.5 * vs
    span = (BLOCK_SIZE - 1) * vs
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], np.float64) * span
    pts = pose.to_camera((lo[:, None, :] + corners[None]).reshape(-1, 3)).reshape(n, 8, 3)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    outside = (
        np.all(z <= 0, axis=1)
        | np.all(z > far, axis=1)
        | np.all(cam.fx * x + (cam.cx + 0.5) * z < 0, axis=1)
        | np.all((cam.width - 0.5 - cam.cx) * z - cam.fx * x <= 0, axis=1)
        | np.all(cam.fy * y + (cam.cy + 0.5) * z < 0, axis=1)
        | np.all((cam.height - 0.5 - cam.cy) * z - cam.fy * y <= 0, axis=1)
    )
    return np.flatnonzero(~outside)


def nearest_pixel(u: np.ndarray) -> np.ndarray:
    """Round half up, independent of numpy's banker's rounding."""
    return np.floor(u + 0.5).astype(np.int64)


def integrate_depth_map(
    block_map: BlockMap,
    depth: DepthMap,
    cam: CameraModel,
    pose: Pose,
    params: FusionParams,
    color: Optional[np.ndarray] = None,
) -> FusionStats:
    """Fuse one posed depth map.

    Allocation pass: every block crossed by a valid pixel's ray from the
    camera center to ``mu`` behind the observed depth.  Update pass: every
    voxel of every allocated block in the view frustum is projected to its
    nearest pixel and updated when that pixel is valid.
    """
    pose.validate()
    if not depth.matches(cam):
        raise ValueError(f"depth map is {depth.width}x{depth.height}, camera expects {cam.width}x{cam.height}")
    d = depth.depths
    valid = np.isfinite(d) & (d <= params.max_range)
    stats = FusionStats(pixels_skipped=int(valid.size - valid.sum()))

    rays = cam.pixel_rays()[valid]
    far = (d[valid] + params.mu)[:, None] * rays
    starts = np.broadcast_to(pose.translation, far.shape)
    _, blocks = traverse_lattice(starts, pose.to_world(far), block_map.voxel_size * BLOCK_SIZE, block_map.origin)
    if len(blocks):
        stats.blocks_allocated = block_map.allocate_blocks(np.unique(blocks, axis=0))

    depth_limit = np.where(valid, d, np.nan)
    slots = _frustum_blocks(block_map, cam, pose, params.max_range + params.mu)
    for chunk in np.array_split(slots, max(1, math.ceil(len(slots) / 256))):
        if chunk.size == 0:
            continue
        stats.voxels_updated += _update_blocks(block_map, chunk, depth_limit, cam, pose, params, color)
    return stats


def _update_blocks(block_map, slots, depths, cam, pose, params, color) -> int:
    vs = block_map.voxel_size
    vox = block_map.block_coords[slots][:, None, :] * BLOCK_SIZE + LOCAL_OFFSETS[None]
    centers = (vox.reshape(-1, 3) + 0.5) * vs + block_map.origin
    pc = pose.to_camera(centers)
    z = pc[:, 2]
    u, v = cam.project(pc)
    front = z > 0
    px = np.where(front, nearest_pixel(np.clip(np.where(front, u, -2.0), -2.0, cam.width + 2.0)), -1)
    py = np.where(front, nearest_pixel(np.clip(np.where(front, v, -2.0), -2.0, cam.height + 2.0)), -1)
    inside = front & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    d = np.full(z.shape, np.nan)
    d[inside] = depths[py[inside], px[inside]]
    u_sdf = sdf_from_depth(d, z)
    hit = np.isfinite(u_sdf) & (u_sdf >= -params.mu)
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return 0
    rows = slots[idx // BLOCK_VOXELS]
    cols = idx % BLOCK_VOXELS
    f_prev = block_map.f[rows, cols]
    w_prev = block_map.w[rows, cols]
    f_new, w_new = _update_arrays(f_prev, w_prev, u_sdf[idx], params.mu, params.max_weight)
    block_map.f[rows, cols] = f_new
    block_map.w[rows, cols] = w_new
    block_map.observed[rows, cols] = w_new > 0
    if color is not None:
        obs = color[py[idx], px[idx]].astype(np.float64)
        prev = block_map.rgb[rows, cols].astype(np.float64)
        blended = (obs + w_prev[:, None] * prev) / (w_prev[:, None] + 1.0)
        block_map.rgb[rows, cols] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
        block_map.has_color[rows, cols] = True
    return int(idx.size)


def integrate_ray_scan(
    block_map: BlockMap,
    origins,
    directions,
    ranges,
    params: FusionParams,
) -> FusionStats:
    """Fuse laser returns by walking each ray through the voxel lattice.

    Voxels crossed between the sensor and ``mu`` behind the return get
    ``u_sdf = range - t`` where ``t`` is the voxel center's distance along
    the ray.  A voxel hit by several rays of one scan receives one update per
    ray, applied in ray order.
    """
    origins = np.atleast_2d(np.asarray(origins, np.float64))
    directions = np.atleast_2d(np.asarray(directions, np.float64))
    ranges = np.atleast_1d(np.asarray(ranges, np.float64))
    origins = np.broadcast_to(origins, directions.shape)
    if len(ranges) != len(directions):
        raise ValueError("one range per ray required")
    if np.any(~np.isfinite(ranges)) or np.any(ranges <= 0):
        raise ValueError("ray ranges must be positive and finite")
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("ray directions must be unit length")
    stats = FusionStats()
    keep = ranges <= params.max_range
    stats.pixels_skipped = int((~keep).sum())
    origins, directions, ranges = origins[keep], directions[keep], ranges[keep]
    if len(ranges) == 0:
        return stats

    ends = origins + directions * (ranges + params.mu)[:, None]
    ray_idx, voxels = traverse_lattice(origins, ends, block_map.voxel_size, block_map.origin)
    blocks = np.floor_divide(voxels, BLOCK_SIZE)
    stats.blocks_allocated = block_map.allocate_blocks(np.unique(blocks, axis=0))

    centers = (voxels + 0.5) * block_map.voxel_size + block_map.origin
    t = np.einsum("ij,ij->i", centers - origins[ray_idx], directions[ray_idx])
    u_sdf = ranges[ray_idx] - t
    hit = u_sdf >= -params.mu
    ray_idx, voxels, blocks, u_sdf = ray_idx[hit], voxels[hit], blocks[hit], u_sdf[hit]

    rows = block_map.slots_for(np.unique(blocks, axis=0))
    lookup = {tuple(b): s for b, s in zip(np.unique(blocks, axis=0).tolist(), rows.tolist())}
    slot = np.array([lookup[tuple(b)] for b in blocks.tolist()], dtype=np.int64)
    local = voxels - blocks * BLOCK_SIZE
    col = local_index(local[:, 0], local[:, 1], local[:, 2])

    # voxels hit by several rays: apply updates in rounds, k-th hit per round
    key = slot * BLOCK_VOXELS + col
    order = np.lexsort((ray_idx, key))
    key, slot, col, u_sdf = key[order], slot[order], col[order], u_sdf[order]
    first = np.r_[True, key[1:] != key[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(key)), 0))
    rank = np.arange(len(key)) - group_start
    for r in range(int(rank.max()) + 1 if len(rank) else 0):
        sel = rank == r
        s, c = slot[sel], col[sel]
        f_new, w_new = _update_arrays(block_map.f[s, c], block_map.w[s, c], u_sdf[sel], params.mu, params.max_weight)
        block_map.f[s, c] = f_new
        block_map.w[s, c] = w_new
        block_map.observed[s, c] = w_new > 0
    stats.voxels_updated = int(len(key))
    return stats


def integrate_sequence(
    block_map: BlockMap,
    depths: Sequence[DepthMap],
    cam: CameraModel,
    poses: Sequence[Pose],
    params: FusionParams,
    colors=None,
) -> FusionStats:
    if len(depths) != len(poses):
        raise ValueError("need one pose per depth map")
    total = FusionStats()
    for i, (depth, pose) in enumerate(zip(depths, poses)):
        total += integrate_depth_map(block_map, depth, cam, pose, params, None if colors is None else colors[i])
    return total
