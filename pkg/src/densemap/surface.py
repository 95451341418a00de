"""Zero-level isosurface extraction restricted to fully observed cells."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes

from . import io
from .voxel_store import BLOCK_SIZE, BlockMap

_HALO = BLOCK_SIZE + 1


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, np.uint8).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def validate(self) -> None:
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")


def _gather_halo(block_map: BlockMap, slot: int, neighbor_slots: dict):
    """9x9x9 ``[x, y, z]`` arrays of f, weight and color around one block."""
    f = np.zeros((_HALO,) * 3)
    w = np.zeros((_HALO,) * 3)
    rgb = np.zeros((_HALO,) * 3 + (3,))
    base = tuple(int(c) for c in block_map.block_coords[slot])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                key = (base[0] + dx, base[1] + dy, base[2] + dz)
                s = neighbor_slots.get(key)
                if s is None:
                    continue
                sx = slice(0, BLOCK_SIZE) if dx == 0 else slice(0, 1)
                sy = slice(0, BLOCK_SIZE) if dy == 0 else slice(0, 1)
                sz = slice(0, BLOCK_SIZE) if dz == 0 else slice(0, 1)
                tx = slice(0, BLOCK_SIZE) if dx == 0 else slice(BLOCK_SIZE, _HALO)
                ty = slice(0, BLOCK_SIZE) if dy == 0 else slice(BLOCK_SIZE, _HALO)
                tz = slice(0, BLOCK_SIZE) if dz == 0 else slice(BLOCK_SIZE, _HALO)
                f[tx, ty, tz] = block_map.block_array(s, "f")[sx, sy, sz]
                w[tx, ty, tz] = block_map.block_array(s, "w")[sx, sy, sz]
                col = block_map.rgb[s].reshape(BLOCK_SIZE, BLOCK_SIZE, BLOCK_SIZE, 3).transpose(2, 1, 0, 3)
                rgb[tx, ty, tz] = col[sx, sy, sz]
    return f, w, rgb


def _valid_cells(valid: np.ndarray) -> np.ndarray:
    """Cells (lower-corner indexed) whose 8 corners are all valid."""
    c = valid[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c &= valid[dx:dx + valid.shape[0] - 1, dy:dy + valid.shape[1] - 1, dz:dz + valid.shape[2] - 1]
    return c


def _triangle_area(v: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = v[tris]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def extract_mesh(block_map: BlockMap, min_weight: float = 1.0, with_color: bool = False) -> TriangleMesh:
    """Marching cubes over cells whose 8 corners are observed with w >= min_weight.

    Each block is processed with a one-voxel halo from its +x/+y/+z
    neighbors, so vertices on block seams are duplicated rather than shared.
    Triangles are wound so their normals point toward positive f.
    """
    weight_floor = max(min_weight, np.finfo(float).tiny)
    slots = {tuple(int(c) for c in block_map.block_coords[s]): s for s in range(block_map.block_count)}
    verts_out, tris_out, cols_out = [], [], []
    offset = 0
    vs = block_map.voxel_size
    for key, slot in sorted(slots.items()):
        if not np.any(block_map.w[slot] >= weight_floor):
            continue
        f, w, rgb = _gather_halo(block_map, slot, slots)
        valid = w >= weight_floor
        cells = _valid_cells(valid)
        if not cells.any():
            continue
        # only cells with a sign change can carry geometry
        fv = np.where(valid, f, np.nan)
        corner_stack = np.stack([fv[dx:dx + 8, dy:dy + 8, dz:dz + 8]
                                 for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
        with np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            crossing = cells & (np.nanmin(corner_stack, axis=0) <= 0) & (np.nanmax(corner_stack, axis=0) > 0)
        if not crossing.any():
            continue
        volume = np.where(valid, f, 1.0)
        try:
            verts, faces, _, _ = marching_cubes(volume, 0.0, allow_degenerate=False)
        except (ValueError, RuntimeError):
            continue
        if len(faces) == 0:
            continue
        centroid = verts[faces].mean(axis=1)
        cell = np.clip(np.floor(centroid).astype(np.int64), 0, BLOCK_SIZE - 1)
        keep = crossing[cell[:, 0], cell[:, 1], cell[:, 2]]
        faces = faces[keep]
        if len(faces) == 0:
            continue
        faces = faces[_triangle_area(verts, faces) > 0]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        local_verts = verts[used]
        faces = inverse.reshape(-1, 3)
        world = (np.asarray(key) * BLOCK_SIZE + local_verts + 0.5) * vs + block_map.origin
        verts_out.append(world)
        tris_out.append(faces + offset)
        if with_color:
            cols = np.stack([map_coordinates(rgb[..., c], local_verts.T, order=1, mode="nearest") for c in range(3)], 1)
            cols_out.append(np.clip(np.rint(cols), 0, 255).astype(np.uint8))
        offset += len(world)
    if not verts_out:
        return TriangleMesh(colors=np.zeros((0, 3), np.uint8) if with_color else None)
    mesh = TriangleMesh(np.concatenate(verts_out), np.concatenate(tris_out),
                        np.concatenate(cols_out) if with_color else None)
    return mesh


def export_ply(mesh: TriangleMesh, destination) -> int:
    mesh.validate()
    try:
        return io.write_ply(destination, mesh.vertices, mesh.triangles, mesh.colors)
    except OSError as exc:
        raise OSError(f"cannot write mesh to {destination}: {exc}") from exc


def load_ply(source) -> TriangleMesh:
    vertices, faces, colors = io.read_ply(source)
    return TriangleMesh(vertices, np.zeros((0, 3)) if faces is None else faces, colors)


def export_xyz(mesh: TriangleMesh, destination) -> None:
    io.write_xyz(destination, mesh.vertices)


def surface_area(mesh: TriangleMesh) -> float:
    if mesh.is_empty:
        return 0.0
    return float(_triangle_area(mesh.vertices, mesh.triangles).sum())


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    area = _triangle_area(mesh.vertices, mesh.triangles)
    tri = rng.choice(len(area), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    p = mesh.vertices[mesh.triangles[tri]]
    return (1 - r1)[:, None] * p[:, 0] + (r1 * (1 - r2))[:, None] * p[:, 1] + (r1 * r2)[:, None] * p[:, 2]
