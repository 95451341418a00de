"""Reconstruction error statistics, surface area and storage accounting."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import Pose
from .surface import TriangleMesh, sample_surface, surface_area
from .voxel_store import BLOCK_RECORD, BLOCK_SIZE, BLOCK_VOXELS, SNAPSHOT_HEADER, BlockMap, snapshot_size

HIST_BIN_CM = 1.0
HIST_MAX_CM = 100.0


@dataclass
class ErrorStats:
    mode_cm: float
    median_cm: float
    p75_cm: float
    mean_cm: float
    sample_count: int
    histogram: np.ndarray = field(repr=False)
    bin_centers_cm: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "mode_cm": self.mode_cm,
            "median_cm": self.median_cm,
            "p75_cm": self.p75_cm,
            "mean_cm": self.mean_cm,
            "sample_count": self.sample_count,
        }


def point_errors(
    points: np.ndarray,
    reference: np.ndarray,
    workers: int = 1,
) -> np.ndarray:
    """Distance in meters from each query point to its nearest reference point."""
    points = np.asarray(points, np.float64).reshape(-1, 3)
    reference = np.asarray(reference, np.float64).reshape(-1, 3)
    if len(points) == 0 or len(reference) == 0:
        raise ValueError("point_errors needs non-empty inputs")
    tree = cKDTree(reference)
    dist, _ = tree.query(points, k=1, workers=workers)
    return dist


def mesh_errors(
    mesh: TriangleMesh,
    reference: np.ndarray,
    sample_count: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Mesh-to-reference distances at the vertices, or at area-weighted samples."""
    if mesh.is_empty:
        raise ValueError("mesh is empty")
    if sample_count:
        pts = sample_surface(mesh, sample_count, np.random.default_rng(seed))
    else:
        pts = mesh.vertices
    return point_errors(pts, reference, workers=workers)


def error_stats(distances_m: Sequence[float]) -> ErrorStats:
    """Mode, median and 75th percentile in centimeters.

    Quantiles interpolate linearly between order statistics.  The histogram
    uses 1 cm bins centered on whole centimeters (0, 1, ..., 100) plus one
    overflow bin; the mode is the center of the fullest bin.
    """
    d = np.asarray(distances_m, np.float64).ravel() * 100.0
    if d.size == 0:
        raise ValueError("error_stats needs at least one distance")
    n_bins = int(round(HIST_MAX_CM / HIST_BIN_CM)) + 1
    bins = np.floor(d / HIST_BIN_CM + 0.5).astype(np.int64)
    bins = np.clip(bins, 0, n_bins)  # n_bins is the overflow bin
    hist = np.bincount(bins, minlength=n_bins + 1)
    centers = np.arange(n_bins + 1) * HIST_BIN_CM
    mode = float(centers[np.argmax(hist[:n_bins])]) if hist[:n_bins].any() else float(centers[-1])
    median, p75 = np.percentile(d, [50, 75])
    return ErrorStats(mode, float(median), float(p75), float(d.mean()), int(d.size), hist, centers)


def histogram_csv(stats: ErrorStats) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_center_cm", "count"])
    for i, (c, n) in enumerate(zip(stats.bin_centers_cm, stats.histogram)):
        label = f"{c:g}" if i < len(stats.histogram) - 1 else f">{c - HIST_BIN_CM:g}"
        writer.writerow([label, int(n)])
    return buf.getvalue()


@dataclass
class StorageReport:
    block_count: int
    voxel_count: int
    bytes: int
    dense_voxels: int
    dense_bytes: int

    @property
    def compression_ratio(self) -> float:
        return self.dense_bytes / self.bytes if self.bytes else float("inf")

    def as_dict(self) -> dict:
        return {
            "block_count": self.block_count,
            "voxel_count": self.voxel_count,
            "bytes": self.bytes,
            "dense_voxels": self.dense_voxels,
            "dense_bytes": self.dense_bytes,
            "compression_ratio": self.compression_ratio,
        }


def storage_report(block_map: BlockMap) -> StorageReport:
    """Snapshot bytes versus a dense grid over the allocated bounding box."""
    n = block_map.block_count
    box = block_map.bounding_box()
    dense_voxels = 0
    if box is not None:
        dense_voxels = int(np.prod((box[1] - box[0] + 1) * BLOCK_SIZE))
    per_voxel = BLOCK_RECORD["voxels"].base.itemsize
    return StorageReport(
        block_count=n,
        voxel_count=BLOCK_VOXELS * n,
        bytes=snapshot_size(n),
        dense_voxels=dense_voxels,
        dense_bytes=SNAPSHOT_HEADER.size + dense_voxels * per_voxel,
    )


def consolidate_clouds(clouds: Sequence[np.ndarray], poses: Sequence[Pose]) -> np.ndarray:
    """Move per-frame sensor clouds into the world frame and stack them."""
    if len(clouds) != len(poses):
        raise ValueError("one pose per cloud required")
    parts = [pose.to_world(np.asarray(c, np.float64).reshape(-1, 3)) for c, pose in zip(clouds, poses)]
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def format_table(rows: dict) -> str:
    width = max(len(k) for k in rows)
    lines = []
    for key, value in rows.items():
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key.ljust(width)}  {text}")
    return "\n".join(lines) + "\n"
