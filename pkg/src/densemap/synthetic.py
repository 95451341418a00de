"""Analytic scenes: ray-cast depth maps, textured stereo pairs and ground truth.

Scenes are lists of rectangles and spheres.  Depth is rendered exactly by
ray casting, texture is a procedural function of world position (so both
stereo views agree), and the ground-truth cloud is sampled on a regular grid
over each primitive.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import io
from .camera import CameraModel, DepthMap, Pose


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Planar rectangle ``center + s*u + t*v`` with ``|s| <= half_u``, ``|t| <= half_v``."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c, u, v = (np.asarray(a, np.float64) for a in (self.center, self.u, self.v))
        n = np.cross(u, v)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origins) @ n) / denom
        hit = origins + t[..., None] * dirs
        rel = hit - c
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9)
        ok &= (np.abs(rel @ u) <= self.half_u) & (np.abs(rel @ v) <= self.half_v)
        return np.where(ok, t, np.inf)

    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def sample(self, spacing: float) -> np.ndarray:
        ns = max(1, int(math.ceil(2 * self.half_u / spacing)))
        nt = max(1, int(math.ceil(2 * self.half_v / spacing)))
        s = (np.arange(ns) + 0.5) / ns * 2 * self.half_u - self.half_u
        t = (np.arange(nt) + 0.5) / nt * 2 * self.half_v - self.half_v
        S, T = np.meshgrid(s, t, indexing="ij")
        c, u, v = (np.asarray(a, np.float64) for a in (self.center, self.u, self.v))
        return (c + S.reshape(-1, 1) * u + T.reshape(-1, 1) * v)

    def to_dict(self) -> dict:
        return {"type": "rect", "center": list(self.center), "u": list(self.u), "v": list(self.v),
                "half_u": self.half_u, "half_v": self.half_v}


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, np.float64)
        oc = origins - c
        a = np.sum(dirs * dirs, axis=-1)
        b = 2 * np.sum(oc * dirs, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def area(self) -> float:
        return 4 * math.pi * self.radius ** 2

    def sample(self, spacing: float) -> np.ndarray:
        n = max(16, int(self.area() / spacing ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        golden = math.pi * (3 - math.sqrt(5))
        theta = golden * i
        pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        return np.asarray(self.center) + self.radius * pts

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


def primitive_from_dict(d: dict):
    kind = d.get("type")
    if kind == "rect":
        return Rect(tuple(d["center"]), tuple(d["u"]), tuple(d["v"]), float(d["half_u"]), float(d["half_v"]))
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    raise SceneError(f"unknown primitive type {kind!r}")


@dataclass
class Scene:
    primitives: List = field(default_factory=list)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        if not self.primitives:
            raise SceneError("scene has no primitives")
        t = np.full(dirs.shape[:-1], np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.intersect(origins, dirs))
        return t

    def ground_truth(self, spacing: float = 0.01) -> np.ndarray:
        return np.concatenate([p.sample(spacing) for p in self.primitives])

    def area(self) -> float:
        return float(sum(p.area() for p in self.primitives))


def render_depth(scene: Scene, cam: CameraModel, pose: Pose, max_depth: float = np.inf) -> np.ndarray:
    """Exact z-depth image (NaN where nothing is hit)."""
    rays = cam.pixel_rays()
    dirs = rays @ pose.rotation.T
    t = scene.raycast(np.broadcast_to(pose.translation, dirs.shape), dirs)
    t[~np.isfinite(t) | (t > max_depth)] = np.nan
    return t  # rays have unit z, so t is the z-depth


class Texture:
    """View-independent procedural intensity in [0, 1] from world position."""

    def __init__(self, seed: int = 0, waves: int = 24, scale: float = 25.0):
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.k = dirs * rng.uniform(0.3, 1.0, size=(waves, 1)) * scale
        self.phase = rng.uniform(0, 2 * math.pi, size=waves)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        s = np.sin(points @ self.k.T + self.phase).mean(axis=-1)
        return np.clip(0.5 + 1.5 * s, 0.0, 1.0)


def render_intensity(scene: Scene, cam: CameraModel, pose: Pose, texture: Texture) -> np.ndarray:
    rays = cam.pixel_rays()
    dirs = rays @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t = scene.raycast(origins, dirs)
    pts = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    img = texture(pts)
    img[~np.isfinite(t)] = 0.0
    return img


def render_stereo(scene: Scene, cam: CameraModel, pose: Pose, texture: Texture):
    """Rectified pair; ``pose`` is the right (reference) camera, the left sits at -baseline along x."""
    if not cam.baseline > 0:
        raise SceneError("stereo rendering needs a positive baseline")
    left_pose = pose.compose(Pose(np.eye(3), np.array([-cam.baseline, 0.0, 0.0])))
    return render_intensity(scene, cam, left_pose, texture), render_intensity(scene, cam, pose, texture)


# -- stock scenes -----------------------------------------------------------


def corridor(length: float, width: float = 4.0, height: float = 3.0, heading_deg: float = 0.0,
             grade: float = 0.0, start=(0.0, 0.0, 0.0), caps: bool = True) -> Scene:
    """Rectangular tube along a (possibly rotated and sloped) axis.

    The floor spans ``[-width/2, width/2]`` laterally at height 0 above the
    axis; walls rise to ``height``.
    """
    h = math.radians(heading_deg)
    axis = np.array([math.cos(h), math.sin(h), grade])
    axis /= np.linalg.norm(axis)
    lateral = np.array([-math.sin(h), math.cos(h), 0.0])
    up = np.cross(axis, lateral)
    mid = np.asarray(start, np.float64) + axis * length / 2
    hl, hw, hh = length / 2, width / 2, height / 2
    prims = [
        Rect(tuple(mid), tuple(axis), tuple(lateral), hl, hw),  # floor
        Rect(tuple(mid + up * height), tuple(axis), tuple(lateral), hl, hw),  # ceiling
        Rect(tuple(mid + lateral * hw + up * hh), tuple(axis), tuple(up), hl, hh),
        Rect(tuple(mid - lateral * hw + up * hh), tuple(axis), tuple(up), hl, hh),
    ]
    if caps:
        for sign in (-1, 1):
            prims.append(Rect(tuple(mid + sign * axis * hl + up * hh), tuple(lateral), tuple(up), hw, hh))
    return Scene(prims)


def corridor_trajectory(frames: int, length: float, heading_deg: float = 0.0, grade: float = 0.0,
                        eye_height: float = 1.5, margin: float = 1.0, sway: float = 0.3,
                        start=(0.0, 0.0, 0.0)) -> List[Pose]:
    """Forward-looking cameras along the corridor axis with a gentle lateral sway."""
    if frames < 1:
        raise SceneError("trajectory needs at least one frame")
    if length <= 2 * margin:
        raise SceneError("corridor too short for the trajectory margin")
    h = math.radians(heading_deg)
    axis = np.array([math.cos(h), math.sin(h), grade])
    axis /= np.linalg.norm(axis)
    lateral = np.array([-math.sin(h), math.cos(h), 0.0])
    up = np.cross(axis, lateral)
    poses = []
    span = length - 2 * margin - 2.0
    for i in range(frames):
        s = margin + (span * i / max(frames - 1, 1))
        eye = np.asarray(start) + axis * s + up * eye_height + lateral * sway * math.sin(i * 0.7)
        target = eye + axis * 4.0 - lateral * sway * 0.5 * math.sin(i * 0.7) - up * 0.3
        poses.append(Pose.look_at(eye, target, up=tuple(up)))
    return poses


def slanted_plane_pair(width: int = 160, height: int = 120, a: float = 0.05, b: float = 0.03, c: float = 12.0,
                       seed: int = 0, blur: float = 1.0):
    """Stereo pair of a textured plane with disparity ``a*x + b*y + c`` in the right view.

    Returns ``(left, right, disparity)``; ``left(x + d(x, y), y) = right(x, y)``.
    """
    rng = np.random.default_rng(seed)
    margin = int(abs(c) + (abs(a) * width + abs(b) * height) + 8)
    base = gaussian_filter(rng.random((height, width + 2 * margin)), blur)
    base = (base - base.min()) / (base.max() - base.min())
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    right = map_coordinates(base, [ys, xs + margin], order=3, mode="reflect")
    src = (xs - b * ys - c) / (1.0 + a)  # right-view x that lands on left pixel xs
    left = map_coordinates(base, [ys, src + margin], order=3, mode="reflect")
    disparity = a * xs + b * ys + c
    return np.clip(left, 0, 1), np.clip(right, 0, 1), disparity


# -- dataset generation -------------------------------------------------------


@dataclass
class SceneSpec:
    kind: str = "corridor"  # corridor | plane | sphere
    frames: int = 20
    length: float = 12.0
    width: float = 4.0
    height: float = 3.0
    heading_deg: float = 0.0
    grade: float = 0.0
    noise: float = 0.02
    outlier_fraction: float = 0.0
    stereo: bool = False
    image_width: int = 160
    image_height: int = 120
    fx: float = 120.0
    baseline: float = 0.3
    gt_spacing: float = 0.02
    seed: int = 0
    primitives: Optional[list] = None

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        data = json.loads(text)
        if not data:
            raise SceneError("empty scene spec")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**data)

    def camera(self) -> CameraModel:
        return CameraModel(self.fx, self.fx, (self.image_width - 1) / 2, (self.image_height - 1) / 2,
                           self.image_width, self.image_height, self.baseline)


def build_scene(spec: SceneSpec):
    """Scene and camera trajectory for a spec."""
    if spec.frames < 1:
        raise SceneError("scene needs at least one frame")
    if spec.primitives:
        scene = Scene([primitive_from_dict(p) for p in spec.primitives])
        poses = [Pose.look_at((0.0, -0.1 * i, 0.0), (0.0, -0.1 * i, 5.0), up=(0.0, -1.0, 0.0))
                 for i in range(spec.frames)]
        return scene, poses
    if spec.kind == "corridor":
        scene = corridor(spec.length, spec.width, spec.height, spec.heading_deg, spec.grade)
        poses = corridor_trajectory(spec.frames, spec.length, spec.heading_deg, spec.grade)
        return scene, poses
    if spec.kind == "plane":
        scene = Scene([Rect((0.0, 0.0, 5.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 20.0, 20.0)])
        poses = [Pose(np.eye(3), np.array([0.02 * i, 0.0, 0.0])) for i in range(spec.frames)]
        return scene, poses
    if spec.kind == "sphere":
        scene = Scene([Sphere((0.0, 0.0, 0.0), 1.0)])
        poses = []
        for i in range(spec.frames):
            ang = 2 * math.pi * i / spec.frames
            eye = (3.0 * math.cos(ang), 3.0 * math.sin(ang), 0.5)
            poses.append(Pose.look_at(eye, (0.0, 0.0, 0.0)))
        return scene, poses
    raise SceneError(f"unknown scene kind {spec.kind!r}")


def noisy_depth(clean: np.ndarray, noise: float, outlier_fraction: float, rng: np.random.Generator) -> np.ndarray:
    d = clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean.copy()
    if outlier_fraction > 0:
        mask = rng.random(clean.shape) < outlier_fraction
        d[mask] = clean[mask] * rng.uniform(0.5, 1.5, size=int(mask.sum()))
    d[~np.isfinite(clean)] = np.nan
    return d


@dataclass
class Dataset:
    camera: CameraModel
    poses: List[Pose]
    depths: List[DepthMap]
    ground_truth: np.ndarray
    scene: Scene
    lefts: Optional[list] = None
    rights: Optional[list] = None


def generate(spec: SceneSpec) -> Dataset:
    scene, poses = build_scene(spec)
    cam = spec.camera()
    rng = np.random.default_rng(spec.seed)
    depths = []
    lefts, rights = ([], []) if spec.stereo else (None, None)
    texture = Texture(spec.seed)
    for pose in poses:
        clean = render_depth(scene, cam, pose)
        depths.append(DepthMap(noisy_depth(clean, spec.noise, spec.outlier_fraction, rng)))
        if spec.stereo:
            left, right = render_stereo(scene, cam, pose, texture)
            lefts.append(left)
            rights.append(right)
    return Dataset(cam, poses, depths, scene.ground_truth(spec.gt_spacing), scene, lefts, rights)


def camera_config_lines(cam: CameraModel) -> str:
    return (f"fx = {cam.fx!r}\nfy = {cam.fy!r}\ncx = {cam.cx!r}\ncy = {cam.cy!r}\n"
            f"width = {cam.width}\nheight = {cam.height}\nbaseline = {cam.baseline!r}\n")


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Lay a dataset out on disk: depth/NNNNNN.pfm, poses.txt, camera.cfg, ground_truth.ply."""
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    for i, depth in enumerate(dataset.depths):
        io.write_pfm(out / "depth" / f"{i:06d}.pfm", depth.depths)
    if dataset.lefts is not None:
        (out / "left").mkdir(exist_ok=True)
        (out / "right").mkdir(exist_ok=True)
        for i, (left, right) in enumerate(zip(dataset.lefts, dataset.rights)):
            io.write_gray(out / "left" / f"{i:06d}.png", left)
            io.write_gray(out / "right" / f"{i:06d}.png", right)
    io.write_poses(out / "poses.txt", dataset.poses)
    (out / "camera.cfg").write_text(camera_config_lines(dataset.camera))
    io.write_ply(out / "ground_truth.ply", dataset.ground_truth)
    return out


def bundled_corridor(**overrides) -> SceneSpec:
    """The 12 m, 20 frame corridor used by the end-to-end benchmark."""
    base = dict(kind="corridor", frames=20, length=12.0, noise=0.02, gt_spacing=0.005, seed=0)
    base.update(overrides)
    return SceneSpec(**base)


def long_corridor(**overrides) -> SceneSpec:
    """100 m corridor on a diagonal, climbing heading; its bounding box is mostly empty space."""
    base = dict(kind="corridor", frames=60, length=100.0, heading_deg=45.0, grade=0.15, noise=0.0,
                gt_spacing=0.05, seed=0)
    base.update(overrides)
    return SceneSpec(**base)
