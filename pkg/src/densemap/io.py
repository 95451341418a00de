"""Readers and writers for the on-disk formats used by the pipeline."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import DepthMap, Pose


class DataError(ValueError):
    """Malformed input data (bad file contents, bad pose lines, ...)."""


# -- PFM ------------------------------------------------------------------


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian single-channel PFM, rows stored bottom-to-top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.flipud(image).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise DataError(f"{path}: not a PFM file")
        dims = fh.readline()
        while dims.startswith(b"#"):
            dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DataError(f"{path}: malformed PFM dimensions")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline())
        except ValueError:
            raise DataError(f"{path}: malformed PFM scale") from None
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    if len(raw) != 4 * w * h * channels:
        raise DataError(f"{path}: expected {4 * w * h * channels} data bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# -- depth maps -----------------------------------------------------------


def read_depth(path) -> DepthMap:
    """PFM in meters or 16-bit PNG in millimeters (0 = invalid)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return DepthMap(read_pfm(path))
    with Image.open(path) as im:
        raw = np.asarray(im).astype(np.float64)
    if raw.ndim != 2:
        raise DataError(f"{path}: depth PNG must be single channel")
    raw[raw == 0] = np.nan
    return DepthMap(raw / 1000.0)


def write_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, depth.depths)
        return
    mm = np.nan_to_num(depth.depths * 1000.0, nan=0.0)
    mm = np.clip(np.rint(mm), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_gray(path) -> np.ndarray:
    """8-bit gray or RGB image as floats in [0, 1] (RGB converted by luma)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max if arr.dtype.kind in "ui" else 1.0)


def write_gray(path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)).save(path)


# -- poses ----------------------------------------------------------------


def parse_poses(text: str, source: str = "<poses>") -> list[Pose]:
    """One pose per line: 12 numbers, row-major 3x4 camera-to-world."""
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 12:
            raise DataError(f"{source}:{lineno}: expected 12 numbers, found {len(parts)}")
        try:
            values = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
        pose = Pose.from_matrix(values.reshape(3, 4))
        if not pose.is_rigid():
            raise DataError(f"{source}:{lineno}: rotation is not rigid")
        poses.append(pose)
    return poses


def read_poses(path) -> list[Pose]:
    return parse_poses(Path(path).read_text(), str(path))


def format_poses(poses) -> str:
    lines = []
    for pose in poses:
        m = pose.matrix()[:3, :4]
        lines.append(" ".join(repr(float(v)) for v in m.ravel()))
    return "\n".join(lines) + "\n"


def write_poses(path, poses) -> None:
    Path(path).write_text(format_poses(poses))


# -- point clouds and meshes ---------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, vertices, faces=None, colors=None) -> int:
    """Binary little-endian PLY; returns the number of bytes written."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.zeros((0, 3), np.int64) if faces is None else np.asarray(faces).reshape(-1, 3)
    vdesc = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        vdesc += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vrec = np.zeros(len(vertices), dtype=vdesc)
    vrec["x"], vrec["y"], vrec["z"] = vertices.T
    if colors is not None:
        c = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        vrec["red"], vrec["green"], vrec["blue"] = c.T
    frec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    frec["n"] = 3
    frec["idx"] = faces
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    payload = ("\n".join(header) + "\n").encode("ascii") + vrec.tobytes() + frec.tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def read_ply(path):
    """Read a PLY file; returns ``(vertices, faces, colors)``.

    Supports ascii and binary little/big endian files whose face lists all
    have the same length. ``faces``/``colors`` are None when absent.
    """
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None:
        raise DataError(f"{path}: missing PLY format line")
    out = {}
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            chunk = [r.split() for r in rows[pos:pos + count]]
            pos += count
            out[name] = (props, chunk)
        return _ply_from_ascii(out)
    order = "<" if fmt == "binary_little_endian" else ">"
    offset = body_start
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            # assume constant list length, read the first count to find it
            list_prop = next(p for p in props if p[1] == "list")
            scalar_props = [p for p in props if p[1] != "list"]
            first = [(p[0], order + p[1]) for p in scalar_props]
            head = np.dtype(first + [("n", order + list_prop[2])])
            n = int(np.frombuffer(data, dtype=head, count=1, offset=offset)["n"][0]) if count else 3
            dt = np.dtype(first + [("n", order + list_prop[2]), (list_prop[0], order + list_prop[3], (n,))])
        else:
            dt = np.dtype([(p[0], order + p[1]) for p in props])
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        offset += dt.itemsize * count
        out[name] = arr
    vert = out.get("vertex")
    if vert is None:
        raise DataError(f"{path}: no vertex element")
    vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    colors = None
    if vert.dtype.names and "red" in vert.dtype.names:
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.uint8)
    faces = None
    if "face" in out:
        face = out["face"]
        key = [n for n in face.dtype.names if n != "n"][-1]
        faces = np.asarray(face[key], dtype=np.int64).reshape(len(face), -1) if len(face) else np.zeros((0, 3), np.int64)
    return vertices, faces, colors


def _ply_from_ascii(out):
    props, rows = out["vertex"]
    names = [p[0] for p in props]
    table = np.array([[float(v) for v in r[: len(names)]] for r in rows], dtype=np.float64).reshape(-1, len(names))
    vertices = table[:, [names.index("x"), names.index("y"), names.index("z")]]
    colors = None
    if "red" in names:
        colors = table[:, [names.index("red"), names.index("green"), names.index("blue")]].astype(np.uint8)
    faces = None
    if "face" in out:
        _, frows = out["face"]
        faces = np.array([[int(v) for v in r[1:]] for r in frows], dtype=np.int64).reshape(len(frows), -1) \
            if frows else np.zeros((0, 3), np.int64)
    return vertices, faces, colors


def write_xyz(path, points) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.6f")


def read_xyz(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] < 3:
        raise DataError(f"{path}: expected at least 3 columns")
    return pts[:, :3]


def read_points(path) -> np.ndarray:
    """Reference cloud from ASCII XYZ or PLY."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)[0]
    return read_xyz(path)
