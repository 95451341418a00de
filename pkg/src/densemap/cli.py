"""``densemap`` command line: stereo, fuse, regularize, extract, eval and the full pipeline.

Exit codes: 0 success, 1 usage, 2 bad input data or config, 3 memory cap.
Every stage writes a ``<output>.stats.csv`` key/value file next to its output;
eval writes ``<prefix>.stats.csv``, ``<prefix>.hist.csv`` and ``<prefix>.hist.png``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io, synthetic
from .config import Config, ConfigError, load_config, parse_config
from .voxel_store import AllocationError, BlockMap, load_snapshot, save_snapshot

log = logging.getLogger("densemap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MEMORY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ----------------------------------------------------------------


def write_stats(path: Path, stats: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", "value"])
        for key, value in stats.items():
            writer.writerow([key, f"{value:.6g}" if isinstance(value, float) else value])


def sidecar(path: Path, suffix: str) -> Path:
    """``path`` with ``suffix`` appended to its full name, so outputs of different stages never collide."""
    return path.with_name(path.name + suffix)


def read_stats(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {k: v for k, v in rows[1:]}


def _list_frames(directory: Path, suffixes) -> list:
    if not directory.is_dir():
        raise FileNotFoundError(f"missing directory {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in suffixes)
    if not files:
        raise FileNotFoundError(f"no {'/'.join(suffixes)} files in {directory}")
    return files


def resolve_config(args) -> Config:
    """Config file, then a dataset's camera.cfg for missing intrinsics, then flags."""
    config = load_config(args.config) if args.config else Config()
    data_dir = getattr(args, "data", None)
    if data_dir and config.fx is None and (Path(data_dir) / "camera.cfg").exists():
        cam = parse_config((Path(data_dir) / "camera.cfg").read_text(), str(Path(data_dir) / "camera.cfg"))
        config = config.updated(**{k: getattr(cam, k) for k in ("fx", "fy", "cx", "cy", "width", "height",
                                                                 "baseline")})
    return config.updated(
        voxel_size=args.voxel_size, iters_3d=args.iters_3d, iters_2d=args.iters_2d, min_weight=args.min_weight,
        max_range=args.max_range, seed=args.seed, threads=args.threads,
    )


def _load_map(path, config: Config) -> BlockMap:
    return load_snapshot(path, table_size=config.table_size, max_bytes=config.memory_cap)


# -- stages -------------------------------------------------------------------


def stage_stereo(data: Path, out: Path, config: Config, figures: bool = True) -> dict:
    from .plotting import disparity_image
    from .stereo import disparity_to_depth, estimate_disparity

    cam = config.camera()
    lefts = _list_frames(data / "left", (".png", ".pgm"))
    rights = _list_frames(data / "right", (".png", ".pgm"))
    if len(lefts) != len(rights):
        raise io.DataError(f"{len(lefts)} left images but {len(rights)} right images")
    params = config.stereo_params()
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "disparity").mkdir(exist_ok=True)
    t0 = time.perf_counter()
    valid = 0
    for lp, rp in zip(lefts, rights):
        left, right = io.read_gray(lp), io.read_gray(rp)
        if left.shape != right.shape or right.shape != (cam.height, cam.width):
            raise io.DataError(f"{lp.name}: image size does not match the camera")
        disp = estimate_disparity(left, right, params)
        depth = disparity_to_depth(disp, cam)
        io.write_pfm(out / "disparity" / f"{rp.stem}.pfm", disp.disparity)
        io.write_pfm(out / "depth" / f"{rp.stem}.pfm", depth.depths)
        if figures:
            disparity_image(disp.disparity, out / "disparity" / f"{rp.stem}.png", params.d_min, params.d_max)
        valid += int(depth.valid.sum())
    stats = {"frames": len(rights), "valid_pixels": valid, "seconds": time.perf_counter() - t0}
    write_stats(out / "stereo.stats.csv", stats)
    return stats


def stage_fuse(depth_dir: Path, poses_path: Path, snapshot: Path, config: Config) -> dict:
    from .fusion import integrate_depth_map

    cam = config.camera()
    frames = _list_frames(depth_dir, (".pfm", ".png"))
    poses = io.read_poses(poses_path)
    if len(poses) != len(frames):
        raise io.DataError(f"{poses_path}: {len(poses)} poses for {len(frames)} depth maps")
    block_map = BlockMap(config.voxel_size, np.zeros(3), table_size=config.table_size, max_bytes=config.memory_cap)
    params = config.fusion_params()
    t0 = time.perf_counter()
    totals = {"blocks_allocated": 0, "voxels_updated": 0, "pixels_skipped": 0}
    for path, pose in zip(frames, poses):
        depth = io.read_depth(path)
        if not depth.matches(cam):
            raise io.DataError(f"{path}: depth size does not match the camera")
        s = integrate_depth_map(block_map, depth, cam, pose, params)
        totals["blocks_allocated"] += s.blocks_allocated
        totals["voxels_updated"] += s.voxels_updated
        totals["pixels_skipped"] += s.pixels_skipped
    size = save_snapshot(block_map, snapshot)
    stats = {"frames": len(frames), **totals, "block_count": block_map.block_count,
             "observed_voxels": int(block_map.observed.sum()), "bytes": size,
             "mu": params.mu, "seconds": time.perf_counter() - t0}
    write_stats(sidecar(snapshot, ".stats.csv"), stats)
    return stats


def stage_regularize(src: Path, dst: Path, config: Config) -> dict:
    from .regularizer import regularize

    block_map = _load_map(src, config)
    params = config.reg_params()
    t0 = time.perf_counter()
    result = regularize(block_map, params)
    save_snapshot(block_map, dst)
    stats = {"observed_voxels": result.observed_voxels, "iterations": result.iterations, "lambda": params.lam,
             "initial_energy": result.initial_energy, "final_energy": result.final_energy,
             "seconds": time.perf_counter() - t0}
    write_stats(sidecar(dst, ".stats.csv"), stats)
    return stats


def stage_extract(src: Path, dst: Path, config: Config, color: bool = False) -> dict:
    from .surface import export_ply, extract_mesh, surface_area

    block_map = _load_map(src, config)
    mesh = extract_mesh(block_map, config.min_weight, with_color=color)
    size = export_ply(mesh, dst)
    stats = {"vertices": len(mesh.vertices), "triangles": len(mesh.triangles), "surface_area_m2": surface_area(mesh),
             "bytes": size}
    write_stats(sidecar(dst, ".stats.csv"), stats)
    return stats


def stage_eval(mesh_path: Path, reference: Path, out_prefix: Path, config: Config, figures: bool = True) -> dict:
    from .evaluation import error_stats, format_table, histogram_csv, mesh_errors
    from .surface import load_ply, surface_area

    mesh = load_ply(mesh_path)
    ref = io.read_points(reference)
    if mesh.is_empty:
        raise io.DataError(f"{mesh_path}: mesh has no triangles")
    count = max(len(mesh.vertices), 1) if config.sample_surface else None
    dists = mesh_errors(mesh, ref, sample_count=count, seed=config.seed, workers=config.threads)
    es = error_stats(dists)
    stats = {**es.as_dict(), "surface_area_m2": surface_area(mesh)}
    write_stats(sidecar(out_prefix, ".stats.csv"), stats)
    sidecar(out_prefix, ".hist.csv").write_text(histogram_csv(es))
    if figures:
        from .plotting import error_histogram

        error_histogram(es, sidecar(out_prefix, ".hist.png"), title=mesh_path.name)
    print(format_table(stats), end="")
    return stats


def stage_info(snapshot: Path, config: Config, out: Path = None) -> dict:
    from .evaluation import format_table, storage_report

    report = storage_report(_load_map(snapshot, config)).as_dict()
    if out is not None:
        write_stats(out, report)
    print(format_table(report), end="")
    return report


# -- commands -----------------------------------------------------------------


def cmd_gen_synthetic(args, config: Config) -> int:
    if args.scene:
        spec = synthetic.SceneSpec.from_json(Path(args.scene).read_text())
    elif args.preset == "long-corridor":
        spec = synthetic.long_corridor()
    else:
        spec = synthetic.bundled_corridor()
    overrides = {"frames": args.frames, "noise": args.noise, "seed": args.seed, "gt_spacing": args.gt_spacing}
    if args.stereo:
        overrides["stereo"] = True
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    dataset = synthetic.generate(spec)
    out = synthetic.write_dataset(dataset, args.out)
    write_stats(out / "gen.stats.csv", {"frames": len(dataset.poses), "ground_truth_points": len(dataset.ground_truth),
                                        "scene_area_m2": dataset.scene.area(), "noise": spec.noise,
                                        "seed": spec.seed})
    return EXIT_OK


def cmd_stereo(args, config):
    stage_stereo(Path(args.data), Path(args.out), config, figures=not args.no_figures)
    return EXIT_OK


def cmd_fuse(args, config):
    data = Path(args.data)
    stage_fuse(Path(args.depth) if args.depth else data / "depth",
               Path(args.poses) if args.poses else data / "poses.txt", Path(args.out), config)
    return EXIT_OK


def cmd_regularize(args, config):
    stage_regularize(Path(args.snapshot), Path(args.out), config)
    return EXIT_OK


def cmd_extract(args, config):
    stage_extract(Path(args.snapshot), Path(args.out), config, color=args.color)
    return EXIT_OK


def cmd_eval(args, config):
    prefix = Path(args.out) if args.out else Path(args.mesh).with_suffix("")
    stage_eval(Path(args.mesh), Path(args.reference), prefix, config, figures=not args.no_figures)
    return EXIT_OK


def cmd_info(args, config):
    stage_info(Path(args.snapshot), config, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_consolidate(args, config):
    from .evaluation import consolidate_clouds

    clouds = [io.read_points(p) for p in _list_frames(Path(args.clouds), (".xyz", ".ply", ".txt"))]
    poses = io.read_poses(args.poses)
    if len(poses) != len(clouds):
        raise io.DataError(f"{args.poses}: {len(poses)} poses for {len(clouds)} clouds")
    merged = consolidate_clouds(clouds, poses)
    if Path(args.out).suffix.lower() == ".ply":
        io.write_ply(args.out, merged)
    else:
        io.write_xyz(args.out, merged)
    return EXIT_OK


def cmd_pipeline(args, config):
    data, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    figures = not args.no_figures
    summary = {}
    if args.stereo:
        stage_stereo(data, out / "stereo", config, figures)
        depth_dir = out / "stereo" / "depth"
    else:
        depth_dir = data / "depth"
    fused = stage_fuse(depth_dir, data / "poses.txt", out / "fused.hvg", config)
    reg = stage_regularize(out / "fused.hvg", out / "regularized.hvg", config)
    raw_mesh = stage_extract(out / "fused.hvg", out / "raw.ply", config)
    reg_mesh = stage_extract(out / "regularized.hvg", out / "regularized.ply", config)
    summary.update(blocks=fused["block_count"], raw_area_m2=raw_mesh["surface_area_m2"],
                   regularized_area_m2=reg_mesh["surface_area_m2"], final_energy=reg["final_energy"])
    reference = Path(args.reference) if args.reference else (Path(config.reference) if config.reference else None)
    if reference is None:
        for name in ("ground_truth.ply", "ground_truth.xyz"):
            if (data / name).exists():
                reference = data / name
    if reference is not None:
        raw = stage_eval(out / "raw.ply", reference, out / "raw", config, figures=False)
        regd = stage_eval(out / "regularized.ply", reference, out / "regularized", config, figures=False)
        summary.update(raw_median_cm=raw["median_cm"], regularized_median_cm=regd["median_cm"],
                       median_reduction=1.0 - regd["median_cm"] / raw["median_cm"] if raw["median_cm"] else 0.0)
        if figures:
            from .evaluation import error_stats, mesh_errors
            from .plotting import error_histogram
            from .surface import load_ply

            ref = io.read_points(reference)
            stats = [error_stats(mesh_errors(load_ply(out / n), ref, workers=config.threads))
                     for n in ("raw.ply", "regularized.ply")]
            error_histogram(stats[0], out / "errors.png", compare=stats[1])
    write_stats(out / "pipeline.stats.csv", summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--voxel-size", type=float)
    common.add_argument("--iters-3d", type=int)
    common.add_argument("--iters-2d", type=int)
    common.add_argument("--min-weight", type=float)
    common.add_argument("--max-range", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="densemap", description="Sparse TSDF fusion, masked TV regularization and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="render a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--scene", help="JSON scene spec")
    p.add_argument("--preset", choices=["corridor", "long-corridor"], default="corridor")
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float, help="depth noise sigma in meters")
    p.add_argument("--gt-spacing", type=float)
    p.add_argument("--stereo", action="store_true", help="also render textured stereo pairs")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("stereo", parents=[common], help="rectified pairs to PFM depth")
    p.add_argument("data", help="directory with left/ and right/ images")
    p.add_argument("out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stereo)

    p = sub.add_parser("fuse", parents=[common], help="depth maps and poses to a snapshot")
    p.add_argument("data", help="dataset directory (depth/, poses.txt, camera.cfg)")
    p.add_argument("out", help="output snapshot")
    p.add_argument("--depth", help="depth directory (default DATA/depth)")
    p.add_argument("--poses", help="pose file (default DATA/poses.txt)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("regularize", parents=[common], help="denoise a snapshot")
    p.add_argument("snapshot")
    p.add_argument("out")
    p.set_defaults(func=cmd_regularize)

    p = sub.add_parser("extract", parents=[common], help="snapshot to PLY mesh")
    p.add_argument("snapshot")
    p.add_argument("out")
    p.add_argument("--color", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="mesh error statistics against a reference cloud")
    p.add_argument("mesh")
    p.add_argument("reference")
    p.add_argument("--out", help="output prefix (default: mesh path without suffix)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", parents=[common], help="storage report for a snapshot")
    p.add_argument("snapshot")
    p.add_argument("--out", help="write the report as key/value CSV")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("consolidate", parents=[common], help="merge per-frame clouds into the world frame")
    p.add_argument("clouds", help="directory of per-frame XYZ/PLY clouds")
    p.add_argument("poses")
    p.add_argument("out")
    p.set_defaults(func=cmd_consolidate)

    p = sub.add_parser("pipeline", parents=[common], help="fuse, regularize, extract and evaluate")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--reference", help="reference cloud (default DATA/ground_truth.ply)")
    p.add_argument("--stereo", action="store_true", help="compute depth from DATA/left and DATA/right first")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        return args.func(args, config)
    except AllocationError as exc:
        print(f"densemap: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except (ConfigError, io.DataError, synthetic.SceneError, FileNotFoundError, ValueError) as exc:
        print(f"densemap: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
