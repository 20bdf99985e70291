"""Command-line pipeline: stage commands, end-to-end runs, and run manifests.

Every stage reads from a recording directory (``--in``) and keeps its
artifacts in a working directory (``--out``), so stages can run one at a
time, be re-run individually, and feed each other through plain files.
``run`` chains the same stage functions in order, which is what makes
stage-wise and end-to-end execution bit-identical.

Exit codes: 0 success, 1 usage error, 2 input-format error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .anonymize import (AnonymizedFrame, AnonymizedImage, BinaryMask,
                        ColorKeyPredictor, FrameEntry, FrameManifest,
                        RasterImage, apply_mask, infer_mask, load_manifest,
                        load_score_map, save_manifest)
from .background import (StaticGeometry, accumulate_ray_samples,
                         build_static_geometry, classify_phase_a,
                         classify_phase_b, merge_static_geometries,
                         trim_scene_boundary)
from .config import PipelineConfig, dump_config, load_config
from .core import Frame, PointCloud, PointColumns
from .evaluate import compute_report, match_trajectories, save_error_series, save_report
from .extraction import extract_components, filter_components, load_components, save_components
from .fusion import annotate_points
from .optimization import optimize_trajectory
from .registration import estimate_up_direction, level_scene, register_all
from .sim import SCENE_PRESETS, simulate_to_dir
from .spatial import PointIndex
from .streams import (StreamFormatError, Track, load_lidar_poses,
                      load_registry, load_tracks, read_point_columns,
                      save_lidar_poses, save_tracks, write_point_columns,
                      write_tracks)

STREAM_SUFFIXES = (".npz", ".csv", ".jsonl")


class StageError(RuntimeError):
    """A pipeline stage failed; completed intermediates are left in place."""

    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


class UsageError(ValueError):
    """Bad command-line arguments (exit code 1, like argparse's own errors)."""


# ---------------------------------------------------------------------------
# recording-directory plumbing


def _registry_path(rec: Path) -> Path:
    path = rec / "sensors.toml"
    if not path.exists():
        raise FileNotFoundError(f"sensor registry not found: {path}")
    return path


def _stream_path(rec: Path, lidar_id: int) -> Path:
    for suffix in STREAM_SUFFIXES:
        path = rec / f"lidar_{lidar_id:02d}{suffix}"
        if path.exists():
            return path
    raise FileNotFoundError(f"no point stream for lidar {lidar_id} in {rec}")


def _geometry_path(work: Path, lidar_id: int) -> Path:
    return work / f"static_geometry_{lidar_id:02d}.jsonl"


def _candidates_path(work: Path, lidar_id: int) -> Path:
    return work / f"candidates_{lidar_id:02d}.npz"


def _load_geometries(work: Path, lidar_ids: list[int]) -> dict[int, StaticGeometry]:
    geoms = {}
    for lid in lidar_ids:
        path = _geometry_path(work, lid)
        if not path.exists():
            raise FileNotFoundError(f"static geometry not found: {path} (run separate-a first)")
        geoms[lid] = StaticGeometry.load(path, Frame.lidar(lid))
    return geoms


def _load_poses(work: Path) -> dict:
    path = work / "lidar_poses.csv"
    if not path.exists():
        raise FileNotFoundError(f"lidar poses not found: {path} (run register first)")
    return load_lidar_poses(path)


# ---------------------------------------------------------------------------
# stages


def _phase_a_unit(task) -> dict:
    rec, work, lid, pattern, cfg = task
    pc = read_point_columns(_stream_path(rec, lid))
    samples = accumulate_ray_samples(pc)
    geom = build_static_geometry(samples, pattern, lid, cfg.mode_min_fraction,
                                 cfg.mode_bin_width_m)
    del samples
    geom.save(_geometry_path(work, lid))
    returns = np.flatnonzero(pc.returns_mask)
    static = classify_phase_a(PointCloud(pc.position[returns], Frame.lidar(lid)),
                              geom, cfg.static_distance_threshold_m)
    candidates = pc.select(returns[~static])
    write_point_columns(_candidates_path(work, lid), candidates)
    return {"lidar": lid, "returns": int(len(returns)),
            "modes": len(geom), "candidates": int(len(candidates))}


def stage_separate_a(rec: Path, work: Path, cfg: PipelineConfig, workers: int = 1) -> dict:
    registry = load_registry(_registry_path(rec))
    tasks = [(rec, work, lid, registry.lidars[lid].pattern, cfg)
             for lid in registry.lidar_ids()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            units = list(pool.map(_phase_a_unit, tasks))
    else:
        units = [_phase_a_unit(t) for t in tasks]
    return {"units": units}


def stage_register(rec: Path, work: Path, cfg: PipelineConfig) -> dict:
    registry = load_registry(_registry_path(rec))
    geoms = _load_geometries(work, registry.lidar_ids())
    clouds = {lid: PointCloud(g.points, Frame.lidar(lid)) for lid, g in geoms.items()}
    hints = {lid: info.pose_hint for lid, info in registry.lidars.items()
             if info.pose_hint is not None}
    transforms, results = register_all(clouds, hints, cfg.registration)
    merged = np.vstack([transforms[lid].apply(geoms[lid].points)
                        for lid in sorted(geoms)])
    origins = np.array([transforms[lid].translation for lid in sorted(geoms)])
    up = estimate_up_direction(merged, origins)
    transforms, _ = level_scene(transforms, up)
    save_lidar_poses(work / "lidar_poses.csv", transforms)
    return {"up": [float(v) for v in up],
            "registrations": {str(lid): {"converged": res.converged,
                                         "iterations": res.iterations}
                              for lid, res in results.items()}}


def _phase_b_unit(task):
    work, lid, pose, merged, threshold = task
    pc = read_point_columns(_candidates_path(work, lid), validate=False)
    world = pose.apply(pc.position)
    rescued = classify_phase_b(PointCloud(world, Frame.world()), merged, threshold)
    keep = np.flatnonzero(~rescued)
    out = pc.select(keep)
    out.position[:] = world[keep]
    return out, int(rescued.sum())


def stage_separate_b(rec: Path, work: Path, cfg: PipelineConfig, workers: int = 1) -> dict:
    registry = load_registry(_registry_path(rec))
    lidar_ids = registry.lidar_ids()
    geoms = _load_geometries(work, lidar_ids)
    poses = _load_poses(work)
    merged = merge_static_geometries([geoms[lid] for lid in lidar_ids], poses)
    tasks = [(work, lid, poses[lid], merged, cfg.static_distance_threshold_m)
             for lid in lidar_ids]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_phase_b_unit, tasks))
    else:
        parts = [_phase_b_unit(t) for t in tasks]
    rescued = {str(lid): n for lid, (_, n) in zip(lidar_ids, parts)}

    def cat(field):
        return np.concatenate([getattr(p, field) for p, _ in parts])

    lidar, row, col = cat("lidar"), cat("row"), cat("col")
    t, rng, position = cat("t"), cat("range_m"), cat("position")
    del parts

    keep = trim_scene_boundary(position, merged, cfg.static_distance_threshold_m)
    trimmed = int(len(keep) - keep.sum())
    order = np.flatnonzero(keep)[np.argsort(t[keep], kind="stable")]
    dynamic = PointColumns(lidar[order], row[order], col[order],
                           t[order], rng[order], position[order])
    write_point_columns(work / "dynamic_points.npz", dynamic)
    return {"rescued": rescued, "trimmed": trimmed, "dynamic": int(len(dynamic))}


def _build_predictor(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "stub" and arg:
        return ColorKeyPredictor.from_fixture(arg), None
    if kind == "external" and arg:
        score_dir = Path(arg)
        if not score_dir.is_dir():
            raise FileNotFoundError(f"scored-mask directory not found: {score_dir}")
        return None, score_dir
    raise UsageError(f"--predictor must be stub:<fixture> or external:<dir>, got {spec!r}")


def stage_anonymize(manifest_path: Path, out_dir: Path, predictor_spec: str,
                    threshold: float = 0.5) -> dict:
    manifest = load_manifest(manifest_path)
    predictor, score_dir = _build_predictor(predictor_spec)
    masked_dir = out_dir / "masked"
    masks_dir = out_dir / "masks"
    masked_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent
    out = FrameManifest(anonymized=True)
    masked_pixels = 0
    for entry in manifest.frames:
        image = RasterImage.load(base / entry.path)
        if predictor is not None:
            mask = infer_mask(image, predictor, threshold)
        else:
            name = Path(entry.path).stem + ".png"
            scores = load_score_map(score_dir / name, (image.height, image.width))
            mask = BinaryMask((scores > threshold).astype(np.uint8))
        anon = apply_mask(image, mask)
        name = Path(entry.path).name
        anon.image.save(masked_dir / name)
        RasterImage(mask.values * np.uint8(255)).save(masks_dir / name)
        out.frames.append(FrameEntry(entry.camera_id, entry.t, f"masked/{name}"))
        masked_pixels += int(mask.values.sum())
    save_manifest(out, out_dir / "frames_anonymized.json")
    return {"frames": len(out.frames), "masked_pixels": masked_pixels}


def _load_anonymized_frames(work: Path) -> list[AnonymizedFrame]:
    manifest_path = work / "frames_anonymized.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"anonymized frames not found: {manifest_path} (run anonymize first)")
    manifest = load_manifest(manifest_path)
    if not manifest.anonymized:
        raise ValueError(f"{manifest_path} is not marked anonymized; refusing to fuse")
    frames = []
    for entry in manifest.frames:
        image = RasterImage.load(work / entry.path)
        mask_px = RasterImage.load(work / "masks" / Path(entry.path).name)
        mask = BinaryMask((mask_px.pixels > 127).astype(np.uint8))
        frames.append(AnonymizedFrame(entry.camera_id, entry.t,
                                      AnonymizedImage(image, mask)))
    return frames


def stage_fuse(rec: Path, work: Path, cfg: PipelineConfig) -> dict:
    registry = load_registry(_registry_path(rec))
    if not registry.cameras:
        return {"skipped": "no cameras registered"}
    frames = _load_anonymized_frames(work)
    pc = read_point_columns(work / "dynamic_points.npz", validate=False)
    index = PointIndex(pc.position)
    annotations = annotate_points(pc.position, pc.t, registry.cameras, frames, index,
                                  cfg.occlusion_cone_half_angle_rad,
                                  cfg.occlusion_min_depth_gap_m)
    channels = annotations[0].colors.shape[1] if annotations else 3
    color = np.full((len(pc), channels), np.nan)
    valid = np.zeros(len(pc), dtype=bool)
    for ann in annotations:  # first camera with a valid sample wins
        take = ann.valid & ~valid
        color[take] = ann.colors[take]
        valid |= ann.valid
    with open(work / "dynamic_colors.npz", "wb") as fh:
        np.savez(fh, color=color, valid=valid)
    return {"annotated": int(valid.sum()), "points": int(len(pc))}


def stage_extract(rec: Path, work: Path, cfg: PipelineConfig) -> dict:
    pc = read_point_columns(work / "dynamic_points.npz", validate=False)
    color = valid = None
    colors_path = work / "dynamic_colors.npz"
    if colors_path.exists():
        with np.load(colors_path) as data:
            color, valid = data["color"], data["valid"]
    components = extract_components(pc.position, pc.t, pc.lidar, cfg,
                                    color=color, color_valid=valid)
    kept, discarded = filter_components(components, cfg)
    save_components(work / "components.npz", kept)
    return {"components": len(components), "kept": len(kept),
            "discarded": len(discarded)}


def _optimize_one(task) -> Track:
    component, params = task
    traj = optimize_trajectory(component, params)
    return Track(track_id=str(traj.track_id), t=traj.t, positions=traj.position,
                 yaw=traj.yaw, num_points=traj.num_points,
                 residual_rms=traj.residual_rms_m)


def stage_optimize(rec: Path, work: Path, cfg: PipelineConfig, workers: int = 1) -> dict:
    components = load_components(work / "components.npz")
    tasks = [(comp, cfg.optimization) for comp in components]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            tracks = list(pool.map(_optimize_one, tasks))
    else:
        tracks = [_optimize_one(t) for t in tasks]
    save_tracks(work / "trajectories.csv", tracks)
    return {"tracks": len(tracks),
            "samples": int(sum(len(tr.t) for tr in tracks))}


def export_trajectories(tracks: list[Track], fmt: str = "csv") -> bytes:
    """Serialize tracks to csv or jsonl bytes (the export step)."""
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported export format {fmt!r}")
    buf = io.StringIO()
    write_tracks(buf, fmt, tracks)
    return buf.getvalue().encode()


# ---------------------------------------------------------------------------
# run orchestration


def _input_digests(rec: Path) -> dict[str, str]:
    digests = {}
    for path in sorted(rec.rglob("*")):
        if path.is_file():
            digests[str(path.relative_to(rec))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return digests


def run_pipeline(rec: Path, work: Path, cfg: PipelineConfig, workers: int = 1,
                 predictor: str | None = None) -> dict:
    """Execute all stages in order, returning the run manifest."""
    work.mkdir(parents=True, exist_ok=True)
    registry = load_registry(_registry_path(rec))
    seed = None
    scene_meta = rec / "scene.json"
    if scene_meta.exists():
        seed = json.loads(scene_meta.read_text()).get("seed")

    manifest = {
        "version": __version__,
        "seed": seed,
        "config": dump_config(cfg),
        "inputs": _input_digests(rec),
        "stages": {},
    }

    def step(name: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            info = fn(*args, **kwargs)
        except (StreamFormatError, FileNotFoundError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        manifest["stages"][name] = {
            "seconds": round(time.perf_counter() - start, 3), **info}
        return info

    step("separate-a", stage_separate_a, rec, work, cfg, workers)
    step("register", stage_register, rec, work, cfg)
    step("separate-b", stage_separate_b, rec, work, cfg, workers)
    frames_manifest = rec / "frames.json"
    if registry.cameras and frames_manifest.exists():
        if predictor is None:
            raise UsageError("recording has camera frames; --predictor is required")
        step("anonymize", stage_anonymize, frames_manifest, work, predictor)
        step("fuse", stage_fuse, rec, work, cfg)
    step("extract", stage_extract, rec, work, cfg)
    step("optimize", stage_optimize, rec, work, cfg, workers)

    (work / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub, workers: bool = True):
    sub.add_argument("--in", dest="in_dir", help="recording directory")
    sub.add_argument("--out", dest="out_dir", help="working directory")
    sub.add_argument("--config", help="pipeline config TOML")
    if workers:
        sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--print-config", action="store_true",
                     help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidartraj", description="Multi-LiDAR traffic trajectory extraction")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="render a synthetic recording")
    sim.add_argument("--scene", choices=sorted(SCENE_PRESETS), required=True)
    sim.add_argument("--duration", type=float, default=None, help="seconds")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", dest="out_dir", required=True)
    sim.add_argument("--format", choices=["npz", "csv", "jsonl"], default="npz")

    for name in ("separate-a", "separate-b"):
        _add_common(subs.add_parser(name, help=f"run the {name} separation stage"))
    _add_common(subs.add_parser("register", help="register LiDARs into one frame"),
                workers=False)

    anon = subs.add_parser("anonymize", help="mask personal data in camera frames")
    anon.add_argument("--in", dest="in_manifest", required=True, help="frame manifest")
    anon.add_argument("--out", dest="out_dir", required=True)
    anon.add_argument("--predictor", required=True,
                      help="stub:<fixture file> or external:<scored-mask directory>")

    _add_common(subs.add_parser("fuse", help="annotate points with camera colours"),
                workers=False)
    _add_common(subs.add_parser("extract", help="extract trajectory components"),
                workers=False)
    opt = subs.add_parser("optimize", help="optimize component trajectories")
    _add_common(opt)

    ev = subs.add_parser("evaluate", help="compare trajectories against a reference")
    ev.add_argument("--estimated", required=True)
    ev.add_argument("--reference", required=True)
    ev.add_argument("--report", help="write the JSON report here (default stdout)")
    ev.add_argument("--errors", help="optional per-match error-vs-time CSV")
    ev.add_argument("--gate", type=float, default=2.0)

    run = subs.add_parser("run", help="run the full pipeline")
    _add_common(run)
    run.add_argument("--predictor", help="stub:<fixture> or external:<dir>")

    exp = subs.add_parser("export", help="convert trajectories between formats")
    exp.add_argument("--in", dest="in_file", required=True)
    exp.add_argument("--out", dest="out_file", required=True)
    exp.add_argument("--format", choices=["csv", "jsonl"], default="csv")

    return parser


def _load_config_arg(args) -> PipelineConfig:
    return load_config(args.config) if getattr(args, "config", None) else PipelineConfig()


def _dispatch(args) -> int:
    if getattr(args, "print_config", False):
        sys.stdout.write(dump_config(_load_config_arg(args)))
        return 0

    if args.command == "simulate":
        factory = SCENE_PRESETS[args.scene]
        kwargs = {}
        if args.duration is not None:
            kwargs["duration_s"] = args.duration
        if args.seed is not None:
            kwargs["seed"] = args.seed
        out = Path(args.out_dir)
        simulate_to_dir(factory(**kwargs), out, stream_format=args.format)
        print(f"recording written to {out}")
        return 0

    if args.command == "evaluate":
        estimated = load_tracks(args.estimated)
        reference = load_tracks(args.reference)
        matches = match_trajectories(estimated, reference, args.gate)
        report = compute_report(matches, estimated, reference)
        if args.report:
            save_report(report, args.report)
        else:
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        if args.errors:
            save_error_series(matches, args.errors)
        return 0

    if args.command == "export":
        payload = export_trajectories(load_tracks(args.in_file), args.format)
        Path(args.out_file).write_bytes(payload)
        return 0

    if args.command == "anonymize":
        info = stage_anonymize(Path(args.in_manifest), Path(args.out_dir),
                               args.predictor)
        print(json.dumps(info))
        return 0

    if args.in_dir is None or args.out_dir is None:
        raise UsageError(f"{args.command} requires --in and --out")
    cfg = _load_config_arg(args)
    rec, work = Path(args.in_dir), Path(args.out_dir)

    if args.command == "run":
        manifest = run_pipeline(rec, work, cfg, args.workers, args.predictor)
        print(json.dumps({"stages": list(manifest["stages"])}))
        return 0

    work.mkdir(parents=True, exist_ok=True)
    stage_fns = {
        "separate-a": lambda: stage_separate_a(rec, work, cfg, args.workers),
        "register": lambda: stage_register(rec, work, cfg),
        "separate-b": lambda: stage_separate_b(rec, work, cfg, args.workers),
        "fuse": lambda: stage_fuse(rec, work, cfg),
        "extract": lambda: stage_extract(rec, work, cfg),
        "optimize": lambda: stage_optimize(rec, work, cfg, args.workers),
    }
    try:
        info = stage_fns[args.command]()
    except (StreamFormatError, FileNotFoundError):
        raise
    except StageError:
        raise
    except Exception as exc:
        raise StageError(args.command, exc) from exc
    print(json.dumps(info))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (StreamFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
