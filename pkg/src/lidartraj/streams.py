"""File formats: point streams, sensor registry, LiDAR poses, trajectories.

Point streams come as npz (bit-exact columnar arrays, the format for full
recordings), jsonl (one object per line, bit-exact, greppable) or csv
(compact, value-exact at the printed precision).  The csv writer rounds
range to 1e-6 and rebuilds positions along the unit ray direction before
rounding, so the |position| == range contract survives the round trip.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import Frame, PointCloud, PointColumns, RigidTransform, ScanPattern, ScanPoint
from .fusion import CameraModel

STREAM_FIELDS = ["lidar", "row", "col", "t", "range", "x", "y", "z"]
TRAJECTORY_FIELDS = ["track_id", "t", "x", "y", "z", "yaw", "num_points", "residual_rms"]
POSE_FIELDS = ["lidar_id"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]


class StreamFormatError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _stream_kind(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".jsonl":
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    if suffix == ".npz":
        return "npz"
    raise StreamFormatError(f"unsupported stream extension {suffix!r} ({path.name})")


# ---------------------------------------------------------------------------
# record-level API


def read_point_stream(path: str | Path):
    """Yield ScanPoints one by one, validating each record.

    Malformed records raise StreamFormatError naming the line.
    """
    path = Path(path)
    kind = _stream_kind(path)
    with open(path, "r", newline="") as fh:
        if kind == "jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    yield ScanPoint(
                        int(obj["lidar"]), int(obj["row"]), int(obj["col"]),
                        float(obj["t"]), float(obj["range"]),
                        np.array([obj["x"], obj["y"], obj["z"]], dtype=float),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise StreamFormatError(str(exc), line=lineno) from exc
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != STREAM_FIELDS:
                raise StreamFormatError(f"bad csv header {header}", line=1)
            for lineno, rec in enumerate(reader, 2):
                if not rec:
                    continue
                try:
                    if len(rec) != 8:
                        raise ValueError(f"expected 8 fields, got {len(rec)}")
                    yield ScanPoint(
                        int(rec[0]), int(rec[1]), int(rec[2]),
                        float(rec[3]), float(rec[4]),
                        np.array([rec[5], rec[6], rec[7]], dtype=float),
                    )
                except ValueError as exc:
                    raise StreamFormatError(str(exc), line=lineno) from exc


def write_point_stream(path: str | Path, points) -> None:
    """Write an iterable of ScanPoints (record-level mirror of the bulk writer)."""
    if isinstance(points, PointColumns):
        write_point_columns(path, points)
        return
    write_point_columns(Path(path), PointColumns.from_points(list(points)))


# ---------------------------------------------------------------------------
# bulk API


def _rounded_for_csv(pc: PointColumns):
    r = np.round(pc.range_m, 6)
    with np.errstate(invalid="ignore", divide="ignore"):
        norms = np.linalg.norm(pc.position, axis=1)
        scale = np.where(norms > 0, r / norms, 0.0)
    pos = np.round(pc.position * scale[:, None], 6)
    nodata = ~np.isfinite(r)
    pos[nodata] = np.nan
    return r, pos


def write_point_columns(path: str | Path, pc: PointColumns) -> None:
    path = Path(path)
    kind = _stream_kind(path)
    if kind == "npz":
        with open(path, "wb") as fh:
            np.savez(
                fh,
                lidar=pc.lidar.astype(np.uint16), row=pc.row.astype(np.uint16),
                col=pc.col.astype(np.uint16), t=pc.t, range=pc.range_m,
                position=pc.position,
            )
        return
    if kind == "csv":
        r, pos = _rounded_for_csv(pc)
        cols = [
            pc.lidar.tolist(), pc.row.tolist(), pc.col.tolist(),
            np.round(pc.t, 6).tolist(), r.tolist(),
            pos[:, 0].tolist(), pos[:, 1].tolist(), pos[:, 2].tolist(),
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STREAM_FIELDS)
            writer.writerows(zip(*cols))
    else:
        with open(path, "w") as fh:
            li, ro, co = pc.lidar.tolist(), pc.row.tolist(), pc.col.tolist()
            ts, rs = pc.t.tolist(), pc.range_m.tolist()
            xs, ys, zs = (pc.position[:, i].tolist() for i in range(3))
            for i in range(len(ts)):
                fh.write(
                    f'{{"lidar":{li[i]},"row":{ro[i]},"col":{co[i]},"t":{ts[i]!r},'
                    f'"range":{rs[i]!r},"x":{xs[i]!r},"y":{ys[i]!r},"z":{zs[i]!r}}}\n'
                )


def read_point_columns(path: str | Path, validate: bool = True) -> PointColumns:
    path = Path(path)
    kind = _stream_kind(path)
    if kind == "npz":
        try:
            with np.load(path) as data:
                missing = [k for k in ("lidar", "row", "col", "t", "range", "position")
                           if k not in data]
                if missing:
                    raise StreamFormatError(f"{path.name}: missing arrays {missing}")
                pc = PointColumns(
                    data["lidar"].astype(np.uint16), data["row"].astype(np.uint16),
                    data["col"].astype(np.uint16), data["t"].astype(float),
                    data["range"].astype(float), data["position"].astype(float),
                )
        except (OSError, ValueError, KeyError, EOFError) as exc:
            if isinstance(exc, StreamFormatError):
                raise
            raise StreamFormatError(f"{path.name}: {exc}") from exc
        offset = 0
    elif kind == "csv":
        try:
            df = pd.read_csv(
                path, engine="c",
                dtype={"lidar": np.uint16, "row": np.uint16, "col": np.uint16,
                       "t": np.float64, "range": np.float64,
                       "x": np.float64, "y": np.float64, "z": np.float64},
            )
        except (ValueError, pd.errors.ParserError) as exc:
            raise StreamFormatError(f"{path.name}: {exc}") from exc
        if list(df.columns) != STREAM_FIELDS:
            raise StreamFormatError(f"bad csv header {list(df.columns)}", line=1)
        pc = PointColumns(
            df["lidar"].to_numpy(), df["row"].to_numpy(), df["col"].to_numpy(),
            df["t"].to_numpy(), df["range"].to_numpy(),
            np.column_stack([df["x"].to_numpy(), df["y"].to_numpy(), df["z"].to_numpy()]),
        )
        offset = 2  # header occupies line 1
    else:
        try:
            df = pd.read_json(path, lines=True, dtype={"lidar": np.uint16})
        except ValueError as exc:
            raise StreamFormatError(f"{path.name}: {exc}") from exc
        missing = [k for k in STREAM_FIELDS if k not in df.columns]
        if missing:
            raise StreamFormatError(f"{path.name}: missing fields {missing}")
        pc = PointColumns(
            df["lidar"].to_numpy(np.uint16), df["row"].to_numpy(np.uint16),
            df["col"].to_numpy(np.uint16),
            df["t"].to_numpy(float), df["range"].to_numpy(float),
            df[["x", "y", "z"]].to_numpy(float),
        )
        offset = 1
    if validate:
        ret = pc.returns_mask
        norms = np.linalg.norm(pc.position[ret], axis=1)
        bad = np.abs(norms - pc.range_m[ret]) > 1e-6
        if np.any(bad):
            line = int(np.flatnonzero(ret)[np.argmax(bad)]) + offset
            raise StreamFormatError("|position| inconsistent with range", line=line)
    return pc


# ---------------------------------------------------------------------------
# sensor registry

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


@dataclass
class LidarInfo:
    lidar_id: int
    pattern: ScanPattern
    pose_hint: RigidTransform | None = None


@dataclass
class SensorRegistry:
    lidars: dict[int, LidarInfo] = field(default_factory=dict)
    cameras: list[CameraModel] = field(default_factory=list)

    def lidar_ids(self) -> list[int]:
        return sorted(self.lidars)


def load_registry(path: str | Path) -> SensorRegistry:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    reg = SensorRegistry()
    for entry in data.get("lidars", []):
        lid = int(entry["id"])
        if "elevation_deg" in entry:
            elev = np.deg2rad(np.asarray(entry["elevation_deg"], float))
        else:
            elev = np.deg2rad(
                np.linspace(entry["elevation_min_deg"], entry["elevation_max_deg"],
                            int(entry["channels"]))
            )
        pattern = ScanPattern(
            elevation_angles=elev,
            column_count=int(entry["columns"]),
            revolution_rate_hz=float(entry.get("rate_hz", 10.0)),
            azimuth_offset_rad=math.radians(float(entry.get("azimuth_offset_deg", 0.0))),
        )
        hint = None
        if "pose_hint" in entry:
            hint = RigidTransform.from_loose(
                np.asarray(entry["pose_hint"]["rotation"], float).reshape(3, 3),
                np.asarray(entry["pose_hint"]["translation"], float),
            )
        reg.lidars[lid] = LidarInfo(lid, pattern, hint)
    for entry in data.get("cameras", []):
        reg.cameras.append(
            CameraModel(
                camera_id=int(entry["id"]),
                fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                width=int(entry["width"]), height=int(entry["height"]),
                extrinsics=RigidTransform.from_loose(
                    np.asarray(entry["rotation"], float).reshape(3, 3),
                    np.asarray(entry["translation"], float),
                ),
            )
        )
    return reg


def _fmt_floats(values) -> str:
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def save_registry(reg: SensorRegistry, path: str | Path) -> None:
    lines: list[str] = []
    for lid in reg.lidar_ids():
        info = reg.lidars[lid]
        p = info.pattern
        lines += [
            "[[lidars]]",
            f"id = {lid}",
            f"elevation_deg = {_fmt_floats(np.rad2deg(p.elevation_angles))}",
            f"columns = {p.column_count}",
            f"rate_hz = {p.revolution_rate_hz!r}",
            f"azimuth_offset_deg = {math.degrees(p.azimuth_offset_rad)!r}",
        ]
        if info.pose_hint is not None:
            lines += [
                "[lidars.pose_hint]",
                f"rotation = {_fmt_floats(info.pose_hint.rotation.ravel())}",
                f"translation = {_fmt_floats(info.pose_hint.translation)}",
            ]
        lines.append("")
    for cam in reg.cameras:
        lines += [
            "[[cameras]]",
            f"id = {cam.camera_id}",
            f"fx = {cam.fx!r}", f"fy = {cam.fy!r}",
            f"cx = {cam.cx!r}", f"cy = {cam.cy!r}",
            f"width = {cam.width}", f"height = {cam.height}",
            f"rotation = {_fmt_floats(cam.extrinsics.rotation.ravel())}",
            f"translation = {_fmt_floats(cam.extrinsics.translation)}",
            "",
        ]
    Path(path).write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# LiDAR pose tables


def save_lidar_poses(path: str | Path, poses: dict[int, RigidTransform]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_FIELDS)
        for lid in sorted(poses):
            t = poses[lid]
            writer.writerow([lid] + [repr(v) for v in t.rotation.ravel()]
                            + [repr(v) for v in t.translation])


def load_lidar_poses(path: str | Path) -> dict[int, RigidTransform]:
    out: dict[int, RigidTransform] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POSE_FIELDS:
            raise StreamFormatError(f"bad pose header {header}", line=1)
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            try:
                vals = [float(v) for v in rec[1:]]
                out[int(rec[0])] = RigidTransform(
                    np.array(vals[:9]).reshape(3, 3), np.array(vals[9:12])
                )
            except ValueError as exc:
                raise StreamFormatError(str(exc), line=lineno) from exc
    return out


# ---------------------------------------------------------------------------
# trajectory tables


@dataclass
class Track:
    """Sampled trajectory of one moving object."""

    track_id: str
    t: np.ndarray
    positions: np.ndarray
    yaw: np.ndarray
    num_points: int = 0
    residual_rms: float = 0.0

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, float).reshape(-1)
        self.positions = np.asarray(self.positions, float).reshape(-1, 3)
        self.yaw = np.asarray(self.yaw, float).reshape(-1)
        if not (len(self.t) == len(self.positions) == len(self.yaw)):
            raise ValueError("track field lengths differ")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("track timestamps must be non-decreasing")


def write_tracks(fh, kind: str, tracks: list[Track]) -> None:
    """Write trajectory samples to an open text stream (6 decimal places)."""
    if kind == "csv":
        fh.write(",".join(TRAJECTORY_FIELDS) + "\n")
        for tr in tracks:
            rows = [
                f"{tr.track_id},{tr.t[i]:.6f},{tr.positions[i, 0]:.6f},"
                f"{tr.positions[i, 1]:.6f},{tr.positions[i, 2]:.6f},"
                f"{tr.yaw[i]:.6f},{tr.num_points},{tr.residual_rms:.6f}\n"
                for i in range(len(tr.t))
            ]
            fh.writelines(rows)
    else:
        for tr in tracks:
            for i in range(len(tr.t)):
                fh.write(json.dumps({
                    "track_id": tr.track_id,
                    "t": round(float(tr.t[i]), 6),
                    "x": round(float(tr.positions[i, 0]), 6),
                    "y": round(float(tr.positions[i, 1]), 6),
                    "z": round(float(tr.positions[i, 2]), 6),
                    "yaw": round(float(tr.yaw[i]), 6),
                    "num_points": int(tr.num_points),
                    "residual_rms": round(float(tr.residual_rms), 6),
                }) + "\n")


def save_tracks(path: str | Path, tracks: list[Track]) -> None:
    """Write trajectory samples (csv or jsonl by extension, 6 decimal places)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        write_tracks(fh, _stream_kind(path), tracks)


def load_tracks(path: str | Path) -> list[Track]:
    path = Path(path)
    kind = _stream_kind(path)
    try:
        if kind == "csv":
            df = pd.read_csv(path, dtype={"track_id": str})
        else:
            df = pd.read_json(path, lines=True, dtype={"track_id": str})
    except (ValueError, pd.errors.ParserError) as exc:
        raise StreamFormatError(f"{path.name}: {exc}") from exc
    missing = [k for k in TRAJECTORY_FIELDS if k not in df.columns]
    if missing:
        raise StreamFormatError(f"{path.name}: missing fields {missing}")
    tracks = []
    for tid, g in df.groupby("track_id", sort=True):
        order = np.argsort(g["t"].to_numpy(), kind="stable")
        tracks.append(Track(
            track_id=str(tid),
            t=g["t"].to_numpy(float)[order],
            positions=g[["x", "y", "z"]].to_numpy(float)[order],
            yaw=g["yaw"].to_numpy(float)[order],
            num_points=int(g["num_points"].iloc[0]),
            residual_rms=float(g["residual_rms"].iloc[0]),
        ))
    return tracks
