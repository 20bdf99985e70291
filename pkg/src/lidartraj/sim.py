"""Synthetic multi-LiDAR street scenes with exact ground truth.

Geometry is deliberately simple (ground plane z=0, oriented boxes, scripted
box actors); what matters is exact timing: columns fire in sequence through
each revolution, every column is ray-cast against the actors posed at that
column's timestamp, so fast objects smear across a revolution exactly like a
real rotating LiDAR.

Range noise and dropout draw from a counter-keyed Philox stream per
(seed, lidar, revolution) with a fixed (row, column) layout, making every
draw a pure function of (seed, lidar, revolution, row, col): streams are
reproducible byte-for-byte regardless of generation order or worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointColumns, RigidTransform, ScanPattern, rot_z
from .fusion import CameraModel
from .streams import (LidarInfo, SensorRegistry, Track, save_lidar_poses,
                      save_registry, save_tracks, write_point_columns)

GROUND_TRUTH_STEP_S = 0.001

# body ids attached to returns when simulate_lidar(..., with_body_ids=True)
NO_BODY = -1
GROUND_BODY = -2


# ---------------------------------------------------------------------------
# scene description


@dataclass
class Box:
    """Oriented box: local axes span ±extents/2 around the centre, rotated by yaw."""

    center: np.ndarray
    extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, float).reshape(3)
        self.extents = np.asarray(self.extents, float).reshape(3)
        if np.any(self.extents <= 0):
            raise ValueError("box extents must be positive")

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = (np.atleast_2d(points) - self.center) @ rot_z(self.yaw)
        return np.all(np.abs(local) <= self.extents / 2.0 + margin, axis=1)


@dataclass
class WaypointPath:
    """Piecewise-linear position track; yaw follows the segment heading.

    Poses clamp to the first/last waypoint outside the time range.  Segments
    slower than ``heading_speed_min`` keep the previous heading (0 initially).
    """

    times: np.ndarray
    points: np.ndarray
    heading_speed_min: float = 0.5

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, float).reshape(-1)
        self.points = np.asarray(self.points, float).reshape(-1, 3)
        if len(self.times) != len(self.points) or len(self.times) < 2:
            raise ValueError("need matching times/points, at least two waypoints")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        deltas = np.diff(self.points, axis=0)
        dt = np.diff(self.times)
        speeds = np.linalg.norm(deltas[:, :2], axis=1) / dt
        yaws = np.arctan2(deltas[:, 1], deltas[:, 0])
        yaw = 0.0
        seg_yaws = []
        for s, y in zip(speeds, yaws):
            if s >= self.heading_speed_min:
                yaw = y
            seg_yaws.append(yaw)
        self._segment_yaws = np.asarray(seg_yaws)

    def pose_at(self, t: np.ndarray):
        t = np.asarray(t, float)
        tc = np.clip(t, self.times[0], self.times[-1])
        seg = np.clip(np.searchsorted(self.times, tc, side="right") - 1, 0,
                      len(self.times) - 2)
        t0, t1 = self.times[seg], self.times[seg + 1]
        alpha = np.where(t1 > t0, (tc - t0) / (t1 - t0), 0.0)
        pos = self.points[seg] + alpha[..., None] * (self.points[seg + 1] - self.points[seg])
        return pos, self._segment_yaws[seg] * np.ones_like(tc)


@dataclass
class CirclePath:
    """Constant-rate circular track; yaw is the direction of travel."""

    center: np.ndarray
    radius: float
    angular_rate: float  # rad/s, positive = counter-clockwise
    phase: float = 0.0

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, float).reshape(3)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def pose_at(self, t: np.ndarray):
        t = np.asarray(t, float)
        theta = self.phase + self.angular_rate * t
        pos = self.center + self.radius * np.stack(
            [np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=-1
        )
        yaw = theta + np.sign(self.angular_rate) * np.pi / 2.0
        return pos, yaw


@dataclass
class Actor:
    """Moving box; the path positions the box centre."""

    name: str
    extents: np.ndarray
    path: WaypointPath | CirclePath

    def __post_init__(self) -> None:
        self.extents = np.asarray(self.extents, float).reshape(3)

    def boxes_at(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.path.pose_at(t)


@dataclass
class LidarUnit:
    lidar_id: int
    pose: RigidTransform  # sensor -> world
    pattern: ScanPattern
    max_range: float = 120.0
    hint_translation_error_m: float = 0.0
    hint_rotation_error_deg: float = 0.0
    emit_hint: bool = True


@dataclass
class SceneDescription:
    duration_s: float
    seed: int
    lidars: list[LidarUnit]
    static_boxes: list[Box] = field(default_factory=list)
    actors: list[Actor] = field(default_factory=list)
    cameras: list[CameraModel] = field(default_factory=list)
    camera_fps: float = 10.0
    range_sigma_m: float = 0.02
    dropout_probability: float = 0.0

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        ids = [l.lidar_id for l in self.lidars]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate lidar ids")
        self._validate_placement()

    def _validate_placement(self) -> None:
        for unit in self.lidars:
            origin = unit.pose.translation
            if origin[2] <= 0:
                raise ValueError(f"lidar {unit.lidar_id} is at or below the ground plane")
            for i, box in enumerate(self.static_boxes):
                if box.contains(origin)[0]:
                    raise ValueError(f"lidar {unit.lidar_id} is inside static box {i}")
            probe = np.arange(0.0, self.duration_s, 0.01)
            for actor in self.actors:
                pos, yaw = actor.boxes_at(probe)
                local = np.einsum("nij,nj->ni", rot_z(yaw).transpose(0, 2, 1), origin - pos)
                if np.any(np.all(np.abs(local) <= actor.extents / 2.0, axis=1)):
                    raise ValueError(
                        f"lidar {unit.lidar_id} passes through actor {actor.name!r}"
                    )


# ---------------------------------------------------------------------------
# ray casting


def ray_ground_range(origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance to the z=0 plane along each unit direction; inf when missing it."""
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    return np.where((dz < 0) & (t > 0), t, np.inf)


def ray_box_range(local_origins: np.ndarray, local_dirs: np.ndarray,
                  extents: np.ndarray) -> np.ndarray:
    """Slab test in the box frame; origins/dirs broadcast together."""
    half = extents / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / local_dirs
    t1 = (-half - local_origins) * inv
    t2 = (half - local_origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin > 0.0)
    return np.where(hit, tmin, np.inf)


def _static_ranges(unit: LidarUnit, boxes: list[Box]) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray range and winning body to ground/static boxes (constant across revolutions)."""
    dirs_world = unit.pattern.all_directions() @ unit.pose.rotation.T
    origin = unit.pose.translation
    ranges = ray_ground_range(origin, dirs_world)
    body = np.where(np.isfinite(ranges), GROUND_BODY, NO_BODY).astype(np.int16)
    for i, box in enumerate(boxes):
        rot = rot_z(box.yaw)
        lo = (origin - box.center) @ rot
        ld = dirs_world @ rot
        hit = ray_box_range(lo, ld, box.extents)
        closer = hit < ranges
        ranges = np.where(closer, hit, ranges)
        body[closer] = i
    return ranges, body


def _actor_candidate_columns(unit: LidarUnit, az_columns: np.ndarray,
                             pos: np.ndarray, radius: float) -> np.ndarray:
    """Columns whose azimuth sector could intersect a sphere of ``radius`` at ``pos``."""
    origin = unit.pose.translation
    rel = pos - origin
    dist = math.hypot(rel[0], rel[1])
    if dist <= radius:
        return np.arange(len(az_columns))
    center = math.atan2(rel[1], rel[0])
    half = math.asin(min(1.0, radius / dist))
    diff = np.abs((az_columns - center + np.pi) % (2.0 * np.pi) - np.pi)
    return np.flatnonzero(diff <= half)


def simulate_lidar(scene: SceneDescription, unit: LidarUnit,
                   with_body_ids: bool = False):
    """Generate the full stream for one LiDAR, ordered by time (revolution, column, row).

    With ``with_body_ids`` also returns an int16 array labeling every sample
    with the body its ray hit: ``GROUND_BODY``, a static-box index, an actor
    index offset by ``len(static_boxes)``, or ``NO_BODY`` for non-returns.
    """
    pattern = unit.pattern
    rows, cols = pattern.channel_count, pattern.column_count
    revolutions = int(round(scene.duration_s * pattern.revolution_rate_hz))
    origin = unit.pose.translation

    dirs_sensor = pattern.all_directions()  # (rows, cols, 3)
    dirs_world = dirs_sensor @ unit.pose.rotation.T
    static_rng, static_body = _static_ranges(unit, scene.static_boxes)
    actor_base = len(scene.static_boxes)

    # Column azimuth sectors in the world frame, padded by the in-column spread.
    az_world = np.arctan2(dirs_world[..., 1], dirs_world[..., 0])
    az_center = np.arctan2(np.mean(np.sin(az_world), axis=0), np.mean(np.cos(az_world), axis=0))
    spread = np.abs((az_world - az_center + np.pi) % (2 * np.pi) - np.pi).max()
    col_step = 2.0 * np.pi / cols
    az_margin = spread + 2.0 * col_step

    col_idx = np.arange(cols)
    row_idx = np.arange(rows)
    rev_period = pattern.revolution_period_s
    actor_diag = [float(np.linalg.norm(a.extents) / 2.0) for a in scene.actors]

    parts_t, parts_rng, parts_pos, parts_body = [], [], [], []
    for rev in range(revolutions):
        t_cols = pattern.column_timestamp(rev, col_idx)
        ranges = static_rng.copy()
        body = static_body.copy()

        for ai, (actor, diag) in enumerate(zip(scene.actors, actor_diag)):
            mid_pos, _ = actor.boxes_at(np.array([t_cols[0] + rev_period / 2.0]))
            # bounding sphere: half diagonal plus worst-case travel (30 m/s) per revolution
            reach = diag + 30.0 * rev_period
            cand = _actor_candidate_columns(unit, az_center, mid_pos[0], reach)
            if len(cand) == 0:
                continue
            # Pad by the azimuth margin: include neighbours of candidates.
            pad = int(np.ceil(az_margin / col_step))
            cand = np.unique((cand[:, None] + np.arange(-pad, pad + 1)[None, :]) % cols)
            pos_c, yaw_c = actor.boxes_at(t_cols[cand])
            rot_c = rot_z(yaw_c)  # (Nc, 3, 3)
            local_o = np.einsum("nji,nj->ni", rot_c, origin - pos_c)  # R^T (o - c)
            local_d = np.einsum("nji,rnj->rni", rot_c, dirs_world[:, cand, :])
            t_hit = ray_box_range(local_o[None, :, :], local_d, actor.extents)
            sub = ranges[:, cand]
            closer = t_hit < sub
            ranges[:, cand] = np.where(closer, t_hit, sub)
            bsub = body[:, cand]
            bsub[closer] = actor_base + ai
            body[:, cand] = bsub

        ranges[ranges > unit.max_range] = np.inf

        gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(scene.seed,
                                                    spawn_key=(unit.lidar_id, rev)))
        )
        noise = gen.normal(0.0, 1.0, size=(rows, cols))
        dropout = gen.random(size=(rows, cols))
        hit = np.isfinite(ranges)
        noisy = np.where(hit, ranges + scene.range_sigma_m * noise, np.inf)
        noisy = np.where(noisy <= 0, 1e-6, noisy)  # noise cannot pull a return behind the sensor
        if scene.dropout_probability > 0:
            noisy = np.where(dropout < scene.dropout_probability, np.inf, noisy)

        positions = dirs_sensor * np.where(np.isfinite(noisy), noisy, np.nan)[..., None]
        t_grid = np.broadcast_to(t_cols[None, :], (rows, cols))

        # column-major: all rows of column 0, then column 1, ... (firing order)
        parts_t.append(t_grid.T.reshape(-1))
        parts_rng.append(np.where(np.isfinite(noisy), noisy, np.nan).T.reshape(-1))
        parts_pos.append(positions.transpose(1, 0, 2).reshape(-1, 3))
        if with_body_ids:
            parts_body.append(np.where(np.isfinite(noisy), body, NO_BODY)
                              .astype(np.int16).T.reshape(-1))

    n_per_rev = rows * cols
    total = revolutions * n_per_rev
    row_tile = np.tile(np.tile(row_idx, cols).astype(np.uint16), revolutions)
    col_tile = np.tile(np.repeat(col_idx, rows).astype(np.uint16), revolutions)
    pc = PointColumns(
        lidar=np.full(total, unit.lidar_id, dtype=np.uint16),
        row=row_tile,
        col=col_tile,
        t=np.concatenate(parts_t) if parts_t else np.empty(0),
        range_m=np.concatenate(parts_rng) if parts_rng else np.empty(0),
        position=np.concatenate(parts_pos) if parts_pos else np.empty((0, 3)),
    )
    if with_body_ids:
        ids = np.concatenate(parts_body) if parts_body else np.empty(0, np.int16)
        return pc, ids
    return pc


# ---------------------------------------------------------------------------
# ground truth


def _actor_surface_partials(scene: SceneDescription, unit: LidarUnit,
                            pc: PointColumns, body_ids: np.ndarray) -> dict:
    """Per-actor (sum, count) of body-frame surface points from one stream."""
    base = len(scene.static_boxes)
    ret = pc.returns_mask
    ids = body_ids[ret]
    t = pc.t[ret]
    world = unit.pose.apply(pc.position[ret])
    out = {}
    for ai, actor in enumerate(scene.actors):
        sel = ids == base + ai
        if not np.any(sel):
            out[actor.name] = (np.zeros(3), 0)
            continue
        pos, yaw = actor.boxes_at(t[sel])
        local = np.einsum("nij,ni->nj", rot_z(yaw), world[sel] - pos)  # R^T (p - c)
        out[actor.name] = (local.sum(axis=0), len(local))
    return out


def _merged_mean(parts: list) -> np.ndarray | None:
    total = sum(count for _, count in parts)
    if total == 0:
        return None
    return sum(vec for vec, _ in parts) / total


def empirical_reference_offsets(scene: SceneDescription) -> dict[str, np.ndarray]:
    """Body-frame reference point per actor: mean of its observed surface returns.

    Every actor return (with noise) is pulled into the actor frame using the
    true poses and averaged.  This is the same functional of the observed
    points the trajectory optimizer anchors its output to, so a perfect
    estimate matches the reference exactly instead of differing by an
    arbitrary visibility-dependent body offset.  The raw mean, unlike any
    occupancy-weighted one, is also first-order immune to pose jitter: zero
    mean perturbations of the pulled points leave it unchanged, where a voxel
    mean drifts toward densely sampled faces as jitter spreads them over
    extra voxel layers.
    """
    partials: dict[str, list] = {a.name: [] for a in scene.actors}
    for unit in scene.lidars:
        pc, ids = simulate_lidar(scene, unit, with_body_ids=True)
        for name, part in _actor_surface_partials(scene, unit, pc, ids).items():
            partials[name].append(part)
        del pc, ids
    out = {}
    for name, parts in partials.items():
        merged = _merged_mean(parts)
        out[name] = np.zeros(3) if merged is None else merged
    return out


def ground_truth_tracks(scene: SceneDescription,
                        reference_offsets: dict[str, np.ndarray] | None = None
                        ) -> list[Track]:
    """Reference trajectories at 1 ms steps, anchored at the observed-surface point."""
    if reference_offsets is None:
        reference_offsets = empirical_reference_offsets(scene)
    t = np.arange(0.0, scene.duration_s, GROUND_TRUTH_STEP_S)
    tracks = []
    for actor in scene.actors:
        pos, yaw = actor.boxes_at(t)
        ref = reference_offsets.get(actor.name, np.zeros(3))
        points = pos + np.einsum("nij,j->ni", rot_z(yaw), ref)
        tracks.append(Track(actor.name, t, points, yaw))
    return tracks


def actor_center_track(scene: SceneDescription, name: str) -> Track:
    """Box-centre trajectory of one actor (1 ms steps)."""
    t = np.arange(0.0, scene.duration_s, GROUND_TRUTH_STEP_S)
    for actor in scene.actors:
        if actor.name == name:
            pos, yaw = actor.boxes_at(t)
            return Track(name, t, pos, yaw)
    raise KeyError(name)


def _perturbed_hint(unit: LidarUnit, seed: int) -> RigidTransform:
    if unit.hint_translation_error_m == 0 and unit.hint_rotation_error_deg == 0:
        return unit.pose
    gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(977, unit.lidar_id)))
    direction = gen.normal(size=3)
    direction /= np.linalg.norm(direction)
    axis = gen.normal(size=3)
    axis /= np.linalg.norm(axis)
    from .core import rotation_about_axis

    wobble = RigidTransform(
        rotation_about_axis(axis, math.radians(unit.hint_rotation_error_deg)),
        direction * unit.hint_translation_error_m,
    )
    return wobble.compose(unit.pose)


def scene_registry(scene: SceneDescription) -> SensorRegistry:
    reg = SensorRegistry()
    for unit in scene.lidars:
        hint = _perturbed_hint(unit, scene.seed) if unit.emit_hint else None
        reg.lidars[unit.lidar_id] = LidarInfo(unit.lidar_id, unit.pattern, hint)
    reg.cameras = list(scene.cameras)
    return reg


def simulate_to_dir(scene: SceneDescription, out_dir: str | Path,
                    stream_format: str = "npz") -> dict[str, Path]:
    """Run the full simulation, writing streams, ground truth, poses and registry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    partials: dict[str, list] = {a.name: [] for a in scene.actors}
    for unit in scene.lidars:
        pc, ids = simulate_lidar(scene, unit, with_body_ids=True)
        path = out / f"lidar_{unit.lidar_id:02d}.{stream_format}"
        write_point_columns(path, pc)
        written[f"lidar_{unit.lidar_id}"] = path
        for name, part in _actor_surface_partials(scene, unit, pc, ids).items():
            partials[name].append(part)
        del pc, ids
    offsets = {}
    for name, parts in partials.items():
        merged = _merged_voxel_mean(parts)
        offsets[name] = np.zeros(3) if merged is None else merged
    gt_path = out / "ground_truth.csv"
    save_tracks(gt_path, ground_truth_tracks(scene, offsets))
    written["ground_truth"] = gt_path
    poses_path = out / "lidar_poses.csv"
    save_lidar_poses(poses_path, {u.lidar_id: u.pose for u in scene.lidars})
    written["lidar_poses"] = poses_path
    reg_path = out / "sensors.toml"
    save_registry(scene_registry(scene), reg_path)
    written["registry"] = reg_path
    meta_path = out / "scene.json"
    meta_path.write_text(json.dumps(
        {"duration_s": scene.duration_s, "seed": scene.seed,
         "range_sigma_m": scene.range_sigma_m,
         "lidar_count": len(scene.lidars), "actor_count": len(scene.actors)},
        indent=2, sort_keys=True) + "\n")
    written["scene"] = meta_path
    if scene.cameras:
        written["frames"] = render_camera_frames(scene, out)
    return written


# ---------------------------------------------------------------------------
# scene presets
#
# One shared measurement yard: a pole rig of downward fans over the ground
# plane, walled in on all four sides.  The walls serve two masters: plane
# geometry gives registration a wide capture basin (plane-to-plane residuals
# stay small under yaw/translation error, unlike point-to-point), and their
# sampled tops (about 2.6-2.8 m even at the corners, given the row spacing)
# keep the convex hull of the static map above every moving body, so boundary
# trimming never shaves a roof.  Moving bodies hover 0.4 m above the plane so
# their lowest returns stay beyond the static-adjacency threshold, and they
# co-rotate on nested circles so no body ever blocks the rig's view of
# another.


def _fan_pattern(azimuth_offset_deg: float) -> ScanPattern:
    """32-row downward fan; from 8 m height it sweeps a 4.2-16.4 m annulus."""
    return ScanPattern(
        elevation_angles=np.deg2rad(np.linspace(-62.0, -26.0, 32)),
        column_count=256,
        revolution_rate_hz=10.0,
        azimuth_offset_rad=float(np.deg2rad(azimuth_offset_deg)),
    )


def _rig_unit(lidar_id: int, x: float, y: float, azimuth_offset_deg: float,
              hint_error: bool) -> LidarUnit:
    return LidarUnit(
        lidar_id=lidar_id,
        pose=RigidTransform(np.eye(3), np.array([x, y, 8.0])),
        pattern=_fan_pattern(azimuth_offset_deg),
        hint_translation_error_m=0.15 if hint_error else 0.0,
        hint_rotation_error_deg=0.8 if hint_error else 0.0,
    )


def _yard_boxes() -> list[Box]:
    # 3 m walls at +-10.1 m: tall enough that their sampled tops cap the
    # static hull above the bodies, low enough that the top fan rows clear
    # them and still find ground beyond.
    return [
        Box(center=np.array([0.0, -10.1, 1.5]), extents=np.array([20.5, 0.3, 3.0])),
        Box(center=np.array([0.0, 10.1, 1.5]), extents=np.array([20.5, 0.3, 3.0])),
        Box(center=np.array([-10.1, 0.0, 1.5]), extents=np.array([0.3, 20.5, 3.0])),
        Box(center=np.array([10.1, 0.0, 1.5]), extents=np.array([0.3, 20.5, 3.0])),
    ]


def _car(name: str, length: float, width: float, height: float, radius: float,
         speed_mps: float, phase: float) -> Actor:
    return Actor(
        name=name,
        extents=np.array([length, width, height]),
        path=CirclePath(
            center=np.array([0.0, 0.0, height / 2.0 + 0.4]),
            radius=radius,
            angular_rate=speed_mps / radius,
            phase=phase,
        ),
    )


def _four_unit_rig() -> list[LidarUnit]:
    return [
        _rig_unit(0, 0.6, 0.6, 0.0, hint_error=False),
        _rig_unit(1, -0.6, 0.6, 90.0, hint_error=True),
        _rig_unit(2, -0.6, -0.6, 180.0, hint_error=True),
        _rig_unit(3, 0.6, -0.6, 270.0, hint_error=True),
    ]


def carousel_scene(duration_s: float = 60.0, seed: int = 11) -> SceneDescription:
    """Four-unit rig over the yard; two cars and a pedestrian on nested circles."""
    return SceneDescription(
        duration_s=duration_s,
        seed=seed,
        lidars=_four_unit_rig(),
        static_boxes=_yard_boxes(),
        actors=[
            _car("car1", 4.2, 1.8, 1.5, radius=7.0, speed_mps=8.0, phase=0.3),
            _car("car2", 4.6, 1.9, 1.6, radius=8.0, speed_mps=8.8, phase=4.74),
            Actor(name="ped", extents=np.array([0.6, 0.6, 1.8]),
                  path=CirclePath(center=np.array([0.0, 0.0, 1.3]), radius=4.8,
                                  angular_rate=1.5 / 4.8, phase=1.0)),
        ],
        range_sigma_m=0.02,
    )


def duo_scene(duration_s: float = 30.0, seed: int = 7) -> SceneDescription:
    """One car plus one pedestrian whose ground shadows never overlap.

    Every ray keeps its dynamic occupancy under 15% of samples, so the
    static/dynamic split is measurable against per-return body labels.
    """
    return SceneDescription(
        duration_s=duration_s,
        seed=seed,
        lidars=_four_unit_rig(),
        static_boxes=_yard_boxes(),
        actors=[
            _car("car", 4.6, 1.9, 1.6, radius=8.0, speed_mps=8.8, phase=4.74),
            Actor(name="ped", extents=np.array([0.6, 0.6, 1.8]),
                  path=CirclePath(center=np.array([0.0, 0.0, 1.3]), radius=4.8,
                                  angular_rate=1.5 / 4.8, phase=1.0)),
        ],
        range_sigma_m=0.02,
    )


def flyby_scene(duration_s: float = 15.0, seed: int = 5) -> SceneDescription:
    """Two units sampling one 10 m/s car half a revolution apart.

    The half-period azimuth offset means a given bearing is swept by the two
    units 50 ms apart, so naive frame merging smears the fast body.
    """
    lidars = [
        _rig_unit(0, 0.5, 0.0, 0.0, hint_error=False),
        _rig_unit(1, -0.5, 0.0, 180.0, hint_error=False),
    ]
    return SceneDescription(
        duration_s=duration_s,
        seed=seed,
        lidars=lidars,
        static_boxes=_yard_boxes(),
        actors=[_car("car", 4.2, 1.8, 1.5, radius=8.0, speed_mps=10.0, phase=0.0)],
        range_sigma_m=0.02,
    )


def yard_scene(duration_s: float = 6.0, seed: int = 3) -> SceneDescription:
    """Static yard only; source of clean static clouds for registration tests."""
    return SceneDescription(
        duration_s=duration_s,
        seed=seed,
        lidars=_four_unit_rig(),
        static_boxes=_yard_boxes(),
        actors=[],
        range_sigma_m=0.02,
    )


SCENE_PRESETS = {
    "carousel": carousel_scene,
    "duo": duo_scene,
    "flyby": flyby_scene,
    "yard": yard_scene,
}


# ---------------------------------------------------------------------------
# flat-colour rendering (for camera fusion tests; not photorealistic)

GROUND_COLOR = np.array([60, 60, 60], np.uint8)
SKY_COLOR = np.array([200, 220, 255], np.uint8)


def face_color(body_index: int, face_index: int) -> np.ndarray:
    """Deterministic distinct colour per (body, face)."""
    k = body_index * 6 + face_index + 1
    return np.array([(37 * k + 13) % 256, (91 * k + 55) % 256, (173 * k + 101) % 256],
                    np.uint8)


def render_flat_color(camera: CameraModel, scene: SceneDescription, t: float):
    """Ray-cast one frame; every box face gets its own flat colour.

    Returns (RasterImage, body (H, W) int32, face (H, W) int8): body -1 means
    sky, -2 ground; static boxes come first, then actors, in scene order.
    """
    h, w = camera.height, camera.width
    u = np.arange(w, dtype=float)[None, :].repeat(h, axis=0)
    v = np.arange(h, dtype=float)[:, None].repeat(w, axis=1)
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    inv = camera.extrinsics.inverse()
    dirs = d_cam @ inv.rotation.T
    origin = inv.translation

    flat = dirs.reshape(-1, 3)
    best_t = ray_ground_range(origin, flat)
    body = np.where(np.isfinite(best_t), -2, -1).astype(np.int32)
    face = np.full(len(flat), -1, np.int8)

    bodies: list[tuple[Box, int]] = []
    for i, box in enumerate(scene.static_boxes):
        bodies.append((box, i))
    for j, actor in enumerate(scene.actors):
        pos, yaw = actor.boxes_at(np.array([t]))
        bodies.append((Box(pos[0], actor.extents, float(yaw[0])),
                       len(scene.static_boxes) + j))

    for box, idx in bodies:
        rot = rot_z(box.yaw)
        lo = (origin - box.center) @ rot
        ld = flat @ rot
        t_hit = ray_box_range(lo[None, :], ld, box.extents)
        closer = t_hit < best_t
        if not np.any(closer):
            continue
        local_hit = lo + t_hit[closer, None] * ld[closer]
        rel = local_hit / (box.extents / 2.0)
        axis = np.argmax(np.abs(rel), axis=1)
        sign = np.take_along_axis(rel, axis[:, None], axis=1)[:, 0] > 0
        face[closer] = (axis * 2 + sign).astype(np.int8)
        body[closer] = idx
        best_t[closer] = t_hit[closer]

    pixels = np.empty((len(flat), 3), np.uint8)
    pixels[body == -1] = SKY_COLOR
    pixels[body == -2] = GROUND_COLOR
    hit = body >= 0
    if np.any(hit):
        for idx in np.unique(body[hit]):
            for f in range(6):
                sel = (body == idx) & (face == f)
                if np.any(sel):
                    pixels[sel] = face_color(int(idx), f)
    from .anonymize import RasterImage

    return (RasterImage(pixels.reshape(h, w, 3)),
            body.reshape(h, w), face.reshape(h, w))


def render_camera_frames(scene: SceneDescription, out_dir: Path) -> Path:
    """Render flat-colour frames for every scene camera; returns the manifest path."""
    from .anonymize import FrameEntry, FrameManifest, save_manifest

    images = out_dir / "images"
    images.mkdir(exist_ok=True)
    manifest = FrameManifest(anonymized=False)
    times = np.arange(0.0, scene.duration_s, 1.0 / scene.camera_fps)
    for cam in scene.cameras:
        for k, t in enumerate(times):
            img, _, _ = render_flat_color(cam, scene, float(t))
            name = f"cam{cam.camera_id:02d}_{k:05d}.png"
            img.save(images / name)
            manifest.frames.append(FrameEntry(cam.camera_id, float(t), f"images/{name}"))
    path = out_dir / "frames.json"
    save_manifest(manifest, path)
    return path
