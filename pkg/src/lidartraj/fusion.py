"""Camera fusion: project global points into anonymised frames and sample colours.

Occlusion is decided with a thin-cone test around the ray from the camera
centre to the point; any indexed point inside the cone and at least
``min_depth_gap`` closer than the target counts as an occluder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anonymize import FRAME_TIME_TOLERANCE_S, AnonymizedFrame
from .core import RigidTransform
from .spatial import PointIndex


@dataclass
class CameraModel:
    """Pinhole camera; ``extrinsics`` maps global coordinates into the camera frame.

    Camera frame: +z optical axis (in front of the camera), +x right, +y down.
    Pixel (u, v) = (cx + fx*x/z, cy + fy*y/z).
    """

    camera_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform

    def project(self, points_global: np.ndarray):
        """Project (N, 3) global points.

        Returns (uv (N, 2), valid (N,)): behind-camera points and points
        outside the image rectangle are invalid (uv rows are NaN).
        """
        pts = np.asarray(points_global, float).reshape(-1, 3)
        cam = self.extrinsics.apply(pts)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * cam[:, 0] / z
            v = self.cy + self.fy * cam[:, 1] / z
        valid = (z > 0) & (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)
        uv = np.column_stack([u, v])
        uv[~valid] = np.nan
        return uv, valid

    def project_point(self, point_global: np.ndarray):
        """Single-point projection: (u, v) or None."""
        uv, valid = self.project(np.asarray(point_global, float)[None, :])
        return (float(uv[0, 0]), float(uv[0, 1])) if valid[0] else None

    def unproject(self, u: float, v: float, depth_z: float) -> np.ndarray:
        """Global point whose camera-frame z equals ``depth_z`` projecting to (u, v)."""
        cam = np.array([(u - self.cx) * depth_z / self.fx,
                        (v - self.cy) * depth_z / self.fy,
                        depth_z])
        return self.extrinsics.inverse().apply(cam)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in global coordinates."""
        return self.extrinsics.inverse().translation


def is_occluded(
    point_global: np.ndarray,
    camera: CameraModel,
    cloud_index: PointIndex,
    half_angle_rad: float = 0.005,
    min_depth_gap_m: float = 0.5,
) -> bool:
    """True when an indexed point blocks the camera's view of ``point_global``.

    A blocker lies inside the cone with apex at the camera centre opening
    around the centre->point axis, at an axis depth at least
    ``min_depth_gap_m`` short of the target's depth.
    """
    apex = camera.center
    axis = np.asarray(point_global, float) - apex
    depth = float(np.linalg.norm(axis))
    if depth <= min_depth_gap_m:
        return False
    axis /= depth
    max_depth = depth - min_depth_gap_m
    tan_half = np.tan(half_angle_rad)
    cos_half = np.cos(half_angle_rad)

    # Cover the cone up to max_depth with balls along the axis, then test the
    # candidates exactly; equivalent to a linear scan over the full cloud.
    step = 1.0
    centers = np.arange(step / 2.0, max_depth + step / 2.0, step)
    candidates: set[int] = set()
    for s in centers:
        radius = step / 2.0 + (s + step / 2.0) * tan_half + 1e-9
        candidates.update(cloud_index.radius_query(apex + axis * s, radius).tolist())
    if not candidates:
        return False
    idx = np.fromiter(candidates, dtype=np.int64, count=len(candidates))
    rel = cloud_index.points[idx] - apex
    proj = rel @ axis
    dist = np.linalg.norm(rel, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_ang = np.where(dist > 0, proj / dist, 1.0)
    inside = (proj > 0) & (proj <= max_depth) & (cos_ang >= cos_half)
    return bool(np.any(inside))


def bilinear_sample(pixels: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation at sub-pixel (u, v); u along width, v along height."""
    h, w = pixels.shape[:2]
    x0 = int(np.clip(np.floor(u), 0, w - 1))
    y0 = int(np.clip(np.floor(v), 0, h - 1))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = u - x0, v - y0
    p = pixels.astype(float)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return np.atleast_1d(top * (1 - fy) + bot * fy)


@dataclass
class CameraAnnotations:
    """Per-camera colour annotations for a batch of points."""

    camera_id: int
    colors: np.ndarray  # (N, channels) float, NaN rows where not annotated
    valid: np.ndarray  # (N,) bool


def annotate_points(
    points_global: np.ndarray,
    timestamps: np.ndarray,
    cameras: list[CameraModel],
    frames: list[AnonymizedFrame],
    cloud_index: PointIndex,
    half_angle_rad: float = 0.005,
    min_depth_gap_m: float = 0.5,
    time_tolerance_s: float = FRAME_TIME_TOLERANCE_S,
) -> list[CameraAnnotations]:
    """Paint points with pixel colours from the nearest-in-time anonymised frame.

    Only accepts anonymised frames; raises TypeError otherwise so the
    anonymisation stage cannot be skipped.  Points that project outside a
    frame, lack a frame within the time tolerance, or are occluded stay
    unannotated for that camera.
    """
    for fr in frames:
        if not isinstance(fr, AnonymizedFrame):
            raise TypeError(
                f"annotate_points requires AnonymizedFrame inputs, got {type(fr).__name__}"
            )
    points_global = np.asarray(points_global, float).reshape(-1, 3)
    timestamps = np.asarray(timestamps, float).reshape(-1)
    out: list[CameraAnnotations] = []
    for cam in cameras:
        cam_frames = sorted((f for f in frames if f.camera_id == cam.camera_id),
                            key=lambda f: f.t)
        n = len(points_global)
        channels = 3
        if cam_frames:
            channels = 3 if cam_frames[0].image.image.channels == 3 else 1
        colors = np.full((n, channels), np.nan)
        valid = np.zeros(n, dtype=bool)
        if cam_frames:
            frame_times = np.array([f.t for f in cam_frames])
            pick = np.searchsorted(frame_times, timestamps)
            pick = np.clip(pick, 0, len(cam_frames) - 1)
            left = np.clip(pick - 1, 0, len(cam_frames) - 1)
            use_left = np.abs(frame_times[left] - timestamps) <= np.abs(
                frame_times[pick] - timestamps
            )
            pick = np.where(use_left, left, pick)
            in_time = np.abs(frame_times[pick] - timestamps) <= time_tolerance_s

            uv, proj_ok = cam.project(points_global)
            for i in np.flatnonzero(in_time & proj_ok):
                if is_occluded(points_global[i], cam, cloud_index,
                               half_angle_rad, min_depth_gap_m):
                    continue
                img = cam_frames[pick[i]].image.image
                colors[i] = bilinear_sample(img.pixels, uv[i, 0], uv[i, 1])
                valid[i] = True
        out.append(CameraAnnotations(cam.camera_id, colors, valid))
    return out
