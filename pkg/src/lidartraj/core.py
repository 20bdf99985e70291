"""Core data types: rigid transforms, scan patterns, scan points and tagged point clouds.

Everything downstream (separation, registration, extraction, optimisation)
works on these types.  Bulk point data is kept in column arrays (one numpy
array per field) rather than per-point objects; a 60 s four-LiDAR recording
holds ~20M points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

ROTATION_TOL = 1e-9
POSITION_RANGE_TOL = 1e-6


class FrameMismatchError(ValueError):
    """Operands live in different coordinate frames."""


def rot_z(yaw: float | np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack of them) about +z by ``yaw`` radians."""
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(yaw.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation carrying unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # Antiparallel: rotate pi about any axis orthogonal to a.
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return rotation_about_axis(axis, np.pi)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    tr = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(tr))


def euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation from intrinsic z-y'-x'' Euler angles (radians)."""
    return rot_z(yaw) @ rotation_about_axis([0, 1, 0], pitch) @ rotation_about_axis([1, 0, 0], roll)


@dataclass
class RigidTransform:
    """Proper rigid transform: ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {det:.9f}, expected +1")

    @classmethod
    def from_loose(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        """Build from a nearly-orthonormal matrix (e.g. hand-authored registry hints)."""
        rotation = np.asarray(rotation, dtype=float).reshape(3, 3)
        u, _, vt = np.linalg.svd(rotation)
        d = np.sign(np.linalg.det(u @ vt))
        fixed = u @ np.diag([1.0, 1.0, d]) @ vt
        return cls(fixed, translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def distance_to(self, other: "RigidTransform") -> tuple[float, float]:
        """(translation distance m, rotation angle rad) between two transforms."""
        dt = float(np.linalg.norm(self.translation - other.translation))
        dr = rotation_angle(self.rotation.T @ other.rotation)
        return dt, dr


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """``compose(t1, t2)(x) == t1(t2(x))``."""
    return first.compose(second)


@dataclass
class ScanPattern:
    """Firing geometry of one rotating LiDAR.

    Columns fire in sequence through each revolution; all channels of a column
    share the column timestamp.  Azimuth 0 is the sensor +x axis, increasing
    towards +y.
    """

    elevation_angles: np.ndarray
    column_count: int
    revolution_rate_hz: float
    azimuth_offset_rad: float = 0.0

    def __post_init__(self) -> None:
        self.elevation_angles = np.asarray(self.elevation_angles, dtype=float).reshape(-1)
        if len(self.elevation_angles) == 0:
            raise ValueError("pattern needs at least one channel")
        if np.any(np.diff(self.elevation_angles) <= 0):
            raise ValueError("elevation_angles must be strictly increasing")
        if self.column_count < 1:
            raise ValueError("column_count must be positive")
        if self.revolution_rate_hz <= 0:
            raise ValueError("revolution_rate_hz must be positive")

    @property
    def channel_count(self) -> int:
        return len(self.elevation_angles)

    @property
    def revolution_period_s(self) -> float:
        return 1.0 / self.revolution_rate_hz

    def azimuth_of_column(self, col: np.ndarray | int) -> np.ndarray:
        col = np.asarray(col)
        return self.azimuth_offset_rad + 2.0 * np.pi * col / self.column_count

    def ray_directions(self, rows: np.ndarray | int, cols: np.ndarray | int) -> np.ndarray:
        """Unit direction(s) in the sensor frame for channel ``rows``, column ``cols``."""
        rows = np.asarray(rows)
        elev = self.elevation_angles[rows]
        azim = self.azimuth_of_column(cols)
        elev, azim = np.broadcast_arrays(elev, azim)
        ce = np.cos(elev)
        return np.stack([ce * np.cos(azim), ce * np.sin(azim), np.sin(elev)], axis=-1)

    def all_directions(self) -> np.ndarray:
        """(channel_count, column_count, 3) grid of unit directions."""
        rows = np.arange(self.channel_count)[:, None]
        cols = np.arange(self.column_count)[None, :]
        return self.ray_directions(rows, cols)

    def column_timestamp(self, revolution: np.ndarray | int, col: np.ndarray | int) -> np.ndarray:
        revolution = np.asarray(revolution, dtype=float)
        col = np.asarray(col, dtype=float)
        return (revolution + col / self.column_count) * self.revolution_period_s


@dataclass(frozen=True)
class ScanPoint:
    """One emitted ray.  Non-finite ``range_m`` means no return."""

    lidar_id: int
    row: int
    col: int
    timestamp: float
    range_m: float
    position: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if np.isfinite(self.range_m):
            norm = float(np.linalg.norm(self.position))
            if abs(norm - self.range_m) > POSITION_RANGE_TOL:
                raise ValueError(
                    f"|position| = {norm:.9f} does not match range {self.range_m:.9f}"
                )

    @property
    def is_return(self) -> bool:
        return bool(np.isfinite(self.range_m))


@dataclass(frozen=True)
class Frame:
    """Coordinate frame tag: a specific LiDAR's local frame, or the shared global frame."""

    kind: str
    lidar_id: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("lidar", "global"):
            raise ValueError(f"unknown frame kind {self.kind!r}")
        if self.kind == "lidar" and self.lidar_id is None:
            raise ValueError("lidar frame needs a lidar_id")

    @classmethod
    def lidar(cls, lidar_id: int) -> "Frame":
        return cls("lidar", lidar_id)

    @classmethod
    def world(cls) -> "Frame":
        return cls("global")

    def __str__(self) -> str:
        return "global" if self.kind == "global" else f"lidar:{self.lidar_id}"


def require_same_frame(a: Frame, b: Frame, context: str = "") -> None:
    if a != b:
        msg = f"frame mismatch: {a} vs {b}"
        if context:
            msg = f"{context}: {msg}"
        raise FrameMismatchError(msg)


@dataclass
class PointCloud:
    """Bare xyz cloud tagged with the frame it lives in."""

    points: np.ndarray
    frame: Frame

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, transform: RigidTransform, frame: Frame) -> "PointCloud":
        return PointCloud(transform.apply(self.points), frame)


@dataclass
class PointColumns:
    """Column-array view of a point stream (one entry per emitted ray).

    ``position`` rows for no-return rays are NaN.  Field arrays always share
    one length; use ``select`` to subset.
    """

    lidar: np.ndarray
    row: np.ndarray
    col: np.ndarray
    t: np.ndarray
    range_m: np.ndarray
    position: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.t)
        for name in ("lidar", "row", "col", "range_m"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} length mismatch")
        if self.position.shape != (n, 3):
            raise ValueError("position must be (N, 3)")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def returns_mask(self) -> np.ndarray:
        return np.isfinite(self.range_m)

    def select(self, index: np.ndarray) -> "PointColumns":
        return PointColumns(
            self.lidar[index],
            self.row[index],
            self.col[index],
            self.t[index],
            self.range_m[index],
            self.position[index],
        )

    def iter_points(self) -> Iterator[ScanPoint]:
        for i in range(len(self)):
            yield ScanPoint(
                int(self.lidar[i]),
                int(self.row[i]),
                int(self.col[i]),
                float(self.t[i]),
                float(self.range_m[i]),
                self.position[i],
            )

    @classmethod
    def from_points(cls, points: Sequence[ScanPoint]) -> "PointColumns":
        n = len(points)
        out = cls(
            np.fromiter((p.lidar_id for p in points), np.uint16, n),
            np.fromiter((p.row for p in points), np.uint16, n),
            np.fromiter((p.col for p in points), np.uint16, n),
            np.fromiter((p.timestamp for p in points), np.float64, n),
            np.fromiter((p.range_m for p in points), np.float64, n),
            np.array([p.position for p in points], dtype=float).reshape(n, 3),
        )
        return out

    @classmethod
    def concatenate(cls, parts: Sequence["PointColumns"]) -> "PointColumns":
        return cls(
            np.concatenate([p.lidar for p in parts]),
            np.concatenate([p.row for p in parts]),
            np.concatenate([p.col for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.range_m for p in parts]),
            np.concatenate([p.position for p in parts]),
        )

    def validate(self) -> None:
        """Check the position/range consistency contract on every return."""
        ret = self.returns_mask
        norms = np.linalg.norm(self.position[ret], axis=1)
        bad = np.abs(norms - self.range_m[ret]) > POSITION_RANGE_TOL
        if np.any(bad):
            idx = int(np.flatnonzero(ret)[np.argmax(bad)])
            raise ValueError(
                f"point {idx}: |position| inconsistent with range "
                f"(|p|={norms[bad][0]:.9f}, range={self.range_m[ret][bad][0]:.9f})"
            )
