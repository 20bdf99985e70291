"""Background/foreground separation by per-ray depth statistics.

Every ray (lidar, row, col) revisits the same direction once per revolution,
so over a recording its depth samples pile up into modes wherever static
surfaces sit.  Modes are basins of the binned depth histogram carrying at
least ``min_fraction`` of the ray's emissions (no-returns count towards the
denominator); their depths, pushed back along the ray, form the static
geometry that phase A (per LiDAR) and phase B (merged, cross-LiDAR) classify
against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import Frame, PointCloud, PointColumns, ScanPattern, require_same_frame
from .spatial import PointIndex


@dataclass
class RaySampleSet:
    """Depth samples collected by one ray across revolutions."""

    depths: np.ndarray
    no_return_count: int = 0

    def __post_init__(self) -> None:
        self.depths = np.asarray(self.depths, float).reshape(-1)
        if np.any(~np.isfinite(self.depths)):
            raise ValueError("depths must be finite; count no-returns separately")

    @property
    def total_count(self) -> int:
        return len(self.depths) + self.no_return_count


def accumulate_ray_samples(pc: PointColumns) -> dict[tuple[int, int, int], RaySampleSet]:
    """Group a stream by ray identity (lidar, row, col)."""
    key = (pc.lidar.astype(np.int64) << 32) | (pc.row.astype(np.int64) << 16) \
        | pc.col.astype(np.int64)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    ranges = pc.range_m[order]
    boundaries = np.flatnonzero(np.diff(sorted_key)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(sorted_key)]])
    out: dict[tuple[int, int, int], RaySampleSet] = {}
    for s, e in zip(starts, ends):
        k = int(sorted_key[s])
        chunk = ranges[s:e]
        finite = chunk[np.isfinite(chunk)]
        out[(k >> 32, (k >> 16) & 0xFFFF, k & 0xFFFF)] = RaySampleSet(
            finite, int(len(chunk) - len(finite))
        )
    return out


def _histogram_basins(counts: np.ndarray):
    """Assign every bin to the peak reached by hill climbing.

    Runs of equal counts move as one unit towards their higher flank (ties go
    left); runs higher than both flanks are peaks.  Returns (labels, peaks):
    per-bin peak-run index and the list of peak run slices.
    """
    edges = np.flatnonzero(np.diff(counts)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(counts)]])
    n_runs = len(starts)
    run_count = counts[starts]

    target = np.arange(n_runs)
    for r in range(n_runs):
        left = run_count[r - 1] if r > 0 else -1.0
        right = run_count[r + 1] if r + 1 < n_runs else -1.0
        if left <= run_count[r] and right <= run_count[r]:
            continue  # peak
        if left >= right:
            target[r] = r - 1
        else:
            target[r] = r + 1
    # path-compress to fixpoints
    while True:
        nxt = target[target]
        if np.array_equal(nxt, target):
            break
        target = nxt

    labels = np.repeat(target, ends - starts)
    return labels, starts, ends, target


def detect_modes(samples: RaySampleSet, min_fraction: float,
                 bin_width_m: float = 0.05) -> np.ndarray:
    """Depth modes of one ray, ascending.

    A mode is a histogram basin whose sample mass reaches ``min_fraction`` of
    the ray's total emission count (returns plus no-returns); its depth is the
    mean of the samples in the basin.  Modes closer than twice the bin width
    are merged.
    """
    total = samples.total_count
    if total == 0 or len(samples.depths) == 0:
        return np.empty(0)
    bins = np.floor(samples.depths / bin_width_m).astype(np.int64)
    lo, hi = bins.min(), bins.max()
    counts = np.bincount(bins - lo, minlength=hi - lo + 1).astype(float)

    labels, starts, ends, target = _histogram_basins(counts)
    basin_of_sample = labels[bins - lo]

    modes = []
    for peak in np.flatnonzero(target == np.arange(len(target))):
        sel = basin_of_sample == peak
        mass = int(np.count_nonzero(sel))
        # >= semantics at the boundary; guard against float noise in the product
        if mass > 0 and mass >= min_fraction * total - 1e-9:
            modes.append((float(samples.depths[sel].mean()), mass))
    modes.sort()

    # Enforce minimum separation: merge the closest offending pair, repeat.
    while len(modes) > 1:
        gaps = [modes[i + 1][0] - modes[i][0] for i in range(len(modes) - 1)]
        i = int(np.argmin(gaps))
        if gaps[i] >= 2.0 * bin_width_m:
            break
        (d0, m0), (d1, m1) = modes[i], modes[i + 1]
        modes[i] = ((d0 * m0 + d1 * m1) / (m0 + m1), m0 + m1)
        del modes[i + 1]
    return np.array([d for d, _ in modes])


@dataclass
class StaticGeometry:
    """Static surface points recovered from ray modes, with an exact spatial index."""

    points: np.ndarray
    source_lidar: np.ndarray
    frame: Frame
    index: PointIndex = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, float).reshape(-1, 3)
        self.source_lidar = np.asarray(self.source_lidar, np.uint16).reshape(-1)
        if len(self.points) != len(self.source_lidar):
            raise ValueError("points / source_lidar length mismatch")
        if len(self.points) == 0:
            raise ValueError("static geometry is empty")
        self.index = PointIndex(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            xs, ys, zs = (self.points[:, i].tolist() for i in range(3))
            for i, lid in enumerate(self.source_lidar.tolist()):
                fh.write(f'{{"x":{xs[i]!r},"y":{ys[i]!r},"z":{zs[i]!r},"lidar":{lid}}}\n')

    @classmethod
    def load(cls, path: str | Path, frame: Frame) -> "StaticGeometry":
        import json

        pts, lids = [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    pts.append((obj["x"], obj["y"], obj["z"]))
                    lids.append(obj["lidar"])
        return cls(np.asarray(pts, float), np.asarray(lids, np.uint16), frame)


def build_static_geometry(
    samples: dict[tuple[int, int, int], RaySampleSet],
    pattern: ScanPattern,
    lidar_id: int,
    min_fraction: float,
    bin_width_m: float = 0.05,
) -> StaticGeometry:
    """Static geometry of one LiDAR, in its local frame."""
    pts, lids = [], []
    for (lid, row, col), ray in sorted(samples.items()):
        if lid != lidar_id:
            continue
        depths = detect_modes(ray, min_fraction, bin_width_m)
        if len(depths) == 0:
            continue
        direction = pattern.ray_directions(row, col)
        pts.append(depths[:, None] * direction[None, :])
        lids.append(np.full(len(depths), lidar_id, np.uint16))
    if not pts:
        raise ValueError(f"lidar {lidar_id}: no ray produced a static mode")
    return StaticGeometry(np.concatenate(pts), np.concatenate(lids), Frame.lidar(lidar_id))


def merge_static_geometries(parts: list[StaticGeometry],
                            transforms: dict[int, "object"]) -> StaticGeometry:
    """Merge per-LiDAR static geometries into the global frame."""
    pts, lids = [], []
    for geom in parts:
        if geom.frame.kind != "lidar":
            raise ValueError("expected lidar-frame geometry")
        transform = transforms[geom.frame.lidar_id]
        pts.append(transform.apply(geom.points))
        lids.append(geom.source_lidar)
    return StaticGeometry(np.concatenate(pts), np.concatenate(lids), Frame.world())


def classify_static(cloud: PointCloud, geometry: StaticGeometry,
                    threshold_m: float) -> np.ndarray:
    """True where a point lies within ``threshold_m`` of any static-geometry point.

    Raises FrameMismatchError when the cloud and geometry frames differ.
    """
    require_same_frame(cloud.frame, geometry.frame, context="classify_static")
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    d, _ = geometry.index.nearest(cloud.points, max_distance=threshold_m * (1 + 1e-12))
    return d <= threshold_m


def classify_phase_a(cloud: PointCloud, geometry: StaticGeometry,
                     threshold_m: float) -> np.ndarray:
    """Per-LiDAR separation: static iff near the LiDAR's own static geometry."""
    if cloud.frame.kind != "lidar" or geometry.frame.kind != "lidar":
        raise ValueError("phase A operates in a LiDAR's local frame")
    return classify_static(cloud, geometry, threshold_m)


def classify_phase_b(cloud: PointCloud, merged: StaticGeometry,
                     threshold_m: float) -> np.ndarray:
    """Cross-LiDAR rescue: static iff near the merged global static geometry."""
    if cloud.frame.kind != "global" or merged.frame.kind != "global":
        raise ValueError("phase B operates in the global frame")
    return classify_static(cloud, merged, threshold_m)


def _inside_facets(points: np.ndarray, eq: np.ndarray, inflate: float) -> np.ndarray:
    # chunked: points x facets would not fit in memory for full recordings
    out = np.empty(len(points), dtype=bool)
    step = max(1, 50_000_000 // max(len(eq), 1))
    for s in range(0, len(points), step):
        chunk = points[s:s + step]
        out[s:s + step] = np.all(chunk @ eq[:, :-1].T + eq[:, -1] <= inflate, axis=1)
    return out


def _hull_mask(points: np.ndarray, hull_points: np.ndarray, inflate: float) -> np.ndarray:
    """True where a point is inside the convex hull inflated by ``inflate`` metres."""
    try:
        hull = ConvexHull(hull_points)
        # hull.equations rows: unit normal + offset, a.x + b <= 0 inside
        return _inside_facets(points, hull.equations, inflate)
    except QhullError:
        # Degenerate (e.g. coplanar ground): fall back to the xy hull + z slab.
        hull = ConvexHull(hull_points[:, :2])
        in_xy = _inside_facets(points[:, :2], hull.equations, inflate)
        zmin, zmax = hull_points[:, 2].min() - inflate, hull_points[:, 2].max() + inflate
        return in_xy & (points[:, 2] >= zmin) & (points[:, 2] <= zmax)


def trim_scene_boundary(points: np.ndarray, merged: StaticGeometry,
                        threshold_m: float, k: int = 8) -> np.ndarray:
    """Keep mask for dynamic candidates: the scene-boundary noise rule.

    Two cuts against the measured static scene, in the spirit of the phase
    A/B distance tests: points outside the static geometry's convex hull
    (inflated by the static distance threshold) go, and so do points
    implausibly far off the measured surfaces, with "implausibly" judged
    relative to the cloud itself: mean distance to the k nearest static
    points above 3x the median such distance.  Moving bodies stay well
    under that bar (they travel on and between measured surfaces), while
    fringe clutter beyond the sensed area does not.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    keep = _hull_mask(points, merged.points, threshold_m)
    if len(merged) > 0:
        d, _ = merged.index.knn(points, min(k, len(merged)))
        mean_d = d.mean(axis=1)
        keep &= mean_d <= 3.0 * np.median(mean_d)
    return keep
