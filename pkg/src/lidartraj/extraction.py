"""Grouping dynamic points into per-object components.

Points live in a virtual 4D grid (three spatial axes at ``grid_cell_xyz_m``,
time at ``grid_cell_t_s``); only occupied cells are materialised, as sorted
packed keys.  Flood fill over the 80-neighbourhood (all index deltas in
{-1, 0, 1}, not all zero) yields one component per moving object, because a
surface sampled by different sensors 50-100 ms apart still lands in adjacent
time cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig

# Packed key layout: four 16-bit lanes, each storing index + _BIAS.  One cell
# of headroom per lane keeps +-1 neighbour arithmetic inside the lane.
_BIAS = 1 << 15
_LANE_MAX = (1 << 16) - 1
_SHIFTS = (48, 32, 16, 0)


def grid_keys(position: np.ndarray, t: np.ndarray, cell_xyz_m: float,
              cell_t_s: float) -> np.ndarray:
    """Integer 4D cell indices, floor semantics (so -0.1 lands in cell -1)."""
    idx = np.empty((len(t), 4), np.int64)
    idx[:, :3] = np.floor(np.asarray(position, float) / cell_xyz_m)
    idx[:, 3] = np.floor(np.asarray(t, float) / cell_t_s)
    return idx


def pack_grid_keys(idx: np.ndarray) -> np.ndarray:
    """Fold 4D indices into one int64 preserving lexicographic order."""
    biased = idx + _BIAS
    if biased.min() < 1 or biased.max() > _LANE_MAX - 1:
        raise ValueError("grid index out of the packable range (+-32766 cells)")
    packed = np.zeros(len(idx), np.int64)
    for lane, shift in enumerate(_SHIFTS):
        packed |= biased[:, lane] << shift
    return packed


# All 80 neighbour deltas, pre-packed so neighbour keys are plain additions.
_NEIGHBOUR_DELTAS = np.array(
    [
        (dx << 48) + (dy << 32) + (dz << 16) + dt
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        for dt in (-1, 0, 1)
        if (dx, dy, dz, dt) != (0, 0, 0, 0)
    ],
    np.int64,
)


def label_cells(cell_keys: np.ndarray) -> np.ndarray:
    """Connected-component label per occupied cell (keys must be sorted unique).

    Iterative frontier expansion; labels are provisional (first-seed order)
    and get renumbered by the caller.
    """
    n = len(cell_keys)
    labels = np.full(n, -1, np.int64)
    current = 0
    for seed in range(n):
        if labels[seed] != -1:
            continue
        labels[seed] = current
        frontier = np.array([seed], np.int64)
        while frontier.size:
            cand_keys = (cell_keys[frontier][:, None] + _NEIGHBOUR_DELTAS).ravel()
            inside = np.searchsorted(cell_keys, cand_keys)
            ok = inside < n
            inside = inside[ok]
            match = inside[cell_keys[inside] == cand_keys[ok]]
            fresh = np.unique(match[labels[match] == -1])
            labels[fresh] = current
            frontier = fresh
        current += 1
    return labels


@dataclass
class TrajectoryComponent:
    """One flood-fill component: the points of one moving object."""

    component_id: int
    t: np.ndarray
    position: np.ndarray
    lidar: np.ndarray
    indices: np.ndarray
    cell_count: int
    color: np.ndarray | None = None
    color_valid: np.ndarray | None = None

    def __len__(self):
        return len(self.t)

    @property
    def time_span(self) -> tuple[float, float]:
        return float(self.t.min()), float(self.t.max())

    @property
    def duration_s(self) -> float:
        lo, hi = self.time_span
        return hi - lo


def extract_components(position: np.ndarray, t: np.ndarray, lidar: np.ndarray,
                       config: PipelineConfig,
                       color: np.ndarray | None = None,
                       color_valid: np.ndarray | None = None,
                       ) -> list[TrajectoryComponent]:
    """Partition dynamic points into components; ids follow earliest timestamps."""
    position = np.asarray(position, float).reshape(-1, 3)
    t = np.asarray(t, float)
    lidar = np.asarray(lidar)
    if len(t) == 0:
        return []
    packed = pack_grid_keys(grid_keys(position, t, config.grid_cell_xyz_m,
                                      config.grid_cell_t_s))
    cell_keys, point_cell = np.unique(packed, return_inverse=True)
    cell_labels = label_cells(cell_keys)

    # Renumber by earliest member timestamp; ties keep first-seed order.
    n_comp = int(cell_labels.max()) + 1
    point_label = cell_labels[point_cell]
    earliest = np.full(n_comp, np.inf)
    np.minimum.at(earliest, point_label, t)
    order = np.argsort(earliest, kind="stable")
    rank = np.empty(n_comp, np.int64)
    rank[order] = np.arange(n_comp)
    point_label = rank[point_label]
    cell_labels = rank[cell_labels]
    cells_per = np.bincount(cell_labels, minlength=n_comp)

    components = []
    sorter = np.argsort(point_label, kind="stable")
    bounds = np.searchsorted(point_label[sorter], np.arange(n_comp + 1))
    for cid in range(n_comp):
        sel = sorter[bounds[cid]:bounds[cid + 1]]
        sel = np.sort(sel)  # preserve input stream order inside the component
        components.append(TrajectoryComponent(
            component_id=cid,
            t=t[sel],
            position=position[sel],
            lidar=lidar[sel],
            indices=sel,
            cell_count=int(cells_per[cid]),
            color=None if color is None else color[sel],
            color_valid=None if color_valid is None else color_valid[sel],
        ))
    return components


def filter_components(components: list[TrajectoryComponent],
                      config: PipelineConfig,
                      ) -> tuple[list[TrajectoryComponent], list[TrajectoryComponent]]:
    """Split into (kept, discarded): kept needs enough points AND enough duration."""
    kept, discarded = [], []
    for comp in components:
        if (len(comp) >= config.min_component_points
                and comp.duration_s >= config.min_component_duration_s):
            kept.append(comp)
        else:
            discarded.append(comp)
    return kept, discarded


def _save_components_npz(path, components: list[TrajectoryComponent]) -> None:
    sizes = np.array([len(c) for c in components], np.int64)
    cat = lambda parts, dt: (np.concatenate(parts) if parts
                             else np.zeros(0, dt)).astype(dt, copy=False)
    arrays = {
        "component_id": np.array([c.component_id for c in components], np.int64),
        "cell_count": np.array([c.cell_count for c in components], np.int64),
        "sizes": sizes,
        "t": cat([c.t for c in components], np.float64),
        "position": (np.vstack([c.position for c in components])
                     if components else np.zeros((0, 3))),
        "lidar": cat([c.lidar for c in components], np.int64),
        "indices": cat([c.indices for c in components], np.int64),
    }
    if components and all(c.color is not None for c in components):
        arrays["color"] = np.vstack([c.color for c in components])
        arrays["color_valid"] = cat([c.color_valid for c in components], bool)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_components_npz(path) -> list[TrajectoryComponent]:
    with np.load(path) as data:
        bounds = np.concatenate([[0], np.cumsum(data["sizes"])])
        has_color = "color" in data.files
        return [TrajectoryComponent(
            component_id=int(data["component_id"][i]),
            t=data["t"][lo:hi],
            position=data["position"][lo:hi],
            lidar=data["lidar"][lo:hi],
            indices=data["indices"][lo:hi],
            cell_count=int(data["cell_count"][i]),
            color=data["color"][lo:hi] if has_color else None,
            color_valid=data["color_valid"][lo:hi] if has_color else None,
        ) for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]))]


def save_components(path, components: list[TrajectoryComponent]) -> None:
    """One jsonl line per component (full-precision floats), or columnar npz."""
    if Path(path).suffix == ".npz":
        _save_components_npz(path, components)
        return
    with open(path, "w") as fh:
        for comp in components:
            record = {
                "component_id": comp.component_id,
                "cell_count": comp.cell_count,
                "t": [float(v) for v in comp.t],
                "position": [[float(c) for c in row] for row in comp.position],
                "lidar": [int(v) for v in comp.lidar],
                "indices": [int(v) for v in comp.indices],
            }
            if comp.color is not None:
                record["color"] = [[float(c) for c in row] for row in comp.color]
                record["color_valid"] = [bool(v) for v in comp.color_valid]
            fh.write(json.dumps(record) + "\n")


def load_components(path) -> list[TrajectoryComponent]:
    if Path(path).suffix == ".npz":
        return _load_components_npz(path)
    components = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            components.append(TrajectoryComponent(
                component_id=int(rec["component_id"]),
                t=np.asarray(rec["t"], float),
                position=np.asarray(rec["position"], float).reshape(-1, 3),
                lidar=np.asarray(rec["lidar"], np.int64),
                indices=np.asarray(rec["indices"], np.int64),
                cell_count=int(rec["cell_count"]),
                color=None if "color" not in rec else np.asarray(rec["color"], float),
                color_valid=None if "color_valid" not in rec
                else np.asarray(rec["color_valid"], bool),
            ))
    return components
