"""Trajectory comparison: track matching, accuracy metrics, naive baselines.

Estimated tracks are scored against reference tracks by mean distance over
their temporal overlap, with the reference linearly interpolated to the
estimated timestamps.  Matching is an optimal one-to-one assignment under a
distance gate; the report carries RMSE per match plus detection precision
and recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .streams import Track

GATE_DEFAULT_M = 2.0
EXHAUSTIVE_LIMIT = 10
_INVALID_COST = 1e9


@dataclass
class TrajectoryMatch:
    """One estimated-to-reference pairing with its per-sample errors."""

    estimated_id: str
    reference_id: str
    t: np.ndarray
    errors: np.ndarray
    overlap_s: float
    mean_distance_m: float


@dataclass
class MatchMetrics:
    estimated_id: str
    reference_id: str
    rmse_m: float
    max_error_m: float
    overlap_fraction: float
    num_samples: int


@dataclass
class EvaluationReport:
    matches: list[MatchMetrics]
    num_estimated: int
    num_reference: int
    unmatched_estimated: list[str]
    unmatched_reference: list[str]
    precision: float
    recall: float
    mean_rmse_m: float

    def to_dict(self) -> dict:
        return {
            "matches": [
                {
                    "estimated_id": m.estimated_id,
                    "reference_id": m.reference_id,
                    "rmse_m": round(m.rmse_m, 6),
                    "max_error_m": round(m.max_error_m, 6),
                    "overlap_fraction": round(m.overlap_fraction, 6),
                    "num_samples": m.num_samples,
                }
                for m in self.matches
            ],
            "num_estimated": self.num_estimated,
            "num_reference": self.num_reference,
            "unmatched_estimated": self.unmatched_estimated,
            "unmatched_reference": self.unmatched_reference,
            "precision": self.precision,
            "recall": self.recall,
            "mean_rmse_m": None if np.isnan(self.mean_rmse_m) else round(self.mean_rmse_m, 6),
        }


def interpolated_errors(estimated: Track, reference: Track):
    """Distances at the estimated samples inside the overlap window.

    The reference is interpolated linearly per axis.  Returns (times, errors)
    or None when the two tracks never overlap in time.
    """
    t0 = max(estimated.t[0], reference.t[0])
    t1 = min(estimated.t[-1], reference.t[-1])
    if t1 < t0:
        return None
    sel = (estimated.t >= t0) & (estimated.t <= t1)
    if not np.any(sel):
        return None
    te = estimated.t[sel]
    ref = np.column_stack([
        np.interp(te, reference.t, reference.positions[:, i]) for i in range(3)
    ])
    err = np.linalg.norm(estimated.positions[sel] - ref, axis=1)
    return te, err


def match_trajectories(estimated: list[Track], reference: list[Track],
                       gate_m: float = GATE_DEFAULT_M) -> list[TrajectoryMatch]:
    """One-to-one pairing minimizing total mean distance, gated at ``gate_m``.

    Up to EXHAUSTIVE_LIMIT tracks per side the assignment is globally optimal
    (identical to the brute-force minimum over permutations); above that,
    pairs are taken greedily by ascending mean distance.
    """
    est, ref = list(estimated), list(reference)
    if not est or not ref:
        return []
    pairs: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    cost = np.full((len(est), len(ref)), _INVALID_COST)
    for i, e in enumerate(est):
        for j, r in enumerate(ref):
            res = interpolated_errors(e, r)
            if res is None:
                continue
            te, err = res
            mean = float(err.mean())
            if mean > gate_m:
                continue
            pairs[(i, j)] = (te, err)
            cost[i, j] = mean

    if len(est) <= EXHAUSTIVE_LIMIT and len(ref) <= EXHAUSTIVE_LIMIT:
        rows, cols = linear_sum_assignment(cost)
        chosen = [(int(i), int(j)) for i, j in zip(rows, cols) if (i, j) in pairs]
    else:
        order = sorted(pairs, key=lambda ij: (cost[ij], ij))
        used_i, used_j = set(), set()
        chosen = []
        for i, j in order:
            if i in used_i or j in used_j:
                continue
            chosen.append((i, j))
            used_i.add(i)
            used_j.add(j)

    matches = []
    for i, j in sorted(chosen):
        te, err = pairs[(i, j)]
        matches.append(TrajectoryMatch(
            estimated_id=est[i].track_id,
            reference_id=ref[j].track_id,
            t=te,
            errors=err,
            overlap_s=float(te[-1] - te[0]),
            mean_distance_m=float(err.mean()),
        ))
    return matches


def compute_report(matches: list[TrajectoryMatch], estimated: list[Track],
                   reference: list[Track]) -> EvaluationReport:
    """Per-match RMSE over the interpolated overlap plus detection counts."""
    est, ref = list(estimated), list(reference)
    spans = {tr.track_id: max(float(tr.t[-1] - tr.t[0]), 1e-12) for tr in est}
    metrics = []
    for m in matches:
        metrics.append(MatchMetrics(
            estimated_id=m.estimated_id,
            reference_id=m.reference_id,
            rmse_m=float(np.sqrt(np.mean(m.errors ** 2))),
            max_error_m=float(m.errors.max()),
            overlap_fraction=min(1.0, m.overlap_s / spans[m.estimated_id]),
            num_samples=len(m.t),
        ))
    matched_e = {m.estimated_id for m in matches}
    matched_r = {m.reference_id for m in matches}
    return EvaluationReport(
        matches=metrics,
        num_estimated=len(est),
        num_reference=len(ref),
        unmatched_estimated=sorted(tr.track_id for tr in est if tr.track_id not in matched_e),
        unmatched_reference=sorted(tr.track_id for tr in ref if tr.track_id not in matched_r),
        precision=len(matches) / len(est) if est else 1.0,
        recall=len(matches) / len(ref) if ref else 1.0,
        mean_rmse_m=float(np.mean([m.rmse_m for m in metrics])) if metrics else float("nan"),
    )


def save_report(report: EvaluationReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_error_series(matches: list[TrajectoryMatch], path: str | Path) -> None:
    """Per-sample error-vs-time table for plotting (csv)."""
    with open(path, "w", newline="") as fh:
        fh.write("estimated_id,reference_id,t,error_m\n")
        for m in matches:
            fh.writelines(
                f"{m.estimated_id},{m.reference_id},{m.t[i]:.6f},{m.errors[i]:.6f}\n"
                for i in range(len(m.t))
            )


def frame_centroid_track(t: np.ndarray, positions: np.ndarray, cell_t_s: float,
                         track_id: str = "baseline") -> Track:
    """Naive reconstruction: merge points into fixed time frames, one centroid each.

    This is the baseline the spline estimator is measured against; a body
    moving at speed v smears over v * cell_t_s within every frame, so the
    centroid lags and wobbles accordingly.
    """
    t = np.asarray(t, float).reshape(-1)
    positions = np.asarray(positions, float).reshape(-1, 3)
    if len(t) == 0:
        raise ValueError("no points to merge")
    if cell_t_s <= 0:
        raise ValueError("cell_t_s must be positive")
    frame = np.floor(t / cell_t_s).astype(np.int64)
    base = frame.min()
    frame -= base
    counts = np.bincount(frame)
    sums = np.column_stack([np.bincount(frame, weights=positions[:, i]) for i in range(3)])
    occupied = counts > 0
    centroids = sums[occupied] / counts[occupied][:, None]
    tc = (np.flatnonzero(occupied) + base + 0.5) * cell_t_s
    deltas = np.diff(centroids, axis=0)
    yaw_seg = np.arctan2(deltas[:, 1], deltas[:, 0]) if len(deltas) else np.zeros(0)
    yaw = np.concatenate([yaw_seg[:1], yaw_seg]) if len(yaw_seg) else np.zeros(1)
    return Track(track_id, tc, centroids, yaw,
                 num_points=int(counts.sum()), residual_rms=0.0)
