"""Alternating trajectory / object-model estimation for one component.

A trajectory is a chain of pose knots (translation plus yaw about +z),
piecewise-linearly interpolated so every point is explained at its own
timestamp.  Revolution-aligned "frames" are never formed: a moving surface
sampled by different sensors tens of milliseconds apart would smear.  The
alternation repeats two steps until the knots stop moving:

  pose step   -- Gauss-Newton over all knots jointly, pulling each point onto
                 its nearest model point, with a second-difference smoothness
                 prior on knot translations;
  model step  -- pull every point into the object frame with the current
                 poses and voxel-average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .config import OptimizationConfig
from .extraction import TrajectoryComponent
from .spatial import PointIndex, voxel_downsample

SMOOTHNESS_LAMBDA = 1.0
HUBER_DELTA_M = 0.1
MODEL_VOXEL_M = 0.05
OUTPUT_RATE_HZ = 100.0
SPEED_GATE_MPS = 0.5
_GN_MAX_ITER = 4
_GN_STEP_TOL = 1e-4
_SPIN = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _yaw_matrices(yaw: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros((len(yaw), 3, 3))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s
    out[:, 1, 0] = s
    out[:, 1, 1] = c
    out[:, 2, 2] = 1.0
    return out


@dataclass
class TrajectoryKnots:
    """Pose chain: translation and yaw per knot, linear in between, clamped outside."""

    t: np.ndarray
    translation: np.ndarray
    yaw: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.translation = np.asarray(self.translation, float).reshape(-1, 3)
        self.yaw = np.asarray(self.yaw, float)
        if len(self.t) != len(self.translation) or len(self.t) != len(self.yaw):
            raise ValueError("knot arrays disagree in length")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("knot timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def pose_at(self, t_query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated (translation, yaw) at each query time."""
        t_query = np.asarray(t_query, float)
        if len(self) == 1:
            n = len(t_query)
            return np.broadcast_to(self.translation[0], (n, 3)).copy(), \
                np.full(n, self.yaw[0])
        trans = np.stack([np.interp(t_query, self.t, self.translation[:, ax])
                          for ax in range(3)], axis=1)
        yaw = np.interp(t_query, self.t, np.unwrap(self.yaw))
        return trans, yaw

    def push(self, local: np.ndarray, t_query: np.ndarray) -> np.ndarray:
        """Object frame -> global frame at each point's own timestamp."""
        trans, yaw = self.pose_at(t_query)
        r = _yaw_matrices(yaw)
        return np.einsum("nij,nj->ni", r, local) + trans

    def pull(self, points: np.ndarray, t_query: np.ndarray) -> np.ndarray:
        """Global frame -> object frame at each point's own timestamp."""
        trans, yaw = self.pose_at(t_query)
        r = _yaw_matrices(-yaw)
        return np.einsum("nij,nj->ni", r, points - trans)


@dataclass
class ObjectModel:
    """The object's own surface points, in its local frame."""

    local_points: np.ndarray
    centroid: np.ndarray = field(init=False)
    index: PointIndex = field(init=False)

    def __post_init__(self):
        self.local_points = np.asarray(self.local_points, float).reshape(-1, 3)
        if len(self.local_points) == 0:
            raise ValueError("object model needs at least one point")
        self.centroid = self.local_points.mean(axis=0)
        self.index = PointIndex(self.local_points)

    def __len__(self):
        return len(self.local_points)


def optimize_model_step(t: np.ndarray, position: np.ndarray,
                        knots: TrajectoryKnots,
                        voxel_m: float = MODEL_VOXEL_M) -> ObjectModel:
    """Rebuild the model: pull all points local, voxel-average. Idempotent for fixed knots."""
    return ObjectModel(voxel_downsample(knots.pull(position, t), voxel_m))


def _huber_cost(dist: np.ndarray) -> float:
    d = HUBER_DELTA_M
    return float(np.where(dist <= d, 0.5 * dist ** 2, d * (dist - 0.5 * d)).sum())


def _objective(t, position, model: ObjectModel, knots: TrajectoryKnots) -> float:
    local = knots.pull(position, t)
    dist, _ = model.index.nearest(local)
    cost = _huber_cost(dist)
    if len(knots) > 2:
        sd = np.diff(knots.translation, n=2, axis=0)
        cost += SMOOTHNESS_LAMBDA * float((sd ** 2).sum())
    return cost


def _smoothness_cost(translation: np.ndarray) -> float:
    if len(translation) <= 2:
        return 0.0
    sd = np.diff(translation, n=2, axis=0)
    return SMOOTHNESS_LAMBDA * float((sd ** 2).sum())


def optimize_pose_step(t: np.ndarray, position: np.ndarray, model: ObjectModel,
                       knots: TrajectoryKnots,
                       params: OptimizationConfig | None = None,
                       ) -> tuple[TrajectoryKnots, set[int]]:
    """One damped Gauss-Newton pass over all knots; returns new knots and frozen knot ids.

    The normal equations are symmetric banded (a point couples two adjacent
    knots, the smoothness prior three), so the solve is linear in knot count.
    Parameters with no support (zero curvature) are frozen in place.
    """
    params = params or OptimizationConfig()
    order = np.argsort(t, kind="stable")
    t_s = np.asarray(t, float)[order]
    p_s = np.asarray(position, float)[order]

    knot_t = knots.t
    kcount = len(knots)
    n_par = 4 * kcount
    half_bw = min(11, n_par - 1)
    x = np.c_[knots.translation, np.unwrap(knots.yaw)].ravel()

    if kcount == 1:
        interval = np.zeros(len(t_s), np.int64)
        alpha = np.zeros(len(t_s))
    else:
        interval = np.clip(np.searchsorted(knot_t, t_s, side="right") - 1,
                           0, kcount - 2)
        alpha = np.clip((t_s - knot_t[interval])
                        / (knot_t[interval + 1] - knot_t[interval]), 0.0, 1.0)
    starts = np.flatnonzero(np.r_[True, interval[1:] != interval[:-1]])
    present = interval[starts]

    def _pulled(params: np.ndarray):
        trans = params.reshape(kcount, 4)[:, :3]
        yawv = params.reshape(kcount, 4)[:, 3]
        if kcount == 1:
            theta = np.full(len(t_s), yawv[0])
            tr = np.broadcast_to(trans[0], (len(t_s), 3))
        else:
            theta = (1 - alpha) * yawv[interval] + alpha * yawv[interval + 1]
            tr = (1 - alpha)[:, None] * trans[interval] \
                + alpha[:, None] * trans[interval + 1]
        rot = _yaw_matrices(-theta)
        return rot, np.einsum("nij,nj->ni", rot, p_s - tr)

    frozen: set[int] = set()
    rot, local = _pulled(x)
    dist, nn = model.index.nearest(local)
    for _ in range(_GN_MAX_ITER):
        trans = x.reshape(kcount, 4)[:, :3]
        m = model.local_points[nn]
        resid = local - m
        w = np.where(dist <= HUBER_DELTA_M, 1.0,
                     HUBER_DELTA_M / np.maximum(dist, 1e-300))

        spun = local @ _SPIN.T  # d(local)/d(theta) = -spun, sign folded below
        cols = 8 if kcount > 1 else 4
        jac = np.zeros((len(t_s), 3, cols))
        jac[:, :, 0:3] = -(1 - alpha)[:, None, None] * rot
        jac[:, :, 3] = -(1 - alpha)[:, None] * spun
        if kcount > 1:
            jac[:, :, 4:7] = -alpha[:, None, None] * rot
            jac[:, :, 7] = -alpha[:, None] * spun

        blocks = np.einsum("n,nic,nid->ncd", w, jac, jac)
        gvec = np.einsum("n,nic,ni->nc", w, jac, resid)
        hb = np.add.reduceat(blocks, starts, axis=0)
        gb = np.add.reduceat(gvec, starts, axis=0)

        band = np.zeros((half_bw + 1, n_par))
        grad = np.zeros(n_par)
        offs = 4 * present
        for r in range(cols):
            for c in range(r, cols):
                band[half_bw - (c - r), offs + c] += hb[:, r, c]
        for c in range(cols):
            np.add.at(grad, offs + c, gb[:, c])

        if kcount > 2:
            lam2 = 2.0 * SMOOTHNESS_LAMBDA
            sd = np.diff(trans, n=2, axis=0)
            ks = np.arange(1, kcount - 1)
            coef = (1.0, -2.0, 1.0)
            for a in range(3):
                for b in range(a, 3):
                    pa = 4 * (ks - 1 + a)
                    pb = 4 * (ks - 1 + b)
                    for ax in range(3):
                        band[half_bw - (pb[0] - pa[0]), pb + ax] += lam2 * coef[a] * coef[b]
            for a in range(3):
                for ax in range(3):
                    np.add.at(grad, 4 * (ks - 1 + a) + ax, lam2 * coef[a] * sd[:, ax])

        diag = band[half_bw].copy()
        dead = np.flatnonzero(diag < 1e-12)
        for d in dead:
            lo = max(0, d - half_bw)
            band[half_bw - (d - np.arange(lo, d + 1)), d] = 0.0
            hi = min(n_par - 1, d + half_bw)
            js = np.arange(d, hi + 1)
            band[half_bw - (js - d), js] = 0.0
            band[half_bw, d] = 1.0
            grad[d] = 0.0
            frozen.add(int(d) // 4)

        cost = _huber_cost(dist) + _smoothness_cost(trans)
        mu = 1e-6
        accepted = False
        for _ in range(8):
            damped = band.copy()
            damped[half_bw] += mu * (diag + 1e-8)
            try:
                step = solveh_banded(damped, -grad, lower=False)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            x_try = x + step
            # trial steps are judged on re-associated (true) cost; a step
            # that only looks good against stale matches is rejected
            rot_t, local_t = _pulled(x_try)
            dist_t, nn_t = model.index.nearest(local_t)
            cost_t = _huber_cost(dist_t) \
                + _smoothness_cost(x_try.reshape(kcount, 4)[:, :3])
            if cost_t <= cost:
                x = x_try
                rot, local, dist, nn = rot_t, local_t, dist_t, nn_t
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            break
        if np.abs(step.reshape(kcount, 4)[:, :3]).max() < _GN_STEP_TOL:
            break

    out = x.reshape(kcount, 4)
    return TrajectoryKnots(knot_t, out[:, :3], out[:, 3]), frozen


def initialize(component: TrajectoryComponent,
               params: OptimizationConfig | None = None,
               ) -> tuple[TrajectoryKnots, ObjectModel]:
    """Seed knots from windowed centroids; yaw from centroid velocity heading.

    A component shorter than the knot spacing degenerates to a single static
    knot at its centroid.
    """
    params = params or OptimizationConfig()
    t = component.t
    pos = component.position
    t0, t1 = float(t.min()), float(t.max())
    spacing = params.knot_spacing_s

    if t1 - t0 < spacing:
        knots = TrajectoryKnots(np.array([(t0 + t1) / 2]),
                                pos.mean(axis=0)[None, :], np.zeros(1))
        return knots, optimize_model_step(t, pos, knots)

    n_seg = int(np.ceil((t1 - t0) / spacing - 1e-9))
    knot_t = t0 + spacing * np.arange(n_seg + 1)

    trans = np.full((len(knot_t), 3), np.nan)
    for k, tk in enumerate(knot_t):
        sel = np.abs(t - tk) <= spacing
        if sel.any():
            trans[k] = pos[sel].mean(axis=0)
    good = np.flatnonzero(np.isfinite(trans[:, 0]))
    for ax in range(3):
        trans[:, ax] = np.interp(knot_t, knot_t[good], trans[good, ax])

    # Velocity from a local least-squares slope over ±3 knots rather than a
    # two-point difference: centroid jitter differentiated at the knot pitch
    # would alias into degree-level heading noise, which smears the long side
    # of the model across multiple voxel layers and the alternation then
    # locks that thickness in.  Clamped end windows are asymmetric, where a
    # straight-line fit would report the chord heading; a quadratic keeps the
    # slope unbiased at the knot itself there.
    half = min(3, len(knot_t) - 1)
    vel = np.empty_like(trans)
    for k in range(len(knot_t)):
        lo, hi = max(0, k - half), min(len(knot_t), k + half + 1)
        dt = knot_t[lo:hi] - knot_t[k]
        deg = 1 if (k - lo == hi - 1 - k or hi - lo < 3) else 2
        vel[k] = np.polyfit(dt, trans[lo:hi], deg)[-2]
    speed = np.linalg.norm(vel[:, :2], axis=1)
    yaw = np.where(speed >= SPEED_GATE_MPS, np.arctan2(vel[:, 1], vel[:, 0]), 0.0)
    knots = TrajectoryKnots(knot_t, trans, np.unwrap(yaw))
    return knots, optimize_model_step(t, pos, knots)


@dataclass
class Trajectory:
    """Optimized track: centroid samples at a fixed rate plus the object model."""

    track_id: int
    t: np.ndarray
    position: np.ndarray
    yaw: np.ndarray
    knots: TrajectoryKnots
    model: ObjectModel
    residual_rms_m: float
    num_points: int
    converged: bool
    diverged: bool
    frozen_knots: tuple[int, ...]
    alternations: int


def optimize_trajectory(component: TrajectoryComponent,
                        params: OptimizationConfig | None = None,
                        track_id: int | None = None) -> Trajectory:
    """Alternate pose and model steps until knots settle, then sample the centroid path.

    The combined objective must not increase; two consecutive increases abort
    the alternation and the best iterate seen is returned with ``diverged`` set.
    """
    params = params or OptimizationConfig()
    t, pos = component.t, component.position
    knots, model = initialize(component, params)
    obj = _objective(t, pos, model, knots)
    best = (obj, knots, model)
    prev = obj
    increases = 0
    converged = diverged = False
    frozen: set[int] = set()
    alternations = 0

    for _ in range(params.max_alternations):
        new_knots, frz = optimize_pose_step(t, pos, model, knots, params)
        new_model = optimize_model_step(t, pos, new_knots)
        new_obj = _objective(t, pos, new_model, new_knots)
        delta = float(np.abs(new_knots.translation - knots.translation).max())
        knots, model = new_knots, new_model
        frozen |= frz
        alternations += 1
        if new_obj < best[0]:
            best = (new_obj, knots, model)
        if new_obj > prev * (1 + 1e-9) + 1e-12:
            increases += 1
            if increases >= 2:
                diverged = True
                _, knots, model = best
                break
        else:
            increases = 0
        prev = new_obj
        if delta < params.convergence_m:
            converged = True
            break

    t0, t1 = float(t.min()), float(t.max())
    n_samples = int(np.floor((t1 - t0) * OUTPUT_RATE_HZ + 1e-9)) + 1
    sample_t = t0 + np.arange(n_samples) / OUTPUT_RATE_HZ
    centre = knots.push(np.broadcast_to(model.centroid, (n_samples, 3)), sample_t)
    _, sample_yaw = knots.pose_at(sample_t)
    sample_yaw = np.arctan2(np.sin(sample_yaw), np.cos(sample_yaw))

    dist, _ = model.index.nearest(knots.pull(pos, t))
    rms = float(np.sqrt(np.mean(dist ** 2)))

    return Trajectory(
        track_id=component.component_id if track_id is None else track_id,
        t=sample_t,
        position=centre,
        yaw=sample_yaw,
        knots=knots,
        model=model,
        residual_rms_m=rms,
        num_points=len(component),
        converged=converged,
        diverged=diverged,
        frozen_knots=tuple(sorted(frozen)),
        alternations=alternations,
    )
