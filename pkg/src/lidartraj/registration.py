"""Pairwise rigid registration of accumulated static clouds.

The estimator is expectation-maximisation over Gaussian soft correspondences:
each source point owns a small mixture over its k nearest reference points
plus a uniform outlier component.  The kernel width anneals from
``gmm_sigma_m`` down to a floor; after EM settles, a point-to-plane
refinement polishes the result.  The plane metric matters: two LiDARs sample
the same surfaces on different ray grids, and nearest-point alignment locks
those grids onto each other (a bias of about half the sample spacing), while
distances along local surface planes are free to slide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import RegistrationConfig
from .core import PointCloud, RigidTransform, rotation_between
from .spatial import voxel_downsample

MIN_STATIC_POINTS = 100
OUTLIER_WEIGHT = 0.1
GMM_NEIGHBOURS = 8
SIGMA_FLOOR_M = 0.025
ANNEAL_EVERY = 10
_POLISH_MAX_ITER = 30


class UnderConstrainedError(ValueError):
    """Not enough static structure to register against."""


def accumulate_static(pc, static_labels: np.ndarray, window_s: float,
                      voxel_pitch_m: float, frame=None) -> PointCloud:
    """Static-labelled returns from the first ``window_s`` seconds, voxel-averaged.

    ``static_labels`` aligns with the stream's return points (see phase A).
    """
    returns = pc.returns_mask
    t = pc.t[returns]
    pts = pc.position[returns]
    if len(t) == 0:
        raise UnderConstrainedError("stream has no returns")
    sel = static_labels & (t <= t.min() + window_s)
    pts = pts[sel]
    if len(pts) < MIN_STATIC_POINTS:
        raise UnderConstrainedError(
            f"only {len(pts)} static points in the first {window_s:.1f} s "
            f"(need {MIN_STATIC_POINTS})"
        )
    from .core import Frame

    if frame is None:
        lids = np.unique(pc.lidar)
        if len(lids) != 1:
            raise ValueError("mixed-lidar stream needs an explicit frame")
        frame = Frame.lidar(int(lids[0]))
    return PointCloud(voxel_downsample(pts, voxel_pitch_m), frame)


@dataclass
class RegistrationResult:
    transform: RigidTransform
    converged: bool
    iterations: int
    em_objective: np.ndarray = field(default_factory=lambda: np.empty(0))
    em_sigma: np.ndarray = field(default_factory=lambda: np.empty(0))
    diagnostic: str = ""


def _weighted_rigid_align(source: np.ndarray, targets: np.ndarray,
                          weights: np.ndarray) -> RigidTransform:
    """Closed-form weighted least-squares rigid alignment (cross-covariance SVD)."""
    wsum = weights.sum()
    if wsum <= 0:
        raise UnderConstrainedError("all correspondence weights vanished")
    s_bar = (weights[:, None] * source).sum(axis=0) / wsum
    t_bar = (weights[:, None] * targets).sum(axis=0) / wsum
    h = (weights[:, None] * (source - s_bar)).T @ (targets - t_bar)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, t_bar - rot @ s_bar)


def _local_normals(points: np.ndarray, tree: cKDTree, k: int = 10) -> np.ndarray:
    """Unit normal per point from a k-NN plane fit (sign is arbitrary)."""
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    if k == 1:
        idx = idx[:, None]
    neigh = points[idx]
    centred = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _plane_step(p: np.ndarray, n: np.ndarray, r: np.ndarray) -> tuple[RigidTransform, bool]:
    """One linearized point-to-plane update; flags rank-deficient geometry."""
    j = np.concatenate([np.cross(p, n), n], axis=1)
    m = j.T @ j
    b = -j.T @ r
    eig = np.linalg.eigvalsh(m)
    cond_bad = bool(eig[0] <= 1e-9 * max(eig[-1], 1e-300))
    x = np.linalg.solve(m + 1e-12 * max(eig[-1], 1e-300) * np.eye(6), b)
    omega, trans = x[:3], x[3:]
    angle = float(np.linalg.norm(omega))
    if angle > 0:
        from .core import rotation_about_axis

        rot = rotation_about_axis(omega / angle, angle)
    else:
        rot = np.eye(3)
    return RigidTransform(rot, trans), cond_bad


def register(source: PointCloud, reference: PointCloud,
             initial_guess: RigidTransform | None = None,
             params: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the rigid transform mapping source coordinates into the reference frame."""
    params = params or RegistrationConfig()
    if len(source) < MIN_STATIC_POINTS or len(reference) < MIN_STATIC_POINTS:
        raise UnderConstrainedError(
            f"registration needs >= {MIN_STATIC_POINTS} points per cloud "
            f"(got {len(source)} / {len(reference)})"
        )
    transform = initial_guess or RigidTransform.identity()
    src = source.points
    ref = reference.points
    tree = cKDTree(ref, leafsize=16, balanced_tree=True)
    k = min(GMM_NEIGHBOURS, len(ref))

    span = ref.max(axis=0) - ref.min(axis=0) + 1.0
    uniform_density = 1.0 / float(np.prod(span))

    objectives, sigmas = [], []
    prev_obj = np.inf
    prev_sigma = None
    for it in range(params.max_iterations):
        sigma = max(SIGMA_FLOOR_M, params.gmm_sigma_m * 0.5 ** (it // ANNEAL_EVERY))
        moved = transform.apply(src)
        d, idx = tree.query(moved, k=k)
        if k == 1:
            d, idx = d[:, None], idx[:, None]

        norm = (2.0 * np.pi * sigma * sigma) ** 1.5
        g = ((1.0 - OUTLIER_WEIGHT) / k) * np.exp(-0.5 * (d / sigma) ** 2) / norm
        denom = g.sum(axis=1) + OUTLIER_WEIGHT * uniform_density
        objective = float(-np.log(denom).sum())
        if prev_sigma == sigma:
            # EM guarantee: with the kernel width fixed, the negative
            # log-likelihood cannot increase (float noise aside).
            assert objective <= prev_obj + 1e-9 * abs(prev_obj) + 1e-9, (
                f"EM objective increased at iteration {it}: {prev_obj} -> {objective}"
            )
        objectives.append(objective)
        sigmas.append(sigma)
        prev_obj, prev_sigma = objective, sigma

        gamma = g / denom[:, None]
        w_i = gamma.sum(axis=1)
        targets = np.einsum("nk,nkj->nj", gamma, ref[idx])
        safe = np.maximum(w_i, 1e-300)
        targets = targets / safe[:, None]
        step = _weighted_rigid_align(moved, targets, w_i)
        transform = step.compose(transform)

    # Point-to-plane refinement with a trimming gate.
    normals = _local_normals(ref, tree)
    converged = False
    diagnostic = ""
    icp_iters = 0
    for _ in range(_POLISH_MAX_ITER):
        moved = transform.apply(src)
        d, idx = tree.query(moved, k=1)
        # gate on point distance (drops non-overlapping structure), never on the
        # plane residual: residuals are bimodal while planes misalign, and the
        # large-residual minority is exactly what carries the remaining signal
        cutoff = max(3.0 * float(np.median(d)), 2.0 * SIGMA_FLOOR_M)
        keep = d <= cutoff
        p, q, n = moved[keep], ref[idx[keep]], normals[idx[keep]]
        r = np.einsum("ni,ni->n", p - q, n)
        step, cond_bad = _plane_step(p, n, r)
        if cond_bad and not diagnostic:
            diagnostic = ("degenerate geometry: some rigid motion leaves the "
                          "point-to-plane objective flat")
        transform = step.compose(transform)
        icp_iters += 1
        dt = float(np.linalg.norm(step.translation))
        dr = float(np.arccos(np.clip((np.trace(step.rotation) - 1) / 2, -1, 1)))
        if dt < params.convergence_translation_m and dr < params.convergence_rotation_rad:
            converged = not cond_bad
            break

    return RegistrationResult(
        transform=transform,
        converged=converged,
        iterations=params.max_iterations + icp_iters,
        em_objective=np.asarray(objectives),
        em_sigma=np.asarray(sigmas),
        diagnostic=diagnostic,
    )


def register_all(
    clouds: dict[int, PointCloud],
    hints: dict[int, RigidTransform],
    params: RegistrationConfig | None = None,
    reference_id: int | None = None,
) -> tuple[dict[int, RigidTransform], dict[int, RegistrationResult]]:
    """Register every LiDAR against the reference (lowest id unless overridden).

    Returns global transforms (anchored at the reference's pose hint, identity
    when absent) and the per-source registration results.
    """
    ids = sorted(clouds)
    ref_id = reference_id if reference_id is not None else ids[0]
    if ref_id not in clouds:
        raise KeyError(f"reference lidar {ref_id} not among {ids}")
    anchor = hints.get(ref_id) or RigidTransform.identity()
    transforms = {ref_id: anchor}
    results: dict[int, RegistrationResult] = {}
    for lid in ids:
        if lid == ref_id:
            continue
        if lid in hints and ref_id in hints:
            init = hints[ref_id].inverse().compose(hints[lid])
        else:
            init = RigidTransform.identity()
        res = register(clouds[lid], clouds[ref_id], init, params)
        results[lid] = res
        transforms[lid] = anchor.compose(res.transform)
    return transforms, results


def estimate_up_direction(points: np.ndarray, lidar_origins: np.ndarray,
                          k: int = 16, max_points: int = 40000) -> np.ndarray:
    """Dominant surface normal of the static cloud, oriented away from the ground.

    Normals come from k-NN plane fits; their direction density (antipodes
    identified) must have a clear winner, else the scene has no usable 'up'.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    if len(points) < k + 1:
        raise ValueError("too few points for up estimation")
    if len(points) > max_points:
        stride = int(np.ceil(len(points) / max_points))
        sample = points[::stride]
    else:
        sample = points
    tree = cKDTree(points, leafsize=16)
    _, idx = tree.query(sample, k=k)
    neigh = points[idx]  # (n, k, 3)
    centred = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    # Canonical hemisphere: flip so the largest-magnitude component is positive.
    lead = np.take_along_axis(normals, np.argmax(np.abs(normals), axis=1)[:, None], axis=1)[:, 0]
    normals = normals * np.where(lead < 0, -1.0, 1.0)[:, None]

    grid = np.round(normals * 10).astype(np.int64)
    packed = (grid[:, 0] + 10) * 441 + (grid[:, 1] + 10) * 21 + (grid[:, 2] + 10)
    uniq, counts = np.unique(packed, return_counts=True)
    order = np.argsort(counts)[::-1]
    peak_key = uniq[order[0]]
    peak_dir = np.array([peak_key // 441 - 10, (peak_key // 21) % 21 - 10, peak_key % 21 - 10],
                        float)
    peak_dir /= np.linalg.norm(peak_dir)

    # Second peak: best bin pointing at least ~25 degrees away.
    second = 0
    for key, cnt in zip(uniq[order[1:]], counts[order[1:]]):
        v = np.array([key // 441 - 10, (key // 21) % 21 - 10, key % 21 - 10], float)
        v /= np.linalg.norm(v)
        if abs(float(v @ peak_dir)) < np.cos(np.deg2rad(25.0)):
            second = int(cnt)
            break
    if counts[order[0]] < 2 * max(second, 1):
        raise ValueError(
            f"no dominant up direction (peak {counts[order[0]]} vs runner-up {second})"
        )

    aligned = normals * np.sign(normals @ peak_dir)[:, None]
    close = aligned @ peak_dir > np.cos(np.deg2rad(10.0))
    up = aligned[close].mean(axis=0)
    up /= np.linalg.norm(up)

    origins = np.atleast_2d(np.asarray(lidar_origins, float))
    heights = (origins - points.mean(axis=0)) @ up
    if np.median(heights) < 0:
        up = -up
    return up


def level_scene(transforms: dict[int, RigidTransform],
                up: np.ndarray) -> tuple[dict[int, RigidTransform], RigidTransform]:
    """Rotate the whole scene so ``up`` becomes +z; relative poses are untouched.

    One common world rotation is composed onto every transform, so every
    pairwise relative transform T_i^-1 T_j is bit-for-bit preserved.
    """
    w = RigidTransform(rotation_between(up, np.array([0.0, 0.0, 1.0])), np.zeros(3))
    return {lid: w.compose(t) for lid, t in transforms.items()}, w
