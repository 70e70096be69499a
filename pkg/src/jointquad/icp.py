"""Dense point-to-plane ICP baselines: frame-to-frame (ICP-ftf) and pose-graph (ICP-bundle)."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import SolverConfig
from .quadric import damped_solve, fair_cost, fair_weight
from .rigid import RigidTransform, se3_exp
from .surface import Surface, associate

log = logging.getLogger(__name__)

MIN_INLIERS = 6


class InsufficientOverlapError(RuntimeError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class AlignmentResult:
    pose: RigidTransform
    iterations: int
    final_rms: float
    inlier_count: int
    converged: bool
    cost_trace: list = field(default_factory=list)


def _source(s: Surface) -> tuple[np.ndarray, np.ndarray | None]:
    m = s.valid if s.normal_valid is None else s.valid & s.normal_valid
    nrm = None if s.normals is None else s.normals[m]
    return s.points[m], nrm


@dataclass
class _Linearization:
    e: np.ndarray
    J: np.ndarray  # (n, 6) Jacobian w.r.t. a left perturbation of the source pose
    inliers: int


def _point_to_plane(target: Surface, pts: np.ndarray, nrm: np.ndarray | None, T: RigidTransform,
                    config: SolverConfig) -> _Linearization:
    x = T.apply(pts)
    src_n = None if nrm is None else nrm @ T.R.T
    a = associate(target, x, src_n, config.gap_reject, config.angle_reject)
    x, q, n = x[a.ok], a.points[a.ok], a.normals[a.ok]
    e = np.einsum("ij,ij->i", n, x - q)
    J = np.hstack([np.cross(x, n), n])
    return _Linearization(e, J, int(a.ok.sum()))


def _mean_cost(e: np.ndarray, n: float) -> float:
    if e.size == 0:
        return np.inf
    return float(np.mean(fair_cost(e, 0.0, n)))


def _cap(delta: np.ndarray, max_norm: float) -> np.ndarray:
    nrm = np.linalg.norm(delta)
    return delta * (max_norm / nrm) if nrm > max_norm else delta


def icp_point_to_plane(
    source: Surface,
    target: Surface,
    init: RigidTransform = RigidTransform(),
    config: SolverConfig = SolverConfig(),
) -> AlignmentResult:
    """Estimate ``T`` such that ``T @ source`` lies on ``target``.

    Both surfaces need normals.  Each iteration re-associates projectively,
    solves the fair-weighted normal equations and left-composes the step.
    Steps that increase the weighted RMS are retried with more damping.
    """
    pts, nrm = _source(source)
    T = init
    lin = _point_to_plane(target, pts, nrm, T, config)
    if lin.inliers < MIN_INLIERS:
        raise InsufficientOverlapError(f"only {lin.inliers} correspondences")
    n = config.fair_scale or max(2.0 * float(np.median(np.abs(lin.e))), config.fair_scale_floor)
    cost = _mean_cost(lin.e, n)
    trace = [cost]
    lam = 1e-6
    converged = False
    it = 0
    for it in range(1, config.icp_iterations + 1):
        w = fair_weight(lin.e, 0.0, n)
        H = (lin.J * w[:, None]).T @ lin.J
        g = (lin.J * w[:, None]).T @ lin.e
        accepted = None
        for _ in range(config.max_damping_retries + 1):
            delta = _cap(damped_solve(H, g, np.asarray(lam)), config.max_step_norm)
            T_try = RigidTransform(se3_exp(delta)) @ T
            lin_try = _point_to_plane(target, pts, nrm, T_try, config)
            if lin_try.inliers >= MIN_INLIERS:
                c = _mean_cost(lin_try.e, n)
                if c <= cost:
                    accepted = (delta, T_try, lin_try, c)
                    lam = max(lam * 0.5, 1e-12)
                    break
            lam *= 10.0
        if accepted is None:
            converged = True
            break
        delta, T, lin, cost = accepted
        trace.append(cost)
        if np.max(np.abs(delta)) < config.icp_step_tol:
            converged = True
            break
    return AlignmentResult(T, it, cost, lin.inliers, converged, trace)


def icp_ftf(surfaces: list[Surface], config: SolverConfig = SolverConfig(),
            init_relative: list[RigidTransform] | None = None) -> list[RigidTransform]:
    """Chain frame-to-frame alignments; returns camera-to-frame-0 poses."""
    poses = [RigidTransform()]
    for k in range(1, len(surfaces)):
        init = RigidTransform() if init_relative is None else init_relative[k - 1]
        res = icp_point_to_plane(surfaces[k], surfaces[k - 1], init, config)
        poses.append(poses[-1] @ res.pose)
    return poses


def default_pairs(count: int, reach: int = 2) -> list[tuple[int, int]]:
    return [(i, j) for i in range(count) for j in range(i + 1, min(count, i + reach + 1))]


def _connected(count: int, pairs) -> bool:
    adj = {i: set() for i in range(count)}
    for i, j in pairs:
        adj[i].add(j)
        adj[j].add(i)
    seen, todo = {0}, deque([0])
    while todo:
        k = todo.popleft()
        for m in adj[k] - seen:
            seen.add(m)
            todo.append(m)
    return len(seen) == count


@dataclass
class BundleResult:
    poses: list
    iterations: int
    dropped_pairs: int
    cost_trace: list = field(default_factory=list)
    converged: bool = False


def _bundle_residuals(surfaces, prepared, poses, pairs, config):
    """Per-pair residuals and Jacobians expressed in frame 0 (the world)."""
    out = []
    for i, j in pairs:
        pts, nrm = prepared[j]
        rel = poses[i].inverse() @ poses[j]
        x = rel.apply(pts)
        src_n = None if nrm is None else nrm @ rel.R.T
        a = associate(surfaces[i], x, src_n, config.gap_reject, config.angle_reject)
        if a.ok.sum() < MIN_INLIERS:
            out.append(None)
            continue
        X = poses[j].apply(pts[a.ok])
        N = a.normals[a.ok] @ poses[i].R.T
        Y = poses[i].apply(a.points[a.ok])
        e = np.einsum("ij,ij->i", N, X - Y)
        J = np.hstack([np.cross(X, N), N])
        out.append((e, J))
    return out


def icp_bundle(
    surfaces: list[Surface],
    init_poses: list[RigidTransform],
    pairs: list[tuple[int, int]] | None = None,
    config: SolverConfig = SolverConfig(),
) -> BundleResult:
    """Joint point-to-plane refinement of all poses over a pair graph.

    Pose 0 is held at ``init_poses[0]``.  Pairs with fewer than six inlier
    correspondences at the start are dropped; the remaining graph must stay
    connected.
    """
    M = len(surfaces)
    if M < 2:
        raise ValueError("ICP-bundle needs at least two frames")
    if len(init_poses) != M:
        raise ValueError("one initial pose per surface required")
    pairs = default_pairs(M) if pairs is None else [tuple(sorted(p)) for p in pairs]
    if not _connected(M, pairs):
        raise GraphError("pair graph is disconnected")
    prepared = [_source(s) for s in surfaces]
    poses = list(init_poses)
    res = _bundle_residuals(surfaces, prepared, poses, pairs, config)
    kept = [p for p, r in zip(pairs, res) if r is not None]
    dropped = len(pairs) - len(kept)
    if dropped:
        log.warning("icp_bundle: dropped %d pair(s) with insufficient overlap", dropped)
        if not _connected(M, kept):
            raise GraphError("pair graph disconnected after dropping weak pairs")
    pairs = kept
    res = [r for r in res if r is not None]
    all_e = np.concatenate([r[0] for r in res])
    n = config.fair_scale or max(2.0 * float(np.median(np.abs(all_e))), config.fair_scale_floor)

    def cost_of(rs) -> float:
        if any(r is None for r in rs):
            return np.inf
        return _mean_cost(np.concatenate([r[0] for r in rs]), n)

    cost = cost_of(res)
    trace = [cost]
    lam = 1e-6
    D = 6 * (M - 1)
    converged = False
    it = 0
    for it in range(1, config.icp_iterations + 1):
        H = np.zeros((D, D))
        g = np.zeros(D)
        for (i, j), (e, J) in zip(pairs, res):
            w = fair_weight(e, 0.0, n)
            WJ = J * w[:, None]
            JtJ = WJ.T @ J
            Jte = WJ.T @ e
            # d e / d(pose j) = J, d e / d(pose i) = -J
            for a_idx, sa in ((i, -1.0), (j, 1.0)):
                if a_idx == 0:
                    continue
                ra = slice(6 * (a_idx - 1), 6 * a_idx)
                g[ra] += sa * Jte
                for b_idx, sb in ((i, -1.0), (j, 1.0)):
                    if b_idx == 0:
                        continue
                    rb = slice(6 * (b_idx - 1), 6 * b_idx)
                    H[ra, rb] += sa * sb * JtJ
        accepted = None
        for _ in range(config.max_damping_retries + 1):
            delta = damped_solve(H, g, np.asarray(lam)).reshape(M - 1, 6)
            trial = [poses[0]] + [
                RigidTransform(se3_exp(_cap(delta[k - 1], config.max_step_norm))) @ poses[k]
                for k in range(1, M)
            ]
            res_try = _bundle_residuals(surfaces, prepared, trial, pairs, config)
            c = cost_of(res_try)
            if c <= cost:
                accepted = (delta, trial, res_try, c)
                lam = max(lam * 0.5, 1e-12)
                break
            lam *= 10.0
        if accepted is None:
            converged = True
            break
        delta, poses, res, cost = accepted
        trace.append(cost)
        if np.max(np.abs(delta)) < config.icp_step_tol:
            converged = True
            break
    return BundleResult(poses, it, dropped, trace, converged)
