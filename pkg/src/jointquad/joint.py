"""Joint optimisation of rigid poses and dense quadric curvature.

Every quadric is anchored at a point ``p`` of the reference surface S_1.  For a
frame ``j`` with pose ``T_j`` (mapping S_j coordinates into S_1), the
neighbourhood of ``T_j^-1 p`` in S_j is transformed into S_1 and scored with
the quadric's algebraic residual.  Pose 0 is the identity and never moves.

* :func:`solve_joint_ftf` - two frames (J-ftf)
* :func:`solve_joint_full` - all frames at once (J-full)
* :func:`solve_q_full` - poses only, quadrics frozen (Q-full)
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import schur
from .config import SolverConfig
from .quadric import (
    COND_LIMIT,
    MIN_MEMBERS,
    CurvatureMap,
    Quadric,
    build_q_matrix,
    curvature_map_from_quadrics,
    evaluate,
    fair_cost,
    fair_weight,
    fit_quadrics,
    init_params_from_neighborhoods,
    scaled_condition,
)
from .rigid import RigidTransform, generators, se3_exp
from .surface import NeighborhoodBatch, Surface, gather_neighborhoods

log = logging.getLogger(__name__)

CHUNK = 256


class InsufficientOverlapError(RuntimeError):
    pass


class GaugeError(ValueError):
    """Raised when a caller tries to move the reference pose."""


# --- single-point residual and derivatives --------------------------------------


def _homog(point) -> np.ndarray:
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.size == 3:
        p = np.append(p, 1.0)
    if p.size != 4 or p[3] != 1.0:
        raise ValueError("points must be affine (w = 1)")
    return p


def joint_residual(q: Quadric, T: RigidTransform, point) -> float:
    """``q^T T^T Q T q`` for a point expressed in the frame that ``T`` maps from."""
    x = _homog(point)
    Tx = T.matrix @ x
    return float(Tx @ build_q_matrix(q) @ Tx)


def motion_jacobian(q: Quadric, T: RigidTransform, point) -> np.ndarray:
    """Six partials of :func:`joint_residual` under left perturbation of ``T``."""
    x = _homog(point)
    Q = build_q_matrix(q)
    Tx = T.matrix @ x
    G = generators()
    return np.array([Tx @ G[i].T @ Q @ Tx + Tx @ Q @ G[i] @ Tx for i in range(6)])


# --- quadric sets ---------------------------------------------------------------


@dataclass
class QuadricField:
    """Quadrics anchored on a subsampled grid of the reference surface."""

    anchors: np.ndarray  # (N, 3)
    params: np.ndarray  # (N, 6)
    pixels: np.ndarray  # (N,) flat pixel index in the reference frame
    valid: np.ndarray  # (N,) bool
    shape: tuple[int, int]
    fair_scale: float | None = None

    def __len__(self) -> int:
        return len(self.anchors)

    def quadrics(self) -> list[Quadric]:
        return [Quadric(p, a) for p, a in zip(self.params, self.anchors)]

    def curvature_map(self) -> CurvatureMap:
        return curvature_map_from_quadrics(self.shape, self.pixels, self.params, self.valid)

    def copy(self) -> QuadricField:
        return QuadricField(
            self.anchors.copy(), self.params.copy(), self.pixels.copy(), self.valid.copy(), self.shape,
            self.fair_scale,
        )


def anchor_pixels(s: Surface, stride: int) -> np.ndarray:
    """Flat indices of valid pixels on a regular ``stride`` grid."""
    h, w = s.shape
    off = stride // 2
    v, u = np.mgrid[off:h:stride, off:w:stride]
    flat = (v * w + u).ravel()
    return flat[s.valid.reshape(-1)[flat]]


def anchor_radii(anchors: np.ndarray, config: SolverConfig) -> np.ndarray:
    return config.radius_scale * anchors[:, 2]


def fair_scale_policy(eps: np.ndarray, dist: np.ndarray, mask: np.ndarray, floor: float) -> float:
    """Twice the median absolute residual over real members, floored."""
    r = np.abs(eps[mask])
    if r.size == 0:
        return floor
    return max(2.0 * float(np.median(r)), floor)


def fit_quadric_field(
    s: Surface,
    config: SolverConfig = SolverConfig(),
    pixels: np.ndarray | None = None,
    fair_scale: float | None = None,
) -> QuadricField:
    """Single-frame iterative fit (Quad IT) on every anchor of ``s``."""
    pix = anchor_pixels(s, config.stride) if pixels is None else np.asarray(pixels, int)
    anchors = s.points.reshape(-1, 3)[pix]
    batch = gather_neighborhoods(s, anchors, anchor_radii(anchors, config))
    n = fair_scale if fair_scale is not None else config.fair_scale
    if n is None:
        seed = init_params_from_neighborhoods(batch, anchors)
        e = evaluate(seed, anchors, batch.points, jacobian=False)
        ok = batch.mask & (batch.counts >= MIN_MEMBERS)[:, None]
        n = fair_scale_policy(e.eps, batch.dist, ok, config.fair_scale_floor)
    params, report, n = fit_quadrics(batch, anchors, config, fair_scale=n)
    return QuadricField(anchors, params, pix, report.valid, s.shape, n)


def field_from_quadrics(quadrics: list[Quadric], s: Surface) -> QuadricField:
    anchors = np.array([q.anchor for q in quadrics], dtype=float).reshape(-1, 3)
    params = np.array([q.params for q in quadrics], dtype=float).reshape(-1, 6)
    h, w = s.shape
    u, v = s.intrinsics.project(anchors)
    ui, vi = np.round(u).astype(int), np.round(v).astype(int)
    inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    pix = np.where(inside, vi * w + ui, 0)
    return QuadricField(anchors, params, pix, inside.copy(), s.shape)


# --- accumulation ---------------------------------------------------------------


@dataclass
class _FrameTerms:
    """Per-frame linearisation over all quadrics."""

    cost: float
    members: np.ndarray  # (N,) member count per quadric
    C: np.ndarray | None = None  # (N, 6, 6)
    b: np.ndarray | None = None  # (N, 6)
    A: np.ndarray | None = None  # (6, 6)
    a: np.ndarray | None = None  # (6,)
    B: np.ndarray | None = None  # (N, 6, 6) pose x quadric coupling
    batch: NeighborhoodBatch | None = None


def _gather(s: Surface, T: RigidTransform, anchors: np.ndarray, radii: np.ndarray) -> NeighborhoodBatch:
    centers = T.inverse().apply(anchors)
    return gather_neighborhoods(s, centers, radii)


def _chunk_terms(params, anchors, pts, dist, mask, n, with_pose, linearize):
    ev = evaluate(params, anchors, pts, jacobian=linearize, gradient=linearize and with_pose)
    cost = float(np.sum(fair_cost(ev.eps, dist, n) * mask))
    members = mask.sum(axis=1)
    if not linearize:
        return cost, members, None
    w = fair_weight(ev.eps, dist, n) * mask
    Jg = ev.jac
    wJg = Jg * w[..., None]
    wJgT = wJg.transpose(0, 2, 1)
    C = wJgT @ Jg
    b = (wJgT @ ev.eps[..., None])[..., 0]
    if not with_pose:
        return cost, members, (C, b, None, None, None)
    Ja = np.concatenate([np.cross(pts, ev.grad), ev.grad], axis=-1)
    wJa = Ja * w[..., None]
    wJaT = wJa.transpose(0, 2, 1)
    A = (wJaT @ Ja).sum(axis=0)
    a = (wJaT @ ev.eps[..., None])[..., 0].sum(axis=0)
    B = wJaT @ Jg
    return cost, members, (C, b, A, a, B)


def _frame_terms(
    s: Surface,
    T: RigidTransform,
    field_: QuadricField,
    params: np.ndarray,
    radii: np.ndarray,
    n: float,
    with_pose: bool,
    linearize: bool,
    threads: int,
    batch: NeighborhoodBatch | None = None,
) -> _FrameTerms:
    if batch is None:
        batch = _gather(s, T, field_.anchors, radii)
    pts = T.apply(batch.points)
    mask = batch.mask & field_.valid[:, None]
    N = len(field_)
    chunks = [slice(i, min(i + CHUNK, N)) for i in range(0, N, CHUNK)]

    def work(sl):
        return _chunk_terms(
            params[sl], field_.anchors[sl], pts[sl], batch.dist[sl], mask[sl], n, with_pose, linearize
        )

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    # reduce in chunk order so results do not depend on the thread count
    cost = 0.0
    members = np.zeros(N, int)
    out = _FrameTerms(0.0, members)
    if linearize:
        out.C = np.zeros((N, 6, 6))
        out.b = np.zeros((N, 6))
        if with_pose:
            out.A = np.zeros((6, 6))
            out.a = np.zeros(6)
            out.B = np.zeros((N, 6, 6))
    for sl, (c, m, lin) in zip(chunks, parts):
        cost += c
        members[sl] = m
        if lin is None:
            continue
        C, b, A, a, B = lin
        out.C[sl], out.b[sl] = C, b
        if with_pose:
            out.A += A
            out.a += a
            out.B[sl] = B
    out.cost = cost
    out.batch = batch
    return out


# --- solver ---------------------------------------------------------------------


@dataclass
class JointResult:
    poses: list
    field: QuadricField
    curvature: CurvatureMap
    cost_trace: list
    converged: bool
    iterations: int
    fair_scale: float
    frozen_trace: list = field(default_factory=list)

    @property
    def pose(self) -> RigidTransform:
        return self.poses[-1]


def _as_field(init_quadrics, s1: Surface) -> QuadricField:
    if isinstance(init_quadrics, QuadricField):
        return init_quadrics.copy()
    return field_from_quadrics(list(init_quadrics), s1)


def _reference_state(field_: QuadricField, batch: NeighborhoodBatch, config: SolverConfig):
    """Fair constant and the anchors whose initial quadric describes its patch.

    A quadric whose median absolute residual exceeds the fair constant sits on
    a crease or an edge; it is left out of the joint problem.
    """
    e = np.abs(evaluate(field_.params, field_.anchors, batch.points, jacobian=False).eps)
    live = batch.mask & field_.valid[:, None]
    n = config.fair_scale
    if n is None:
        n = fair_scale_policy(e, batch.dist, live, config.fair_scale_floor)
    rows = live.any(axis=1)
    med = np.full(len(e), np.inf)
    med[rows] = np.nanmedian(np.where(live[rows], e[rows], np.nan), axis=1)
    smooth = field_.valid & (batch.counts >= MIN_MEMBERS) & (med <= n)
    return n, smooth


def _cap_pose_steps(x: np.ndarray, max_norm: float) -> np.ndarray:
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(nrm > max_norm, x * (max_norm / np.maximum(nrm, 1e-300)), x)


def _solve(
    surfaces: list[Surface],
    poses: list[RigidTransform],
    field_: QuadricField,
    config: SolverConfig,
    optimise_quadrics: bool,
) -> JointResult:
    M = len(surfaces)
    if M < 2:
        raise ValueError("joint optimisation needs at least two surfaces")
    if len(poses) != M:
        raise ValueError("one initial pose per surface required")
    if not np.array_equal(poses[0].matrix, np.eye(4)):
        raise GaugeError("the reference pose must be the identity")
    radii = anchor_radii(field_.anchors, config)
    # the reference frame never moves, so its neighbourhoods are gathered once
    ref_batch = _gather(surfaces[0], poses[0], field_.anchors, radii)
    n, smooth = _reference_state(field_, ref_batch, config)
    field_ = field_.copy()
    field_.valid = smooth
    params = field_.params.copy()
    P = M - 1
    threads = config.threads

    def linearise(poses_, params_, batches=None):
        batches = batches or [ref_batch] + [None] * P
        return [
            _frame_terms(surfaces[j], poses_[j], field_, params_, radii, n, j > 0, True, threads, batches[j])
            for j in range(M)
        ]

    def total_cost(poses_, params_):
        terms = [
            _frame_terms(
                surfaces[j], poses_[j], field_, params_, radii, n, j > 0, False, threads,
                ref_batch if j == 0 else None,
            )
            for j in range(M)
        ]
        return sum(t.cost for t in terms), terms

    terms = linearise(poses, params)
    cross = sum((t.members > 0).astype(int) for t in terms[1:])
    if np.count_nonzero((cross > 0) & field_.valid) < 6:
        raise InsufficientOverlapError("fewer than 6 quadrics observed in another frame")
    cost = sum(t.cost for t in terms)
    trace = [cost]
    frozen_trace = []
    lam = 1e-4
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        A = np.stack([terms[j].A for j in range(1, M)])
        a = np.stack([terms[j].a for j in range(1, M)])
        C = sum(t.C for t in terms)
        b = sum(t.b for t in terms)
        members = sum(t.members for t in terms)
        free = field_.valid & (members >= MIN_MEMBERS) if optimise_quadrics else np.zeros(len(field_), bool)
        if free.any():
            cond = scaled_condition(C[free])
            idx = np.flatnonzero(free)
            free[idx[~(cond < COND_LIMIT)]] = False
        frozen_trace.append(int(np.count_nonzero(field_.valid & ~free)))
        qidx = np.flatnonzero(free)
        accepted = None
        for _ in range(config.max_damping_retries + 1):
            Ad = _damp(A, lam)
            if optimise_quadrics and qidx.size:
                Bp, Bq, Bb = [], [], []
                for j in range(1, M):
                    Bj = terms[j].B[qidx]
                    nz = np.any(Bj != 0, axis=(1, 2))
                    Bp.append(np.full(nz.sum(), j - 1))
                    Bq.append(np.flatnonzero(nz))
                    Bb.append(Bj[nz])
                system = schur.BlockSystem(
                    Ad, _damp(C[qidx], lam), np.concatenate(Bp), np.concatenate(Bq),
                    np.concatenate(Bb) if Bb else np.zeros((0, 6, 6)), -a, -b[qidx],
                )
                try:
                    x, y = schur.solve_schur(system)
                except schur.SingularBlockError as exc:
                    keep = np.ones(qidx.size, bool)
                    keep[exc.indices] = False
                    qidx = qidx[keep]
                    continue
                except schur.RankDeficientPoseError:
                    lam *= 10.0
                    continue
            else:
                try:
                    x = np.stack([np.linalg.solve(Ad[k], -a[k]) for k in range(P)])
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                y = np.zeros((0, 6))
            x = _cap_pose_steps(x, config.max_step_norm)
            trial_poses = [poses[0]] + [RigidTransform(se3_exp(x[k])) @ poses[k + 1] for k in range(P)]
            trial_params = params.copy()
            trial_params[qidx] += y
            c_try, trial_terms = total_cost(trial_poses, trial_params)
            if c_try <= cost:
                accepted = (x, y, trial_poses, trial_params, c_try, [t.batch for t in trial_terms])
                lam = max(lam * 0.5, 1e-9)
                break
            lam *= 10.0
        if accepted is None:
            converged = True
            break
        x, y, poses, params, new_cost, batches = accepted
        trace.append(new_cost)
        step = max(np.max(np.abs(x)), np.max(np.abs(y)) if y.size else 0.0)
        small_gain = cost - new_cost <= config.cost_tol * cost
        cost = new_cost
        if step < config.step_tol or small_gain:
            converged = True
            break
        terms = linearise(poses, params, batches)
    out = field_.copy()
    out.params = params
    out.fair_scale = n
    return JointResult(poses, out, out.curvature_map(), trace, converged, it, n, frozen_trace)


def _damp(blocks: np.ndarray, lam: float) -> np.ndarray:
    out = blocks.copy()
    idx = np.arange(6)
    diag = out[..., idx, idx]
    out[..., idx, idx] = diag + lam * diag + 1e-12 * (diag.max(axis=-1, keepdims=True) + 1e-300)
    return out


def solve_joint_full(
    surfaces: list[Surface],
    init_poses: list[RigidTransform],
    init_quadrics,
    config: SolverConfig = SolverConfig(),
) -> JointResult:
    """J-full: all free poses and all quadrics optimised together."""
    return _solve(surfaces, list(init_poses), _as_field(init_quadrics, surfaces[0]), config, True)


def solve_joint_ftf(
    s1: Surface,
    s2: Surface,
    init_pose: RigidTransform,
    init_quadrics,
    config: SolverConfig = SolverConfig(),
) -> JointResult:
    """J-ftf: refine the pose of ``s2`` relative to ``s1`` and the quadrics of ``s1``."""
    return _solve([s1, s2], [RigidTransform(), init_pose], _as_field(init_quadrics, s1), config, True)


def solve_q_full(
    surfaces: list[Surface],
    init_poses: list[RigidTransform],
    fixed_quadrics,
    config: SolverConfig = SolverConfig(),
) -> JointResult:
    """Q-full: poses only, against a constant set of quadrics."""
    return _solve(surfaces, list(init_poses), _as_field(fixed_quadrics, surfaces[0]), config, False)
