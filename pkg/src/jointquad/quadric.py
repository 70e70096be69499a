"""Normal-aligned parabolic quadrics and the single-frame iterative fit (Quad IT).

A quadric is ``gamma = (theta_x, theta_y, t_z, a, b, c)`` anchored at a point
``p``.  A point ``q`` maps to local coordinates ``l = R(theta_x, theta_y)(q - p)
+ t_z e_z`` and its algebraic residual is

    eps = (a x^2 + 2 b x y + c y^2) / 2 - z

which equals ``q^T E^T F E q`` for the homogeneous point.  The local +z axis
points away from the camera, so convex-toward-camera shapes (spheres,
cylinders seen from outside) have positive curvature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SolverConfig
from .surface import Neighborhood, NeighborhoodBatch

THETA_X, THETA_Y, T_Z, A, B, C = range(6)
MIN_MEMBERS = 6
COND_LIMIT = 1e12


class DegenerateFitError(ValueError):
    """Normal equations of a quadric fit are rank deficient."""

    def __init__(self, rank: int):
        super().__init__(f"degenerate quadric fit (numerical rank {rank} < 6)")
        self.rank = rank


def _wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Quadric:
    params: np.ndarray = field(default_factory=lambda: np.zeros(6))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        p = np.array(self.params, dtype=float).reshape(6)
        p[:2] = _wrap_angle(p[:2])
        a = np.array(self.anchor, dtype=float).reshape(3)
        p.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "anchor", a)

    @property
    def abc(self) -> np.ndarray:
        return self.params[3:]


@dataclass(frozen=True)
class CurvaturePair:
    k1: float
    k2: float


def rotation_xy(theta_x, theta_y):
    """``R = Ry(theta_y) @ Rx(theta_x)`` and its two partial derivatives.

    Works elementwise on arrays; the returned matrices have shape (..., 3, 3).
    """
    tx = np.asarray(theta_x, dtype=float)
    ty = np.asarray(theta_y, dtype=float)
    cx, sx, cy, sy = np.cos(tx), np.sin(tx), np.cos(ty), np.sin(ty)
    z, o = np.zeros_like(tx), np.ones_like(tx)
    Rx = np.stack([o, z, z, z, cx, -sx, z, sx, cx], -1).reshape(tx.shape + (3, 3))
    dRx = np.stack([z, z, z, z, -sx, -cx, z, cx, -sx], -1).reshape(tx.shape + (3, 3))
    Ry = np.stack([cy, z, sy, z, o, z, -sy, z, cy], -1).reshape(ty.shape + (3, 3))
    dRy = np.stack([-sy, z, cy, z, z, z, -cy, z, -sy], -1).reshape(ty.shape + (3, 3))
    return Ry @ Rx, Ry @ dRx, dRy @ Rx


def angles_from_axis(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Angles whose rotation maps the unit vector(s) ``m`` onto +z."""
    m = np.asarray(m, dtype=float)
    theta_x = np.arctan2(m[..., 1], m[..., 2])
    theta_y = np.arctan2(-m[..., 0], np.hypot(m[..., 1], m[..., 2]))
    return theta_x, theta_y


def _f_matrix(a: float, b: float, c: float) -> np.ndarray:
    F = np.zeros((4, 4))
    F[0, 0], F[0, 1], F[1, 0], F[1, 1] = a / 2, b / 2, b / 2, c / 2
    F[2, 3] = F[3, 2] = -0.5
    return F


def _e_matrix(q: Quadric) -> tuple[np.ndarray, list[np.ndarray]]:
    """E (including the shift to the anchor) and dE/d(theta_x, theta_y, t_z)."""
    tx, ty, tz = q.params[:3]
    R, dRx, dRy = rotation_xy(tx, ty)
    shift = np.eye(4)
    shift[:3, 3] = -q.anchor
    E = np.eye(4)
    E[:3, :3] = R
    E[2, 3] = tz
    dEx = np.zeros((4, 4))
    dEx[:3, :3] = dRx
    dEy = np.zeros((4, 4))
    dEy[:3, :3] = dRy
    dEz = np.zeros((4, 4))
    dEz[2, 3] = 1.0
    return E @ shift, [dEx @ shift, dEy @ shift, dEz @ shift]


def build_q_matrix(q: Quadric) -> np.ndarray:
    """Symmetric 4x4 ``E^T F E`` for the quadric."""
    E, _ = _e_matrix(q)
    return E.T @ _f_matrix(*q.abc) @ E


def _homogeneous(point) -> np.ndarray:
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.size == 3:
        return np.append(p, 1.0)
    if p.size != 4:
        raise ValueError("point must have 3 or 4 components")
    return p


def quadric_residual(q: Quadric, point) -> float:
    x = _homogeneous(point)
    return float(x @ build_q_matrix(q) @ x)


def quadric_param_jacobian(q: Quadric, point) -> np.ndarray:
    """Analytic d(residual)/d(gamma) for one homogeneous point."""
    x = _homogeneous(point)
    E, dE = _e_matrix(q)
    F = _f_matrix(*q.abc)
    Ex = E @ x
    out = np.empty(6)
    for i, dEi in enumerate(dE):
        # d(x^T E^T F E x) = 2 (dE x)^T F (E x) since F is symmetric
        out[i] = 2.0 * (dEi @ x) @ F @ Ex
    out[3] = 0.5 * Ex[0] ** 2
    out[4] = Ex[0] * Ex[1]
    out[5] = 0.5 * Ex[1] ** 2
    return out


def curvatures_from_abc(a, b, c) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    t1 = 0.5 * (a + c)
    t2 = np.sqrt(np.maximum(t1 * t1 - a * c + b * b, 0.0))
    return t1 + t2, t1 - t2


def principal_curvatures(q: Quadric) -> CurvaturePair:
    k1, k2 = curvatures_from_abc(*q.abc)
    return CurvaturePair(float(k1), float(k2))


# --- batched evaluation -------------------------------------------------------


@dataclass
class QuadricEval:
    eps: np.ndarray  # (N, K) residuals
    jac: np.ndarray | None  # (N, K, 6) d eps / d gamma
    grad: np.ndarray | None  # (N, K, 3) d eps / d point (point frame)


def evaluate(
    params: np.ndarray,
    anchors: np.ndarray,
    points: np.ndarray,
    jacobian: bool = True,
    gradient: bool = False,
) -> QuadricEval:
    """Residuals of (N, K, 3) points against N quadrics, with derivatives."""
    params = np.asarray(params, dtype=float)
    R, dRx, dRy = rotation_xy(params[:, 0], params[:, 1])
    d = points - anchors[:, None, :]
    loc = d @ R.transpose(0, 2, 1)
    loc[..., 2] += params[:, None, 2]
    x, y, z = loc[..., 0], loc[..., 1], loc[..., 2]
    a, b, c = (params[:, None, i] for i in (3, 4, 5))
    eps = 0.5 * (a * x * x + 2.0 * b * x * y + c * y * y) - z
    jac = grad = None
    if jacobian or gradient:
        g = np.stack([a * x + b * y, b * x + c * y, -np.ones_like(x)], axis=-1)
    if jacobian:
        jac = np.empty(eps.shape + (6,))
        jac[..., 0] = np.sum(g * (d @ dRx.transpose(0, 2, 1)), axis=-1)
        jac[..., 1] = np.sum(g * (d @ dRy.transpose(0, 2, 1)), axis=-1)
        jac[..., 2] = -1.0
        jac[..., 3] = 0.5 * x * x
        jac[..., 4] = x * y
        jac[..., 5] = 0.5 * y * y
    if gradient:
        grad = g @ R
    return QuadricEval(eps, jac, grad)


def fair_weight(residual, distance, n: float):
    """Modified fair weight ``n^2 / (n^2 + residual^2 + distance^2)``."""
    if not n > 0:
        raise ValueError("fair constant n must be positive")
    r = np.asarray(residual, dtype=float)
    d = np.asarray(distance, dtype=float)
    out = n * n / (n * n + r * r + d * d)
    return float(out) if out.ndim == 0 else out


def fair_cost(residual, distance, n: float):
    """Robust cost whose iteratively-reweighted least-squares weight is :func:`fair_weight`.

    ``rho = n^2 / 2 * log(1 + residual^2 / (n^2 + distance^2))``; it behaves like
    ``fair_weight(0, distance, n) * residual^2 / 2`` for small residuals.
    """
    r = np.asarray(residual, dtype=float)
    s = n * n + np.asarray(distance, dtype=float) ** 2
    return 0.5 * n * n * np.log1p(r * r / s)


def fair_scale_from_residuals(eps: np.ndarray, mask: np.ndarray, floor: float) -> float:
    r = np.abs(eps[mask])
    if r.size == 0:
        return floor
    return max(2.0 * float(np.median(r)), floor)


def weighted_cost(eps: np.ndarray, dist: np.ndarray, mask: np.ndarray, n: float) -> np.ndarray:
    """Per-row sum of the robust fair cost over real members."""
    return np.sum(fair_cost(eps, dist, n) * mask, axis=-1)


def init_params_from_neighborhoods(batch: NeighborhoodBatch, anchors: np.ndarray) -> np.ndarray:
    """Normal-aligned plane seeds: angles from the covariance normal, t_z = a = b = c = 0."""
    m = batch.mask.astype(float)
    cnt = np.maximum(m.sum(axis=1), 1.0)
    mean = np.einsum("nk,nkc->nc", m, batch.points) / cnt[:, None]
    D = (batch.points - mean[:, None, :]) * m[..., None]
    cov = np.einsum("nki,nkj->nij", D, D)
    cov[m.sum(axis=1) < 3] = np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    nrm = vecs[..., 0]
    # local +z points away from the camera
    away = np.einsum("nc,nc->n", nrm, anchors) < 0
    nrm[away] *= -1.0
    params = np.zeros((len(anchors), 6))
    params[:, 0], params[:, 1] = angles_from_axis(nrm)
    return params


def normal_equations(jac: np.ndarray, eps: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``J^T W J`` (N, 6, 6) and ``J^T W eps`` (N, 6)."""
    wj = jac * w[..., None]
    H = np.einsum("nki,nkj->nij", wj, jac)
    g = np.einsum("nki,nk->ni", wj, eps)
    return H, g


def scaled_condition(H: np.ndarray) -> np.ndarray:
    """Condition numbers of Jacobi-scaled symmetric blocks (inf when singular)."""
    d = np.sqrt(np.abs(np.einsum("...ii->...i", H)))
    d = np.where(d > 0, d, 1.0)
    Hs = H / d[..., :, None] / d[..., None, :]
    ev = np.linalg.eigvalsh(Hs)
    lo, hi = ev[..., 0], ev[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    return cond


def damped_solve(H: np.ndarray, g: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Solve ``(H + lam diag(H)) x = -g`` row-wise with Jacobi scaling."""
    diag = np.einsum("...ii->...i", H)
    d = np.sqrt(np.where(diag > 0, diag, 1.0))
    Hs = H / d[..., :, None] / d[..., None, :]
    idx = np.arange(H.shape[-1])
    Hs[..., idx, idx] += np.asarray(lam)[..., None] * np.where(diag > 0, 1.0, 0.0) + 1e-14
    Hs[..., idx, idx] += np.where(diag > 0, 0.0, 1.0)
    x = np.linalg.solve(Hs, (-g / d)[..., None])[..., 0]
    return x / d


@dataclass
class FitReport:
    iterations: np.ndarray
    rms: np.ndarray
    converged: np.ndarray
    valid: np.ndarray
    cost_trace: list = field(default_factory=list)


def fit_quadrics(
    batch: NeighborhoodBatch,
    anchors: np.ndarray,
    config: SolverConfig = SolverConfig(),
    init: np.ndarray | None = None,
    fair_scale: float | None = None,
) -> tuple[np.ndarray, FitReport, float]:
    """Damped Gauss-Newton fit of one quadric per neighbourhood row.

    Returns ``(params, report, n)`` where ``n`` is the fair constant used.
    Rows with fewer than six members or rank-deficient normal equations are
    flagged invalid in the report and keep their seed parameters.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    params = init_params_from_neighborhoods(batch, anchors) if init is None else np.array(init, float)
    mask = batch.mask
    valid = batch.counts >= MIN_MEMBERS
    ev = evaluate(params, anchors, batch.points)
    n = fair_scale if fair_scale is not None else config.fair_scale
    if n is None:
        n = fair_scale_from_residuals(ev.eps, mask & valid[:, None], config.fair_scale_floor)
    cost = weighted_cost(ev.eps, batch.dist, mask, n)
    lam = np.full(len(anchors), 1e-4)
    active = valid.copy()
    iters = np.zeros(len(anchors), int)
    converged = np.zeros(len(anchors), bool)
    trace = [float(cost[valid].sum())]
    w = fair_weight(ev.eps, batch.dist, n) * mask
    H, g = normal_equations(ev.jac, ev.eps, w)
    cond = scaled_condition(H[valid]) if valid.any() else np.zeros(0)
    bad = np.zeros(len(anchors), bool)
    bad[np.flatnonzero(valid)[cond > COND_LIMIT]] = True
    valid &= ~bad
    active &= ~bad
    for _ in range(config.fit_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        p0 = params[idx]
        Hk, gk, ck, lk = H[idx], g[idx], cost[idx], lam[idx]
        accepted = np.zeros(idx.size, bool)
        step_taken = np.zeros((idx.size, 6))
        new_p = p0.copy()
        new_cost = ck.copy()
        pending = np.ones(idx.size, bool)
        for _retry in range(config.max_damping_retries + 1):
            j = np.flatnonzero(pending)
            if j.size == 0:
                break
            step = damped_solve(Hk[j], gk[j], lk[j])
            trial = p0[j] + step
            e = evaluate(trial, anchors[idx[j]], batch.points[idx[j]], jacobian=False)
            c_try = weighted_cost(e.eps, batch.dist[idx[j]], mask[idx[j]], n)
            ok = c_try <= ck[j]
            jj = j[ok]
            new_p[jj], new_cost[jj], step_taken[jj] = trial[ok], c_try[ok], step[ok]
            accepted[jj] = True
            lk[jj] *= 0.5
            lk[j[~ok]] *= 10.0
            pending[jj] = False
        lam[idx] = lk
        params[idx] = new_p
        cost[idx] = new_cost
        small = np.max(np.abs(step_taken), axis=1) < config.fit_step_tol
        done = ~accepted | small
        converged[idx[done]] = True
        active[idx[done]] = False
        trace.append(float(cost[valid].sum()))
        still = idx[~done]
        if still.size:
            e = evaluate(params[still], anchors[still], batch.points[still])
            w = fair_weight(e.eps, batch.dist[still], n) * mask[still]
            H[still], g[still] = normal_equations(e.jac, e.eps, w)
    params[:, :2] = _wrap_angle(params[:, :2])
    e = evaluate(params, anchors, batch.points, jacobian=False)
    cnt = np.maximum(batch.counts, 1)
    rms = np.sqrt(np.sum(e.eps**2 * mask, axis=1) / cnt)
    return params, FitReport(iters, rms, converged, valid, trace), n


def fit_quadric_iterative(
    n: Neighborhood,
    init: Quadric | None = None,
    config: SolverConfig = SolverConfig(),
    fair_scale: float | None = None,
) -> tuple[Quadric, FitReport]:
    """Fit a single quadric anchored at the neighbourhood centre."""
    if len(n) < MIN_MEMBERS:
        raise ValueError(f"neighbourhood has {len(n)} members; at least {MIN_MEMBERS} required")
    batch = NeighborhoodBatch(
        n.members[None], np.ones((1, len(n)), bool), n.distances[None], -np.ones((1, len(n)), int)
    )
    anchor = n.center if init is None else init.anchor
    seed = None if init is None else init.params[None]
    params, report, _ = fit_quadrics(batch, anchor[None], config, seed, fair_scale)
    if not report.valid[0]:
        ev = evaluate(params, anchor[None], batch.points)
        H, _ = normal_equations(ev.jac, ev.eps, np.ones_like(ev.eps))
        d = np.sqrt(np.maximum(np.diag(H[0]), 1e-300))
        s = np.linalg.svd(H[0] / d[:, None] / d[None, :], compute_uv=False)
        rank = int(np.sum(s > s[0] / COND_LIMIT))
        raise DegenerateFitError(min(rank, 5))
    return Quadric(params[0], anchor), report


# --- curvature maps ----------------------------------------------------------

_CURV_MAGIC = b"CURV"
_CURV_HEADER = struct.Struct("<4sII")


@dataclass
class CurvatureMap:
    k1: np.ndarray  # (H, W)
    k2: np.ndarray
    valid: np.ndarray

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> CurvatureMap:
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def curvature_map_from_quadrics(
    shape: tuple[int, int], pixels: np.ndarray, params: np.ndarray, ok: np.ndarray
) -> CurvatureMap:
    cm = CurvatureMap.empty(shape)
    k1, k2 = curvatures_from_abc(params[:, 3], params[:, 4], params[:, 5])
    flat_valid = cm.valid.reshape(-1)
    cm.k1.reshape(-1)[pixels[ok]] = k1[ok]
    cm.k2.reshape(-1)[pixels[ok]] = k2[ok]
    flat_valid[pixels[ok]] = True
    return cm


def write_curvature_map(path: str | Path, cm: CurvatureMap) -> None:
    """Binary: magic ``CURV``, u32 width, u32 height, f32 k1 grid, f32 k2 grid, u8 valid grid."""
    h, w = cm.shape
    with open(path, "wb") as fh:
        fh.write(_CURV_HEADER.pack(_CURV_MAGIC, w, h))
        fh.write(cm.k1.astype("<f4").tobytes())
        fh.write(cm.k2.astype("<f4").tobytes())
        fh.write(cm.valid.astype(np.uint8).tobytes())


def read_curvature_map(path: str | Path) -> CurvatureMap:
    raw = Path(path).read_bytes()
    magic, w, h = _CURV_HEADER.unpack_from(raw)
    if magic != _CURV_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    off = _CURV_HEADER.size
    n = w * h
    if len(raw) != off + 9 * n:
        raise ValueError(f"{path}: size does not match a {w}x{h} curvature map")
    k1 = np.frombuffer(raw, "<f4", n, off).reshape(h, w).astype(float)
    k2 = np.frombuffer(raw, "<f4", n, off + 4 * n).reshape(h, w).astype(float)
    valid = np.frombuffer(raw, np.uint8, n, off + 8 * n).reshape(h, w).astype(bool)
    return CurvatureMap(k1, k2, valid)


def write_curvature_csv(path: str | Path, cm: CurvatureMap) -> None:
    """One row per pixel in row-major order: ``k1,k2,valid``."""
    rows = np.column_stack([cm.k1.ravel(), cm.k2.ravel(), cm.valid.ravel().astype(int)])
    np.savetxt(path, rows, fmt=["%.9g", "%.9g", "%d"], delimiter=",", header="k1,k2,valid", comments="")
