"""Metrics and experiment drivers.

Pose errors are gauge-aligned at frame 0: both trajectories are re-expressed
relative to their own first pose before comparison.  Experiments are described
by small YAML files (see ``jointquad/specs``) and write plain CSV tables.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import icp, joint, synth
from .config import SolverConfig
from .quadric import (
    MIN_MEMBERS,
    CurvatureMap,
    DegenerateFitError,
    Quadric,
    init_params_from_neighborhoods,
    rotation_xy,
)
from .rigid import RigidTransform, rotation_angle
from .surface import Neighborhood, NeighborhoodBatch, Surface, backproject, estimate_normals, gather_neighborhoods

log = logging.getLogger(__name__)

BASE_RADIUS_SCALE = 0.0125  # at 640 pixels across


# --- pose metrics ---------------------------------------------------------------


@dataclass
class PoseErrorReport:
    translational_rms: float
    rotational_rms: float
    translational: np.ndarray  # per frame, entry 0 is the gauge frame
    rotational: np.ndarray


def _check_lengths(estimated, truth) -> None:
    if len(estimated) != len(truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(truth)}")
    if len(estimated) == 0:
        raise ValueError("empty trajectory")


def _regauge(poses: list[RigidTransform]) -> list[RigidTransform]:
    inv0 = poses[0].inverse()
    return [inv0 @ T for T in poses]


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def pose_error(estimated: list[RigidTransform], truth: list[RigidTransform]) -> PoseErrorReport:
    """Absolute errors after aligning both trajectories at frame 0; RMS over frames 1..M-1."""
    _check_lengths(estimated, truth)
    est, tru = _regauge(list(estimated)), _regauge(list(truth))
    te = np.array([np.linalg.norm(e.t - t.t) for e, t in zip(est, tru)])
    re = np.array([rotation_angle(e.R @ t.R.T) for e, t in zip(est, tru)])
    return PoseErrorReport(_rms(te[1:]), _rms(re[1:]), te, re)


def relative_pose_error(estimated: list[RigidTransform], truth: list[RigidTransform]) -> PoseErrorReport:
    """Frame-to-frame errors of consecutive relative motions."""
    _check_lengths(estimated, truth)
    te, re = [0.0], [0.0]
    for k in range(1, len(estimated)):
        de = estimated[k - 1].inverse() @ estimated[k]
        dt = truth[k - 1].inverse() @ truth[k]
        te.append(float(np.linalg.norm(de.t - dt.t)))
        re.append(rotation_angle(de.R @ dt.R.T))
    te, re = np.array(te), np.array(re)
    return PoseErrorReport(_rms(te[1:]), _rms(re[1:]), te, re)


@dataclass
class DriftCurve:
    drift: np.ndarray  # cumulative translational error per frame

    @property
    def final(self) -> float:
        return float(self.drift[-1])


def drift_curve(estimated: list[RigidTransform], truth: list[RigidTransform]) -> DriftCurve:
    return DriftCurve(pose_error(estimated, truth).translational)


# --- curvature metrics ----------------------------------------------------------


class EmptyOverlapError(ValueError):
    pass


def discontinuity_mask(depth: np.ndarray, jump: float = 0.05, margin: int = 3) -> np.ndarray:
    """True for pixels within ``margin`` pixels of a depth jump above ``jump`` metres.

    Transitions between valid and invalid pixels count as discontinuities.
    """
    from scipy.ndimage import binary_dilation

    z = np.asarray(depth, dtype=float)
    valid = z > 0
    edge = np.zeros(z.shape, bool)
    for axis in (0, 1):
        a = np.take(z, np.arange(z.shape[axis] - 1), axis=axis)
        b = np.take(z, np.arange(1, z.shape[axis]), axis=axis)
        va = np.take(valid, np.arange(z.shape[axis] - 1), axis=axis)
        vb = np.take(valid, np.arange(1, z.shape[axis]), axis=axis)
        e = (va != vb) | (va & vb & (np.abs(a - b) > jump))
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        edge[tuple(lo)] |= e
        edge[tuple(hi)] |= e
    if margin <= 0:
        return edge
    return binary_dilation(edge, np.ones((2 * margin + 1, 2 * margin + 1), bool))


def curvature_rms(estimate: CurvatureMap, truth: CurvatureMap, mask: np.ndarray | None = None) -> float:
    """RMS of the per-pixel (k1, k2) error norm over pixels valid in both maps."""
    if estimate.shape != truth.shape:
        raise ValueError(f"curvature grids differ: {estimate.shape} vs {truth.shape}")
    common = estimate.valid & truth.valid
    if mask is not None:
        common &= mask
    if not common.any():
        raise EmptyOverlapError("no pixels valid in both curvature maps")
    d1 = estimate.k1[common] - truth.k1[common]
    d2 = estimate.k2[common] - truth.k2[common]
    return float(np.sqrt(np.mean(d1 * d1 + d2 * d2)))


# --- Quad LS baseline -----------------------------------------------------------


def _ls_params(batch: NeighborhoodBatch, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched one-shot height-function fit; returns (params, ok)."""
    params = init_params_from_neighborhoods(batch, anchors)
    R, _, _ = rotation_xy(params[:, 0], params[:, 1])
    loc = (batch.points - anchors[:, None, :]) @ R.transpose(0, 2, 1)
    x, y, z = loc[..., 0], loc[..., 1], loc[..., 2]
    m = batch.mask.astype(float)
    A = np.stack([0.5 * x * x, x * y, 0.5 * y * y, np.ones_like(x)], axis=-1) * m[..., None]
    rhs = z * m
    AtA = A.transpose(0, 2, 1) @ A
    Atb = (A.transpose(0, 2, 1) @ rhs[..., None])[..., 0]
    d = np.sqrt(np.maximum(np.einsum("nii->ni", AtA), 1e-300))
    S = AtA / d[:, :, None] / d[:, None, :]
    ev = np.linalg.eigvalsh(S)
    ok = (batch.counts >= MIN_MEMBERS) & (ev[:, 0] > ev[:, -1] * 1e-12)
    sol = np.zeros((len(anchors), 4))
    if ok.any():
        sol[ok] = np.linalg.solve(S[ok], (Atb[ok] / d[ok])[..., None])[..., 0] / d[ok]
    # height z_local = quadratic + t0, and the residual convention uses t_z = -t0
    params[:, 2] = -sol[:, 3]
    params[:, 3:] = sol[:, :3]
    return params, ok


def fit_quadric_ls(n: Neighborhood) -> Quadric:
    """Quad LS: linear least-squares height fit in the covariance-normal frame."""
    if len(n) < MIN_MEMBERS:
        raise ValueError(f"neighbourhood has {len(n)} members; at least {MIN_MEMBERS} required")
    batch = NeighborhoodBatch(
        n.members[None], np.ones((1, len(n)), bool), n.distances[None], -np.ones((1, len(n)), int)
    )
    params, ok = _ls_params(batch, n.center[None])
    if not ok[0]:
        raise DegenerateFitError(3)
    return Quadric(params[0], n.center)


def fit_quadric_field_ls(s: Surface, config: SolverConfig = SolverConfig()) -> joint.QuadricField:
    pix = joint.anchor_pixels(s, config.stride)
    anchors = s.points.reshape(-1, 3)[pix]
    batch = gather_neighborhoods(s, anchors, joint.anchor_radii(anchors, config))
    params, ok = _ls_params(batch, anchors)
    return joint.QuadricField(anchors, params, pix, ok, s.shape)


# --- experiments ----------------------------------------------------------------

POSE_METHODS = ("ICP-ftf", "ICP-bundle", "Q-full", "J-ftf", "J-full")
CURVATURE_METHODS = ("Quad LS", "Quad IT", "J-ftf", "J-full")
ALL_METHODS = tuple(dict.fromkeys(POSE_METHODS + CURVATURE_METHODS))
OUTPUTS = ("poses", "drift", "curvature")


class ConfigurationError(ValueError):
    pass


def canonical_method(name: str) -> str:
    key = str(name).lower().replace("_", "-").replace(" ", "-")
    for m in ALL_METHODS:
        if m.lower().replace(" ", "-") == key:
            return m
    raise ConfigurationError(f"unknown method {name!r}; choose from {', '.join(ALL_METHODS)}")


def default_radius_scale(width: int) -> float:
    """Neighbourhood radius per metre of depth, scaled so a patch spans the same pixels at any width."""
    return BASE_RADIUS_SCALE * 640.0 / width


@dataclass
class ExperimentSpec:
    name: str
    scenes: list
    sigma_levels: list
    methods: list
    seed: int = 0
    repeats: int = 1
    frames: int = 5
    step_mm: float = 10.0
    size: tuple = synth.DEFAULT_SIZE
    stride: int = 4
    radius_scale: float | None = None
    outputs: list = field(default_factory=lambda: list(OUTPUTS))
    output_dir: str | None = None
    solver: dict = field(default_factory=dict)

    def config(self, threads: int = 1) -> SolverConfig:
        rs = self.radius_scale if self.radius_scale is not None else default_radius_scale(self.size[0])
        try:
            return SolverConfig(stride=self.stride, radius_scale=rs, threads=threads, **self.solver)
        except TypeError as exc:
            raise ConfigurationError(f"bad solver option: {exc}") from None

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]


def spec_from_dict(d: dict, base: Path | None = None) -> ExperimentSpec:
    if not isinstance(d, dict):
        raise ConfigurationError("experiment spec must be a mapping")
    known = set(ExperimentSpec.__dataclass_fields__) | {"scene", "dataset", "sigma"}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown spec field(s): {', '.join(sorted(unknown))}")
    scenes = d.get("scenes", d.get("scene", d.get("dataset")))
    if scenes is None:
        raise ConfigurationError("spec needs 'scene' or 'scenes'")
    scenes = [scenes] if isinstance(scenes, str) else list(scenes)
    resolved = []
    for sc in scenes:
        p = Path(sc)
        if base is not None and p.suffix in (".yaml", ".yml") and not p.is_absolute():
            p = base / p
        if p.suffix in (".yaml", ".yml"):
            if not p.exists():
                raise ConfigurationError(f"scene file not found: {p}")
            resolved.append(str(p))
        elif sc not in synth.shipped_scenes():
            raise ConfigurationError(f"unknown scene {sc!r}")
        else:
            resolved.append(sc)
    levels = d.get("sigma_levels", d.get("sigma", [1]))
    levels = [levels] if isinstance(levels, int) else list(levels)
    if not levels or any(not isinstance(v, int) or v < 0 for v in levels):
        raise ConfigurationError("sigma_levels must be non-negative integers")
    methods = d.get("methods")
    if not methods:
        raise ConfigurationError("spec needs a non-empty 'methods' list")
    methods = list(dict.fromkeys(canonical_method(m) for m in methods))
    outputs = list(d.get("outputs", OUTPUTS))
    for o in outputs:
        if o not in OUTPUTS:
            raise ConfigurationError(f"unknown output {o!r}")
    size = tuple(int(v) for v in d.get("size", synth.DEFAULT_SIZE))
    if len(size) != 2 or min(size) < 16:
        raise ConfigurationError("size must be [width, height] with both >= 16")
    frames = int(d.get("frames", 5))
    if frames < 2:
        raise ConfigurationError("experiments need at least 2 frames")
    spec = ExperimentSpec(
        name=str(d.get("name", "experiment")),
        scenes=resolved,
        sigma_levels=levels,
        methods=methods,
        seed=int(d.get("seed", 0)),
        repeats=int(d.get("repeats", 1)),
        frames=frames,
        step_mm=float(d.get("step_mm", 10.0)),
        size=size,
        stride=int(d.get("stride", 4)),
        radius_scale=None if d.get("radius_scale") in (None, "auto") else float(d["radius_scale"]),
        outputs=outputs,
        output_dir=d.get("output_dir"),
        solver=dict(d.get("solver") or {}),
    )
    if spec.repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    spec.config()  # validate solver options up front
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    """Load an experiment spec file or a shipped spec by name (``tables``, ``drift``, ``curvature``)."""
    p = Path(path)
    if not p.exists():
        name = p.name if p.suffix == ".spec" else f"{p.name}.spec"
        res = resources.files("jointquad") / "specs" / name
        if p.parent != Path(".") or not res.is_file():
            raise FileNotFoundError(f"experiment spec not found: {path}")
        return spec_from_dict(yaml.safe_load(res.read_text()))
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}") from None
    return spec_from_dict(data, p.parent)


def shipped_specs() -> list[str]:
    root = resources.files("jointquad") / "specs"
    return sorted(q.name[:-5] for q in root.iterdir() if q.name.endswith(".spec"))


@dataclass
class RunRecord:
    """Everything measured for one (scene, noise level, seed) condition."""

    scene: str
    sigma: int
    seed: int
    poses: dict = field(default_factory=dict)  # method -> list[RigidTransform]
    truth: list = field(default_factory=list)
    curvature: dict = field(default_factory=dict)  # method -> curvature RMS
    cost_traces: dict = field(default_factory=dict)  # label -> list of costs


def monotone(trace, rtol: float = 1e-12) -> bool:
    t = np.asarray(trace, dtype=float)
    return bool(np.all(t[1:] <= t[:-1] * (1.0 + rtol) + 1e-300))


class _Run:
    """Lazily computed method outputs for one condition; methods share intermediates."""

    def __init__(self, scene: str, sigma: int, seed: int, spec: ExperimentSpec, config: SolverConfig):
        self.config = config
        seq = synth.make_sequence(
            scene, spec.frames, spec.step_mm / 1000.0, synth.NoiseModel(sigma, seed), spec.size
        )
        self.truth = seq.poses
        self.gt_curv = seq.truth[0].curvature
        self.curv_mask = ~discontinuity_mask(seq.truth[0].depth)
        self.surfaces = [
            estimate_normals(backproject(f, k), config.normal_window) for k, f in enumerate(seq.frames)
        ]
        self.record = RunRecord(scene, sigma, seed, truth=seq.poses)
        self._cache: dict = {}

    def _once(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def trace(self, label, tr) -> None:
        self.record.cost_traces[label] = list(map(float, tr))
        if not monotone(tr):
            log.error("cost increased in %s: %s", label, tr)

    def icp_pairs(self):
        def go():
            out = []
            for k in range(1, len(self.surfaces)):
                r = icp.icp_point_to_plane(self.surfaces[k], self.surfaces[k - 1], RigidTransform(), self.config)
                self.trace(f"ICP-ftf[{k}]", r.cost_trace)
                out.append(r.pose)
            return out
        return self._once("icp_pairs", go)

    def icp_ftf(self):
        def go():
            poses = [RigidTransform()]
            for rel in self.icp_pairs():
                poses.append(poses[-1] @ rel)
            return poses
        return self._once("ICP-ftf", go)

    def icp_bundle(self):
        def go():
            r = icp.icp_bundle(self.surfaces, self.icp_ftf(), config=self.config)
            self.trace("ICP-bundle", r.cost_trace)
            return r.poses
        return self._once("ICP-bundle", go)

    def quad_it(self, k: int = 0):
        return self._once(("Quad IT", k), lambda: joint.fit_quadric_field(self.surfaces[k], self.config))

    def quad_ls(self):
        return self._once("Quad LS", lambda: fit_quadric_field_ls(self.surfaces[0], self.config))

    def j_ftf(self):
        def go():
            poses, first = [RigidTransform()], None
            for k, rel in enumerate(self.icp_pairs(), start=1):
                res = joint.solve_joint_ftf(
                    self.surfaces[k - 1], self.surfaces[k], rel, self.quad_it(k - 1), self.config
                )
                self.trace(f"J-ftf[{k}]", res.cost_trace)
                first = first or res
                poses.append(poses[-1] @ res.pose)
            return poses, first.curvature
        return self._once("J-ftf", go)

    def j_full(self):
        def go():
            res = joint.solve_joint_full(self.surfaces, self.icp_bundle(), self.quad_it(0), self.config)
            self.trace("J-full", res.cost_trace)
            return res.poses, res.curvature
        return self._once("J-full", go)

    def q_full(self):
        def go():
            res = joint.solve_q_full(self.surfaces, self.icp_bundle(), self.quad_it(0), self.config)
            self.trace("Q-full", res.cost_trace)
            return res.poses
        return self._once("Q-full", go)

    def poses(self, method: str):
        return {
            "ICP-ftf": self.icp_ftf,
            "ICP-bundle": self.icp_bundle,
            "Q-full": self.q_full,
            "J-ftf": lambda: self.j_ftf()[0],
            "J-full": lambda: self.j_full()[0],
        }[method]()

    def curvature(self, method: str) -> CurvatureMap:
        return {
            "Quad LS": lambda: self.quad_ls().curvature_map(),
            "Quad IT": lambda: self.quad_it(0).curvature_map(),
            "J-ftf": lambda: self.j_ftf()[1],
            "J-full": lambda: self.j_full()[1],
        }[method]()


def run_condition(scene: str, sigma: int, seed: int, spec: ExperimentSpec, config: SolverConfig) -> RunRecord:
    run = _Run(scene, sigma, seed, spec, config)
    for m in spec.methods:
        if "poses" in spec.outputs or "drift" in spec.outputs:
            if m in POSE_METHODS:
                run.record.poses[m] = run.poses(m)
        if "curvature" in spec.outputs and m in CURVATURE_METHODS:
            run.record.curvature[m] = curvature_rms(run.curvature(m), run.gt_curv, run.curv_mask)
    return run.record


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    records: list
    files: list = field(default_factory=list)

    def select(self, scene=None, sigma=None) -> list[RunRecord]:
        return [
            r for r in self.records
            if (scene is None or r.scene == scene) and (sigma is None or r.sigma == sigma)
        ]

    def trans_rms(self, scene: str, sigma: int, method: str) -> float:
        """Root-mean-square over seeds of each run's translational RMS."""
        v = [pose_error(r.poses[method], r.truth).translational_rms for r in self.select(scene, sigma)]
        return _rms(np.array(v))

    def rot_rms(self, scene: str, sigma: int, method: str) -> float:
        v = [pose_error(r.poses[method], r.truth).rotational_rms for r in self.select(scene, sigma)]
        return _rms(np.array(v))

    def drift(self, scene: str, sigma: int, method: str) -> np.ndarray:
        """Per-frame drift averaged over seeds."""
        return np.mean([drift_curve(r.poses[method], r.truth).drift for r in self.select(scene, sigma)], axis=0)

    def curv_rms(self, scene: str, sigma: int, method: str) -> float:
        return _rms(np.array([r.curvature[method] for r in self.select(scene, sigma)]))

    def cost_traces(self) -> list[tuple[str, list]]:
        out = []
        for r in self.records:
            for label, tr in r.cost_traces.items():
                out.append((f"{r.scene}/s{r.sigma}/seed{r.seed}/{label}", tr))
        return out


def _fmt(x: float) -> str:
    return repr(float(x))


def _scene_label(scene: str) -> str:
    return Path(scene).stem if scene.endswith((".yaml", ".yml")) else scene


def write_reports(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = report.spec
    files: list[Path] = []
    pose_methods = [m for m in spec.methods if m in POSE_METHODS]
    curv_methods = [m for m in spec.methods if m in CURVATURE_METHODS]

    def write(name, header, rows):
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        files.append(p)

    for scene in spec.scenes:
        label = _scene_label(scene)
        if "poses" in spec.outputs and pose_methods:
            rows = [
                [s, m, _fmt(report.trans_rms(scene, s, m)), _fmt(report.rot_rms(scene, s, m))]
                for s in spec.sigma_levels for m in pose_methods
            ]
            write(f"poses_{label}.csv", ["noise_level", "method", "trans_rms_m", "rot_rms_rad"], rows)
            for kind, fn in (("trans", report.trans_rms), ("rot", report.rot_rms)):
                rows = [[s] + [_fmt(fn(scene, s, m)) for m in pose_methods] for s in spec.sigma_levels]
                write(f"table_{label}_{kind}.csv", ["noise_level"] + pose_methods, rows)
        if "drift" in spec.outputs and pose_methods:
            for s in spec.sigma_levels:
                rows = []
                for m in pose_methods:
                    d = report.drift(scene, s, m)
                    rows += [[k, m, _fmt(v)] for k, v in enumerate(d)]
                write(f"drift_{label}_s{s}.csv", ["frame", "method", "drift_m"], rows)
    if "curvature" in spec.outputs and curv_methods:
        for s in spec.sigma_levels:
            rows = [
                [_scene_label(sc), m, _fmt(report.curv_rms(sc, s, m))] for sc in spec.scenes for m in curv_methods
            ]
            write(f"curvature_s{s}.csv", ["dataset", "method", "curv_rms"], rows)
    if pose_methods and "poses" in spec.outputs:
        rows = []
        for r in report.records:
            for m in pose_methods:
                a = pose_error(r.poses[m], r.truth)
                rel = relative_pose_error(r.poses[m], r.truth)
                rows.append([
                    _scene_label(r.scene), r.sigma, r.seed, m, _fmt(a.translational_rms), _fmt(a.rotational_rms),
                    _fmt(rel.translational_rms), _fmt(rel.rotational_rms),
                ])
        write(
            "runs.csv",
            ["dataset", "noise_level", "seed", "method", "trans_rms_m", "rot_rms_rad", "rel_trans_rms_m",
             "rel_rot_rms_rad"],
            rows,
        )
    rows = [[label, len(tr), _fmt(tr[0]), _fmt(tr[-1]), int(monotone(tr))] for label, tr in report.cost_traces()]
    write("cost_log.csv", ["run", "accepted_iterations", "initial_cost", "final_cost", "monotone"], rows)
    return files


def run_experiment(
    spec: ExperimentSpec | str | Path,
    output_dir: str | Path | None = None,
    threads: int = 1,
    seed: int | None = None,
) -> ExperimentReport:
    """Run every method on every condition; write CSVs when an output directory is known."""
    if not isinstance(spec, ExperimentSpec):
        spec = load_spec(spec)
    if seed is not None:
        spec.seed = seed
    config = spec.config(threads)
    records = []
    for scene in spec.scenes:
        for sigma in spec.sigma_levels:
            for s in spec.seeds:
                log.info("%s: scene=%s sigma=%d seed=%d", spec.name, _scene_label(scene), sigma, s)
                records.append(run_condition(scene, sigma, s, spec, config))
    report = ExperimentReport(spec, records)
    out = output_dir if output_dir is not None else spec.output_dir
    if out is not None:
        report.files = write_reports(report, out)
    return report


def trend_is_monotone(values: list[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


__all__ = [
    "PoseErrorReport", "DriftCurve", "pose_error", "relative_pose_error", "drift_curve", "curvature_rms",
    "discontinuity_mask", "fit_quadric_ls", "fit_quadric_field_ls", "ExperimentSpec", "ExperimentReport",
    "load_spec", "run_experiment", "EmptyOverlapError", "ConfigurationError",
]
