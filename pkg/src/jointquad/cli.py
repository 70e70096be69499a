"""Command-line interface: ``jointquad {generate,align,eval,bench}``.

A generated dataset is a directory holding depth frames, ground-truth
curvature maps, a trajectory file and ``manifest.yaml``; ``align`` and
``eval`` only ever read files the manifest names.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import yaml

from . import __version__, eval as ev, icp, joint, synth
from .config import SolverConfig
from .quadric import read_curvature_map, write_curvature_csv, write_curvature_map
from .rigid import RigidTransform, read_trajectory, write_trajectory
from .surface import backproject, estimate_normals, read_depth_frame, write_depth_frame

log = logging.getLogger("jointquad")

MANIFEST = "manifest.yaml"
METHODS = ("icp-ftf", "icp-bundle", "q-full", "j-ftf", "j-full")


class CliError(Exception):
    pass


# --- generate -------------------------------------------------------------------


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 160x120, got {text!r}") from None
    if w < 16 or h < 16:
        raise argparse.ArgumentTypeError("size must be at least 16x16")
    return w, h


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None
    probe = path / ".write_probe"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc.strerror}") from None
    return path


def cmd_generate(args) -> list[Path]:
    try:
        scene = synth.load_scene(args.scene)
    except (FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad scene {args.scene!r}: {exc}") from None
    if args.frames < 1:
        raise CliError("--frames must be >= 1")
    if args.sigma < 0:
        raise CliError("--sigma must be >= 0")
    if not args.step_mm > 0:
        raise CliError("--step-mm must be positive")
    out = _writable_dir(Path(args.out))
    seq = synth.make_sequence(
        scene, args.frames, args.step_mm / 1000.0, synth.NoiseModel(args.sigma, args.seed), args.size
    )
    written, entries = [], []
    for k, (frame, gt) in enumerate(zip(seq.frames, seq.truth)):
        names = {
            "depth": f"frame_{k:03d}.dfrm",
            "truth_depth": f"truth_depth_{k:03d}.dfrm",
            "truth_curvature": f"truth_curv_{k:03d}.curv",
        }
        write_depth_frame(out / names["depth"], frame)
        write_depth_frame(out / names["truth_depth"], dataclasses.replace(frame, depth=gt.depth))
        write_curvature_map(out / names["truth_curvature"], gt.curvature)
        entries.append(names)
        written += [out / v for v in names.values()]
    write_trajectory(out / "truth.txt", seq.poses)
    k = seq.frames[0].intrinsics
    manifest = {
        "scene": scene.name,
        "frames": entries,
        "poses": "truth.txt",
        "sigma_level": args.sigma,
        "seed": args.seed,
        "step_mm": args.step_mm,
        "size": list(args.size),
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
    }
    (out / MANIFEST).write_text(yaml.safe_dump(manifest, sort_keys=False))
    written += [out / "truth.txt", out / MANIFEST]
    return written


# --- align ----------------------------------------------------------------------


def load_manifest(dataset: Path) -> dict:
    path = dataset / MANIFEST if dataset.is_dir() else dataset
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    try:
        m = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise CliError(f"cannot parse manifest {path}: {exc}".replace("\n", " ")) from None
    if not isinstance(m, dict) or not m.get("frames"):
        raise CliError(f"manifest {path} lists no frames")
    root = path.parent
    for entry in m["frames"]:
        for key in ("depth",):
            if not (root / entry[key]).is_file():
                raise CliError(f"missing frame file: {root / entry[key]}")
    m["_root"] = root
    return m


def _solver_config(args, width: int) -> SolverConfig:
    changes = {}
    for f in dataclasses.fields(SolverConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            changes[f.name] = v
    if changes.get("radius_scale") is None:
        changes["radius_scale"] = ev.default_radius_scale(width)
    changes["threads"] = args.threads
    try:
        return SolverConfig(**changes)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_align(args) -> list[Path]:
    method = args.method
    m = load_manifest(Path(args.dataset))
    root = m["_root"]
    n = len(m["frames"])
    if method in ("icp-bundle", "q-full", "j-full", "icp-ftf", "j-ftf") and n < 2:
        raise CliError(f"{method} needs at least 2 frames, dataset has {n}")
    out = _writable_dir(Path(args.out) if args.out else root / method)
    frames = [read_depth_frame(root / e["depth"]) for e in m["frames"]]
    config = _solver_config(args, frames[0].width)
    surfaces = [estimate_normals(backproject(f, k), config.normal_window) for k, f in enumerate(frames)]

    def chain_icp():
        poses = [RigidTransform()]
        rels = []
        for k in range(1, n):
            r = icp.icp_point_to_plane(surfaces[k], surfaces[k - 1], RigidTransform(), config)
            rels.append(r.pose)
            poses.append(poses[-1] @ r.pose)
        return poses, rels

    curvature = None
    if method == "icp-ftf":
        poses, _ = chain_icp()
    elif method == "icp-bundle":
        poses = icp.icp_bundle(surfaces, chain_icp()[0], config=config).poses
    elif method == "j-ftf":
        _, rels = chain_icp()
        poses = [RigidTransform()]
        for k in range(1, n):
            field = joint.fit_quadric_field(surfaces[k - 1], config)
            res = joint.solve_joint_ftf(surfaces[k - 1], surfaces[k], rels[k - 1], field, config)
            curvature = curvature or res.curvature
            poses.append(poses[-1] @ res.pose)
    else:
        init = icp.icp_bundle(surfaces, chain_icp()[0], config=config).poses
        field = joint.fit_quadric_field(surfaces[0], config)
        solver = joint.solve_joint_full if method == "j-full" else joint.solve_q_full
        res = solver(surfaces, init, field, config)
        poses = res.poses
        if method == "j-full":
            curvature = res.curvature
    written = [out / "trajectory.txt"]
    write_trajectory(written[0], poses)
    if curvature is not None:
        write_curvature_map(out / "curvature.curv", curvature)
        write_curvature_csv(out / "curvature.csv", curvature)
        written += [out / "curvature.curv", out / "curvature.csv"]
    return written


# --- eval -----------------------------------------------------------------------


def _require(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p


def _label(path: Path) -> str:
    return path.parent.name if path.stem in ("trajectory", "curvature") else path.stem


def cmd_eval(args) -> list[Path]:
    if not args.estimate and not args.curvature:
        raise CliError("nothing to evaluate: pass --estimate and/or --curvature")
    labels = args.method or []
    written = []
    if args.estimate:
        if args.truth is None:
            raise CliError("--truth is required with --estimate")
        truth_path = _require(args.truth)
        est_paths = [_require(p) for p in args.estimate]
        if labels and len(labels) != len(est_paths):
            raise CliError("--method must be given once per --estimate")
        truth = read_trajectory(truth_path)
        rows = []
        for i, p in enumerate(est_paths):
            est = read_trajectory(p)
            try:
                rep = ev.pose_error(est, truth)
            except ValueError as exc:
                raise CliError(f"{p}: {exc}") from None
            name = labels[i] if labels else _label(p)
            rows.append([args.noise_level, name, repr(rep.translational_rms), repr(rep.rotational_rms)])
        report = Path(args.report)
        _writable_dir(report.parent)
        with open(report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["noise_level", "method", "trans_rms_m", "rot_rms_rad"])
            w.writerows(rows)
        written.append(report)
    if args.curvature:
        if args.truth_curvature is None:
            raise CliError("--truth-curvature is required with --curvature")
        truth_c = read_curvature_map(_require(args.truth_curvature))
        mask = None
        if args.truth_depth:
            mask = ~ev.discontinuity_mask(read_depth_frame(_require(args.truth_depth)).depth)
        rows = []
        for p in (_require(c) for c in args.curvature):
            try:
                value = ev.curvature_rms(read_curvature_map(p), truth_c, mask)
            except ValueError as exc:
                raise CliError(f"{p}: {exc}") from None
            rows.append([args.dataset_label, _label(p), repr(value)])
        report = Path(args.curvature_report)
        _writable_dir(report.parent)
        with open(report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "method", "curv_rms"])
            w.writerows(rows)
        written.append(report)
    return written


# --- bench ----------------------------------------------------------------------


def cmd_bench(args) -> list[Path]:
    try:
        spec = ev.load_spec(args.spec)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    out = args.out or spec.output_dir or f"results/{spec.name}"
    _writable_dir(Path(out))
    report = ev.run_experiment(spec, out, threads=args.threads, seed=args.seed)
    bad = [label for label, tr in report.cost_traces() if not ev.monotone(tr)]
    if bad:
        log.warning("non-monotone cost in %d run(s): %s", len(bad), ", ".join(bad))
    return report.files


# --- parser ---------------------------------------------------------------------


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver options (defaults as in SolverConfig)")
    for f in dataclasses.fields(SolverConfig):
        if f.name == "threads":
            continue
        kind = int if isinstance(f.default, int) and not isinstance(f.default, bool) else float
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"default {f.default if f.name != 'radius_scale' else 'auto'}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="jointquad", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    g.add_argument("--scene", required=True, help="shipped scene name or scene YAML file")
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--step-mm", type=float, default=10.0)
    g.add_argument("--sigma", type=int, default=0, help="noise level; each level is 1%% of depth")
    g.add_argument("--size", type=_size, default=synth.DEFAULT_SIZE, help="WIDTHxHEIGHT (default 160x120)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("align", parents=[common], help="estimate a trajectory for a dataset")
    a.add_argument("dataset", help="dataset directory or manifest file")
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--out", default=None, help="output directory (default DATASET/METHOD)")
    _add_solver_flags(a)
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", parents=[common], help="compare estimates with ground truth")
    e.add_argument("--truth", help="ground-truth trajectory file")
    e.add_argument("--estimate", action="append", default=[], help="estimated trajectory (repeatable)")
    e.add_argument("--method", action="append", default=[], help="label for each --estimate")
    e.add_argument("--noise-level", type=int, default=0)
    e.add_argument("--report", default="pose_report.csv")
    e.add_argument("--curvature", action="append", default=[], help="estimated curvature map (repeatable)")
    e.add_argument("--truth-curvature")
    e.add_argument("--truth-depth", help="ground-truth depth frame for masking discontinuities")
    e.add_argument("--dataset-label", default="dataset")
    e.add_argument("--curvature-report", default="curvature_report.csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="run an experiment spec")
    b.add_argument("spec", help="spec file, or a shipped spec name: " + ", ".join(ev.shipped_specs()))
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", 0)
    args.threads = getattr(args, "threads", 1)
    verbose = getattr(args, "verbose", 0)
    logging.basicConfig(
        level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("jointquad: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        written = args.func(args)
    except CliError as exc:
        print(f"jointquad: error: {exc}", file=sys.stderr)
        return 1
    except (ev.ConfigurationError, FileNotFoundError, ValueError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"jointquad: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
