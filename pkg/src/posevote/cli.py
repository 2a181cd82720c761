"""Command-line interface: generate / solve / bench / compare / oracle.

File formats
------------
Correspondences: one per line, "w1,w2,w3,xi,eta" (decimal point, comma
separated); '#'-prefixed comment lines allowed.  Scene coordinates outside
the unit box are normalized in by a recorded similarity transform (shift +
uniform scale; the image coordinates are invariant under it) and output
poses are reported in both normalized and original coordinates.

Sweep files: one benchmark configuration per line,
"method,n,epsilon,inlier_ratio,noise_sigma,seed".

Output documents are line-oriented "key=value" records, diffable and
reproducible: seed, constants, effective epsilon and version are embedded;
byte-identical reruns are expected apart from wall_time lines.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .errors import EmptyInput, ParseError, PoseVoteError
from .geometry import AnalyticConstants, Correspondence, Pose
from .solvers import METHODS, solve_scene
from .synth import SceneConfig, compare_methods, generate_scene, run_benchmark


@dataclass(frozen=True)
class RunConfig:
    method: str
    epsilon: float
    input_path: str | None = None
    output_path: str | None = None
    top_k: int = 1
    seed: int = 0
    early_exit: bool = False
    constants: AnalyticConstants = AnalyticConstants()

    def __post_init__(self):
        if not (0 < self.epsilon < 0.5):
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class Normalization:
    """Similarity transform taking raw scene coordinates into [0,1]^3."""

    offset: tuple
    scale: float

    @property
    def identity(self) -> bool:
        return self.scale == 1.0 and all(o == 0.0 for o in self.offset)

    def denormalize_pose(self, p: Pose) -> Pose:
        return Pose(
            p.x * self.scale + self.offset[0],
            p.y * self.scale + self.offset[1],
            p.z * self.scale + self.offset[2],
            p.kappa,
        )


def parse_correspondences(path: str):
    """Read a correspondence file; returns (corrs, Normalization).

    Raises ParseError with the offending line number, EmptyInput when no
    data lines are present.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(",")
            if len(parts) != 5:
                raise ParseError(f"expected 5 comma-separated fields, got {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            rows.append(vals)
    if not rows:
        raise EmptyInput(f"no correspondences in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    w = arr[:, :3]
    if np.all(w >= 0.0) and np.all(w <= 1.0):
        norm = Normalization(offset=(0.0, 0.0, 0.0), scale=1.0)
    else:
        lo = w.min(axis=0)
        scale = float(max((w.max(axis=0) - lo).max(), 1e-12))
        arr[:, :3] = (w - lo) / scale
        norm = Normalization(offset=tuple(float(v) for v in lo), scale=scale)
    return [Correspondence(*row) for row in arr], norm


def write_correspondences(path: str, corrs, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for c in corrs:
            fh.write(f"{c.w1:.17g},{c.w2:.17g},{c.w3:.17g},{c.xi:.17g},{c.eta:.17g}\n")


def _emit(lines, out_path: str | None):
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _constants_lines(c: AnalyticConstants):
    return [
        f"constants.{name}={getattr(c, name):.12g}"
        for name in (
            "a", "c1", "c2", "c_kappa", "c_grid", "gamma",
            "alpha", "beta", "b_img", "span_cells",
        )
    ]


def _error_record(exc: Exception, out_path: str | None) -> int:
    lines = [
        "record=error",
        f"type={type(exc).__name__}",
        f"message={exc}",
        "end=error",
    ]
    _emit(lines, out_path)
    return 1


def _constants_from_args(args) -> AnalyticConstants:
    kwargs = {}
    for name in ("a", "c_grid", "gamma", "alpha", "b_img", "span_cells"):
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None:
            kwargs[name] = val
    return AnalyticConstants(**kwargs) if kwargs else AnalyticConstants()


def _add_constant_flags(p: argparse.ArgumentParser):
    p.add_argument("--a", type=float, default=None, help="separation constant (default 0.2)")
    p.add_argument("--c-grid", dest="c_grid", type=float, default=None,
                   help="kappa grid stretch (default 2)")
    p.add_argument("--gamma", type=float, default=None, help="dual residual factor fallback")
    p.add_argument("--alpha", type=float, default=None, help="configured inflation bound")
    p.add_argument("--b-img", dest="b_img", type=float, default=None,
                   help="image frame bound on |xi|, |eta| (default 3)")
    p.add_argument("--span-cells", dest="span_cells", type=float, default=None,
                   help="per-column marking cap in cells (default 2)")


def cmd_generate(args) -> int:
    consts = _constants_from_args(args)
    tp = Pose(*args.true_pose)
    cfg = SceneConfig(
        n=args.n,
        inlier_ratio=args.inlier_ratio,
        noise_sigma=args.noise_sigma,
        true_pose=tp,
        seed=args.seed,
        epsilon=args.epsilon,
    )
    corrs, truth = generate_scene(cfg, consts)
    header = (
        f"posevote synthetic scene v{__version__}\n"
        f"n={cfg.n} inlier_ratio={cfg.inlier_ratio} noise_sigma={cfg.noise_sigma} "
        f"seed={cfg.seed}\n"
        f"true_pose={tp.x},{tp.y},{tp.z},{tp.kappa}\n"
        f"redraws={truth.redraws}"
    )
    write_correspondences(args.out, corrs, header)
    print(f"wrote {len(corrs)} correspondences to {args.out}")
    return 0


def _solve_like(args, method: str) -> int:
    consts = _constants_from_args(args)
    try:
        cfg = RunConfig(
            method=method,
            epsilon=args.epsilon,
            input_path=args.input,
            output_path=args.output,
            top_k=args.top_k,
            seed=args.seed,
            early_exit=getattr(args, "early_exit", False),
            constants=consts,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        corrs, norm = parse_correspondences(cfg.input_path)
        result = solve_scene(
            cfg.method, corrs, cfg.epsilon, consts,
            top_k=cfg.top_k, early_exit=cfg.early_exit,
        )
    except PoseVoteError as exc:
        return _error_record(exc, cfg.output_path)

    lines = [
        "record=solve",
        f"version={__version__}",
        f"method={result.method}",
        f"epsilon={result.epsilon:.12g}",
        f"epsilon_effective={result.epsilon_effective:.12g}",
        f"seed={cfg.seed}",
        f"top_k={cfg.top_k}",
        f"early_exit={int(cfg.early_exit)}",
        f"n_input={len(corrs)}",
        f"normalized={int(not norm.identity)}",
    ]
    if not norm.identity:
        lines.append(
            "normalization=offset:%.12g,%.12g,%.12g;scale:%.12g"
            % (*norm.offset, norm.scale)
        )
    lines += _constants_lines(consts)
    lines.append(f"wall_time_s={result.wall_time:.6f}")
    for key in sorted(result.counters):
        lines.append(f"counter.{key}={result.counters[key]}")
    for rank, (pose, count) in enumerate(result.poses):
        lines.append(
            f"pose.{rank}={pose.x:.12g},{pose.y:.12g},{pose.z:.12g},{pose.kappa:.12g}"
        )
        lines.append(f"pose.{rank}.count={count}")
        if not norm.identity:
            orig = norm.denormalize_pose(pose)
            lines.append(
                f"pose.{rank}.original={orig.x:.12g},{orig.y:.12g},{orig.z:.12g},{orig.kappa:.12g}"
            )
    lines.append("end=solve")
    _emit(lines, cfg.output_path)
    return 0


def cmd_solve(args) -> int:
    return _solve_like(args, args.method)


def cmd_oracle(args) -> int:
    return _solve_like(args, "oracle")


def _parse_sweep(path: str):
    configs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(",")
            if len(parts) != 6:
                raise ParseError("expected method,n,epsilon,inlier_ratio,noise_sigma,seed", lineno)
            method = parts[0].strip()
            if method not in METHODS:
                raise ParseError(f"unknown method {method!r}", lineno)
            try:
                n = int(parts[1])
                eps = float(parts[2])
                ratio = float(parts[3])
                sigma = float(parts[4])
                seed = int(parts[5])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            configs.append((method, SceneConfig(n=n, epsilon=eps, inlier_ratio=ratio,
                                                noise_sigma=sigma, seed=seed)))
    return configs


def _record_lines(r):
    err = ",".join(f"{e:.12g}" for e in r.pose_error)
    lines = [
        "record=bench",
        f"method={r.method}",
        f"n={r.n}",
        f"epsilon={r.epsilon:.12g}",
        f"seed={r.seed}",
        f"failed={int(r.failed)}",
    ]
    if r.failed:
        lines.append(f"error={r.error}")
    else:
        lines += [
            f"wall_time_s={r.wall_time:.6f}",
            f"pose={r.recovered_pose.x:.12g},{r.recovered_pose.y:.12g},"
            f"{r.recovered_pose.z:.12g},{r.recovered_pose.kappa:.12g}",
            f"pose_error={err}",
        ]
    lines.append("end=bench")
    return lines


def cmd_bench(args) -> int:
    consts = _constants_from_args(args)
    try:
        configs = _parse_sweep(args.sweep)
    except PoseVoteError as exc:
        return _error_record(exc, None)
    if not configs:
        print("warning: empty sweep, nothing to do", file=sys.stderr)
        return 0
    from collections import defaultdict

    by_cfg = defaultdict(list)
    for method, cfg in configs:
        by_cfg[cfg].append(method)
    records = []
    for cfg, methods in by_cfg.items():
        records.extend(
            run_benchmark(methods, [cfg], consts, repetitions=args.reps,
                          early_exit=args.early_exit)
        )
    lines = []
    for r in records:
        lines += _record_lines(r)
    _emit(lines, args.out)
    if args.plot_dir:
        compare_methods(records, out_dir=args.plot_dir)
    n_failed = sum(r.failed for r in records)
    if n_failed:
        print(f"warning: {n_failed}/{len(records)} records failed", file=sys.stderr)
    return 0


def _parse_records(path: str):
    from .synth import BenchRecord

    records = []
    current = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            if key == "record":
                current = {}
            elif key == "end":
                if val == "bench" and current.get("failed") == "0":
                    pose = [float(x) for x in current["pose"].split(",")]
                    err = [float(x) for x in current["pose_error"].split(",")]
                    records.append(
                        BenchRecord(
                            method=current["method"],
                            n=int(current["n"]),
                            epsilon=float(current["epsilon"]),
                            wall_time=float(current["wall_time_s"]),
                            recovered_pose=Pose(*pose),
                            pose_error=np.asarray(err),
                            seed=int(current["seed"]),
                        )
                    )
            else:
                current[key] = val
    return records


def cmd_compare(args) -> int:
    records = _parse_records(args.records)
    summary = compare_methods(records, out_dir=args.plot_dir)
    lines = []
    for entry in summary:
        lines.append("record=compare")
        lines.append(f"n={entry['n']}")
        lines.append(f"epsilon={entry['epsilon']:.12g}")
        lines.append(f"seed={entry['seed']}")
        lines.append(f"fastest={entry['fastest']}")
        for m in sorted(entry["times"]):
            lines.append(f"time.{m}={entry['times'][m]:.6f}")
            lines.append(f"speedup.{m}={entry['speedup_vs_fastest'][m]:.4f}")
        lines.append("end=compare")
    _emit(lines, args.out)
    return 0


def _pose4(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected x,y,z,kappa")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="posevote",
        description="Camera pose estimation by approximate-incidence voting.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic correspondence file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--inlier-ratio", dest="inlier_ratio", type=float, default=0.1)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epsilon", type=float, default=0.03)
    g.add_argument("--true-pose", dest="true_pose", type=_pose4, default=(0.3, 0.2, 0.1, 0.6))
    g.add_argument("--out", required=True)
    _add_constant_flags(g)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="estimate the pose from a correspondence file")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", default=None)
    s.add_argument("--top-k", dest="top_k", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--early-exit", dest="early_exit", action="store_true")
    _add_constant_flags(s)
    s.set_defaults(func=cmd_solve)

    o = sub.add_parser("oracle", help="brute-force counts at every grid vertex")
    o.add_argument("--epsilon", type=float, required=True)
    o.add_argument("--input", required=True)
    o.add_argument("--output", default=None)
    o.add_argument("--top-k", dest="top_k", type=int, default=1)
    o.add_argument("--seed", type=int, default=0)
    _add_constant_flags(o)
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("bench", help="run a benchmark sweep file")
    b.add_argument("--sweep", required=True)
    b.add_argument("--out", default=None)
    b.add_argument("--plot-dir", dest="plot_dir", default=None)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--early-exit", dest="early_exit", action="store_true")
    _add_constant_flags(b)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("compare", help="summarize benchmark records")
    c.add_argument("--records", required=True)
    c.add_argument("--out", default=None)
    c.add_argument("--plot-dir", dest="plot_dir", default=None)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PoseVoteError as exc:
        return _error_record(exc, getattr(args, "output", None))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
