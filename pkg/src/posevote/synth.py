"""Synthetic scene generation and the benchmark harness.

Scenes follow the standard voting-benchmark protocol: scatter scene points
uniformly in the unit box, project the inlier share through a fixed true
pose, perturb the 3D coordinates with Gaussian noise, and give the outlier
share image coordinates re-projected through independent random poses (so
outliers are geometrically plausible, not uniform noise).

Everything is deterministic under the scene seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import RejectionOverflow
from .geometry import (
    DOMAIN_HI,
    DOMAIN_LO,
    AnalyticConstants,
    Correspondence,
    Pose,
    corr_array,
)
from . import grid as grid_mod

DEFAULT_TRUE_POSE = Pose(0.3, 0.2, 0.1, 0.6)


@dataclass(frozen=True)
class SceneConfig:
    n: int
    inlier_ratio: float = 0.1
    noise_sigma: float = 0.02
    true_pose: Pose = DEFAULT_TRUE_POSE
    seed: int = 0
    epsilon: float = 0.03

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0 < self.inlier_ratio <= 1):
            raise ValueError("inlier_ratio must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.true_pose.in_domain():
            raise ValueError("true_pose must lie in Q = [0,1]^3 x [-1,1]")


@dataclass
class SceneTruth:
    true_pose: Pose
    inlier_mask: np.ndarray
    redraws: int


def _project_arr(pose: np.ndarray, w: np.ndarray) -> tuple[float, float, bool]:
    """(xi, eta, ok) for one pose row and one scene point; ok=False on degeneracy."""
    u = w[0] - pose[0]
    s = w[1] - pose[1]
    denom = u + pose[3] * s
    rho = math.hypot(u, s)
    if abs(denom) <= 1e-12 or rho <= 1e-12:
        return 0.0, 0.0, False
    return (s - pose[3] * u) / denom, (w[2] - pose[2]) / rho, True


def generate_scene(cfg: SceneConfig, consts: AnalyticConstants | None = None):
    """Build a synthetic correspondence set with ground truth.

    Inliers: w ~ U[0,1]^3, (xi, eta) projected through the true pose, then
    Gaussian noise added to the 3D coordinates (noise goes on the scene
    point, not on the image coordinates).  Outliers: noisy w re-projected
    through an independent uniform random pose.  Samples whose image
    coordinates exceed the frame bound, whose noisy point leaves the unit
    box, or that hit a degenerate projection are redrawn.
    """
    consts = consts or AnalyticConstants()
    rng = np.random.default_rng(cfg.seed)
    b = consts.b_img
    n_in = math.ceil(cfg.n * cfg.inlier_ratio)
    budget = 1000 * cfg.n
    redraws = 0
    tp = cfg.true_pose.as_array()

    rows = np.empty((cfg.n, 5))
    inlier_mask = np.zeros(cfg.n, dtype=bool)
    inlier_mask[:n_in] = True

    for i in range(cfg.n):
        inlier = i < n_in
        while True:
            w = rng.uniform(0.0, 1.0, 3)
            if inlier:
                xi, eta, ok = _project_arr(tp, w)
                if ok and abs(xi) <= b and abs(eta) <= b:
                    if cfg.noise_sigma > 0:
                        w_noisy = w + rng.normal(0.0, cfg.noise_sigma, 3)
                    else:
                        w_noisy = w
                    if np.all(w_noisy >= 0.0) and np.all(w_noisy <= 1.0):
                        rows[i] = (*w_noisy, xi, eta)
                        break
            else:
                if cfg.noise_sigma > 0:
                    w_noisy = w + rng.normal(0.0, cfg.noise_sigma, 3)
                else:
                    w_noisy = w
                pose = rng.uniform(DOMAIN_LO, DOMAIN_HI)
                if np.all(w_noisy >= 0.0) and np.all(w_noisy <= 1.0):
                    xi, eta, ok = _project_arr(pose, w_noisy)
                    if ok and abs(xi) <= b and abs(eta) <= b:
                        rows[i] = (*w_noisy, xi, eta)
                        break
            redraws += 1
            if redraws > budget:
                raise RejectionOverflow(
                    f"scene generation exceeded {budget} redraws; config is pathological"
                )

    corrs = [Correspondence(*row) for row in rows]
    return corrs, SceneTruth(cfg.true_pose, inlier_mask, redraws)


def ingest_filter(corrs, consts: AnalyticConstants):
    """Drop correspondences violating the basic ingest invariants.

    Kept: coordinates in the unit box (tolerantly) and |xi|, |eta| within
    the frame bound.  Returns (kept, n_dropped); droppers warn by count,
    never fail the run.
    """
    kept = []
    dropped = 0
    for c in corrs:
        if (
            -0.05 <= c.w1 <= 1.05
            and -0.05 <= c.w2 <= 1.05
            and -0.05 <= c.w3 <= 1.05
            and abs(c.xi) <= consts.b_img
            and abs(c.eta) <= consts.b_img
        ):
            kept.append(c)
        else:
            dropped += 1
    return kept, dropped


def condition_filter(
    corrs,
    epsilon: float,
    consts: AnalyticConstants,
    grid: grid_mod.GridSpec | None = None,
    check_coarse: bool = True,
):
    """Keep surfaces whose condition-satisfying near-incident pairs are
    guaranteed to be captured by the solvers' bucketing.

    For each surface, consider the fine-grid vertices within frame
    distance epsilon that satisfy conditions (i)-(iii) at level a (only
    those pairs carry any counting guarantee).  The surface is kept when
    every such vertex's cell is among the surface's marked fine cells and
    (when the primal-dual solver would run a coarse stage on this scene)
    its coarse cell is covered by the surface's padded coarse marking.
    The check uses the solvers' own bucketing primitives, so a filtered
    scene has a zero miss rate by construction even with the pragmatic
    kappa stretch c_grid.

    Returns (kept_corrs, kept_mask, n_dropped).
    """
    from .geometry import SurfaceSigma
    from .primal_dual import _SQRT2, assign_primal, choose_regime, coarse_grid

    if grid is None:
        grid = grid_mod.build_grid(epsilon, consts)
    W = corr_array(corrs)
    V = grid.vertex_array()
    a = consts.a
    n = W.shape[0]

    params = choose_regime(n, epsilon, consts, grid.num_cells)
    do_coarse = check_coarse and params.regime != "primal-only"
    if do_coarse:
        cg = coarse_grid(params.delta1, consts)

    keep = np.ones(n, dtype=bool)
    for si in range(n):
        w1, w2, w3, xi, eta = W[si]
        u = w1 - V[:, 0]
        s = w2 - V[:, 1]
        denom = u + V[:, 3] * s
        r2 = u * u + s * s
        with np.errstate(divide="ignore", invalid="ignore"):
            xi_v = (s - V[:, 3] * u) / denom
            eta_v = (w3 - V[:, 2]) / np.sqrt(r2)
        fd = np.maximum(np.abs(xi_v - xi), np.abs(eta_v - eta))
        bad = (np.abs(denom) <= 1e-12) | (r2 <= 1e-24)
        fd[bad] = np.inf
        cond = (np.abs(denom) >= a) & (r2 >= a) & (np.abs(u + xi * s) >= a)
        near = np.nonzero((fd <= epsilon) & cond)[0]
        if near.size == 0:
            continue
        sigma = SurfaceSigma(Correspondence(*W[si]))
        marked = grid_mod.cells_crossed(sigma, grid, consts)
        marked_flat = {grid.flat(c) for c in marked}
        if any(int(f) not in marked_flat for f in near):
            keep[si] = False
            continue
        if do_coarse:
            cmap, _ = assign_primal(
                [Correspondence(*W[si])],
                params.delta1,
                consts,
                neighbor_mode="slack",
                epsilon=epsilon,
            )
            coarse_flat = {cg.flat(c) for c in cmap}
            for f in near:
                cidx = cg.cell_of(V[int(f)])
                if cidx is None or cg.flat(cidx) not in coarse_flat:
                    keep[si] = False
                    break
    kept = [c for c, k in zip(corrs, keep) if k]
    return kept, keep, int(np.sum(~keep))


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class BenchRecord:
    method: str
    n: int
    epsilon: float
    wall_time: float
    recovered_pose: Pose
    pose_error: np.ndarray
    counters: dict = field(default_factory=dict)
    seed: int = 0
    failed: bool = False
    error: str = ""


def run_benchmark(
    methods,
    scene_configs,
    consts: AnalyticConstants | None = None,
    repetitions: int = 5,
    early_exit: bool = True,
) -> list[BenchRecord]:
    """Time each method on each scene; median wall time over repetitions.

    One warm-up run per (method, scene) is discarded so jit compilation and
    cache effects do not pollute the numbers.  Per-record failures are
    captured and the sweep continues.
    """
    from .solvers import solve_scene  # local import: solvers pulls all methods

    consts = consts or AnalyticConstants()
    records = []
    for cfg in scene_configs:
        corrs, truth = generate_scene(cfg, consts)
        for method in methods:
            try:
                elapsed = []
                result = None
                for rep in range(repetitions + 1):
                    t0 = time.perf_counter()
                    result = solve_scene(method, corrs, cfg.epsilon, consts, early_exit=early_exit)
                    t1 = time.perf_counter()
                    if rep > 0:  # discard warm-up
                        elapsed.append(t1 - t0)
                pose = result.poses[0][0]
                err = np.abs(pose.as_array() - truth.true_pose.as_array())
                records.append(
                    BenchRecord(
                        method=method,
                        n=cfg.n,
                        epsilon=cfg.epsilon,
                        wall_time=float(np.median(elapsed)),
                        recovered_pose=pose,
                        pose_error=err,
                        counters=dict(result.counters),
                        seed=cfg.seed,
                    )
                )
            except Exception as exc:  # noqa: BLE001 - sweep must continue
                records.append(
                    BenchRecord(
                        method=method,
                        n=cfg.n,
                        epsilon=cfg.epsilon,
                        wall_time=float("nan"),
                        recovered_pose=Pose(0, 0, 0, 0),
                        pose_error=np.full(4, np.nan),
                        seed=cfg.seed,
                        failed=True,
                        error=f"{type(exc).__name__}: {exc}",
                    )
                )
    return records


def compare_methods(records: list[BenchRecord], out_dir=None):
    """Per-config fastest method and speedup factors; optional plot files.

    Plot-data files (one per method) carry tab-separated lines
    "epsilon n median_seconds err_x err_y err_z err_kappa" under a '#'
    header, ready for external plotting.
    """
    from .errors import MismatchedConfigs

    ok_records = [r for r in records if not r.failed]
    by_config: dict[tuple, dict[str, BenchRecord]] = {}
    for r in ok_records:
        by_config.setdefault((r.n, r.epsilon, r.seed), {})[r.method] = r
    comparable = {k: v for k, v in by_config.items() if len(v) >= 2}
    if not comparable and len({r.method for r in ok_records}) >= 2:
        raise MismatchedConfigs("no configuration was run by two or more methods")
    summary = []
    for key in sorted(comparable):
        group = comparable[key]
        fastest = min(group.values(), key=lambda r: r.wall_time)
        entry = {
            "n": key[0],
            "epsilon": key[1],
            "seed": key[2],
            "fastest": fastest.method,
            "times": {m: r.wall_time for m, r in group.items()},
            "speedup_vs_fastest": {
                m: r.wall_time / fastest.wall_time for m, r in group.items()
            },
            "pose_errors": {m: r.pose_error.tolist() for m, r in group.items()},
        }
        summary.append(entry)

    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for method in sorted({r.method for r in ok_records}):
            path = out / f"bench_{method.replace('-', '_')}.dat"
            with open(path, "w") as fh:
                fh.write("# epsilon\tn\tmedian_seconds\terr_x\terr_y\terr_z\terr_kappa\n")
                for r in sorted(
                    (r for r in ok_records if r.method == method),
                    key=lambda r: (r.epsilon, r.n, r.seed),
                ):
                    err = "\t".join(f"{e:.6g}" for e in r.pose_error)
                    fh.write(f"{r.epsilon:.6g}\t{r.n}\t{r.wall_time:.6g}\t{err}\n")
    return summary
