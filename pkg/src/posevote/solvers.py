"""Uniform front end over the three counting methods plus the oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import AnalyticConstants, Pose, corr_array, oracle_counts
from .grid import build_grid, naive_count
from .octree import canonical_solve, leaf_pose, top_leaves
from .primal_dual import primal_dual_solve

METHODS = ("naive", "primal-dual", "canonical", "oracle")


@dataclass
class SolveResult:
    method: str
    epsilon: float
    epsilon_effective: float
    poses: list  # [(Pose, count), ...] best first
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0


def _top_k_from_flat(counts: np.ndarray, grid, k: int) -> list:
    order = np.argsort(-counts, kind="stable")[:k]
    return [(grid.center(grid.unflat(int(f))), int(counts[f])) for f in order if counts[f] > 0]


def solve_scene(
    method: str,
    surfaces,
    epsilon: float,
    consts: AnalyticConstants | None = None,
    top_k: int = 1,
    early_exit: bool = False,
) -> SolveResult:
    """Run one method end-to-end and return its ranked pose candidates."""
    consts = consts or AnalyticConstants()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    t0 = time.perf_counter()
    eps_eff = epsilon
    counters: dict = {}
    if method == "naive":
        hist = naive_count(surfaces, epsilon, consts)
        poses = [(hist.grid.center(i), c) for i, c in hist.top_k(top_k)]
        counters = {
            "skipped_columns": hist.skipped_columns,
            "marked_cells": hist.marked_cells,
        }
    elif method == "primal-dual":
        out = primal_dual_solve(surfaces, epsilon, consts)
        poses = _top_k_from_flat(out.counts, out.fine_grid, top_k)
        counters = {
            k: v for k, v in out.diagnostics.items() if not isinstance(v, (tuple, list))
        }
    elif method == "canonical":
        result, _pose, _w = canonical_solve(surfaces, epsilon, consts, early_exit=early_exit)
        eps_eff = result.epsilon_effective
        poses = [
            (leaf_pose(result, result.leaf_indices[i]), int(result.leaf_weights[i]))
            for i in np.argsort(-result.leaf_weights, kind="stable")[:top_k]
        ]
        counters = {
            "levels": result.levels,
            "pruned_nodes": result.pruned_nodes,
            "leaf_count": int(result.leaf_weights.size),
            "surfaces_per_level": tuple(st["surfaces"] for st in result.level_stats),
        }
    else:  # oracle
        grid = build_grid(epsilon, consts)
        counts = oracle_counts(grid.vertex_array(), corr_array(surfaces), epsilon)
        poses = _top_k_from_flat(counts, grid, top_k)
        counters = {"vertices": int(grid.num_cells)}
    wall = time.perf_counter() - t0
    if not poses:
        poses = [(Pose(0.5, 0.5, 0.5, 0.0), 0)]
    return SolveResult(
        method=method,
        epsilon=epsilon,
        epsilon_effective=eps_eff,
        poses=poses,
        counters=counters,
        wall_time=wall,
    )
