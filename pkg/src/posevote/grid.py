"""Anisotropic grid voting: the baseline incidence counter.

A grid over Q = [0,1]^3 x [-1,1] is built with cell dimensions

    eps x eps x 2*sqrt(2)*eps x 2*c_grid*eps

so that one cell absorbs the (z, kappa) displacement of any pose within
frame distance eps of a surface (the z part is exact; the kappa stretch
c_grid is a pragmatic choice checked empirically against the oracle).

Each surface is bucketed into every cell it can cross, column by column:
for each (x, y) cell footprint the parametric (z, kappa) of the surface is
interval-evaluated over the column rectangle and every overlapping cell is
marked.  Interval evaluation never misses a crossed cell, so the resulting
histogram dominates the exact count at the cell centers (the read-out
vertices of the shifted grid).

Also hosts the brute-force oracle wrapper and the per-cell exact counting
variant used to cross-check every solver in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._accel import USING_NUMBA, njit
from .errors import EmptyHistogram, InvalidEpsilon
from .geometry import (
    DOMAIN_HI,
    DOMAIN_LO,
    AnalyticConstants,
    Pose,
    SurfaceSigma,
    corr_array,
    frame_distances,
    oracle_counts,
)


class CellIndex(NamedTuple):
    i: int
    j: int
    k: int
    l: int


@dataclass(frozen=True)
class GridSpec:
    """Half-open anisotropic grid over a box domain.

    Every point belongs to exactly one cell: cell (i,j,k,l) covers
    [origin + idx*dims, origin + (idx+1)*dims) per axis.  The grid may
    overshoot the domain's top edge by up to one cell (counts are ceiled).
    """

    origin: np.ndarray
    cell_dims: np.ndarray
    counts: np.ndarray
    half_open: bool = True

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "cell_dims", np.asarray(self.cell_dims, dtype=np.float64))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if np.any(self.cell_dims <= 0):
            raise ValueError("cell_dims must be strictly positive")
        if np.any(self.counts < 1):
            raise ValueError("counts must be >= 1 per axis")

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.counts * self.cell_dims

    def cell_of(self, p: Pose | np.ndarray) -> CellIndex | None:
        """The unique cell containing p, or None when p is outside the grid."""
        arr = p.as_array() if isinstance(p, Pose) else np.asarray(p, dtype=np.float64)
        idx = np.floor((arr - self.origin) / self.cell_dims).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= self.counts):
            return None
        return CellIndex(*idx.tolist())

    def center(self, idx: CellIndex) -> Pose:
        """Cell center: the read-out vertex of the shifted grid."""
        c = self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_dims
        return Pose(*c.tolist())

    def flat(self, idx: CellIndex) -> int:
        ni, nj, nk_, nl = self.counts
        return ((idx[0] * nj + idx[1]) * nk_ + idx[2]) * nl + idx[3]

    def unflat(self, flat: int) -> CellIndex:
        ni, nj, nk_, nl = (int(v) for v in self.counts)
        l = flat % nl
        flat //= nl
        k = flat % nk_
        flat //= nk_
        j = flat % nj
        i = flat // nj
        return CellIndex(int(i), int(j), int(k), int(l))

    def vertex_array(self) -> np.ndarray:
        """All cell centers as an (m, 4) array in C (lexicographic) order."""
        axes = [
            self.origin[d] + (np.arange(self.counts[d]) + 0.5) * self.cell_dims[d]
            for d in range(4)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def build_grid(epsilon: float, consts: AnalyticConstants) -> GridSpec:
    """The frame-distance grid over Q with dims (eps, eps, 2*sqrt(2)*eps, 2*c_grid*eps)."""
    if not (0 < epsilon < 1):
        raise InvalidEpsilon(f"epsilon must lie in (0, 1), got {epsilon}")
    dims = np.array(
        [epsilon, epsilon, 2.0 * math.sqrt(2.0) * epsilon, 2.0 * consts.c_grid * epsilon]
    )
    extent = DOMAIN_HI - DOMAIN_LO
    counts = np.ceil(extent / dims - 1e-9).astype(np.int64)
    return GridSpec(origin=DOMAIN_LO.copy(), cell_dims=dims, counts=counts)


# ---------------------------------------------------------------------------
# Column-wise interval bucketing
# ---------------------------------------------------------------------------
#
# For one surface and one (x, y) column rectangle, the parametric forms
#     z     = w3 - eta * sqrt(u^2 + s^2)
#     kappa = (s - xi*u) / (u + xi*s)
# are evaluated with interval arithmetic in u = w1 - x, s = w2 - y.
# Columns whose denominator interval reaches below a_skip are condition
# violations and are skipped (tallied).


@njit(cache=True)
def _column_spans(w3, xi, eta, ulo, uhi, slo, shi, a_skip, cap_z, cap_k):
    """Interval (z, kappa) spans over one column; ok=False means skipped.

    A column is skipped (a condition violation) when the parametric
    denominator interval reaches below a_skip (condition iii), the squared
    xy-distance interval does (condition ii), or a resulting span exceeds
    its cap (the surface is near-degenerate over the column and would
    smear across unboundedly many cells).
    """
    if xi >= 0.0:
        d_lo = ulo + xi * slo
        d_hi = uhi + xi * shi
    else:
        d_lo = ulo + xi * shi
        d_hi = uhi + xi * slo
    if d_lo < a_skip and d_hi > -a_skip:
        return False, 0.0, 0.0, 0.0, 0.0
    # squares
    if ulo <= 0.0 <= uhi:
        usq_lo = 0.0
    else:
        usq_lo = min(ulo * ulo, uhi * uhi)
    usq_hi = max(ulo * ulo, uhi * uhi)
    if slo <= 0.0 <= shi:
        ssq_lo = 0.0
    else:
        ssq_lo = min(slo * slo, shi * shi)
    ssq_hi = max(slo * slo, shi * shi)
    if usq_lo + ssq_lo < a_skip:
        return False, 0.0, 0.0, 0.0, 0.0
    r_lo = math.sqrt(usq_lo + ssq_lo)
    r_hi = math.sqrt(usq_hi + ssq_hi)
    if eta >= 0.0:
        z_lo = w3 - eta * r_hi
        z_hi = w3 - eta * r_lo
    else:
        z_lo = w3 - eta * r_lo
        z_hi = w3 - eta * r_hi
    if z_hi - z_lo > cap_z:
        return False, 0.0, 0.0, 0.0, 0.0
    # N = s + (-xi) * u
    c = -xi
    if c >= 0.0:
        n_lo = slo + c * ulo
        n_hi = shi + c * uhi
    else:
        n_lo = slo + c * uhi
        n_hi = shi + c * ulo
    q1 = n_lo / d_lo
    q2 = n_lo / d_hi
    q3 = n_hi / d_lo
    q4 = n_hi / d_hi
    k_lo = min(min(q1, q2), min(q3, q4))
    k_hi = max(max(q1, q2), max(q3, q4))
    if k_hi - k_lo > cap_k:
        return False, 0.0, 0.0, 0.0, 0.0
    return True, z_lo, z_hi, k_lo, k_hi


@njit(cache=True, nogil=True)
def _bucket_dense_loops(W, origin, dims, counts, a_skip, cap_z, cap_k, pad_z, pad_k, hist, tallies):
    """Mark every cell each surface can cross; hist is the flat dense histogram.

    tallies: [0] skipped columns, [1] marked cells.
    """
    nx = counts[0]
    ny = counts[1]
    nz = counts[2]
    nk = counts[3]
    ox = origin[0]
    oy = origin[1]
    oz = origin[2]
    ok_ = origin[3]
    dx = dims[0]
    dy = dims[1]
    dz = dims[2]
    dk = dims[3]
    for si in range(W.shape[0]):
        w1 = W[si, 0]
        w2 = W[si, 1]
        w3 = W[si, 2]
        xi = W[si, 3]
        eta = W[si, 4]
        for i in range(nx):
            xlo = ox + i * dx
            ulo = w1 - (xlo + dx)
            uhi = w1 - xlo
            for j in range(ny):
                ylo = oy + j * dy
                slo = w2 - (ylo + dy)
                shi = w2 - ylo
                ok, z_lo, z_hi, k_lo, k_hi = _column_spans(
                    w3, xi, eta, ulo, uhi, slo, shi, a_skip, cap_z, cap_k
                )
                if not ok:
                    tallies[0] += 1
                    continue
                z_lo -= pad_z
                z_hi += pad_z
                k_lo -= pad_k
                k_hi += pad_k
                iz_lo = int(math.floor((z_lo - oz) / dz))
                iz_hi = int(math.floor((z_hi - oz) / dz))
                if iz_lo < 0:
                    iz_lo = 0
                if iz_hi > nz - 1:
                    iz_hi = nz - 1
                if iz_lo > iz_hi:
                    continue
                ik_lo = int(math.floor((k_lo - ok_) / dk))
                ik_hi = int(math.floor((k_hi - ok_) / dk))
                if ik_lo < 0:
                    ik_lo = 0
                if ik_hi > nk - 1:
                    ik_hi = nk - 1
                if ik_lo > ik_hi:
                    continue
                base = (i * ny + j) * nz
                for iz in range(iz_lo, iz_hi + 1):
                    row = (base + iz) * nk
                    for ik in range(ik_lo, ik_hi + 1):
                        hist[row + ik] += 1
                        tallies[1] += 1


def _column_spans_numpy(w, xlos, xhis, ylos, yhis, a_skip, cap_z, cap_k):
    """Vectorized (z, kappa) spans of one surface over all columns.

    Returns (ok, z_lo, z_hi, k_lo, k_hi) arrays of shape (ncols_x, ncols_y).
    """
    w1, w2, w3, xi, eta = w
    ulo = (w1 - xhis)[:, None]
    uhi = (w1 - xlos)[:, None]
    slo = (w2 - yhis)[None, :]
    shi = (w2 - ylos)[None, :]
    if xi >= 0:
        d_lo = ulo + xi * slo
        d_hi = uhi + xi * shi
    else:
        d_lo = ulo + xi * shi
        d_hi = uhi + xi * slo
    ok = ~((d_lo < a_skip) & (d_hi > -a_skip))
    usq_lo = np.where((ulo <= 0) & (uhi >= 0), 0.0, np.minimum(ulo**2, uhi**2))
    usq_hi = np.maximum(ulo**2, uhi**2)
    ssq_lo = np.where((slo <= 0) & (shi >= 0), 0.0, np.minimum(slo**2, shi**2))
    ssq_hi = np.maximum(slo**2, shi**2)
    ok &= usq_lo + ssq_lo >= a_skip
    r_lo = np.sqrt(usq_lo + ssq_lo)
    r_hi = np.sqrt(usq_hi + ssq_hi)
    if eta >= 0:
        z_lo = w3 - eta * r_hi
        z_hi = w3 - eta * r_lo
    else:
        z_lo = w3 - eta * r_lo
        z_hi = w3 - eta * r_hi
    c = -xi
    if c >= 0:
        n_lo = slo + c * ulo
        n_hi = shi + c * uhi
    else:
        n_lo = slo + c * uhi
        n_hi = shi + c * ulo
    with np.errstate(divide="ignore", invalid="ignore"):
        quots = np.stack([n_lo / d_lo, n_lo / d_hi, n_hi / d_lo, n_hi / d_hi])
    k_lo = np.min(quots, axis=0)
    k_hi = np.max(quots, axis=0)
    ok &= (z_hi - z_lo <= cap_z) & (k_hi - k_lo <= cap_k)
    return ok, z_lo, z_hi, k_lo, k_hi


def _bucket_dense_numpy(W, origin, dims, counts, a_skip, cap_z, cap_k, pad_z, pad_k, hist, tallies):
    nx, ny, nz, nk = (int(v) for v in counts)
    xlos = origin[0] + np.arange(nx) * dims[0]
    ylos = origin[1] + np.arange(ny) * dims[1]
    xhis = xlos + dims[0]
    yhis = ylos + dims[1]
    hist4 = hist.reshape(nx, ny, nz, nk)
    for si in range(W.shape[0]):
        ok, z_lo, z_hi, k_lo, k_hi = _column_spans_numpy(
            W[si], xlos, xhis, ylos, yhis, a_skip, cap_z, cap_k
        )
        tallies[0] += int(ok.size - np.count_nonzero(ok))
        iz_lo = np.clip(np.floor((z_lo - pad_z - origin[2]) / dims[2]).astype(np.int64), 0, nz)
        iz_hi = np.floor((z_hi + pad_z - origin[2]) / dims[2]).astype(np.int64)
        ik_lo = np.clip(np.floor((k_lo - pad_k - origin[3]) / dims[3]).astype(np.int64), 0, nk)
        ik_hi = np.floor((k_hi + pad_k - origin[3]) / dims[3]).astype(np.int64)
        inside = (
            ok
            & (z_hi + pad_z >= origin[2])
            & (iz_lo <= np.minimum(iz_hi, nz - 1))
            & (k_hi + pad_k >= origin[3])
            & (ik_lo <= np.minimum(ik_hi, nk - 1))
        )
        iz_hi = np.minimum(iz_hi, nz - 1)
        ik_hi = np.minimum(ik_hi, nk - 1)
        cols_i, cols_j = np.nonzero(inside)
        if cols_i.size == 0:
            continue
        zl = iz_lo[cols_i, cols_j]
        zh = iz_hi[cols_i, cols_j]
        kl = ik_lo[cols_i, cols_j]
        kh = ik_hi[cols_i, cols_j]
        span_z = int(np.max(zh - zl)) + 1
        span_k = int(np.max(kh - kl)) + 1
        for dz_off in range(span_z):
            zsel = zl + dz_off <= zh
            for dk_off in range(span_k):
                sel = zsel & (kl + dk_off <= kh)
                if not np.any(sel):
                    continue
                np.add.at(
                    hist4,
                    (cols_i[sel], cols_j[sel], zl[sel] + dz_off, kl[sel] + dk_off),
                    1,
                )
                tallies[1] += int(np.count_nonzero(sel))


@dataclass
class IncidenceHistogram:
    """Per-cell approximate incidence counts plus bucketing diagnostics."""

    grid: GridSpec
    counts: np.ndarray | dict
    storage: str  # "dense" | "sparse"
    skipped_columns: int = 0
    marked_cells: int = 0
    cell_lists: list | None = None  # per-cell surface index lists (exact mode)

    def count_at(self, idx: CellIndex) -> int:
        flat = self.grid.flat(idx)
        if self.storage == "dense":
            return int(self.counts[flat])
        return int(self.counts.get(flat, 0))

    def total(self) -> int:
        if self.storage == "dense":
            return int(self.counts.sum())
        return int(sum(self.counts.values()))

    def dense(self) -> np.ndarray:
        if self.storage == "dense":
            return self.counts
        arr = np.zeros(self.grid.num_cells, dtype=np.int32)
        for flat, c in self.counts.items():
            arr[flat] = c
        return arr

    def argmax(self) -> tuple[CellIndex, int]:
        if self.storage == "dense":
            flat = int(np.argmax(self.counts))
            best = int(self.counts[flat])
        else:
            best = 0
            flat = None
            for f in sorted(self.counts):
                if self.counts[f] > best:
                    best = self.counts[f]
                    flat = f
            if flat is None:
                raise EmptyHistogram("no cell received a count")
        if best <= 0:
            raise EmptyHistogram("no cell received a count")
        return self.grid.unflat(flat), best

    def top_k(self, k: int) -> list[tuple[CellIndex, int]]:
        """k best cells by count, ties broken by lexicographic cell index."""
        dense = self.dense()
        nz = np.nonzero(dense)[0]
        if nz.size == 0:
            raise EmptyHistogram("no cell received a count")
        order = np.lexsort((nz, -dense[nz].astype(np.int64)))
        picked = nz[order[:k]]
        return [(self.grid.unflat(int(f)), int(dense[f])) for f in picked]


def _estimate_occupancy(n: int, grid: GridSpec) -> float:
    # ~3 (z, kappa) cells marked per surface per column, on average
    nz, nk = int(grid.counts[2]), int(grid.counts[3])
    return min(1.0, 3.0 * n / max(1, nz * nk))


def cells_crossed(
    sigma: SurfaceSigma | np.ndarray,
    grid: GridSpec,
    consts: AnalyticConstants,
    pad_z: float = 0.0,
    pad_k: float = 0.0,
) -> set[CellIndex]:
    """Conservative superset of the cells crossed by one surface.

    Columns where the parametric denominator interval reaches below
    consts.a are condition violations and are skipped.
    """
    if isinstance(sigma, SurfaceSigma):
        W = corr_array([sigma.corr])
    else:
        W = np.asarray(sigma, dtype=np.float64).reshape(1, 5)
    hist = np.zeros(grid.num_cells, dtype=np.int32)
    tallies = np.zeros(2, dtype=np.int64)
    cap_z = consts.span_cells * grid.cell_dims[2]
    cap_k = consts.span_cells * grid.cell_dims[3]
    _bucket = _bucket_dense_loops if USING_NUMBA else _bucket_dense_numpy
    _bucket(W, grid.origin, grid.cell_dims, grid.counts, consts.a, cap_z, cap_k, pad_z, pad_k, hist, tallies)
    return {grid.unflat(int(f)) for f in np.nonzero(hist)[0]}


def naive_count(
    surfaces,
    epsilon: float,
    consts: AnalyticConstants = None,
    grid: GridSpec | None = None,
    retain_index: bool = False,
) -> IncidenceHistogram:
    """Bucket every surface into the eps-grid and count per cell.

    With retain_index=True the per-cell surface lists are kept so
    exact_count_at can later scan them (memory scales with total marked
    cells; intended for exact-mode queries, not huge sweeps).
    """
    consts = consts or AnalyticConstants()
    W = corr_array(surfaces)
    if grid is None:
        grid = build_grid(epsilon, consts)
    hist = np.zeros(grid.num_cells, dtype=np.int32)
    tallies = np.zeros(2, dtype=np.int64)
    cap_z = consts.span_cells * grid.cell_dims[2]
    cap_k = consts.span_cells * grid.cell_dims[3]
    _bucket = _bucket_dense_loops if USING_NUMBA else _bucket_dense_numpy
    import os

    n_workers = max(1, min(os.cpu_count() or 1, W.shape[0] // 2048))
    if USING_NUMBA and n_workers > 1:
        # surfaces are independent; per-thread partial histograms merge by
        # addition at the end
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, W.shape[0], n_workers + 1).astype(int)
        hists = [np.zeros(grid.num_cells, dtype=np.int32) for _ in range(n_workers)]
        tals = [np.zeros(2, dtype=np.int64) for _ in range(n_workers)]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futs = [
                pool.submit(
                    _bucket,
                    W[int(bounds[t]) : int(bounds[t + 1])],
                    grid.origin, grid.cell_dims, grid.counts,
                    consts.a, cap_z, cap_k, 0.0, 0.0, hists[t], tals[t],
                )
                for t in range(n_workers)
            ]
            for f in futs:
                f.result()
        for t in range(n_workers):
            hist += hists[t]
            tallies += tals[t]
    else:
        _bucket(W, grid.origin, grid.cell_dims, grid.counts, consts.a, cap_z, cap_k, 0.0, 0.0, hist, tallies)

    cell_lists = None
    if retain_index:
        cell_lists = [[] for _ in range(grid.num_cells)]
        one = np.zeros(grid.num_cells, dtype=np.int32)
        for si in range(W.shape[0]):
            one[:] = 0
            t2 = np.zeros(2, dtype=np.int64)
            _bucket(W[si : si + 1], grid.origin, grid.cell_dims, grid.counts, consts.a, cap_z, cap_k, 0.0, 0.0, one, t2)
            for f in np.nonzero(one)[0]:
                cell_lists[int(f)].append(si)

    if _estimate_occupancy(W.shape[0], grid) < 0.1:
        nz = np.nonzero(hist)[0]
        counts = {int(f): int(hist[f]) for f in nz}
        storage = "sparse"
    else:
        counts = hist
        storage = "dense"
    return IncidenceHistogram(
        grid=grid,
        counts=counts,
        storage=storage,
        skipped_columns=int(tallies[0]),
        marked_cells=int(tallies[1]),
        cell_lists=cell_lists,
    )


def exact_count_at(
    v: Pose,
    surfaces,
    epsilon: float,
    hist: IncidenceHistogram,
) -> int:
    """Exact eps-incidence count at v by scanning only v's cell list.

    Requires a histogram built with retain_index=True.  Equals the
    brute-force oracle whenever bucketing captured every incident surface
    (guaranteed on condition-filtered scenes).
    """
    if hist.cell_lists is None:
        raise ValueError("exact_count_at needs a histogram built with retain_index=True")
    idx = hist.grid.cell_of(v)
    if idx is None:
        return 0
    members = hist.cell_lists[hist.grid.flat(idx)]
    if not members:
        return 0
    W = corr_array(surfaces)
    fd = frame_distances(v, W[np.asarray(members, dtype=np.int64)])
    return int(np.sum(fd <= epsilon))


def oracle_count(v: Pose, surfaces, epsilon: float) -> int:
    """|{w : frame_distance(v, w) <= eps}| by linear scan.

    Degenerate pairs are excluded (they count as "not incident"); use
    oracle_count_detail to see how many were excluded.
    """
    W = corr_array(surfaces)
    fd = frame_distances(v, W)
    return int(np.sum(fd <= epsilon))


def oracle_count_detail(v: Pose, surfaces, epsilon: float) -> tuple[int, int]:
    """(count, excluded_degenerate) for the brute-force scan at v."""
    W = corr_array(surfaces)
    fd = frame_distances(v, W)
    return int(np.sum(fd <= epsilon)), int(np.sum(np.isinf(fd)))


def oracle_grid_counts(grid: GridSpec, surfaces, epsilon: float) -> np.ndarray:
    """Brute-force counts at every vertex (cell center) of the grid."""
    W = corr_array(surfaces)
    return oracle_counts(grid.vertex_array(), W, epsilon)


def conditioned_oracle_counts(
    grid: GridSpec, surfaces, epsilon: float, consts: AnalyticConstants
) -> np.ndarray:
    """Brute-force counts restricted to pairs satisfying conditions (i)-(iii).

    The solvers' guarantees quantify over pairs meeting the separation
    conditions at level a; this is the matching oracle side.
    """
    W = corr_array(surfaces)
    V = grid.vertex_array()
    a = consts.a
    out = np.zeros(V.shape[0], dtype=np.int64)
    for si in range(W.shape[0]):
        u = W[si, 0] - V[:, 0]
        s = W[si, 1] - V[:, 1]
        denom = u + V[:, 3] * s
        r2 = u * u + s * s
        with np.errstate(divide="ignore", invalid="ignore"):
            xi_v = (s - V[:, 3] * u) / denom
            eta_v = (W[si, 2] - V[:, 2]) / np.sqrt(r2)
        fd = np.maximum(np.abs(xi_v - W[si, 3]), np.abs(eta_v - W[si, 4]))
        fd[(np.abs(denom) <= 1e-12) | (r2 <= 1e-24)] = np.inf
        cond = (np.abs(denom) >= a) & (r2 >= a) & (np.abs(u + W[si, 3] * s) >= a)
        out += ((fd <= epsilon) & cond).astype(np.int64)
    return out


def best_vertex(hist: IncidenceHistogram) -> tuple[Pose, int]:
    """Center of the max-count cell; ties go to the smallest cell index."""
    idx, count = hist.argmax()
    return hist.grid.center(idx), count
