"""Primal-dual incidence counting.

The naive grid pays O(n / eps^2) because every surface is bucketed at the
finest resolution.  Here the domain is first tiled by a coarser grid of
cell scale delta1 (cell dims delta1 x delta1 x sqrt(2)*delta1 x
c_grid*delta1).  Within one coarse cell tau, a surface is summarized by a
single dual point

    w_tau = (w1, w2, w3, xi - F(c_tau; w), eta - G(c_tau; w))

i.e. its image-coordinate residual relative to the cell center c_tau, and
a candidate pose v inside tau becomes a 3-dimensional dual surface

    sigma*_v = { (w, F(v; w) - F(c_tau; w), G(v; w) - G(c_tau; w)) }.

Because v is close to c_tau the residuals are small and vary slowly in w,
so dual points can be counted against sigma*_v on a grid of cells
delta2 x delta2 x delta2 x eps x eps with delta2 = eps / delta1: the pair
(v, w) is counted when w's dual cell is crossed by sigma*_v or adjacent to
a crossed cell in the residual directions.

Counting per (v, w-column) takes one of two routes:

 *  fast: a cancellation-aware interval evaluation of the two residual
    functions over the column box (the difference F(v;.) - F(c_tau;.) is
    expanded so the large common part cancels symbolically; plain interval
    subtraction would lose it).  When the box satisfies the separation
    conditions and the interval is narrow, the count is a 2-D prefix-sum
    rectangle lookup.
 *  exact fallback: when the box fails the conditions or the interval is
    wide (poles nearby, very coarse columns), each dual point in the
    column is tested individually at its exact w, which is both sound and
    tight.

Work scales as n / delta1^2 (primal bucketing) + m * delta1^3 / eps^3
(dual counting); choose_regime balances the two and degenerates to
primal-only or dual-only outside the balanced range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import USING_NUMBA, njit
from .errors import DegenerateGeometry
from .geometry import (
    DOMAIN_HI,
    DOMAIN_LO,
    AnalyticConstants,
    Correspondence,
    Pose,
    corr_array,
)
from .grid import (
    CellIndex,
    GridSpec,
    _column_spans,
    _column_spans_numpy,
    build_grid,
    naive_count,
)

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class RegimeParams:
    """Scales of the two grids and which setup is active."""

    delta1: float
    delta2: float
    regime: str  # "primal-only" | "dual-only" | "balanced"
    gamma: float
    epsilon: float


@dataclass(frozen=True)
class DualPoint:
    w1: float
    w2: float
    w3: float
    xi_tau: float
    eta_tau: float


@dataclass(frozen=True)
class DualSurface:
    """sigma*_{v; tau}: the dual image of a fine vertex v inside cell tau."""

    v: Pose
    tau_center: Pose

    def residual(self, w: tuple[float, float, float]) -> tuple[float, float]:
        from .geometry import project

        xi_v, eta_v = project(self.v, w)
        xi_c, eta_c = project(self.tau_center, w)
        return xi_v - xi_c, eta_v - eta_c


def coarse_grid(delta1: float, consts: AnalyticConstants) -> GridSpec:
    dims = np.array([delta1, delta1, _SQRT2 * delta1, consts.c_grid * delta1])
    extent = DOMAIN_HI - DOMAIN_LO
    counts = np.maximum(np.ceil(extent / dims - 1e-9).astype(np.int64), 1)
    return GridSpec(origin=DOMAIN_LO.copy(), cell_dims=dims, counts=counts)


def choose_regime(
    n: int,
    epsilon: float,
    consts: AnalyticConstants,
    m: int | None = None,
) -> RegimeParams:
    """Pick delta1, delta2 balancing primal and dual work.

    The balanced optimum is delta1 = (eps^3 n / m)^(1/5); requiring
    eps <= delta1 <= 1 gives the regime thresholds n < eps^2 m
    (primal-only, delta1 = eps) and n > m / eps^3 (dual-only, delta1 = 1,
    a single coarse cell).  delta2 is tied to delta1 by delta1 * delta2 =
    eps, which keeps the residual-direction dual cells at size eps exactly.
    delta1 is snapped to an even multiple of eps so the coarse grid nests
    the fine grid on every axis.
    """
    if m is None:
        m = build_grid(epsilon, consts).num_cells
    raw = (epsilon**3 * n / m) ** 0.2
    if raw < epsilon:
        return RegimeParams(epsilon, 1.0, "primal-only", consts.gamma, epsilon)
    if raw >= 1.0:
        return RegimeParams(1.0, epsilon, "dual-only", consts.gamma, epsilon)
    snapped = 2.0 * epsilon * max(1, round(raw / (2.0 * epsilon)))
    if snapped >= 1.0:
        return RegimeParams(1.0, epsilon, "dual-only", consts.gamma, epsilon)
    return RegimeParams(snapped, epsilon / snapped, "balanced", consts.gamma, epsilon)


def dualize(corr: Correspondence, tau_center: Pose) -> DualPoint:
    """Residual coordinates of one correspondence relative to a cell center."""
    from .geometry import project

    xi_c, eta_c = project(tau_center, (corr.w1, corr.w2, corr.w3))
    return DualPoint(corr.w1, corr.w2, corr.w3, corr.xi - xi_c, corr.eta - eta_c)


# ---------------------------------------------------------------------------
# Pass A: coarse (z, kappa) ranges per surface per (x, y) column
# ---------------------------------------------------------------------------


@njit(cache=True)
def _coarse_ranges_loops(W, origin, dims, counts, a_skip, cap_z, cap_k, pad_z, pad_k, ranges, tallies):
    """Clipped coarse cell index ranges [zlo, zhi, klo, khi] per (column, surface).

    Sentinel zlo=1 > zhi=0 marks "no cells".  pad_z / pad_k widen the
    parametric intervals so membership also covers the capture slack
    (poses up to that displacement away still find the surface in their
    cell's member list).
    """
    nx = counts[0]
    ny = counts[1]
    nz = counts[2]
    nk = counts[3]
    single = nx == 1 and ny == 1 and nz == 1 and nk == 1
    for si in range(W.shape[0]):
        w1 = W[si, 0]
        w2 = W[si, 1]
        w3 = W[si, 2]
        xi = W[si, 3]
        eta = W[si, 4]
        for i in range(nx):
            xlo = origin[0] + i * dims[0]
            ulo = w1 - (xlo + dims[0])
            uhi = w1 - xlo
            for j in range(ny):
                co = i * ny + j
                if single:
                    ranges[co, si, 0] = 0
                    ranges[co, si, 1] = 0
                    ranges[co, si, 2] = 0
                    ranges[co, si, 3] = 0
                    continue
                ylo = origin[1] + j * dims[1]
                slo = w2 - (ylo + dims[1])
                shi = w2 - ylo
                ok, z_lo, z_hi, k_lo, k_hi = _column_spans(
                    w3, xi, eta, ulo, uhi, slo, shi, a_skip, cap_z, cap_k
                )
                if not ok:
                    tallies[0] += 1
                    ranges[co, si, 0] = 1
                    ranges[co, si, 1] = 0
                    continue
                iz_lo = int(math.floor((z_lo - pad_z - origin[2]) / dims[2]))
                iz_hi = int(math.floor((z_hi + pad_z - origin[2]) / dims[2]))
                ik_lo = int(math.floor((k_lo - pad_k - origin[3]) / dims[3]))
                ik_hi = int(math.floor((k_hi + pad_k - origin[3]) / dims[3]))
                if iz_lo < 0:
                    iz_lo = 0
                if iz_hi > nz - 1:
                    iz_hi = nz - 1
                if ik_lo < 0:
                    ik_lo = 0
                if ik_hi > nk - 1:
                    ik_hi = nk - 1
                if iz_lo > iz_hi or ik_lo > ik_hi:
                    ranges[co, si, 0] = 1
                    ranges[co, si, 1] = 0
                    continue
                ranges[co, si, 0] = iz_lo
                ranges[co, si, 1] = iz_hi
                ranges[co, si, 2] = ik_lo
                ranges[co, si, 3] = ik_hi


def _coarse_ranges_numpy(W, origin, dims, counts, a_skip, cap_z, cap_k, pad_z, pad_k, ranges, tallies):
    nx, ny, nz, nk = (int(v) for v in counts)
    if nx == 1 and ny == 1 and nz == 1 and nk == 1:
        ranges[:, :, :] = 0
        return
    xlos = origin[0] + np.arange(nx) * dims[0]
    ylos = origin[1] + np.arange(ny) * dims[1]
    xhis = xlos + dims[0]
    yhis = ylos + dims[1]
    for si in range(W.shape[0]):
        ok, z_lo, z_hi, k_lo, k_hi = _column_spans_numpy(
            W[si], xlos, xhis, ylos, yhis, a_skip, cap_z, cap_k
        )
        tallies[0] += int(ok.size - np.count_nonzero(ok))
        iz_lo = np.clip(np.floor((z_lo - pad_z - origin[2]) / dims[2]), 0, nz).astype(np.int64)
        iz_hi = np.clip(np.floor((z_hi + pad_z - origin[2]) / dims[2]), -1, nz - 1).astype(np.int64)
        ik_lo = np.clip(np.floor((k_lo - pad_k - origin[3]) / dims[3]), 0, nk).astype(np.int64)
        ik_hi = np.clip(np.floor((k_hi + pad_k - origin[3]) / dims[3]), -1, nk - 1).astype(np.int64)
        bad = (
            ~ok
            | (z_hi + pad_z < origin[2])
            | (k_hi + pad_k < origin[3])
            | (iz_lo > iz_hi)
            | (ik_lo > ik_hi)
        )
        iz_lo = np.where(bad, 1, iz_lo).reshape(-1)
        iz_hi = np.where(bad, 0, iz_hi).reshape(-1)
        ik_lo = np.where(bad, 0, ik_lo).reshape(-1)
        ik_hi = np.where(bad, 0, ik_hi).reshape(-1)
        ranges[:, si, 0] = iz_lo
        ranges[:, si, 1] = iz_hi
        ranges[:, si, 2] = ik_lo
        ranges[:, si, 3] = ik_hi


def assign_primal(
    surfaces,
    delta1: float,
    consts: AnalyticConstants,
    neighbor_mode: str = "cells",
    epsilon: float | None = None,
):
    """Map each coarse cell tau to the surfaces relevant to poses inside it.

    neighbor_mode="cells" reproduces the textbook definition: a surface
    belongs to S_tau when it crosses tau or one of the eight cells
    adjacent to tau in the (z, kappa) directions (3x3 block, truncated at
    the domain boundary).  neighbor_mode="slack" instead widens each
    surface's parametric intervals by the capture slack (sqrt(2)*eps,
    c_grid*eps), which is what the solver uses: it is a subset of the
    "cells" assignment with identical capture guarantees and much smaller
    lists when delta1 >> eps.

    Returns (mapping CellIndex -> list of surface indices, diagnostics).
    """
    W = corr_array(surfaces)
    cg = coarse_grid(delta1, consts)
    n = W.shape[0]
    ncolxy = int(cg.counts[0] * cg.counts[1])
    ranges = np.zeros((ncolxy, n, 4), dtype=np.int16)
    tallies = np.zeros(2, dtype=np.int64)
    if neighbor_mode == "cells":
        pad_z = pad_k = 0.0
    elif neighbor_mode == "slack":
        if epsilon is None:
            raise ValueError("slack mode needs the fine epsilon")
        pad_z = _SQRT2 * epsilon
        pad_k = consts.c_grid * epsilon
    else:
        raise ValueError(f"unknown neighbor_mode {neighbor_mode!r}")
    cap_z = consts.span_cells * cg.cell_dims[2]
    cap_k = consts.span_cells * cg.cell_dims[3]
    _ranges = _coarse_ranges_loops if USING_NUMBA else _coarse_ranges_numpy
    _ranges(W, cg.origin, cg.cell_dims, cg.counts, consts.a, cap_z, cap_k, pad_z, pad_k, ranges, tallies)

    nz, nk = int(cg.counts[2]), int(cg.counts[3])
    mapping: dict[CellIndex, list[int]] = {}
    for co in range(ncolxy):
        ci, cj = divmod(co, int(cg.counts[1]))
        for si in range(n):
            zlo, zhi, klo, khi = (int(x) for x in ranges[co, si])
            if zlo > zhi:
                continue
            if neighbor_mode == "cells":
                zlo = max(0, zlo - 1)
                zhi = min(nz - 1, zhi + 1)
                klo = max(0, klo - 1)
                khi = min(nk - 1, khi + 1)
            for kz in range(zlo, zhi + 1):
                for kk in range(klo, khi + 1):
                    mapping.setdefault(CellIndex(ci, cj, kz, kk), []).append(si)
    return mapping, {"skipped_columns": int(tallies[0]), "grid": cg}


# ---------------------------------------------------------------------------
# Phase 2: per-cell dualization and counting (numba kernel)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _imul(alo, ahi, blo, bhi):
    p1 = alo * blo
    p2 = alo * bhi
    p3 = ahi * blo
    p4 = ahi * bhi
    return min(min(p1, p2), min(p3, p4)), max(max(p1, p2), max(p3, p4))


@njit(cache=True)
def _isq(lo, hi):
    if lo <= 0.0 <= hi:
        return 0.0, max(lo * lo, hi * hi)
    return min(lo * lo, hi * hi), max(lo * lo, hi * hi)


@njit(cache=True)
def _residual_intervals(ulo, uhi, slo, shi, w3lo, w3hi, kc, zc, dx, dy, dz, dk, a):
    """Interval ranges of the two dual residuals over a w-box.

    u, s are taken relative to the cell center (u = w1 - x_c, s = w2 - y_c)
    and (dx, dy, dz, dk) = v - c_tau.  The difference F(v;.) - F(c;.) is
    expanded as (A*D_c - B*N_c) / (D_v * D_c) with A, B of size O(|v-c|),
    so the interval width stays proportional to |v - c| instead of to the
    residual functions' full magnitude.

    Returns (ok, xi_lo, xi_hi, eta_lo, eta_hi); ok=False when a separation
    condition fails on the box (caller falls back to per-point tests).
    """
    # N_c = s - kc*u ; D_c = u + kc*s
    nc_lo = slo - kc * uhi if kc >= 0 else slo - kc * ulo
    nc_hi = shi - kc * ulo if kc >= 0 else shi - kc * uhi
    dc_lo = ulo + kc * slo if kc >= 0 else ulo + kc * shi
    dc_hi = uhi + kc * shi if kc >= 0 else uhi + kc * slo
    if dc_lo < a and dc_hi > -a:
        return False, 0.0, 0.0, 0.0, 0.0
    # A = kc*dx - dy + dk*(dx - u);  B = -(dx + kc*dy) + dk*(s - dy)
    pa = kc * dx - dy + dk * dx
    if dk >= 0:
        a_lo = pa - dk * uhi
        a_hi = pa - dk * ulo
    else:
        a_lo = pa - dk * ulo
        a_hi = pa - dk * uhi
    pb = -(dx + kc * dy) - dk * dy
    if dk >= 0:
        b_lo = pb + dk * slo
        b_hi = pb + dk * shi
    else:
        b_lo = pb + dk * shi
        b_hi = pb + dk * slo
    dv_lo = dc_lo + b_lo
    dv_hi = dc_hi + b_hi
    if dv_lo < a and dv_hi > -a:
        return False, 0.0, 0.0, 0.0, 0.0
    t1_lo, t1_hi = _imul(a_lo, a_hi, dc_lo, dc_hi)
    t2_lo, t2_hi = _imul(b_lo, b_hi, nc_lo, nc_hi)
    num_lo = t1_lo - t2_hi
    num_hi = t1_hi - t2_lo
    den_lo, den_hi = _imul(dv_lo, dv_hi, dc_lo, dc_hi)
    # both factors exclude (-a, a), so the product excludes (-a^2, a^2)
    q1 = num_lo / den_lo
    q2 = num_lo / den_hi
    q3 = num_hi / den_lo
    q4 = num_hi / den_hi
    xi_lo = min(min(q1, q2), min(q3, q4))
    xi_hi = max(max(q1, q2), max(q3, q4))

    # eta residual: (w3 - zc)*(2u dx + 2s dy - dx^2 - dy^2)/((rc+rv) rc rv) - dz/rv
    rc2_lo_u, rc2_hi_u = _isq(ulo, uhi)
    rc2_lo_s, rc2_hi_s = _isq(slo, shi)
    rc2_lo = rc2_lo_u + rc2_lo_s
    rc2_hi = rc2_hi_u + rc2_hi_s
    if rc2_lo < a:
        return False, 0.0, 0.0, 0.0, 0.0
    uv_lo = ulo - dx
    uv_hi = uhi - dx
    sv_lo = slo - dy
    sv_hi = shi - dy
    rv2_lo_u, rv2_hi_u = _isq(uv_lo, uv_hi)
    rv2_lo_s, rv2_hi_s = _isq(sv_lo, sv_hi)
    rv2_lo = rv2_lo_u + rv2_lo_s
    rv2_hi = rv2_hi_u + rv2_hi_s
    if rv2_lo < a:
        return False, 0.0, 0.0, 0.0, 0.0
    rc_lo = math.sqrt(rc2_lo)
    rc_hi = math.sqrt(rc2_hi)
    rv_lo = math.sqrt(rv2_lo)
    rv_hi = math.sqrt(rv2_hi)
    q_lo = 2.0 * (dx * ulo if dx >= 0 else dx * uhi) + 2.0 * (dy * slo if dy >= 0 else dy * shi)
    q_hi = 2.0 * (dx * uhi if dx >= 0 else dx * ulo) + 2.0 * (dy * shi if dy >= 0 else dy * slo)
    q_lo -= dx * dx + dy * dy
    q_hi -= dx * dx + dy * dy
    t_lo, t_hi = _imul(w3lo - zc, w3hi - zc, q_lo, q_hi)
    den2_lo = (rc_lo + rv_lo) * rv_lo * rc_lo
    den2_hi = (rc_hi + rv_hi) * rv_hi * rc_hi
    e1_lo = t_lo / (den2_hi if t_lo >= 0 else den2_lo)
    e1_hi = t_hi / (den2_lo if t_hi >= 0 else den2_hi)
    if dz >= 0:
        e2_lo = -dz / rv_lo
        e2_hi = -dz / rv_hi
    else:
        e2_lo = -dz / rv_hi
        e2_hi = -dz / rv_lo
    eta_lo = e1_lo + e2_lo
    eta_hi = e1_hi + e2_hi
    return True, xi_lo, xi_hi, eta_lo, eta_hi


@njit(cache=True, nogil=True)
def _pd_count_kernel(
    ci_lo,
    ci_hi,
    W,
    ranges,
    wcol_flat,
    c_org,
    c_dims,
    c_counts,
    f_org,
    f_dims,
    f_counts,
    delta2,
    ncw,
    eps,
    e_cells,
    a,
    gamma_log,
    width_cap,
    fast_enabled,
    max_col_members,
    max_tau_verts,
    counts_out,
    diag,
    audit_v,
    audit_s,
):
    """Stream coarse cells, dualize members, count every fine vertex.

    Two counting modes per (vertex, dual point): when fast_enabled, dual
    points are ordered by w-column and counted through per-column residual
    histograms wherever the cancellation-form interval of the residual
    functions is narrow; otherwise (and for the leftovers) each point is
    tested individually with a division-free form of the residual-cell
    criterion, using per-point bounds precomputed at deposit time.

    diag: [0] members total, [1] (v, column) evaluations, [2] fast-path
    columns, [3] slow-path columns, [4] hist-overflow points, [5]
    degenerate dualizations, [6] condition-rejected point pairs, [7]
    residual bound violations, [8] audit pairs emitted, [9] audit overflow.
    """
    cny = c_counts[1]
    cnz = c_counts[2]
    cnk = c_counts[3]
    fnx = f_counts[0]
    fny = f_counts[1]
    fnz = f_counts[2]
    fnk = f_counts[3]
    m3 = ncw * ncw * ncw
    K = 2 * e_cells
    inv_eps = 1.0 / eps
    audit_mode = audit_v.shape[0] > 0
    audit_cur = 0

    ncells_zk = cnz * cnk
    offsets = np.zeros(ncells_zk + 1, dtype=np.int64)
    cursor = np.zeros(ncells_zk, dtype=np.int64)
    mem_slot = np.empty(max_col_members, dtype=np.int32)
    # one cache-line row per point: w1 w2 w3 xlo xhi glo ghi (slow path)
    pack = np.empty((max_col_members, 8), dtype=np.float64)
    mem_sxi = np.empty(max_col_members, dtype=np.float64)
    mem_seta = np.empty(max_col_members, dtype=np.float64)
    vxs = np.empty(max_tau_verts, dtype=np.float64)
    vys = np.empty(max_tau_verts, dtype=np.float64)
    vzs = np.empty(max_tau_verts, dtype=np.float64)
    vks = np.empty(max_tau_verts, dtype=np.float64)
    vflat = np.empty(max_tau_verts, dtype=np.int64)
    vacc = np.empty(max_tau_verts, dtype=np.int64)
    # fast-path (column-ordered) buffers
    col_cnt = np.zeros(m3 + 1, dtype=np.int64)
    col_cur = np.zeros(m3, dtype=np.int64)
    occ = np.empty(m3, dtype=np.int64)
    ord_of = np.empty(max_col_members, dtype=np.int64)
    in_hist = np.empty(max_col_members, dtype=np.uint8)
    hist = np.zeros(m3 * K * K, dtype=np.int32) if fast_enabled else np.zeros(1, dtype=np.int32)
    pref = (
        np.zeros(m3 * (K + 1) * (K + 1), dtype=np.int32)
        if fast_enabled
        else np.zeros(1, dtype=np.int32)
    )

    for ci in range(ci_lo, ci_hi):
        for cj in range(cny):
            co = ci * cny + cj
            # gather members of this (x, y) coarse column, grouped by (kz, kk)
            for c in range(ncells_zk + 1):
                offsets[c] = 0
            for si in range(W.shape[0]):
                zlo = ranges[co, si, 0]
                zhi = ranges[co, si, 1]
                if zlo > zhi:
                    continue
                klo = ranges[co, si, 2]
                khi = ranges[co, si, 3]
                for kz in range(zlo, zhi + 1):
                    base = kz * cnk
                    for kk in range(klo, khi + 1):
                        offsets[base + kk + 1] += 1
            for c in range(ncells_zk):
                offsets[c + 1] += offsets[c]
            total = offsets[ncells_zk]
            if total == 0:
                continue
            diag[0] += total
            for c in range(ncells_zk):
                cursor[c] = offsets[c]
            xcen = c_org[0] + (ci + 0.5) * c_dims[0]
            ycen = c_org[1] + (cj + 0.5) * c_dims[1]
            for si in range(W.shape[0]):
                zlo = ranges[co, si, 0]
                zhi = ranges[co, si, 1]
                if zlo > zhi:
                    continue
                klo = ranges[co, si, 2]
                khi = ranges[co, si, 3]
                u = W[si, 0] - xcen
                s_ = W[si, 1] - ycen
                rho2 = u * u + s_ * s_
                rho_ok = rho2 > 1e-24
                rho = math.sqrt(rho2) if rho_ok else 1.0
                for kk in range(klo, khi + 1):
                    kc = c_org[3] + (kk + 0.5) * c_dims[3]
                    dc = u + kc * s_
                    dead = (not rho_ok) or abs(dc) <= 1e-12
                    if dead:
                        xi_tau = 0.0
                        f_c = 0.0
                    else:
                        f_c = (s_ - kc * u) / dc
                        xi_tau = W[si, 3] - f_c
                    for kz in range(zlo, zhi + 1):
                        pos = cursor[kz * cnk + kk]
                        cursor[kz * cnk + kk] = pos + 1
                        if dead:
                            # dropped from this cell, slot kept for alignment
                            diag[5] += 1
                            mem_slot[pos] = -1
                            mem_sxi[pos] = 1e30
                            mem_seta[pos] = 1e30
                            continue
                        zc = c_org[2] + (kz + 0.5) * c_dims[2]
                        g_c = (W[si, 2] - zc) / rho
                        eta_tau = W[si, 4] - g_c
                        ixi = int(math.floor(xi_tau * inv_eps))
                        ieta = int(math.floor(eta_tau * inv_eps))
                        mem_slot[pos] = si
                        pack[pos, 0] = W[si, 0]
                        pack[pos, 1] = W[si, 1]
                        pack[pos, 2] = W[si, 2]
                        pack[pos, 3] = f_c + (ixi - 1) * eps
                        pack[pos, 4] = f_c + (ixi + 2) * eps
                        pack[pos, 5] = g_c + (ieta - 1) * eps
                        pack[pos, 6] = g_c + (ieta + 2) * eps
                        pack[pos, 7] = 0.0
                        mem_sxi[pos] = xi_tau
                        mem_seta[pos] = eta_tau
                        if abs(xi_tau) > gamma_log or abs(eta_tau) > gamma_log:
                            diag[7] += 1

            # process each tau of the column
            fx0 = int(math.ceil((c_org[0] + ci * c_dims[0] - f_org[0]) / f_dims[0] - 0.5 - 1e-9))
            fx1 = int(math.ceil((c_org[0] + (ci + 1) * c_dims[0] - f_org[0]) / f_dims[0] - 0.5 - 1e-9))
            fy0 = int(math.ceil((c_org[1] + cj * c_dims[1] - f_org[1]) / f_dims[1] - 0.5 - 1e-9))
            fy1 = int(math.ceil((c_org[1] + (cj + 1) * c_dims[1] - f_org[1]) / f_dims[1] - 0.5 - 1e-9))
            if fx0 < 0:
                fx0 = 0
            if fx1 > fnx:
                fx1 = fnx
            if fy0 < 0:
                fy0 = 0
            if fy1 > fny:
                fy1 = fny
            if fx0 >= fx1 or fy0 >= fy1:
                continue
            for kz in range(cnz):
                zc = c_org[2] + (kz + 0.5) * c_dims[2]
                z_lo_b = c_org[2] + kz * c_dims[2]
                fz0 = int(math.ceil((z_lo_b - f_org[2]) / f_dims[2] - 0.5 - 1e-9))
                fz1 = int(math.ceil((z_lo_b + c_dims[2] - f_org[2]) / f_dims[2] - 0.5 - 1e-9))
                if fz0 < 0:
                    fz0 = 0
                if fz1 > fnz:
                    fz1 = fnz
                if fz0 >= fz1:
                    continue
                for kk in range(cnk):
                    cell = kz * cnk + kk
                    mlo = offsets[cell]
                    mhi = offsets[cell + 1]
                    if mhi == mlo:
                        continue
                    k_lo_b = c_org[3] + kk * c_dims[3]
                    fk0 = int(math.ceil((k_lo_b - f_org[3]) / f_dims[3] - 0.5 - 1e-9))
                    fk1 = int(math.ceil((k_lo_b + c_dims[3] - f_org[3]) / f_dims[3] - 0.5 - 1e-9))
                    if fk0 < 0:
                        fk0 = 0
                    if fk1 > fnk:
                        fk1 = fnk
                    if fk0 >= fk1:
                        continue
                    kc = c_org[3] + (kk + 0.5) * c_dims[3]

                    n_occ = 0
                    if fast_enabled:
                        # order members by dual w-column for histogramming
                        for c in range(m3 + 1):
                            col_cnt[c] = 0
                        for p in range(mlo, mhi):
                            c = wcol_flat[mem_slot[p]] if mem_slot[p] >= 0 else 0
                            col_cnt[c + 1] += 1
                        for c in range(m3):
                            col_cnt[c + 1] += col_cnt[c]
                        for c in range(m3):
                            col_cur[c] = col_cnt[c]
                            if col_cnt[c + 1] > col_cnt[c]:
                                occ[n_occ] = c
                                n_occ += 1
                        for p in range(mlo, mhi):
                            c = wcol_flat[mem_slot[p]] if mem_slot[p] >= 0 else 0
                            pos = col_cur[c]
                            col_cur[c] = pos + 1
                            ord_of[pos] = p
                        for t in range(n_occ):
                            c = occ[t]
                            hbase = c * K * K
                            for q in range(hbase, hbase + K * K):
                                hist[q] = 0
                        for q in range(mhi - mlo):
                            p = ord_of[q]
                            if mem_slot[p] < 0:
                                in_hist[q] = 0
                                continue
                            ix = int(math.floor(mem_sxi[p] * inv_eps)) + e_cells
                            iy = int(math.floor(mem_seta[p] * inv_eps)) + e_cells
                            if 0 <= ix < K and 0 <= iy < K:
                                c = wcol_flat[mem_slot[p]]
                                hist[c * K * K + ix * K + iy] += 1
                                in_hist[q] = 1
                            else:
                                in_hist[q] = 0
                                diag[4] += 1
                        for t in range(n_occ):
                            c = occ[t]
                            hbase = c * K * K
                            pbase = c * (K + 1) * (K + 1)
                            for q in range(pbase, pbase + (K + 1) * (K + 1)):
                                pref[q] = 0
                            for ix in range(K):
                                rowp = pbase + (ix + 1) * (K + 1)
                                rowq = pbase + ix * (K + 1)
                                rowh = hbase + ix * K
                                acc0 = 0
                                for iy in range(K):
                                    acc0 += hist[rowh + iy]
                                    pref[rowp + iy + 1] = acc0 + pref[rowq + iy + 1]

                    # count every fine vertex of tau
                    if not fast_enabled:
                        # point-major: each member row is loaded once and
                        # tested against every vertex of tau from registers
                        nv = 0
                        for fi in range(fx0, fx1):
                            vx = f_org[0] + (fi + 0.5) * f_dims[0]
                            for fj in range(fy0, fy1):
                                vy = f_org[1] + (fj + 0.5) * f_dims[1]
                                for fz in range(fz0, fz1):
                                    vz = f_org[2] + (fz + 0.5) * f_dims[2]
                                    for fk in range(fk0, fk1):
                                        vxs[nv] = vx
                                        vys[nv] = vy
                                        vzs[nv] = vz
                                        vks[nv] = f_org[3] + (fk + 0.5) * f_dims[3]
                                        vflat[nv] = ((fi * fny + fj) * fnz + fz) * fnk + fk
                                        vacc[nv] = 0
                                        nv += 1
                        diag[3] += nv
                        for p in range(mlo, mhi):
                            if mem_slot[p] < 0:
                                continue
                            w1 = pack[p, 0]
                            w2 = pack[p, 1]
                            w3 = pack[p, 2]
                            xlo = pack[p, 3]
                            xhi = pack[p, 4]
                            glo = pack[p, 5]
                            ghi = pack[p, 6]
                            for vi in range(nv):
                                u_v = w1 - vxs[vi]
                                s_v = w2 - vys[vi]
                                vk = vks[vi]
                                dvk = u_v + vk * s_v
                                r2v = u_v * u_v + s_v * s_v
                                if abs(dvk) < a or r2v < a:
                                    diag[6] += 1
                                    continue
                                nv_ = s_v - vk * u_v
                                if dvk > 0.0:
                                    if nv_ < dvk * xlo or nv_ >= dvk * xhi:
                                        continue
                                else:
                                    if nv_ > dvk * xlo or nv_ <= dvk * xhi:
                                        continue
                                rho = math.sqrt(r2v)
                                dzp = w3 - vzs[vi]
                                if dzp < rho * glo or dzp >= rho * ghi:
                                    continue
                                vacc[vi] += 1
                                if audit_mode:
                                    if audit_cur < audit_v.shape[0]:
                                        audit_v[audit_cur] = vflat[vi]
                                        audit_s[audit_cur] = mem_slot[p]
                                        audit_cur += 1
                                    else:
                                        diag[9] = 1
                        for vi in range(nv):
                            counts_out[vflat[vi]] += vacc[vi]
                        continue
                    for fi in range(fx0, fx1):
                        vx = f_org[0] + (fi + 0.5) * f_dims[0]
                        for fj in range(fy0, fy1):
                            vy = f_org[1] + (fj + 0.5) * f_dims[1]
                            for fz in range(fz0, fz1):
                                vz = f_org[2] + (fz + 0.5) * f_dims[2]
                                for fk in range(fk0, fk1):
                                    vk = f_org[3] + (fk + 0.5) * f_dims[3]
                                    flat = ((fi * fny + fj) * fnz + fz) * fnk + fk
                                    acc = 0
                                    dx = vx - xcen
                                    dy = vy - ycen
                                    dz = vz - zc
                                    dk = vk - kc
                                    for t in range(n_occ):
                                        c = occ[t]
                                        plo = col_cnt[c]
                                        phi = col_cnt[c + 1]
                                        diag[1] += 1
                                        fast_done = False
                                        iw3 = c % ncw
                                        rem = c // ncw
                                        iw2 = rem % ncw
                                        iw1 = rem // ncw
                                        bw1lo = iw1 * delta2
                                        bw2lo = iw2 * delta2
                                        bw3lo = iw3 * delta2
                                        ok, xi_l, xi_h, et_l, et_h = _residual_intervals(
                                            bw1lo - xcen,
                                            min(bw1lo + delta2, 1.0) - xcen,
                                            bw2lo - ycen,
                                            min(bw2lo + delta2, 1.0) - ycen,
                                            bw3lo,
                                            min(bw3lo + delta2, 1.0),
                                            kc,
                                            zc,
                                            dx,
                                            dy,
                                            dz,
                                            dk,
                                            a,
                                        )
                                        if (
                                            ok
                                            and xi_h - xi_l <= width_cap
                                            and et_h - et_l <= width_cap
                                        ):
                                            ix0 = int(math.floor(xi_l * inv_eps)) + e_cells - 1
                                            ix1 = int(math.floor(xi_h * inv_eps)) + e_cells + 1
                                            iy0 = int(math.floor(et_l * inv_eps)) + e_cells - 1
                                            iy1 = int(math.floor(et_h * inv_eps)) + e_cells + 1
                                            if ix0 < 0:
                                                ix0 = 0
                                            if ix1 > K - 1:
                                                ix1 = K - 1
                                            if iy0 < 0:
                                                iy0 = 0
                                            if iy1 > K - 1:
                                                iy1 = K - 1
                                            if ix0 <= ix1 and iy0 <= iy1:
                                                pbase = c * (K + 1) * (K + 1)
                                                acc += (
                                                    pref[pbase + (ix1 + 1) * (K + 1) + iy1 + 1]
                                                    - pref[pbase + ix0 * (K + 1) + iy1 + 1]
                                                    - pref[pbase + (ix1 + 1) * (K + 1) + iy0]
                                                    + pref[pbase + ix0 * (K + 1) + iy0]
                                                )
                                            fast_done = True
                                            diag[2] += 1
                                        if not fast_done:
                                            diag[3] += 1
                                        # per-point fallback; also sweeps
                                        # histogram-overflow points after a
                                        # fast column
                                        for q in range(plo, phi):
                                            if fast_done and in_hist[q] == 1:
                                                continue
                                            p = ord_of[q]
                                            if mem_slot[p] < 0:
                                                continue
                                            acc += _point_test(
                                                pack[p, 0], pack[p, 1], pack[p, 2],
                                                pack[p, 3], pack[p, 4],
                                                pack[p, 5], pack[p, 6],
                                                vx, vy, vz, vk, a, diag,
                                            )
                                    counts_out[flat] += acc
    diag[8] = audit_cur


@njit(cache=True, nogil=True, inline="always")
def _point_test(w1, w2, w3, xlo, xhi, glo, ghi, vx, vy, vz, vk, a, diag):
    """Division-free residual-cell test of one (vertex, dual point) pair.

    Equivalent to |cell(xi_tau) - cell(F(v;w) - F(c;w))| <= 1 (and the
    same in eta): the per-point bounds xlo..ghi were precomputed at
    deposit so the quotient comparisons become sign-aware products.
    """
    u_v = w1 - vx
    s_v = w2 - vy
    dvk = u_v + vk * s_v
    r2v = u_v * u_v + s_v * s_v
    if abs(dvk) < a or r2v < a:
        diag[6] += 1
        return 0
    nv = s_v - vk * u_v
    if dvk > 0.0:
        if nv < dvk * xlo or nv >= dvk * xhi:
            return 0
    else:
        if nv > dvk * xlo or nv <= dvk * xhi:
            return 0
    rho = math.sqrt(r2v)
    dzp = w3 - vz
    if dzp < rho * glo or dzp >= rho * ghi:
        return 0
    return 1


def _pd_count_numpy(
    ci_lo,
    ci_hi,
    W,
    ranges,
    wcol_flat,
    c_org,
    c_dims,
    c_counts,
    f_org,
    f_dims,
    f_counts,
    delta2,
    ncw,
    eps,
    e_cells,
    a,
    gamma_log,
    width_cap,
    fast_enabled,
    max_col_members,
    max_tau_verts,
    counts_out,
    diag,
    audit_v,
    audit_s,
):
    """Pure-NumPy fallback: exact per-point criterion, vectorized over members.

    Counts can be slightly tighter than the numba path (which may include
    extra pairs through conservative fast-path rectangles); both satisfy
    the same soundness and inflation contracts.
    """
    cnx, cny, cnz, cnk = (int(v) for v in c_counts)
    fnx, fny, fnz, fnk = (int(v) for v in f_counts)
    audit_mode = audit_v.shape[0] > 0
    audit_cur = 0
    for ci in range(ci_lo, ci_hi):
        for cj in range(cny):
            co = ci * cny + cj
            r = ranges[co]
            nonempty = r[:, 0] <= r[:, 1]
            if not np.any(nonempty):
                continue
            xcen = c_org[0] + (ci + 0.5) * c_dims[0]
            ycen = c_org[1] + (cj + 0.5) * c_dims[1]
            fx0 = max(0, math.ceil((c_org[0] + ci * c_dims[0] - f_org[0]) / f_dims[0] - 0.5 - 1e-9))
            fx1 = min(fnx, math.ceil((c_org[0] + (ci + 1) * c_dims[0] - f_org[0]) / f_dims[0] - 0.5 - 1e-9))
            fy0 = max(0, math.ceil((c_org[1] + cj * c_dims[1] - f_org[1]) / f_dims[1] - 0.5 - 1e-9))
            fy1 = min(fny, math.ceil((c_org[1] + (cj + 1) * c_dims[1] - f_org[1]) / f_dims[1] - 0.5 - 1e-9))
            if fx0 >= fx1 or fy0 >= fy1:
                continue
            for kz in range(cnz):
                zc = c_org[2] + (kz + 0.5) * c_dims[2]
                z_lo_b = c_org[2] + kz * c_dims[2]
                fz0 = max(0, math.ceil((z_lo_b - f_org[2]) / f_dims[2] - 0.5 - 1e-9))
                fz1 = min(fnz, math.ceil((z_lo_b + c_dims[2] - f_org[2]) / f_dims[2] - 0.5 - 1e-9))
                if fz0 >= fz1:
                    continue
                for kk in range(cnk):
                    sel = nonempty & (r[:, 0] <= kz) & (kz <= r[:, 1]) & (r[:, 2] <= kk) & (kk <= r[:, 3])
                    members = np.nonzero(sel)[0]
                    if members.size == 0:
                        continue
                    k_lo_b = c_org[3] + kk * c_dims[3]
                    fk0 = max(0, math.ceil((k_lo_b - f_org[3]) / f_dims[3] - 0.5 - 1e-9))
                    fk1 = min(fnk, math.ceil((k_lo_b + c_dims[3] - f_org[3]) / f_dims[3] - 0.5 - 1e-9))
                    if fk0 >= fk1:
                        continue
                    kc = c_org[3] + (kk + 0.5) * c_dims[3]
                    diag[0] += members.size
                    Wm = W[members]
                    u = Wm[:, 0] - xcen
                    s_ = Wm[:, 1] - ycen
                    rho = np.sqrt(u * u + s_ * s_)
                    dc = u + kc * s_
                    good = (np.abs(dc) > 1e-12) & (rho > 1e-12)
                    diag[5] += int(np.sum(~good))
                    Wm = Wm[good]
                    u = u[good]
                    s_ = s_[good]
                    rho = rho[good]
                    dc = dc[good]
                    xi_tau = Wm[:, 3] - (s_ - kc * u) / dc
                    eta_tau = Wm[:, 4] - (Wm[:, 2] - zc) / rho
                    diag[7] += int(np.sum((np.abs(xi_tau) > gamma_log) | (np.abs(eta_tau) > gamma_log)))
                    cxi = np.floor(xi_tau / eps)
                    ceta = np.floor(eta_tau / eps)
                    slots = members[good]
                    for fi in range(fx0, fx1):
                        vx = f_org[0] + (fi + 0.5) * f_dims[0]
                        for fj in range(fy0, fy1):
                            vy = f_org[1] + (fj + 0.5) * f_dims[1]
                            u_v = Wm[:, 0] - vx
                            s_v = Wm[:, 1] - vy
                            r2v = u_v * u_v + s_v * s_v
                            for fz in range(fz0, fz1):
                                vz = f_org[2] + (fz + 0.5) * f_dims[2]
                                for fk in range(fk0, fk1):
                                    vk = f_org[3] + (fk + 0.5) * f_dims[3]
                                    dvk = u_v + vk * s_v
                                    ok = (np.abs(dvk) >= a) & (r2v >= a)
                                    diag[6] += int(np.sum(~ok))
                                    with np.errstate(divide="ignore", invalid="ignore"):
                                        f_v = (s_v - vk * u_v) / dvk
                                        g_v = (Wm[:, 2] - vz) / np.sqrt(r2v)
                                    rxi = f_v - (Wm[:, 3] - xi_tau)
                                    reta = g_v - (Wm[:, 4] - eta_tau)
                                    dxc = cxi - np.floor(rxi / eps)
                                    dec = ceta - np.floor(reta / eps)
                                    hit = ok & (np.abs(dxc) <= 1) & (np.abs(dec) <= 1)
                                    acc = int(np.sum(hit))
                                    flat = ((fi * fny + fj) * fnz + fz) * fnk + fk
                                    counts_out[flat] += acc
                                    diag[3] += 1
                                    if audit_mode and acc:
                                        for si in slots[hit]:
                                            if audit_cur < audit_v.shape[0]:
                                                audit_v[audit_cur] = flat
                                                audit_s[audit_cur] = si
                                                audit_cur += 1
                                            else:
                                                diag[9] = 1
    diag[8] = audit_cur


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass
class PrimalDualOutcome:
    counts: np.ndarray  # per fine vertex, flat C-order
    fine_grid: GridSpec
    params: RegimeParams
    gamma_measured: float
    diagnostics: dict = field(default_factory=dict)


def measure_gamma(W, cgrid: GridSpec, ranges, rng_seed: int = 0, max_pairs: int = 2000):
    """Pilot estimate of the residual ratio |residual| / delta1.

    Samples (surface, crossed coarse cell) pairs, computes both residual
    coordinates at the cell center, and reports the 99th percentile ratio
    clamped to [0.5, 4].
    """
    rng = np.random.default_rng(rng_seed)
    n = W.shape[0]
    ncolxy = ranges.shape[0]
    ratios = []
    tries = 0
    while len(ratios) < max_pairs and tries < 4 * max_pairs:
        tries += 1
        si = int(rng.integers(0, n))
        co = int(rng.integers(0, ncolxy))
        zlo, zhi, klo, khi = (int(x) for x in ranges[co, si])
        if zlo > zhi:
            continue
        kz = (zlo + zhi) // 2
        kk = (klo + khi) // 2
        ci, cj = divmod(co, int(cgrid.counts[1]))
        c = cgrid.center(CellIndex(ci, cj, kz, kk))
        u = W[si, 0] - c.x
        s_ = W[si, 1] - c.y
        dc = u + c.kappa * s_
        rho = math.hypot(u, s_)
        if abs(dc) <= 1e-12 or rho <= 1e-12:
            continue
        xi_tau = W[si, 3] - (s_ - c.kappa * u) / dc
        eta_tau = W[si, 4] - (W[si, 2] - c.z) / rho
        d1 = cgrid.cell_dims[0]
        ratios.append(max(abs(xi_tau), abs(eta_tau)) / d1)
    if not ratios:
        return 1.0
    g = float(np.percentile(np.asarray(ratios), 99.0))
    return float(min(4.0, max(0.5, g)))


def primal_dual_solve(
    surfaces,
    epsilon: float,
    consts: AnalyticConstants | None = None,
    audit_capacity: int = 0,
):
    """Count approximate incidences at every fine vertex via the dual scheme.

    Returns a PrimalDualOutcome; with audit_capacity > 0 the diagnostics
    carry the exact (vertex, surface) pairs counted, for inflation audits
    (slower; meant for small scenes).
    """
    consts = consts or AnalyticConstants()
    W = corr_array(surfaces)
    n = W.shape[0]
    fine = build_grid(epsilon, consts)
    params = choose_regime(n, epsilon, consts, fine.num_cells)

    if params.regime == "primal-only":
        hist = naive_count(surfaces, epsilon, consts)
        counts = hist.dense().astype(np.int64)
        return PrimalDualOutcome(
            counts=counts,
            fine_grid=hist.grid,
            params=params,
            gamma_measured=consts.gamma,
            diagnostics={
                "regime": "primal-only",
                "skipped_columns": hist.skipped_columns,
                "marked_cells": hist.marked_cells,
            },
        )

    cg = coarse_grid(params.delta1, consts)
    ncolxy = int(cg.counts[0] * cg.counts[1])
    ranges = np.zeros((ncolxy, n, 4), dtype=np.int16)
    tallies = np.zeros(2, dtype=np.int64)
    pad_z = _SQRT2 * epsilon
    pad_k = consts.c_grid * epsilon
    cap_z = consts.span_cells * cg.cell_dims[2]
    cap_k = consts.span_cells * cg.cell_dims[3]
    _ranges = _coarse_ranges_loops if USING_NUMBA else _coarse_ranges_numpy
    _ranges(W, cg.origin, cg.cell_dims, cg.counts, consts.a, cap_z, cap_k, pad_z, pad_k, ranges, tallies)

    gamma_m = measure_gamma(W, cg, ranges)
    gamma_eff = max(consts.gamma, gamma_m)

    delta2 = params.delta2
    ncw = max(1, math.ceil(1.0 / delta2 - 1e-9))
    e_cells = max(1, math.ceil(gamma_eff * params.delta1 / epsilon))
    K = 2 * e_cells
    m3 = ncw**3
    # the histogram fast path only pays when the residual intervals over a
    # w-column can come in under the width cap; estimate their scale from
    # the pose-cell extent and the column size (the per-point fallback is
    # always available and is itself cheap)
    width_est = (
        consts.c_grid * params.delta1 * delta2 * (1.0 + consts.b_img) / consts.a
    )
    fast_enabled = (
        USING_NUMBA
        and audit_capacity == 0
        and m3 * K * K <= 40_000_000
        and width_est <= 8.0 * epsilon
    )

    # dual w-column of each surface (independent of tau)
    iw = np.clip((W[:, :3] / delta2).astype(np.int64), 0, ncw - 1)
    wcol_flat = ((iw[:, 0] * ncw + iw[:, 1]) * ncw + iw[:, 2]).astype(np.int32)

    spans = (
        np.maximum(0, ranges[:, :, 1].astype(np.int64) - ranges[:, :, 0] + 1)
        * np.maximum(0, ranges[:, :, 3].astype(np.int64) - ranges[:, :, 2] + 1)
    )
    max_col_members = int(spans.sum(axis=1).max()) if spans.size else 0
    max_col_members = max(max_col_members, 1)
    max_tau_verts = int(
        min(
            fine.num_cells,
            np.prod(np.ceil(cg.cell_dims / fine.cell_dims).astype(np.int64) + 1),
        )
    )

    counts_out = np.zeros(fine.num_cells, dtype=np.int64)
    diag = np.zeros(10, dtype=np.int64)
    audit_v = np.empty(audit_capacity, dtype=np.int64)
    audit_s = np.empty(audit_capacity, dtype=np.int32)

    kernel = _pd_count_kernel if USING_NUMBA else _pd_count_numpy
    cnx = int(cg.counts[0])
    n_workers = 1
    if USING_NUMBA and audit_capacity == 0:
        import os

        n_workers = max(1, min(os.cpu_count() or 1, cnx))
    common = (
        W,
        ranges,
        wcol_flat,
        cg.origin,
        cg.cell_dims,
        cg.counts,
        fine.origin,
        fine.cell_dims,
        fine.counts,
        delta2,
        ncw,
        epsilon,
        e_cells,
        consts.a,
        consts.gamma * params.delta1,
        2.0 * epsilon,
        fast_enabled,
        max_col_members,
        max_tau_verts,
    )
    if n_workers == 1:
        kernel(0, cnx, *common, counts_out, diag, audit_v, audit_s)
    else:
        # coarse x-slabs are independent work units: counts_out rows are
        # disjoint per slab; diagnostics merge by addition
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, cnx, n_workers + 1).astype(int)
        diags = [np.zeros(10, dtype=np.int64) for _ in range(n_workers)]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futs = [
                pool.submit(
                    kernel, int(bounds[t]), int(bounds[t + 1]), *common,
                    counts_out, diags[t],
                    np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int32),
                )
                for t in range(n_workers)
            ]
            for f in futs:
                f.result()
        diag = np.sum(diags, axis=0)

    diagnostics = {
        "regime": params.regime,
        "delta1": params.delta1,
        "delta2": params.delta2,
        "gamma_measured": gamma_m,
        "gamma_effective": gamma_eff,
        "skipped_coarse_columns": int(tallies[0]),
        "members_total": int(diag[0]),
        "dual_column_evals": int(diag[1]),
        "fast_columns": int(diag[2]),
        "slow_columns": int(diag[3]),
        "hist_overflow_points": int(diag[4]),
        "degenerate_dualizations": int(diag[5]),
        "condition_rejected_pairs": int(diag[6]),
        "residual_violations": int(diag[7]),
    }
    if audit_capacity:
        n_pairs = int(diag[8])
        diagnostics["audit_pairs"] = (audit_v[:n_pairs].copy(), audit_s[:n_pairs].copy())
        diagnostics["audit_overflow"] = bool(diag[9])
    return PrimalDualOutcome(
        counts=counts_out,
        fine_grid=fine,
        params=params,
        gamma_measured=gamma_m,
        diagnostics=diagnostics,
    )


def dual_count_reference(tau_idx: CellIndex, surfaces, member_ids, cg: GridSpec,
                         fine: GridSpec, epsilon: float, consts: AnalyticConstants):
    """Slow reference of the per-cell dual count (exact per-point criterion).

    For every fine vertex v inside tau and every member dual point p, the
    pair is counted when p's residual cell is within one cell of the
    residual of sigma*_v evaluated exactly at p's w.  Used by tests to
    pin the kernel's slow-path semantics.
    """
    W = corr_array(surfaces)
    c = cg.center(tau_idx)
    out = {}
    lo = cg.origin + np.asarray(tau_idx, dtype=np.float64) * cg.cell_dims
    hi = lo + cg.cell_dims
    V = fine.vertex_array()
    inside = np.all((V >= lo) & (V < hi), axis=1)
    for flat in np.nonzero(inside)[0]:
        v = V[flat]
        acc = 0
        for si in member_ids:
            u_c = W[si, 0] - c.x
            s_c = W[si, 1] - c.y
            dcc = u_c + c.kappa * s_c
            rho_c = math.hypot(u_c, s_c)
            if abs(dcc) <= 1e-12 or rho_c <= 1e-12:
                continue
            xi_tau = W[si, 3] - (s_c - c.kappa * u_c) / dcc
            eta_tau = W[si, 4] - (W[si, 2] - c.z) / rho_c
            u_v = W[si, 0] - v[0]
            s_v = W[si, 1] - v[1]
            dv = u_v + v[3] * s_v
            r2v = u_v * u_v + s_v * s_v
            if abs(dv) < consts.a or r2v < consts.a:
                continue
            rxi = (s_v - v[3] * u_v) / dv - (W[si, 3] - xi_tau)
            reta = (W[si, 2] - v[2]) / math.sqrt(r2v) - (W[si, 4] - eta_tau)
            if (
                abs(math.floor(xi_tau / epsilon) - math.floor(rxi / epsilon)) <= 1
                and abs(math.floor(eta_tau / epsilon) - math.floor(reta / epsilon)) <= 1
            ):
                acc += 1
        out[int(flat)] = acc
    return out
