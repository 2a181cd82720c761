"""Canonical-surfaces octree: hierarchical lattice rounding.

A family of k-dimensional parametric surfaces in [0,1]^d is written per
dependent coordinate as

    x_j = F_j(x_1..x_k; t_1..t_ell) + f_j ,     j = k+1..d

with "essential" parameters t entering the F_j and purely additive "free"
parameters f (one per dependent equation; equations without a genuine free
parameter get an artificial one pinned at 0).  The family must have
bounded gradients (|grad_x F_j|, |grad_t F_j| <= c1) and Lipschitz
x-gradients in t (constant c2) on its conditioned domain.

The structure rounds every surface onto a parameter lattice of pitch
eps'/(ell+1) with eps' = eps / (c2 * log2(1/eps)), merging duplicates with
summed weights, then pushes the canonical set down an octree over [0,1]^d.
At each node of side delta the surviving surfaces are re-anchored at the
node's minimal corner (which moves the anchor shift into the free
parameters), their essentials re-rounded on the coarser pitch
eps'/((ell+1)*delta), and their free parameters re-rounded on
eps'/(ell+1); identical parameter vectors merge.  Leaves have side
4*eps_eff (4*eps snapped to a negative power of two) and report their
total surviving weight as the approximate incidence count of their center
vertex.

Per-step vertical deviation is at most c2*eps' <= eps/log2(1/eps), so the
full chain stays within ~2*eps of the original surface, while the number
of representable surfaces per cell is capped by the lattice size
(delta/eps')^(ell+d-k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoefficientOutOfRange, EmptyStructure, ParameterOutOfRange
from .geometry import AnalyticConstants, Pose, corr_array


@dataclass
class SurfaceFamily:
    """Evaluators and constants describing one parametric surface family.

    values(T, x)        -> (m, d-k) array of F_j(x; t) per surface
    intervals(T, lo, hi)-> (lo, hi, lo2, hi2), each (m, d-k): conservative
                           bounds of F_j over the x-box [lo, hi].  The
                           second pair is an optional disjoint branch
                           (empty where lo2 > hi2): near a parametric pole
                           the dependent coordinate covers two rays rather
                           than one interval, and marking the union of the
                           rays instead of their convex hull keeps a
                           near-degenerate surface from smearing across a
                           whole cell column.
    """

    name: str
    d: int
    k: int
    ell: int
    free_mask: np.ndarray  # (d-k,) bool; False entries are artificial (stay 0)
    c1: float
    c2: float
    values: callable
    intervals: callable
    t_lo: np.ndarray
    t_hi: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray

    @property
    def n_dep(self) -> int:
        return self.d - self.k

    def eps_prime(self, eps: float) -> float:
        return eps / (self.c2 * math.log2(1.0 / eps))


@dataclass
class RoundedSurfaceSet:
    """A node's surfaces: lattice-rounded parameters with merge weights."""

    S: np.ndarray  # (m, ell) essential parameters
    G: np.ndarray  # (m, d-k) free parameters
    weights: np.ndarray  # (m,) int64
    anchor: np.ndarray | None  # node min corner (d,); None at the root form

    def __len__(self) -> int:
        return self.S.shape[0]


@dataclass
class OctreeNode:
    level: int
    index: tuple  # d-tuple of cell indices at this level
    weight: int
    n_surfaces: int
    flagged: int = 0
    children: list = field(default_factory=list)
    is_leaf: bool = False
    surfaces: RoundedSurfaceSet | None = None


@dataclass
class OctreeResult:
    root: OctreeNode
    family: SurfaceFamily
    epsilon: float
    epsilon_effective: float
    eps_prime: float
    levels: int
    leaf_indices: np.ndarray  # (L, d) int64
    leaf_weights: np.ndarray  # (L,) int64
    level_stats: list  # per level: dict(nodes, surfaces, weight, max_cell, flagged)
    pruned_nodes: int = 0

    def leaf_side(self) -> float:
        return 4.0 * self.epsilon_effective

    def leaf_center(self, idx) -> np.ndarray:
        side = self.leaf_side()
        return (np.asarray(idx, dtype=np.float64) + 0.5) * side


def snap_epsilon(epsilon: float) -> tuple[float, int]:
    """Largest eps_eff <= eps with 4*eps_eff a negative power of two.

    Returns (eps_eff, levels) where levels is the leaf depth.
    """
    q = math.ceil(-math.log2(4.0 * epsilon) - 1e-12)
    q = max(q, 1)
    return 2.0**-q / 4.0, q


def _lattice_keys(arr: np.ndarray, pitch: float) -> np.ndarray:
    return np.round(arr / pitch).astype(np.int64)


def canonize(
    T: np.ndarray,
    F: np.ndarray,
    family: SurfaceFamily,
    epsilon: float,
    weights: np.ndarray | None = None,
) -> RoundedSurfaceSet:
    """Round surfaces onto the root parameter lattice and merge duplicates.

    Essential coordinates and genuine free parameters snap to multiples of
    eps'/(ell+1); artificial free parameters stay exactly 0.  The vertical
    deviation of a surface from its canonical representative is at most
    (c1+1)*eps'.
    """
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if T.shape[1] != family.ell or F.shape[1] != family.n_dep:
        raise ParameterOutOfRange("parameter arrays do not match the family arity")
    tol = 1e-9
    if np.any(T < family.t_lo - tol) or np.any(T > family.t_hi + tol):
        raise ParameterOutOfRange("essential parameters outside the family domain")
    if np.any(F < family.f_lo - tol) or np.any(F > family.f_hi + tol):
        raise ParameterOutOfRange("free parameters outside the family domain")
    if weights is None:
        weights = np.ones(T.shape[0], dtype=np.int64)
    ep = family.eps_prime(epsilon)
    pitch = ep / (family.ell + 1)
    s_keys = _lattice_keys(T, pitch)
    g_keys = np.zeros_like(F, dtype=np.int64)
    g_keys[:, family.free_mask] = _lattice_keys(F[:, family.free_mask], pitch)
    keys = np.concatenate([s_keys, g_keys], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    w = np.zeros(uniq.shape[0], dtype=np.int64)
    np.add.at(w, inverse, weights)
    S = uniq[:, : family.ell].astype(np.float64) * pitch
    G = uniq[:, family.ell :].astype(np.float64) * pitch
    G[:, ~family.free_mask] = 0.0
    return RoundedSurfaceSet(S=S, G=G, weights=w, anchor=None)


def _node_values(surf: RoundedSurfaceSet, family: SurfaceFamily, x: np.ndarray) -> np.ndarray:
    """Dependent-coordinate values of every surface of a node at x."""
    vals = family.values(surf.S, x)
    if surf.anchor is not None:
        vals = vals - family.values(surf.S, surf.anchor[: family.k]) + surf.anchor[family.k :]
    return vals + surf.G


def _node_intervals(surf, family, xlo, xhi):
    lo, hi, lo2, hi2 = family.intervals(surf.S, xlo, xhi)
    if surf.anchor is not None:
        shift = -family.values(surf.S, surf.anchor[: family.k]) + surf.anchor[family.k :]
        lo = lo + shift
        hi = hi + shift
        empty2 = lo2 > hi2
        lo2 = lo2 + shift
        hi2 = hi2 + shift
        lo2[empty2] = 1.0
        hi2[empty2] = 0.0
    return lo + surf.G, hi + surf.G, lo2 + surf.G, hi2 + surf.G


def _face_bounds(surf, family, xlo, half):
    """Two-branch interval bounds of a node's surfaces over one x-face."""
    return _node_intervals(surf, family, xlo, xlo + half)


def _cross_mask(lo, hi, lo2, hi2, dep_lo, dep_hi):
    """Rows whose (possibly two-branch) bounds overlap a dependent box."""
    b1 = (hi >= dep_lo) & (lo <= dep_hi)
    b2 = (lo2 <= hi2) & (hi2 >= dep_lo) & (lo2 <= dep_hi)
    return np.all(b1 | b2, axis=1)


def descend(
    surf: RoundedSurfaceSet,
    family: SurfaceFamily,
    eps_prime: float,
    level: int,
    node_corner: np.ndarray,
    node_side: float,
    merge: bool = True,
):
    """Split one node's surface set into its 2^d children's rounded sets.

    For each child: surfaces crossing the child (conservative two-branch
    interval test over the child's x-face, shared across the 2^(d-k)
    children of that face) are re-anchored at the child's minimal corner
    (step 1), their essentials rounded to the child-level lattice (step
    2), their free parameters to the root free lattice (step 3); identical
    rounded surfaces merge with summed weights, and surfaces whose rounded
    form no longer crosses the child are dropped.  merge=False skips
    duplicate detection (used when the lattice pitch is far below the
    parameter spread and no rounded duplicates can arise).

    Returns a list of (child_offset_bits, child_corner, set_or_None,
    n_two_branch) where n_two_branch counts pole-straddling rows (the
    "flagged cell" diagnostic).
    """
    d = family.d
    k = family.k
    half = node_side / 2.0
    s_pitch = eps_prime / ((family.ell + 1) * half)
    g_pitch = eps_prime / (family.ell + 1)
    out = []
    for xoff in range(2**k):
        xbits = [(xoff >> (k - 1 - b)) & 1 for b in range(k)]
        xlo = node_corner[:k] + np.asarray(xbits, dtype=np.float64) * half
        lo, hi, lo2, hi2 = _face_bounds(surf, family, xlo, half)
        n_two_branch = int(np.sum(np.any(lo2 <= hi2, axis=1)))
        # re-anchor values at the face's (x) corner, shared by its children
        vals_xi = family.values(surf.S, xlo)
        if surf.anchor is not None:
            vals_xi = (
                vals_xi
                - family.values(surf.S, surf.anchor[: family.k])
                + surf.anchor[family.k :]
            )
        for doff in range(2 ** (d - k)):
            dbits = [(doff >> (d - k - 1 - b)) & 1 for b in range(d - k)]
            bits = tuple(xbits + dbits)
            corner = node_corner + np.asarray(bits, dtype=np.float64) * half
            dep_lo = corner[k:]
            dep_hi = dep_lo + half
            cross = _cross_mask(lo, hi, lo2, hi2, dep_lo, dep_hi)
            if not np.any(cross):
                out.append((bits, corner, None, n_two_branch))
                continue
            S = surf.S[cross]
            w = surf.weights[cross]
            # near-pole anchors can produce wild shifts; such surfaces are
            # pruned by the crossing tests, the clip only guards the int cast
            f_new = np.clip(surf.G[cross] + vals_xi[cross] - dep_lo, -1e6, 1e6)
            s_keys = _lattice_keys(S, s_pitch)
            g_keys = _lattice_keys(f_new, g_pitch)
            if merge:
                keys = np.concatenate([s_keys, g_keys], axis=1)
                uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
                wsum = np.zeros(uniq.shape[0], dtype=np.int64)
                np.add.at(wsum, inverse, w)
                S2 = uniq[:, : family.ell].astype(np.float64) * s_pitch
                G2 = uniq[:, family.ell :].astype(np.float64) * g_pitch
                child = RoundedSurfaceSet(S=S2, G=G2, weights=wsum, anchor=corner.copy())
            else:
                child = RoundedSurfaceSet(
                    S=s_keys.astype(np.float64) * s_pitch,
                    G=g_keys.astype(np.float64) * g_pitch,
                    weights=w.copy(),
                    anchor=corner.copy(),
                )
            # drop rounded surfaces that no longer cross the child
            lo2_, hi2_, lo2b, hi2b = _face_bounds(child, family, xlo, half)
            cross2 = _cross_mask(lo2_, hi2_, lo2b, hi2b, dep_lo, dep_hi)
            if not np.any(cross2):
                out.append((bits, corner, None, n_two_branch))
                continue
            child = RoundedSurfaceSet(
                S=child.S[cross2],
                G=child.G[cross2],
                weights=child.weights[cross2],
                anchor=corner.copy(),
            )
            out.append((bits, corner, child, n_two_branch))
    return out


def build_structure(
    T: np.ndarray,
    F: np.ndarray,
    family: SurfaceFamily,
    epsilon: float,
    early_exit: bool = False,
    keep_tree: bool = False,
    fast_leaf: bool = False,
) -> OctreeResult:
    """Canonize, then propagate down the octree to leaves of side 4*eps_eff.

    fast_leaf=True computes leaf weights directly as the crossing-weight
    sums of the last internal level's surfaces, skipping the final
    re-rounding pass (counts may retain surfaces the last rounding would
    have dropped; used for large instances where the leaf level dominates
    the cost).  Merging is skipped when the essential lattice pitch is
    below 1e-5: rounded duplicates cannot arise from continuous inputs at
    that resolution.
    """
    eps_eff, levels = snap_epsilon(epsilon)
    ep = family.eps_prime(eps_eff)
    root_set = canonize(T, F, family, eps_eff)
    root = OctreeNode(
        level=0,
        index=(0,) * family.d,
        weight=int(root_set.weights.sum()),
        n_surfaces=len(root_set),
        surfaces=root_set if keep_tree else None,
    )
    level_stats = [
        {"nodes": 0, "surfaces": 0, "weight": 0, "max_cell": 0, "flagged": 0}
        for _ in range(levels + 1)
    ]
    level_stats[0] = {
        "nodes": 1,
        "surfaces": len(root_set),
        "weight": root.weight,
        "max_cell": len(root_set),
        "flagged": 0,
    }
    leaf_idx: list[tuple] = []
    leaf_w: list[int] = []
    state = {"best": -1, "pruned": 0}

    def leaf_sums(node: OctreeNode, surf: RoundedSurfaceSet, corner: np.ndarray, side: float):
        """Direct child-weight sums at the last level (fast_leaf path)."""
        d, k = family.d, family.k
        half = side / 2.0
        st = level_stats[node.level + 1]
        for xoff in range(2**k):
            xbits = [(xoff >> (k - 1 - b)) & 1 for b in range(k)]
            xlo = corner[:k] + np.asarray(xbits, dtype=np.float64) * half
            lo, hi, lo2, hi2 = _face_bounds(surf, family, xlo, half)
            st["flagged"] += int(np.sum(np.any(lo2 <= hi2, axis=1)))
            for doff in range(2 ** (d - k)):
                dbits = [(doff >> (d - k - 1 - b)) & 1 for b in range(d - k)]
                bits = tuple(xbits + dbits)
                dep_lo = corner[k:] + np.asarray(dbits, dtype=np.float64) * half
                cross = _cross_mask(lo, hi, lo2, hi2, dep_lo, dep_lo + half)
                cw = int(surf.weights[cross].sum())
                if cw <= 0:
                    continue
                cidx = tuple(2 * i + b for i, b in zip(node.index, bits))
                st["nodes"] += 1
                st["surfaces"] += int(np.sum(cross))
                st["weight"] += cw
                st["max_cell"] = max(st["max_cell"], int(np.sum(cross)))
                leaf_idx.append(cidx)
                leaf_w.append(cw)
                if cw > state["best"]:
                    state["best"] = cw

    def recurse(node: OctreeNode, surf: RoundedSurfaceSet, corner: np.ndarray, side: float):
        if node.level == levels:
            node.is_leaf = True
            leaf_idx.append(node.index)
            leaf_w.append(node.weight)
            if node.weight > state["best"]:
                state["best"] = node.weight
            return
        if fast_leaf and node.level == levels - 1:
            leaf_sums(node, surf, corner, side)
            return
        half = side / 2.0
        merge = ep / ((family.ell + 1) * half) >= 1e-5
        children = descend(surf, family, ep, node.level, corner, side, merge=merge)
        entries = []
        for bits, ccorner, cset, n_flagged in children:
            level_stats[node.level + 1]["flagged"] += n_flagged
            if cset is None:
                continue
            cidx = tuple(2 * i + b for i, b in zip(node.index, bits))
            cw = int(cset.weights.sum())
            st = level_stats[node.level + 1]
            st["nodes"] += 1
            st["surfaces"] += len(cset)
            st["weight"] += cw
            st["max_cell"] = max(st["max_cell"], len(cset))
            entries.append((cidx, ccorner, cset, cw, bits))
        if early_exit:
            entries.sort(key=lambda e: (-e[3], e[0]))
        for cidx, ccorner, cset, cw, bits in entries:
            if early_exit and cw < state["best"]:
                state["pruned"] += 1
                continue
            child = OctreeNode(
                level=node.level + 1,
                index=cidx,
                weight=cw,
                n_surfaces=len(cset),
                surfaces=cset if keep_tree else None,
            )
            node.children.append(child)
            recurse(child, cset, ccorner, side / 2.0)

    recurse(root, root_set, np.zeros(family.d), 1.0)
    if leaf_idx:
        order = np.lexsort(tuple(np.asarray([i[dd] for i in leaf_idx]) for dd in range(family.d - 1, -1, -1)))
        leaf_indices = np.asarray(leaf_idx, dtype=np.int64)[order]
        leaf_weights = np.asarray(leaf_w, dtype=np.int64)[order]
    else:
        leaf_indices = np.zeros((0, family.d), dtype=np.int64)
        leaf_weights = np.zeros(0, dtype=np.int64)
    return OctreeResult(
        root=root,
        family=family,
        epsilon=epsilon,
        epsilon_effective=eps_eff,
        eps_prime=ep,
        levels=levels,
        leaf_indices=leaf_indices,
        leaf_weights=leaf_weights,
        level_stats=level_stats,
        pruned_nodes=state["pruned"],
    )


def best_leaf(result: OctreeResult) -> tuple[np.ndarray, int]:
    """Center of the max-weight leaf; ties go to lexicographic leaf index."""
    if result.leaf_weights.size == 0:
        raise EmptyStructure("the octree retained no surfaces at leaf level")
    best = int(np.max(result.leaf_weights))
    if best <= 0:
        raise EmptyStructure("no leaf carries positive weight")
    pos = int(np.argmax(result.leaf_weights))  # leaf table is lexicographically sorted
    return result.leaf_center(result.leaf_indices[pos]), best


def top_leaves(result: OctreeResult, k: int) -> list[tuple[np.ndarray, int]]:
    if result.leaf_weights.size == 0:
        raise EmptyStructure("the octree retained no surfaces at leaf level")
    order = np.argsort(-result.leaf_weights, kind="stable")[:k]
    return [(result.leaf_center(result.leaf_indices[i]), int(result.leaf_weights[i])) for i in order]


# ---------------------------------------------------------------------------
# Hyperplane family (the analytically tractable validation instance)
# ---------------------------------------------------------------------------


def hyperplane_family(d: int) -> SurfaceFamily:
    """Hyperplanes x_d = sum a_i x_i + b in [0,1]^d.

    Essentials are the d-1 slopes (|a_i| <= 1 required; rewrite the
    equation over the largest coefficient first if violated), the offset b
    is the single genuine free parameter (|b| <= d for unit-cube-crossing
    hyperplanes).  Gradients: grad_x F = a (so c1 = d-1 covers both the
    Euclidean and the per-axis Hoelder bound) and grad_x F depends
    linearly on t, so the Lipschitz constant is exactly 1.
    """

    def values(S, x):
        return (S @ np.asarray(x, dtype=np.float64))[:, None]

    def intervals(S, xlo, xhi):
        lo = np.where(S >= 0, S * xlo[None, :], S * xhi[None, :]).sum(axis=1)
        hi = np.where(S >= 0, S * xhi[None, :], S * xlo[None, :]).sum(axis=1)
        empty_lo = np.ones_like(lo)
        empty_hi = np.zeros_like(lo)
        return lo[:, None], hi[:, None], empty_lo[:, None], empty_hi[:, None]

    return SurfaceFamily(
        name=f"hyperplanes-{d}d",
        d=d,
        k=d - 1,
        ell=d - 1,
        free_mask=np.array([True]),
        c1=float(d - 1),
        c2=1.0,
        values=values,
        intervals=intervals,
        t_lo=np.full(d - 1, -1.0),
        t_hi=np.full(d - 1, 1.0),
        f_lo=np.array([-float(d)]),
        f_hi=np.array([float(d)]),
    )


def hyperplanes_to_params(coeffs: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Split (n, d) rows [a_1..a_{d-1}, b] into (T, F), validating ranges."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    A = coeffs[:, : d - 1]
    B = coeffs[:, d - 1 :]
    if np.any(np.abs(A) > 1.0 + 1e-12):
        raise CoefficientOutOfRange("hyperplane slopes must satisfy |a_i| <= 1")
    if np.any(np.abs(B) > d + 1e-12):
        raise CoefficientOutOfRange(f"offsets must satisfy |b| <= {d}")
    return A, B


def hyperplane_point_distance(coeffs: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Euclidean point-to-hyperplane distances for rows [a_1.., b]."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    d = p.shape[0]
    A = coeffs[:, : d - 1]
    b = coeffs[:, d - 1]
    num = np.abs(A @ p[:-1] + b - p[-1])
    den = np.sqrt(1.0 + np.sum(A * A, axis=1))
    return num / den


# ---------------------------------------------------------------------------
# Camera family (2-surfaces in 4-space)
# ---------------------------------------------------------------------------


def _camera_gradient_envelopes(a: float, b: float) -> tuple[float, float]:
    """Numeric c1/c2 envelopes over the conditioned camera domain.

    Samples u = w1-x, s = w2-y on [-1,1], xi on [-b,b] (eta enters the
    z-equation linearly so its extremes +-b are used analytically),
    restricted to |u + xi*s| >= a and u^2+s^2 >= a.  c1 bounds both
    |grad_x F_j| and |grad_t F_j|; c2 bounds the t-Lipschitz constant of
    grad_x F_j via finite differences.  A 1.3 safety factor absorbs the
    sampling resolution.  The kappa equation is evaluated in its
    normalized form (kappa+1)/2, halving its derivatives.
    """
    grid = np.linspace(-1.0, 1.0, 61)
    u, s = np.meshgrid(grid, grid, indexing="ij")
    u = u.ravel()
    s = s.ravel()
    rho2 = u * u + s * s
    keep = rho2 >= a
    u, s, rho2 = u[keep], s[keep], rho2[keep]
    rho = np.sqrt(rho2)
    xis = np.linspace(-b, b, 41)

    # z-equation: F_z = -eta * rho, linear in eta -> use |eta| = b
    gx_z = b * 1.0  # |grad_x F_z| = |eta| * |(u, s)| / rho = |eta|
    gt_z = math.sqrt(b * b + 2.0)  # (w-part) + (eta-part: rho <= sqrt(2))
    # mixed second derivatives of F_z wrt (x,y)x(w1,w2,eta):
    #   d2/dx dw1 = -eta * s^2 / rho^3 etc.; eta at b; plus d2/dx deta = u/rho
    m_z = 0.0
    for eta in (b,):
        t11 = np.abs(eta) * (s * s) / rho2**1.5
        t12 = np.abs(eta) * np.abs(u * s) / rho2**1.5
        col_w = np.sqrt(t11**2 + t12**2)
        col_e = np.abs(u) / rho
        m_z = max(m_z, float(np.max(np.sqrt(2 * col_w**2 + col_e**2))))

    c1 = max(gx_z, gt_z)
    c2 = m_z
    h = 1e-5
    for xi in xis:
        D = u + xi * s
        ok = np.abs(D) >= a
        if not np.any(ok):
            continue
        uu, ss, DD = u[ok], s[ok], D[ok]
        N = ss - xi * uu

        def grad_x(xi_, u_, s_):
            D_ = u_ + xi_ * s_
            N_ = s_ - xi_ * u_
            gx = (xi_ * D_ + N_) / (D_ * D_) * 0.5
            gy = -(D_ + xi_ * N_) / (D_ * D_) * 0.5
            return gx, gy

        gx, gy = grad_x(xi, uu, ss)
        c1 = max(c1, float(np.max(np.sqrt(gx * gx + gy * gy))))
        # grad_t of the (normalized) kappa equation
        gw1 = (-xi * DD - N) / (DD * DD) * 0.5
        gw2 = (DD - xi * N) / (DD * DD) * 0.5
        gxi = (-uu * DD - N * ss) / (DD * DD) * 0.5
        c1 = max(c1, float(np.max(np.sqrt(gw1**2 + gw2**2 + gxi**2))))
        # c2: finite differences of grad_x along w1, w2, xi
        fr = 0.0
        gx1, gy1 = grad_x(xi, uu + h, ss)
        fr += (gx1 - gx) ** 2 + (gy1 - gy) ** 2
        gx2, gy2 = grad_x(xi, uu, ss + h)
        fr += (gx2 - gx) ** 2 + (gy2 - gy) ** 2
        gx3, gy3 = grad_x(xi + h, uu, ss)
        fr += (gx3 - gx) ** 2 + (gy3 - gy) ** 2
        c2 = max(c2, float(np.max(np.sqrt(fr))) / h)
    return 1.3 * c1, 1.3 * c2


_CAMERA_ENVELOPE_CACHE: dict[tuple[float, float], tuple[float, float]] = {}


def camera_family(consts: AnalyticConstants | None = None) -> SurfaceFamily:
    """The pose-space surfaces as a parametric family over (x, y).

    d=4, k=2.  Essentials t = (w1, w2, xi, eta); the z-equation carries
    the genuine free parameter w3, the kappa equation an artificial one.
    The kappa coordinate is normalized to [0,1] via (kappa+1)/2 so the
    octree domain is the unit cube.  c1/c2 are numeric envelopes over the
    conditioned domain at the configured separation level a.
    """
    consts = consts or AnalyticConstants()
    key = (consts.a, consts.b_img)
    if key not in _CAMERA_ENVELOPE_CACHE:
        _CAMERA_ENVELOPE_CACHE[key] = _camera_gradient_envelopes(consts.a, consts.b_img)
    c1, c2 = _CAMERA_ENVELOPE_CACHE[key]
    a = consts.a
    b = consts.b_img

    def values(S, x):
        u = S[:, 0] - x[0]
        s = S[:, 1] - x[1]
        xi = S[:, 2]
        eta = S[:, 3]
        rho = np.sqrt(u * u + s * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            fz = -eta * rho
            d = u + xi * s
            fk = ((s - xi * u) / d + 1.0) * 0.5
        fk = np.where(np.isfinite(fk), fk, 1e30)
        return np.stack([fz, fk], axis=1)

    def intervals(S, xlo, xhi):
        ulo = S[:, 0] - xhi[0]
        uhi = S[:, 0] - xlo[0]
        slo = S[:, 1] - xhi[1]
        shi = S[:, 1] - xlo[1]
        xi = S[:, 2]
        eta = S[:, 3]
        usq_lo = np.where((ulo <= 0) & (uhi >= 0), 0.0, np.minimum(ulo**2, uhi**2))
        usq_hi = np.maximum(ulo**2, uhi**2)
        ssq_lo = np.where((slo <= 0) & (shi >= 0), 0.0, np.minimum(slo**2, shi**2))
        ssq_hi = np.maximum(slo**2, shi**2)
        r_lo = np.sqrt(usq_lo + ssq_lo)
        r_hi = np.sqrt(usq_hi + ssq_hi)
        fz_lo = np.where(eta >= 0, -eta * r_hi, -eta * r_lo)
        fz_hi = np.where(eta >= 0, -eta * r_lo, -eta * r_hi)
        d_lo = ulo + np.where(xi >= 0, xi * slo, xi * shi)
        d_hi = uhi + np.where(xi >= 0, xi * shi, xi * slo)
        n_lo = slo + np.where(-xi >= 0, -xi * ulo, -xi * uhi)
        n_hi = shi + np.where(-xi >= 0, -xi * uhi, -xi * ulo)
        m = S.shape[0]
        fk_lo = np.empty(m)
        fk_hi = np.empty(m)
        fk2_lo = np.ones(m)
        fk2_hi = np.zeros(m)
        straddle = (d_lo <= 0) & (d_hi >= 0)
        # denominator sign-definite: ordinary quotient interval
        defin = ~straddle
        if np.any(defin):
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.stack(
                    [
                        n_lo[defin] / d_lo[defin],
                        n_lo[defin] / d_hi[defin],
                        n_hi[defin] / d_lo[defin],
                        n_hi[defin] / d_hi[defin],
                    ]
                )
            fk_lo[defin] = (np.min(q, axis=0) + 1.0) * 0.5
            fk_hi[defin] = (np.max(q, axis=0) + 1.0) * 0.5
        if np.any(straddle):
            # kappa = N/D sweeps two rays |kappa| >= |N|min / |D|max; the
            # gap between them never crosses the domain, so marking the
            # rays (not their hull) is what keeps poles from smearing
            dmax = np.maximum(np.abs(d_lo[straddle]), np.abs(d_hi[straddle]))
            dmax = np.maximum(dmax, 1e-300)
            n_straddles = (n_lo[straddle] <= 0) & (n_hi[straddle] >= 0)
            nmin = np.where(
                n_straddles, 0.0, np.minimum(np.abs(n_lo[straddle]), np.abs(n_hi[straddle]))
            )
            ratio = nmin / dmax
            fk_lo[straddle] = -1e30
            fk_hi[straddle] = (-ratio + 1.0) * 0.5
            fk2_lo[straddle] = (ratio + 1.0) * 0.5
            fk2_hi[straddle] = 1e30
        lo = np.stack([fz_lo, fk_lo], axis=1)
        hi = np.stack([fz_hi, fk_hi], axis=1)
        lo2 = np.stack([np.ones(m), fk2_lo], axis=1)
        hi2 = np.stack([np.zeros(m), fk2_hi], axis=1)
        return lo, hi, lo2, hi2

    return SurfaceFamily(
        name="camera-2s4d",
        d=4,
        k=2,
        ell=4,
        free_mask=np.array([True, False]),
        c1=c1,
        c2=c2,
        values=values,
        intervals=intervals,
        t_lo=np.array([0.0, 0.0, -b, -b]),
        t_hi=np.array([1.0, 1.0, b, b]),
        f_lo=np.array([0.0, 0.0]),
        f_hi=np.array([1.0, 0.0]),
    )


def camera_params(surfaces) -> tuple[np.ndarray, np.ndarray]:
    """Correspondences -> (T, F) arrays for the camera family."""
    W = corr_array(surfaces)
    T = W[:, [0, 1, 3, 4]]
    F = np.stack([W[:, 2], np.zeros(W.shape[0])], axis=1)
    return T, F


def canonical_solve(
    surfaces,
    epsilon: float,
    consts: AnalyticConstants | None = None,
    early_exit: bool = False,
):
    """End-to-end camera pose estimate via the canonical-surfaces octree.

    Returns (OctreeResult, best Pose, best weight); leaf centers are
    denormalized back to kappa in [-1, 1].
    """
    consts = consts or AnalyticConstants()
    fam = camera_family(consts)
    T, F = camera_params(surfaces)
    result = build_structure(T, F, fam, epsilon, early_exit=early_exit, fast_leaf=True)
    center, weight = best_leaf(result)
    pose = Pose(center[0], center[1], center[2], 2.0 * center[3] - 1.0)
    return result, pose, weight


def leaf_pose(result: OctreeResult, idx) -> Pose:
    c = result.leaf_center(idx)
    return Pose(c[0], c[1], c[2], 2.0 * c[3] - 1.0)
