"""Pose-space geometry for gravity-aligned camera localization.

A correspondence pairs a 3D scene point w = (w1, w2, w3) with the image
coordinates (xi, eta) at which the camera observed it.  With the vertical
direction shared between camera and world frames, a camera pose has four
degrees of freedom v = (x, y, z, kappa), kappa = tan(yaw), restricted here
to the first yaw sector kappa in [-1, 1].

A camera at pose v sees the scene point w at

    xi_v  = F(v; w) = ((w2-y) - kappa*(w1-x)) / ((w1-x) + kappa*(w2-y))
    eta_v = G(v; w) = (w3-z) / sqrt((w1-x)^2 + (w2-y)^2)

The poses exactly consistent with a correspondence form a two-dimensional
surface in pose space, parameterized over (x, y) by the inverse system

    kappa = ((w2-y) - xi*(w1-x)) / ((w1-x) + xi*(w2-y))
    z     = w3 - eta * sqrt((w1-x)^2 + (w2-y)^2)

The frame distance between a pose and a correspondence is the L-infinity
distance between predicted and observed image coordinates.  A pose "votes"
for a correspondence when the frame distance is at most some epsilon; all
solvers in this package count such votes on grids over the search domain

    Q = [0,1]^3 x [-1,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import USING_NUMBA, njit
from .errors import DegenerateGeometry

# Denominators below this are degenerate rather than condition violations:
# well above double-precision noise, far below any separation constant of
# interest.
DEGENERACY_EPS = 1e-12

# Search domain Q for (x, y, z, kappa).
DOMAIN_LO = np.array([0.0, 0.0, 0.0, -1.0])
DOMAIN_HI = np.array([1.0, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class Correspondence:
    """One 2D-3D match: scene point (w1, w2, w3) seen at image (xi, eta).

    Scene coordinates are expected in [0,1]^3 after normalization; the
    image coordinates xi = tan(azimuth - yaw) and eta = tan(elevation) are
    unitless tangents, bounded in magnitude by the configured image-frame
    bound (see AnalyticConstants.b_img).
    """

    w1: float
    w2: float
    w3: float
    xi: float
    eta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3, self.xi, self.eta])


@dataclass(frozen=True)
class Pose:
    """A camera pose (x, y, z, kappa) with kappa = tan(yaw)."""

    x: float
    y: float
    z: float
    kappa: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.kappa])

    @property
    def theta(self) -> float:
        """Yaw angle in radians; kappa is the algorithmic representation."""
        return math.atan(self.kappa)

    def in_domain(self) -> bool:
        p = self.as_array()
        return bool(np.all(p >= DOMAIN_LO) and np.all(p <= DOMAIN_HI))


def kappa_from_theta(theta: float) -> float:
    """tan(theta); valid for yaw in the first sector (-pi/4, pi/4)."""
    return math.tan(theta)


@dataclass(frozen=True)
class AnalyticConstants:
    """Separation constants and bound envelopes used by the solvers.

    The analysis behind the solvers leaves most constants abstract; these
    defaults are practical envelopes, user-overridable:

    a:       domain-separation constant in conditions (i)-(iii).
    c1:      gradient bound envelope (unit box, a=0.2); conservative.
    c2:      Lipschitz-gradient envelope paired with c1.
    c_kappa: kappa-displacement constant 2/a^2 (=50 at a=0.2); the sound
             but uselessly coarse kappa cell stretch.
    c_grid:  pragmatic kappa cell stretch actually used for grid cells;
             soundness with c_grid < c_kappa is checked empirically.
    gamma:   dual residual bound factor (adaptively re-measured by the
             primal-dual solver; this is the fallback).
    alpha:   configured inflation bound: counted pairs must stay within
             alpha * epsilon frame distance.
    beta:    frame-distance Lipschitz envelope (same role as c1).
    b_img:   image-frame bound on |xi| and |eta|; 3 ~ tan(71.6 deg).
    span_cells: per-column marking cap in cell units; columns where a
             surface would smear wider than this are condition-adjacent
             and are skipped (tallied), bounding work and inflation.
    """

    a: float = 0.2
    c1: float = 12.0
    c2: float = 12.0
    c_kappa: float = 50.0
    c_grid: float = 2.0
    gamma: float = 1.0
    alpha: float = 6.0
    beta: float = 12.0
    b_img: float = 3.0
    span_cells: float = 2.0

    def __post_init__(self):
        for name in (
            "a", "c1", "c2", "c_kappa", "c_grid", "gamma",
            "alpha", "beta", "b_img", "span_cells",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"constant {name} must be strictly positive")
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")


DEFAULT_CONSTANTS = AnalyticConstants()


@dataclass(frozen=True)
class SurfaceSigma:
    """The pose-space surface of all poses consistent with one correspondence."""

    corr: Correspondence

    def point_at(self, x: float, y: float) -> Pose:
        z, kappa = surface_parametric(self.corr, x, y)
        return Pose(x, y, z, kappa)


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------


def project(v: Pose, w: tuple[float, float, float]) -> tuple[float, float]:
    """Image coordinates (xi_v, eta_v) at which a camera at v sees w.

    Raises DegenerateGeometry when either denominator falls below the
    machine-safe threshold.
    """
    w1, w2, w3 = w
    u = w1 - v.x
    s = w2 - v.y
    denom = u + v.kappa * s
    rho = math.hypot(u, s)
    if abs(denom) <= DEGENERACY_EPS or rho <= DEGENERACY_EPS:
        raise DegenerateGeometry(
            f"projection denominators {denom:.3e}, {rho:.3e} below {DEGENERACY_EPS:g}"
        )
    xi_v = (s - v.kappa * u) / denom
    eta_v = (w3 - v.z) / rho
    return xi_v, eta_v


def surface_parametric(corr: Correspondence, x: float, y: float) -> tuple[float, float]:
    """The unique (z, kappa) putting pose (x, y, z, kappa) on corr's surface."""
    u = corr.w1 - x
    s = corr.w2 - y
    denom = u + corr.xi * s
    if abs(denom) <= DEGENERACY_EPS:
        raise DegenerateGeometry(f"parametric denominator {denom:.3e} below {DEGENERACY_EPS:g}")
    z = corr.w3 - corr.eta * math.hypot(u, s)
    kappa = (s - corr.xi * u) / denom
    return z, kappa


def frame_distance(v: Pose, corr: Correspondence) -> float:
    """L-infinity distance between observed (xi, eta) and the view from v."""
    xi_v, eta_v = project(v, (corr.w1, corr.w2, corr.w3))
    return max(abs(xi_v - corr.xi), abs(eta_v - corr.eta))


def check_conditions(v: Pose, corr: Correspondence, consts: AnalyticConstants) -> bool:
    """Separation conditions (i)-(iii) at level consts.a.

    (i)   |(w1-x) + kappa*(w2-y)| >= a
    (ii)  (w1-x)^2 + (w2-y)^2    >= a
    (iii) |(w1-x) + xi*(w2-y)|   >= a
    """
    u = corr.w1 - v.x
    s = corr.w2 - v.y
    a = consts.a
    return (
        abs(u + v.kappa * s) >= a
        and u * u + s * s >= a
        and abs(u + corr.xi * s) >= a
    )


# ---------------------------------------------------------------------------
# Array forms
# ---------------------------------------------------------------------------


def corr_array(corrs) -> np.ndarray:
    """Stack correspondences into an (n, 5) float64 array."""
    if isinstance(corrs, np.ndarray):
        arr = np.asarray(corrs, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise ValueError("correspondence array must have shape (n, 5)")
        return arr
    return np.array([c.as_array() for c in corrs], dtype=np.float64)


def pose_array(poses) -> np.ndarray:
    """Stack poses into an (m, 4) float64 array."""
    if isinstance(poses, np.ndarray):
        arr = np.asarray(poses, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[-1] != 4:
            raise ValueError("pose array must have shape (m, 4)")
        return arr
    return np.array([p.as_array() for p in poses], dtype=np.float64)


def frame_distances(v: Pose | np.ndarray, W: np.ndarray) -> np.ndarray:
    """Frame distance from one pose to every correspondence row of W.

    Degenerate pairs get +inf (callers treat them as "not incident").
    """
    p = v.as_array() if isinstance(v, Pose) else np.asarray(v, dtype=np.float64)
    u = W[:, 0] - p[0]
    s = W[:, 1] - p[1]
    denom = u + p[3] * s
    rho2 = u * u + s * s
    bad = (np.abs(denom) <= DEGENERACY_EPS) | (rho2 <= DEGENERACY_EPS**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi_v = (s - p[3] * u) / denom
        eta_v = (W[:, 2] - p[2]) / np.sqrt(rho2)
    fd = np.maximum(np.abs(xi_v - W[:, 3]), np.abs(eta_v - W[:, 4]))
    fd[bad] = np.inf
    return fd


def conditions_mask(v: Pose | np.ndarray, W: np.ndarray, a: float) -> np.ndarray:
    """Boolean mask of correspondences satisfying conditions (i)-(iii) at v."""
    p = v.as_array() if isinstance(v, Pose) else np.asarray(v, dtype=np.float64)
    u = W[:, 0] - p[0]
    s = W[:, 1] - p[1]
    return (
        (np.abs(u + p[3] * s) >= a)
        & (u * u + s * s >= a)
        & (np.abs(u + W[:, 3] * s) >= a)
    )


def gradient_norms(v: Pose | np.ndarray, W: np.ndarray) -> np.ndarray:
    """Euclidean norms of the pose-gradients of F and G, per correspondence.

    The closed forms (with u = w1-x, s = w2-y, D = u + kappa*s,
    rho^2 = u^2 + s^2):

        F_x = (1+kappa^2) s / D^2      G_x = (w3-z) u / rho^3
        F_y = -(1+kappa^2) u / D^2     G_y = (w3-z) s / rho^3
        F_z = 0                        G_z = -1 / rho
        F_kappa = -rho^2 / D^2         G_kappa = 0

    Returns max(|grad F|, |grad G|) per row; +inf on degenerate pairs.
    These are the local frame-distance Lipschitz factors: the empirical
    max over a conditioned batch is the measured beta.
    """
    p = v.as_array() if isinstance(v, Pose) else np.asarray(v, dtype=np.float64)
    u = W[:, 0] - p[0]
    s = W[:, 1] - p[1]
    d = u + p[3] * s
    rho2 = u * u + s * s
    bad = (np.abs(d) <= DEGENERACY_EPS) | (rho2 <= DEGENERACY_EPS**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = d * d
        k2 = 1.0 + p[3] * p[3]
        gf = np.sqrt((k2 * s) ** 2 + (k2 * u) ** 2 + rho2 * rho2) / d2
        dz = W[:, 2] - p[2]
        gg = np.sqrt(dz * dz + rho2) / rho2
    out = np.maximum(gf, gg)
    out[bad] = np.inf
    return out


# Hot kernel: epsilon-incidence counts of many poses against many surfaces.


def _oracle_counts_numpy(V: np.ndarray, W: np.ndarray, eps: float) -> np.ndarray:
    counts = np.empty(V.shape[0], dtype=np.int64)
    # Chunked over poses to bound the (chunk, n) temporaries.
    chunk = max(1, int(4e6 // max(1, W.shape[0])))
    w1 = W[:, 0]
    w2 = W[:, 1]
    w3 = W[:, 2]
    xi = W[:, 3]
    eta = W[:, 4]
    for lo in range(0, V.shape[0], chunk):
        hi = min(lo + chunk, V.shape[0])
        x = V[lo:hi, 0:1]
        y = V[lo:hi, 1:2]
        z = V[lo:hi, 2:3]
        k = V[lo:hi, 3:4]
        u = w1[None, :] - x
        s = w2[None, :] - y
        denom = u + k * s
        rho2 = u * u + s * s
        bad = (np.abs(denom) <= DEGENERACY_EPS) | (rho2 <= DEGENERACY_EPS**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi_v = (s - k * u) / denom
            eta_v = (w3[None, :] - z) / np.sqrt(rho2)
        fd = np.maximum(np.abs(xi_v - xi[None, :]), np.abs(eta_v - eta[None, :]))
        fd[bad] = np.inf
        counts[lo:hi] = np.sum(fd <= eps, axis=1)
    return counts


@njit(cache=True)
def _oracle_counts_loops(V, W, eps):  # pragma: no cover - exercised via dispatch
    m = V.shape[0]
    n = W.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    for i in range(m):
        x = V[i, 0]
        y = V[i, 1]
        z = V[i, 2]
        k = V[i, 3]
        c = 0
        for j in range(n):
            u = W[j, 0] - x
            s = W[j, 1] - y
            denom = u + k * s
            rho2 = u * u + s * s
            if abs(denom) <= DEGENERACY_EPS or rho2 <= DEGENERACY_EPS * DEGENERACY_EPS:
                continue
            d_xi = abs((s - k * u) / denom - W[j, 3])
            if d_xi > eps:
                continue
            d_eta = abs((W[j, 2] - z) / math.sqrt(rho2) - W[j, 4])
            if d_eta <= eps:
                c += 1
        counts[i] = c
    return counts


def oracle_counts(V: np.ndarray, W: np.ndarray, eps: float) -> np.ndarray:
    """Exact epsilon-incidence count at each pose row of V, by linear scan."""
    V = np.ascontiguousarray(V, dtype=np.float64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    if USING_NUMBA:
        return _oracle_counts_loops(V, W, eps)
    return _oracle_counts_numpy(V, W, eps)
