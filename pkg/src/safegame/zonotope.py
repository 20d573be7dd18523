"""Zonotope arithmetic and the forward-reachable tube for tracking errors.

A zonotope is {c + G beta : ||beta||_inf <= 1}.  The error tube follows the
recursion R_{tau+1} = A_tau R_tau (+) B_tau D (+) E_tau with R_1 = B_0 D,
where D is the (inflated) disturbance box and E_tau the per-step remainder
box.  Generator counts are capped by boxing the smallest generators, an
outer approximation.  All downstream constraint checks go through interval
hulls or the swept footprint polygon, both conservative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import geometry
from .tracking import NominalTrajectory, TrackingPlan, remainder_bound


DEFAULT_MAX_GENERATORS = 60


@dataclass
class Zonotope:
    c: np.ndarray
    G: np.ndarray  # (n, k); k = 0 means a point

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        if self.G.ndim != 2 or self.G.shape[0] != len(self.c):
            raise ValueError("generator matrix must be (n, k)")

    @property
    def dim(self):
        return len(self.c)

    @property
    def n_generators(self):
        return self.G.shape[1]

    def interval_hull(self):
        """Componentwise (lo, hi) bounds: c -/+ sum |G|."""
        r = np.abs(self.G).sum(axis=1) if self.n_generators else np.zeros(self.dim)
        return self.c - r, self.c + r

    def sample(self, n, rng):
        beta = rng.uniform(-1.0, 1.0, size=(n, self.n_generators))
        return self.c + beta @ self.G.T

    def sample_extreme(self, n, rng):
        beta = rng.choice([-1.0, 1.0], size=(n, self.n_generators))
        return self.c + beta @ self.G.T

    def to_dict(self):
        return {"center": self.c.tolist(), "generators": self.G.tolist()}


def from_box(center, half_widths):
    """Axis-aligned box as a zonotope with a diagonal generator matrix."""
    hw = np.asarray(half_widths, dtype=float)
    if np.any(hw < 0):
        raise ValueError("half widths must be nonnegative")
    keep = hw > 0
    G = np.diag(hw)[:, keep]
    return Zonotope(np.asarray(center, dtype=float), G)


def linear_map(M, Z: Zonotope):
    M = np.asarray(M, dtype=float)
    return Zonotope(M @ Z.c, M @ Z.G)


def minkowski(Z1: Zonotope, Z2: Zonotope):
    if Z1.dim != Z2.dim:
        raise ValueError("dimension mismatch in Minkowski sum")
    return Zonotope(Z1.c + Z2.c, np.concatenate([Z1.G, Z2.G], axis=1))


def reduce(Z: Zonotope, max_generators=DEFAULT_MAX_GENERATORS):
    """Outer approximation with at most max_generators generators.

    Keeps the largest-norm generators and boxes the rest (their absolute
    column sums become diagonal generators), so containment is preserved.
    """
    n, k = Z.dim, Z.n_generators
    if max_generators < n:
        raise ValueError("cap must be at least the dimension")
    if k <= max_generators:
        return Z
    norms = np.abs(Z.G).sum(axis=0)  # 1-norm ranks boxing cost
    order = np.argsort(norms)
    n_box = k - (max_generators - n)
    boxed, kept = order[:n_box], order[n_box:]
    hw = np.abs(Z.G[:, boxed]).sum(axis=1)
    G = np.concatenate([Z.G[:, kept], np.diag(hw)], axis=1)
    return Zonotope(Z.c.copy(), G)


def contains(Z: Zonotope, p, tol=1e-9):
    """Exact membership: feasibility of G beta = p - c, ||beta||_inf <= 1."""
    p = np.asarray(p, dtype=float)
    rhs = p - Z.c
    if Z.n_generators == 0:
        return bool(np.all(np.abs(rhs) <= tol))
    lo, hi = Z.interval_hull()
    if np.any(p < lo - tol) or np.any(p > hi + tol):
        return False
    k = Z.n_generators
    res = linprog(
        np.zeros(k), A_eq=Z.G, b_eq=rhs, bounds=[(-1.0, 1.0)] * k,
        method="highs",
    )
    return bool(res.status == 0)


@dataclass
class FrsTube:
    """Error-space reachable sets R[1..H+1]; R[0] is the zero point."""

    sets: list  # list of Zonotope, index tau in 0..H+1
    d_box: np.ndarray  # inflated disturbance half-widths used

    @property
    def horizon(self):
        return len(self.sets) - 2

    def to_dict(self):
        return {
            "d_box": self.d_box.tolist(),
            "sets": [Z.to_dict() for Z in self.sets],
        }


def propagate(A, B, d_half_widths, remainders=None,
              max_generators=DEFAULT_MAX_GENERATORS):
    """Error tube from the closed-loop matrices.

    A, B: (H+1, nx, nx) and (H+1, nx, nd) with index tau; R_1 = B_0 D and
    R_{tau+1} = A_tau R_tau (+) B_tau D (+) E_tau for tau in 1..H.
    remainders: optional (H+1, nx) box half-widths E_tau.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    H = len(A) - 1
    nx = A.shape[1]
    d_hw = np.asarray(d_half_widths, dtype=float)
    D = from_box(np.zeros(B.shape[2]), d_hw)
    sets = [Zonotope(np.zeros(nx), np.zeros((nx, 0)))]
    R = linear_map(B[0], D)
    sets.append(R)
    for tau in range(1, H + 1):
        R = minkowski(linear_map(A[tau], R), linear_map(B[tau], D))
        if remainders is not None and np.any(remainders[tau] > 0):
            R = minkowski(R, from_box(np.zeros(nx), remainders[tau]))
        R = reduce(R, max_generators)
        sets.append(R)
    return FrsTube(sets=sets, d_box=d_hw)


def build_tube(car, traj: NominalTrajectory, plan: TrackingPlan,
               d_inflation=0.05, remainder_multiplier=2.0,
               max_generators=DEFAULT_MAX_GENERATORS, rng=None,
               err_margin=1.1):
    """Propagate the tube with interleaved remainder bounding.

    Each step's remainder box is sampled over the interval hull of the
    current reachable set (inflated by err_margin) before the set is pushed
    through that step, so the bound covers the states the tube claims.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    H = traj.horizon
    nx = car.nx
    d_hw = car.disturbance_box(inflation=d_inflation)
    D = from_box(np.zeros(car.nd), d_hw)
    remainders = np.zeros((H + 1, nx))
    sets = [Zonotope(np.zeros(nx), np.zeros((nx, 0)))]
    R = linear_map(plan.B[0], D)
    sets.append(R)
    for tau in range(1, H + 1):
        lo, hi = R.interval_hull()
        err_hw = np.maximum(np.abs(lo), np.abs(hi)) * err_margin
        remainders[tau] = remainder_bound(
            car, traj.states[tau], traj.controls[tau], plan.gains[tau],
            plan.A[tau], plan.B[tau], err_hw, d_hw,
            multiplier=remainder_multiplier, inflation=0.0, rng=rng,
        )
        R = minkowski(linear_map(plan.A[tau], R), linear_map(plan.B[tau], D))
        if np.any(remainders[tau] > 0):
            R = minkowski(R, from_box(np.zeros(nx), remainders[tau]))
        R = reduce(R, max_generators)
        sets.append(R)
    plan.remainders = remainders
    return FrsTube(sets=sets, d_box=d_hw)


def occupied_region(x_bar, R: Zonotope, footprint, pos_idx=(0, 1), psi_idx=3):
    """Conservative planar polygon covering the footprint over the set.

    Uses the interval hull of the position/heading coordinates, rotates the
    body box through the heading interval's extremes and midpoint, takes the
    convex hull, inflates it by the rotational chord bound, and sweeps it
    over the position box by a Minkowski sum.  Returns a convex CCW polygon.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    lo, hi = R.interval_hull()
    p_lo = x_bar[list(pos_idx)] + lo[list(pos_idx)]
    p_hi = x_bar[list(pos_idx)] + hi[list(pos_idx)]
    psi_lo = x_bar[psi_idx] + lo[psi_idx]
    psi_hi = x_bar[psi_idx] + hi[psi_idx]
    psis = np.array([psi_lo, 0.5 * (psi_lo + psi_hi), psi_hi])
    corners = geometry.footprint_corners(
        np.zeros((3, 2)), psis, footprint
    ).reshape(-1, 2)
    hull = geometry.convex_hull(corners)
    # chord bound: any heading within the interval moves a body point of
    # radius r by at most r * |half interval| past the sampled extremes
    x0, x1, y0, y1 = footprint
    r_max = max(np.hypot(xx, yy) for xx in (x0, x1) for yy in (y0, y1))
    half = 0.5 * (psi_hi - psi_lo)
    pad = r_max * min(abs(half), np.pi)
    if pad > 0:
        hull = geometry.polygon_minkowski_box(hull, (pad, pad))
    center = 0.5 * (p_lo + p_hi)
    hw = 0.5 * (p_hi - p_lo)
    region = geometry.polygon_minkowski_box(hull, (hw[0], hw[1]))
    return region + center


def violates_constraints(region, spec, psi_interval=None):
    """True if the swept region can leave the road band, exceed the heading
    limit, or touch an obstacle box."""
    ys = region[:, 1]
    if np.max(np.abs(ys)) > spec.road_half_width:
        return True
    if psi_interval is not None:
        lo, hi = psi_interval
        if max(abs(lo), abs(hi)) > spec.heading_limit:
            return True
    for box in spec.obstacle_boxes:
        x0, x1, y0, y1 = box
        box_poly = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        if geometry.polygons_intersect(region, box_poly):
            return True
    return False


def controls_within(u_bar, K, R: Zonotope, control_lo, control_hi, tol=0.0):
    """Interval-hull check that u_bar + K R stays inside the control box."""
    mapped = linear_map(K, R)
    lo, hi = mapped.interval_hull()
    return bool(
        np.all(np.asarray(u_bar) + lo >= np.asarray(control_lo) - tol)
        and np.all(np.asarray(u_bar) + hi <= np.asarray(control_hi) + tol)
    )


def heading_interval(x_bar, R: Zonotope, psi_idx=3):
    lo, hi = R.interval_hull()
    return x_bar[psi_idx] + lo[psi_idx], x_bar[psi_idx] + hi[psi_idx]
