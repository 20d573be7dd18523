"""Vehicle environments: 5D kinematic bicycle and 3D reduced car.

Both models share the same road geometry and safety margin.  Dynamics are
integrated with classical RK4 under a zero-order hold on control and
disturbance; Jacobians of the discrete map are obtained by chain-ruling the
RK4 stages through the analytic continuous-time Jacobians.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry


DEFAULT_OBSTACLE_ANCHORS = [
    (3.0, 0.3),
    (6.5, -0.3),
    (10.0, 0.3),
    (13.5, -0.3),
    (17.0, 0.3),
]


@dataclass
class EnvSpec:
    """Static description of the road, car geometry, and input bounds."""

    wheelbase: float = 0.5
    dt: float = 0.1
    road_half_width: float = 0.6
    footprint: tuple = (0.0, 0.5, -0.1, 0.1)  # body frame (xmin, xmax, ymin, ymax)
    obstacle_anchors: list = field(
        default_factory=lambda: [list(p) for p in DEFAULT_OBSTACLE_ANCHORS]
    )
    accel_bounds: tuple = (-3.5, 3.5)
    steer_rate_bounds: tuple = (-5.0, 5.0)
    d_max: float = 0.1
    heading_limit: float = 0.5 * np.pi
    state_bounds: tuple = (
        (0.0, 20.0),
        (-0.6, 0.6),
        (0.4, 2.0),
        (-0.5 * np.pi, 0.5 * np.pi),
        (-0.35, 0.35),
    )

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if self.d_max < 0:
            raise ValueError("d_max must be nonnegative")
        x0, x1, y0, y1 = self.footprint
        if x1 <= x0 or y1 <= y0:
            raise ValueError("footprint box is empty")

    @property
    def obstacle_boxes(self):
        x0, x1, y0, y1 = self.footprint
        return [
            (px + x0, px + x1, py + y0, py + y1) for px, py in self.obstacle_anchors
        ]

    def to_json(self):
        d = asdict(self)
        d["state_bounds"] = [list(b) for b in self.state_bounds]
        return json.dumps(d, sort_keys=True)

    def content_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "state_bounds" in d:
            d["state_bounds"] = tuple(tuple(b) for b in d["state_bounds"])
        for key in ("footprint", "accel_bounds", "steer_rate_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def rk4_step(deriv, x, u, d, dt):
    """One classical RK4 step of deriv(x, u, d) with (u, d) held constant."""
    k1 = deriv(x, u, d)
    k2 = deriv(x + 0.5 * dt * k1, u, d)
    k3 = deriv(x + 0.5 * dt * k2, u, d)
    k4 = deriv(x + dt * k3, u, d)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_jacobians(deriv, cont_jac, x, u, d, dt, nx, nu, nd):
    """Jacobians (f_x, f_u, f_d) of the discrete RK4 map at a single point."""
    x1 = x
    k1 = deriv(x1, u, d)
    x2 = x + 0.5 * dt * k1
    k2 = deriv(x2, u, d)
    x3 = x + 0.5 * dt * k2
    k3 = deriv(x3, u, d)
    x4 = x + dt * k3

    A1, B1, C1 = cont_jac(x1, u, d)
    A2, B2, C2 = cont_jac(x2, u, d)
    A3, B3, C3 = cont_jac(x3, u, d)
    A4, B4, C4 = cont_jac(x4, u, d)

    I = np.eye(nx)
    dk1 = A1
    dk2 = A2 @ (I + 0.5 * dt * dk1)
    dk3 = A3 @ (I + 0.5 * dt * dk2)
    dk4 = A4 @ (I + dt * dk3)
    fx = I + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)

    def chain(Bs):
        d1 = Bs[0]
        d2 = A2 @ (0.5 * dt * d1) + Bs[1]
        d3 = A3 @ (0.5 * dt * d2) + Bs[2]
        d4 = A4 @ (dt * d3) + Bs[3]
        return (dt / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)

    fu = chain([B1, B2, B3, B4])
    fd = chain([C1, C2, C3, C4])
    return fx, fu, fd


class _CarBase:
    """Shared margin / sampling machinery for the two car models."""

    # subclasses set: nx, nu, nd, pos_idx, psi_idx, control_lo, control_hi

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    # -- input clamping ----------------------------------------------------
    def clamp_control(self, u):
        return np.clip(u, self.control_lo, self.control_hi)

    def clamp_disturbance(self, d):
        return np.clip(d, -self.spec.d_max, self.spec.d_max)

    # -- integration -------------------------------------------------------
    def step(self, x, u, d, dt=None):
        dt = self.spec.dt if dt is None else dt
        u = self.clamp_control(np.asarray(u, dtype=float))
        d = self.clamp_disturbance(np.asarray(d, dtype=float))
        return rk4_step(self.deriv, np.asarray(x, dtype=float), u, d, dt)

    def jacobians(self, x, u, d, dt=None):
        dt = self.spec.dt if dt is None else dt
        u = self.clamp_control(np.asarray(u, dtype=float))
        d = self.clamp_disturbance(np.asarray(d, dtype=float))
        return rk4_jacobians(
            self.deriv, self.cont_jacobians, np.asarray(x, dtype=float),
            u, d, dt, self.nx, self.nu, self.nd,
        )

    # -- geometry and margin ----------------------------------------------
    def footprint(self, x):
        x = np.asarray(x, dtype=float)
        pos = x[..., self.pos_idx]
        psi = x[..., self.psi_idx]
        return geometry.footprint_corners(pos, psi, self.spec.footprint)

    def safety_margin(self, x, components=False):
        """Margin g(x); negative exactly on the failure set.

        g = min(heading margin, road margin, obstacle margin).  Works on a
        single state or any batch shape (..., nx).
        """
        x = np.asarray(x, dtype=float)
        psi = x[..., self.psi_idx]
        corners = self.footprint(x)
        g_psi = self.spec.heading_limit - np.abs(psi)
        g_road = self.spec.road_half_width - np.abs(corners[..., 1]).max(axis=-1)
        g_obs = geometry.footprint_boxes_margin(corners, self.spec.obstacle_boxes)
        g = np.minimum(np.minimum(g_psi, g_road), g_obs)
        if components:
            return g, (g_psi, g_road, g_obs)
        return g

    # -- sampling ----------------------------------------------------------
    def sample_initial_state(self, rng, max_rejections=1000):
        lo = np.array([b[0] for b in self.state_box])
        hi = np.array([b[1] for b in self.state_box])
        for _ in range(max_rejections):
            x = rng.uniform(lo, hi)
            if self.safety_margin(x) > 0:
                return x
        raise RuntimeError(
            "could not sample a non-failed initial state after "
            f"{max_rejections} rejections; check the obstacle layout"
        )

    def sample_initial_states(self, n, rng, max_rejections=1000):
        return np.array([self.sample_initial_state(rng, max_rejections) for _ in range(n)])

    def disturbance_box(self, inflation=0.0):
        r = self.spec.d_max * (1.0 + inflation)
        return np.full(self.nd, r)


class BicycleCar(_CarBase):
    """5D kinematic bicycle: state (p_x, p_y, v, psi, delta)."""

    nx, nu, nd = 5, 2, 5
    pos_idx = [0, 1]
    psi_idx = 3

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.control_lo = np.array([spec.accel_bounds[0], spec.steer_rate_bounds[0]])
        self.control_hi = np.array([spec.accel_bounds[1], spec.steer_rate_bounds[1]])
        self.state_box = spec.state_bounds

    def deriv(self, x, u, d):
        v, psi, delta = x[..., 2], x[..., 3], x[..., 4]
        a, omega = u[..., 0], u[..., 1]
        L = self.spec.wheelbase
        out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1], d.shape[:-1]) + (5,))
        out[..., 0] = v * np.cos(psi) + d[..., 0]
        out[..., 1] = v * np.sin(psi) + d[..., 1]
        out[..., 2] = a + d[..., 2]
        out[..., 3] = (v / L) * np.tan(delta) + d[..., 3]
        out[..., 4] = omega + d[..., 4]
        return out

    def cont_jacobians(self, x, u, d):
        v, psi, delta = x[2], x[3], x[4]
        L = self.spec.wheelbase
        A = np.zeros((5, 5))
        A[0, 2] = np.cos(psi)
        A[0, 3] = -v * np.sin(psi)
        A[1, 2] = np.sin(psi)
        A[1, 3] = v * np.cos(psi)
        A[3, 2] = np.tan(delta) / L
        A[3, 4] = v / (L * np.cos(delta) ** 2)
        B = np.zeros((5, 2))
        B[2, 0] = 1.0
        B[4, 1] = 1.0
        C = np.eye(5)
        return A, B, C


class ReducedCar(_CarBase):
    """3D reduced car (p_x, p_y, psi) at fixed speed.

    The steering channel is absorbed into a direct heading-rate control with
    bound (v / L) * tan(delta_max); disturbance acts additively on all three
    state derivatives.
    """

    nx, nu, nd = 3, 1, 3
    pos_idx = [0, 1]
    psi_idx = 2

    def __init__(self, spec: EnvSpec, speed=1.0, delta_max=0.35):
        super().__init__(spec)
        self.speed = speed
        rate = (speed / spec.wheelbase) * np.tan(delta_max)
        self.control_lo = np.array([-rate])
        self.control_hi = np.array([rate])
        sb = spec.state_bounds
        self.state_box = (sb[0], sb[1], sb[3])

    def deriv(self, x, u, d):
        psi = x[..., 2]
        out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1], d.shape[:-1]) + (3,))
        out[..., 0] = self.speed * np.cos(psi) + d[..., 0]
        out[..., 1] = self.speed * np.sin(psi) + d[..., 1]
        out[..., 2] = u[..., 0] + d[..., 2]
        return out

    def cont_jacobians(self, x, u, d):
        psi = x[2]
        A = np.zeros((3, 3))
        A[0, 2] = -self.speed * np.sin(psi)
        A[1, 2] = self.speed * np.cos(psi)
        B = np.zeros((3, 1))
        B[2, 0] = 1.0
        C = np.eye(3)
        return A, B, C


def make_car(spec: EnvSpec, model="bicycle", **kwargs):
    if model == "bicycle":
        return BicycleCar(spec)
    if model == "reduced":
        return ReducedCar(spec, **kwargs)
    raise ValueError(f"unknown car model {model!r}")
