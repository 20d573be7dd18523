"""Fallback rollout, time-varying LQR tracking, and remainder bounds.

A fallback plan simulates one step of the proposed task control followed by
the deterministic safety policy under zero disturbance, linearizes the
discrete dynamics along that trajectory, and computes tracking gains by a
backward Riccati recursion.  The linearization error is bounded per step by
dense sampling over the current error box with a safety multiplier — a
documented heuristic budget, not a certified interval bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def default_cost_weights(nx, nu):
    """Tracking cost defaults; config-overridable.

    The 5D bicycle prioritizes positional tracking.  The 3D reduced car has
    no longitudinal authority, so its longitudinal error carries no weight,
    and the lateral/heading weights are deliberately gentle: aggressive
    gains saturate the bounded heading rate inside the reachable error box,
    which wrecks the linearization remainder over long horizons.
    """
    if nx == 5:
        return np.diag([10.0, 10.0, 1.0, 1.0, 0.1]), np.eye(nu)
    if nx == 3:
        return np.diag([0.0, 2.0, 0.5]), 2.0 * np.eye(nu)
    q = np.eye(nx)
    q[0, 0] = q[1, 1] = 10.0
    return q, np.eye(nu)


@dataclass
class NominalTrajectory:
    """States x_bar[0..H+1] and controls u_bar[0..H] of a fallback rollout.

    Step 0 applies the task proposal; steps 1..H apply the safety policy's
    mode; the disturbance is zero throughout.
    """

    states: np.ndarray  # (H+2, nx)
    controls: np.ndarray  # (H+1, nu)
    timestamp: int = 0

    @property
    def horizon(self):
        return len(self.controls) - 1

    def to_dict(self):
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "timestamp": self.timestamp,
            "horizon": self.horizon,
        }


@dataclass
class TrackingPlan:
    """Gains and linearization data along a nominal trajectory.

    gains[tau] is K_tau for tau in 1..H (index 0 unused, kept as zeros so
    indices line up with the trajectory).  A[tau] = f_x + f_u K_tau for
    tau >= 1; A[0] is the open-loop f_x.  B[tau] = f_d.  remainders[tau]
    holds the half-width box bound on the linearization error of step tau.
    """

    gains: np.ndarray  # (H+1, nu, nx)
    fx: np.ndarray  # (H+1, nx, nx)
    fu: np.ndarray  # (H+1, nx, nu)
    fd: np.ndarray  # (H+1, nx, nd)
    A: np.ndarray  # (H+1, nx, nx) closed-loop
    B: np.ndarray  # (H+1, nx, nd)
    remainders: np.ndarray | None = None  # (H+1, nx) half-widths

    def to_dict(self):
        doc = {
            "gains": self.gains.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
        }
        if self.remainders is not None:
            doc["remainders"] = self.remainders.tolist()
        return doc


def nominal_rollout(car, x, u_task, pi_safe_mode, H, timestamp=0):
    """Zero-disturbance rollout: u_task once, then the safety policy."""
    if H < 1:
        raise ValueError("horizon must be at least 1")
    x = np.asarray(x, dtype=float)
    nx = len(x)
    d0 = np.zeros(car.nd)
    states = np.empty((H + 2, nx))
    controls = np.empty((H + 1, car.nu))
    states[0] = x
    controls[0] = car.clamp_control(np.asarray(u_task, dtype=float))
    states[1] = car.step(states[0], controls[0], d0)
    for tau in range(1, H + 1):
        controls[tau] = car.clamp_control(np.asarray(pi_safe_mode(states[tau]),
                                                     dtype=float))
        states[tau + 1] = car.step(states[tau], controls[tau], d0)
    return NominalTrajectory(states=states, controls=controls,
                             timestamp=timestamp)


def tvlqr(car, traj: NominalTrajectory, Q=None, R=None, Qf=None,
          psd_tol=-1e-10):
    """Backward Riccati recursion along the trajectory.

    Returns a TrackingPlan with gains for steps 1..H (step 0 is the task
    action and open loop).  Value matrices are symmetrized each step and
    checked for positive semidefiniteness.
    """
    H = traj.horizon
    nx, nu, nd = car.nx, car.nu, car.nd
    if Q is None or R is None:
        q_def, r_def = default_cost_weights(nx, nu)
        Q = q_def if Q is None else Q
        R = r_def if R is None else R
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Qf is None:
        Qf = Q
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("control cost R must be positive definite")

    fx = np.empty((H + 1, nx, nx))
    fu = np.empty((H + 1, nx, nu))
    fd = np.empty((H + 1, nx, nd))
    for tau in range(H + 1):
        fxt, fut, fdt = car.jacobians(traj.states[tau], traj.controls[tau],
                                      np.zeros(nd))
        fx[tau], fu[tau], fd[tau] = fxt, fut, fdt

    gains = np.zeros((H + 1, nu, nx))
    P = np.asarray(Qf, dtype=float)
    for tau in range(H, 0, -1):
        A_t, B_t = fx[tau], fu[tau]
        M = R + B_t.T @ P @ B_t
        try:
            K = -np.linalg.solve(M, B_t.T @ P @ A_t)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"ill-conditioned Riccati step at tau={tau}"
            ) from exc
        gains[tau] = K
        P = Q + A_t.T @ P @ A_t + A_t.T @ P @ B_t @ K
        P = 0.5 * (P + P.T)
        lam_min = np.linalg.eigvalsh(P).min()
        if lam_min < psd_tol:
            raise RuntimeError(
                f"Riccati value matrix lost PSD at tau={tau} "
                f"(min eigenvalue {lam_min:.3e})"
            )

    A = fx.copy()
    for tau in range(1, H + 1):
        A[tau] = fx[tau] + fu[tau] @ gains[tau]
    return TrackingPlan(gains=gains, fx=fx, fu=fu, fd=fd, A=A, B=fd.copy())


def rescale_gains(plan: TrackingPlan, scale):
    """Uniformly rescaled copy of the plan's gains (closed-loop A rebuilt)."""
    gains = plan.gains * scale
    A = plan.fx.copy()
    for tau in range(1, len(gains)):
        A[tau] = plan.fx[tau] + plan.fu[tau] @ gains[tau]
    return TrackingPlan(gains=gains, fx=plan.fx, fu=plan.fu, fd=plan.fd,
                        A=A, B=plan.B, remainders=None)


def _box_samples(half_widths, rng, n_random=0):
    """Corners, edge midpoints (one coordinate zeroed), center, and optional
    random points of the box [-hw, hw]."""
    hw = np.asarray(half_widths, dtype=float)
    n = len(hw)
    signs = np.array(
        np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")
    ).reshape(n, -1).T
    corners = signs * hw
    mids = []
    for i in range(n):
        m = signs.copy() * hw
        m[:, i] = 0.0
        mids.append(np.unique(m, axis=0))
    pts = [corners, np.zeros((1, n))] + mids
    if n_random:
        pts.append(rng.uniform(-hw, hw, size=(n_random, n)))
    return np.unique(np.concatenate(pts, axis=0), axis=0)


def remainder_bound(car, x_bar, u_bar, K, A_cl, B_mat, err_half_widths,
                    d_half_widths, multiplier=2.0, inflation=0.05,
                    rng=None, n_random=64):
    """Sampled componentwise bound on the linearization error of one step.

    Evaluates |step(x_bar + e, clamp(u_bar + K e), d) - x_next_bar
    - A_cl e - B d| over corner/midpoint/random points of the error box and
    corners of the disturbance box, then scales by the safety multiplier and
    the global inflation.  Heuristic by construction; validated Monte Carlo
    by the reachability tests.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    e_pts = _box_samples(err_half_widths, rng, n_random=n_random)
    d_hw = np.asarray(d_half_widths, dtype=float)
    nd = len(d_hw)
    d_signs = np.array(
        np.meshgrid(*([[-1.0, 1.0]] * nd), indexing="ij")
    ).reshape(nd, -1).T
    d_pts = np.concatenate([d_signs * d_hw, np.zeros((1, nd))], axis=0)

    x_next_bar = car.step(x_bar, u_bar, np.zeros(car.nd))
    # cross product of error points and disturbance points, flattened
    E = np.repeat(e_pts, len(d_pts), axis=0)
    D = np.tile(d_pts, (len(e_pts), 1))
    X = x_bar + E
    U = car.clamp_control(u_bar + E @ K.T)
    X_next = car.step(X, U, D)
    lin = x_next_bar + E @ A_cl.T + D @ B_mat.T
    resid = np.abs(X_next - lin).max(axis=0)
    return resid * multiplier * (1.0 + inflation)


def simulate_tracked(car, traj: NominalTrajectory, plan: TrackingPlan,
                     disturbances, x0=None):
    """Roll the full nonlinear dynamics under the tracking law.

    disturbances: (H+1, nd) or (B, H+1, nd).  Returns the visited states
    (same leading batch shape, H+2 per trajectory).
    """
    d_seq = np.asarray(disturbances, dtype=float)
    batched = d_seq.ndim == 3
    if not batched:
        d_seq = d_seq[None]
    Bsz = len(d_seq)
    H = traj.horizon
    x = np.broadcast_to(traj.states[0] if x0 is None else np.asarray(x0),
                        (Bsz, car.nx)).copy()
    out = np.empty((Bsz, H + 2, car.nx))
    out[:, 0] = x
    for tau in range(H + 1):
        if tau == 0:
            u = np.broadcast_to(traj.controls[0], (Bsz, car.nu))
        else:
            err = x - traj.states[tau]
            u = car.clamp_control(traj.controls[tau] + err @ plan.gains[tau].T)
        x = car.step(x, u, d_seq[:, tau])
        out[:, tau + 1] = x
    return out if batched else out[0]
