"""Runtime safety filters and the finite-horizon safety monitor.

Three filters with increasing strength: a value-threshold switch, a direct
gameplay-rollout check against the learned disturbance, and a robust check
that certifies the task action by pushing a tracking-error tube through the
constraints.  The stateful filter policy applies the task action while the
robust check passes, falls back to the certified tracking plan for up to H
steps after it stops passing, and otherwise applies the safety policy
directly.  The monitor asserts exactly the certified-window guarantee: after
any certified step, no failure for the next H+1 steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import zonotope
from .tracking import NominalTrajectory, TrackingPlan, nominal_rollout, \
    remainder_bound, rescale_gains, tvlqr

GAIN_SCALES = (1.0, 0.5, 0.25, 0.0)
DEFAULT_EPSILON = 0.05  # value-threshold operating point


def value_filter(x, u_task, value_fn, epsilon, pi_safe_mode):
    """Least-restrictive switch: task control iff value_fn(x, u_task) >=
    epsilon (inclusive).  Returns (control, fallback_used).
    """
    v = float(value_fn(x, u_task))
    if v >= epsilon:
        return np.asarray(u_task, dtype=float), False
    return np.asarray(pi_safe_mode(x), dtype=float), True


def oracle_value_source(oracle, car):
    """Worst-case successor value under the grid oracle's disturbance set:
    min over the oracle's disturbance grid of V(step(x, u, d))."""
    d_points = oracle.actions.d_points

    def fn(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nxt = np.array([car.step(x, u, d) for d in d_points])
        return float(np.min(oracle.value(nxt)))

    return fn


def critic_value_source(critic, pi_u, pi_d):
    """Learned state value V(x) = Q(x, pi_u(x), pi_d(x)); the proposed
    control does not enter (the critic judges the current state only)."""

    def fn(x, u):
        xu = pi_u.mode(x)
        xd = pi_d.mode(x)
        return float(critic.value(np.atleast_2d(x), np.atleast_2d(xu),
                                  np.atleast_2d(xd))[0])

    return fn


def direct_rollout_check(car, x, u_task, pi_safe_mode, pi_dstb_mode, H):
    """Gameplay rollout: u_task once, then the safety policy, against the
    disturbance policy's mode.  Passes iff no visited state fails (margins
    of exactly zero pass; the failure set is open).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u_task, dtype=float)
    for tau in range(H + 1):
        d = np.asarray(pi_dstb_mode(x), dtype=float)
        x = car.step(x, u, d)
        if car.safety_margin(x) < 0:
            return False
        u = np.asarray(pi_safe_mode(x), dtype=float)
    return True


@dataclass
class FallbackPlan:
    """A certified tracking plan: nominal rollout, gains, and error tube."""

    traj: NominalTrajectory
    tracking: TrackingPlan
    tube: zonotope.FrsTube
    certified_at: int
    gain_scale: float = 1.0
    age: int = 0

    @property
    def horizon(self):
        return self.traj.horizon

    def gain_control(self, car, x_now):
        """Tracking control for the current age: u_bar + K (x - x_bar)."""
        tau = self.age
        err = np.asarray(x_now, dtype=float) - self.traj.states[tau]
        u = self.traj.controls[tau] + self.tracking.gains[tau] @ err
        return car.clamp_control(u)

    def to_dict(self):
        return {
            "trajectory": self.traj.to_dict(),
            "tracking": self.tracking.to_dict(),
            "tube": self.tube.to_dict(),
            "certified_at": self.certified_at,
            "gain_scale": self.gain_scale,
            "age": self.age,
        }


def robust_check(car, x, u_task, pi_safe_mode, H, Q=None, R=None,
                 d_inflation=0.05, remainder_multiplier=2.0,
                 max_generators=zonotope.DEFAULT_MAX_GENERATORS,
                 err_margin=1.1, rng=None, time_index=0):
    """Tube-based certification of a task action.

    Builds the nominal rollout and tracking gains, then propagates the
    error tube step by step, checking the swept footprint region, heading
    interval, and control hull as it goes.  A control-hull failure retries
    with uniformly rescaled gains (largest workable scale in GAIN_SCALES,
    tube re-propagated); a state failure rejects outright.  Returns
    (certified, FallbackPlan-or-None).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    spec = car.spec
    x = np.asarray(x, dtype=float)
    traj = nominal_rollout(car, x, u_task, pi_safe_mode, H,
                           timestamp=time_index)
    if np.any(car.safety_margin(traj.states[1:]) < 0):
        return False, None
    base_plan = tvlqr(car, traj, Q=Q, R=R)
    d_hw = car.disturbance_box(inflation=d_inflation)
    D = zonotope.from_box(np.zeros(car.nd), d_hw)
    nx = car.nx

    for scale in GAIN_SCALES:
        plan = base_plan if scale == 1.0 else rescale_gains(base_plan, scale)
        remainders = np.zeros((H + 1, nx))
        R_set = zonotope.linear_map(plan.B[0], D)
        sets = [zonotope.Zonotope(np.zeros(nx), np.zeros((nx, 0))), R_set]
        control_failed = False
        state_ok = True
        for tau in range(1, H + 2):
            # state check at tau (sets[tau] already built)
            region = zonotope.occupied_region(
                traj.states[tau], sets[tau], spec.footprint,
                pos_idx=tuple(car.pos_idx), psi_idx=car.psi_idx,
            )
            psi_int = zonotope.heading_interval(traj.states[tau], sets[tau],
                                                psi_idx=car.psi_idx)
            if zonotope.violates_constraints(region, spec, psi_interval=psi_int):
                state_ok = False
                break
            if tau == H + 1:
                break
            # control check and propagation for step tau
            if not zonotope.controls_within(
                traj.controls[tau], plan.gains[tau], sets[tau],
                car.control_lo, car.control_hi,
            ):
                control_failed = True
                break
            lo, hi = sets[tau].interval_hull()
            err_hw = np.maximum(np.abs(lo), np.abs(hi)) * err_margin
            remainders[tau] = remainder_bound(
                car, traj.states[tau], traj.controls[tau], plan.gains[tau],
                plan.A[tau], plan.B[tau], err_hw, d_hw,
                multiplier=remainder_multiplier, inflation=0.0, rng=rng,
            )
            nxt = zonotope.minkowski(
                zonotope.linear_map(plan.A[tau], sets[tau]),
                zonotope.linear_map(plan.B[tau], D),
            )
            if np.any(remainders[tau] > 0):
                nxt = zonotope.minkowski(
                    nxt, zonotope.from_box(np.zeros(nx), remainders[tau])
                )
            sets.append(zonotope.reduce(nxt, max_generators))
        if control_failed:
            continue  # retry with smaller gains
        if not state_ok:
            return False, None
        plan.remainders = remainders
        tube = zonotope.FrsTube(sets=sets, d_box=d_hw)
        return True, FallbackPlan(traj=traj, tracking=plan, tube=tube,
                                  certified_at=time_index, gain_scale=scale)
    return False, None


@dataclass
class FilterDecision:
    control: np.ndarray
    branch: str  # "task" | "fallback-gain" | "fallback-policy"
    certified: bool
    plan: FallbackPlan | None = None

    def to_row(self, t, margin=None):
        row = {
            "t": t,
            "branch": self.branch,
            "certified": int(self.certified),
            "control": list(np.asarray(self.control, dtype=float)),
        }
        if margin is not None:
            row["margin"] = float(margin)
        return row


@dataclass
class FilterState:
    """Single-owner mutable state of the runtime filter policy."""

    horizon: int
    plan: FallbackPlan | None = None
    time: int = 0


def filter_step(car, state: FilterState, x_now, u_task, pi_safe_mode,
                check_kwargs=None):
    """One invocation of the stateful safety filter.

    Certify the task action; on success apply it and store the fresh plan.
    Otherwise track the last certified plan while its age allows, else apply
    the safety policy's mode.
    """
    kwargs = dict(check_kwargs or {})
    ok, plan = robust_check(car, x_now, u_task, pi_safe_mode, state.horizon,
                            time_index=state.time, **kwargs)
    if ok:
        state.plan = plan
        state.time += 1
        control = car.clamp_control(np.asarray(u_task, dtype=float))
        return FilterDecision(control=control, branch="task", certified=True,
                              plan=plan)
    state.time += 1
    if state.plan is not None and state.plan.age + 1 <= state.plan.horizon:
        state.plan.age += 1
        control = state.plan.gain_control(car, x_now)
        return FilterDecision(control=control, branch="fallback-gain",
                              certified=False, plan=state.plan)
    state.plan = None
    control = car.clamp_control(np.asarray(pi_safe_mode(x_now), dtype=float))
    return FilterDecision(control=control, branch="fallback-policy",
                          certified=False)


def theorem1_monitor(margins, certified_flags, H, plans=None, states=None):
    """Audit the certified-window guarantee on a closed-loop trace.

    margins[t] is g(x_{t+1}) after applying step t's control; a certified
    step t must be followed by H+1 safe steps.  Returns a verdict dict; each
    violation carries a counterexample bundle (certified step, failure step,
    margin, and the plan/state context when provided).
    """
    margins = np.asarray(margins, dtype=float)
    certified_flags = np.asarray(certified_flags, dtype=bool)
    T = len(margins)
    violations = []
    for t in np.flatnonzero(certified_flags):
        window = margins[t: min(t + H + 1, T)]
        bad = np.flatnonzero(window < 0)
        if len(bad):
            bundle = {
                "certified_step": int(t),
                "failure_step": int(t + bad[0]),
                "margin": float(window[bad[0]]),
            }
            if plans is not None and plans[t] is not None:
                bundle["plan"] = plans[t].to_dict()
            if states is not None:
                bundle["states"] = np.asarray(
                    states[t: t + int(bad[0]) + 2]
                ).tolist()
            violations.append(bundle)
    return {
        "safe": len(violations) == 0,
        "vacuous": not bool(certified_flags.any()),
        "certified_steps": int(certified_flags.sum()),
        "monitored_steps": int(T),
        "violations": violations,
    }
