"""Convenience bundle around a solved grid value function for a car model.

Wraps the grid, the action discretization, and the car dynamics into policy
callables usable by the evaluation harness and the safety filters.
"""

from __future__ import annotations

import numpy as np

from .grid import (
    ActionGrid,
    GridSolver,
    interpolate,
    optimal_control,
    optimal_disturbance,
)


def default_reduced_axes(spec, shape=(101, 25, 51)):
    sb = spec.state_bounds
    lo_hi = [sb[0], sb[1], sb[3]]
    return [np.linspace(lo, hi, n) for (lo, hi), n in zip(lo_hi, shape)]


def make_step_fn(car):
    """Batched step adapter: broadcasts a single (u, d) pair over states."""

    def step_fn(x, u, d):
        x = np.asarray(x, dtype=float)
        u = np.broadcast_to(u, x.shape[:-1] + (car.nu,))
        d = np.broadcast_to(d, x.shape[:-1] + (car.nd,))
        return car.step(x, u, d)

    return step_fn


def grid_lipschitz_margin(axes, lipschitz=None):
    """One-cell value slack: sum of half cell widths times per-dim Lipschitz
    constants of the margin (position 1, heading 1 + footprint radius)."""
    if lipschitz is None:
        lipschitz = [1.0, 1.0, 1.6][: len(axes)]
    total = 0.0
    for ax, L in zip(axes, lipschitz):
        total += 0.5 * float(np.max(np.diff(ax))) * L
    return total


class GridOracle:
    """Solved grid + extracted optimal policies for one car model."""

    def __init__(self, car, gvf, actions: ActionGrid):
        self.car = car
        self.gvf = gvf
        self.actions = actions
        self.step_fn = make_step_fn(car)

    @classmethod
    def solve(cls, car, axes=None, gamma=0.999, n_u=5, n_d=3, tol=1e-5,
              max_sweeps=200, inner_sweeps=40, mode="two-player", verbose=False):
        if axes is None:
            axes = default_reduced_axes(car.spec)
        actions = ActionGrid.build(
            car.control_lo, car.control_hi, car.spec.d_max, car.nd,
            n_u=n_u, n_d=n_d,
        )
        solver = GridSolver(
            make_step_fn(car), car.safety_margin, axes, actions, gamma,
            mode=mode,
        )
        gvf, info = solver.solve(tol=tol, max_sweeps=max_sweeps,
                                 inner_sweeps=inner_sweeps, verbose=verbose)
        gvf.meta["solve_info"] = {k: info[k] for k in ("converged", "sweeps")}
        return cls(car, gvf, actions)

    def value(self, x):
        return interpolate(self.gvf, x)

    def control(self, x):
        """Optimal control at x; accepts single states or batches."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        u = optimal_control(
            self.gvf, self.step_fn, self.car.safety_margin,
            np.atleast_2d(x), self.actions.u_points, self.actions.d_points,
        )
        return u[0] if single else u

    def disturbance(self, x, u):
        """Worst-case grid disturbance at x given the applied control u."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        d = optimal_disturbance(
            self.gvf, self.step_fn, self.car.safety_margin,
            np.atleast_2d(x), np.atleast_2d(u), self.actions.d_points,
        )
        return d[0] if single else d

    def control_policy(self):
        return lambda x: self.control(x)

    def disturbance_policy(self):
        return lambda x, u: self.disturbance(x, u)
