"""Receding-horizon iLQR task policy with soft constraint barriers.

The task is to hold the lane center at a reference speed.  Road edges and
obstacles enter the stage cost through a relaxed log barrier, so the task
policy discourages but does not guarantee constraint satisfaction - that is
the safety filter's job.  Cost derivatives and dynamics Jacobians are
analytic, which keeps a single receding-horizon call around 10ms.
"""

from __future__ import annotations

import numpy as np


def relaxed_log_barrier(z, delta=0.1):
    """-log(z) extended quadratically below delta, so it is defined (and
    twice differentiable) for infeasible z as well."""
    z = np.asarray(z, dtype=float)
    safe = np.maximum(z, delta)
    quad = 0.5 * (((z - 2.0 * delta) / delta) ** 2 - 1.0) - np.log(delta)
    return np.where(z > delta, -np.log(safe), quad)


def relaxed_log_barrier_d1(z, delta=0.1):
    z = np.asarray(z, dtype=float)
    safe = np.maximum(z, delta)
    return np.where(z > delta, -1.0 / safe, (z - 2.0 * delta) / delta ** 2)


def relaxed_log_barrier_d2(z, delta=0.1):
    z = np.asarray(z, dtype=float)
    safe = np.maximum(z, delta)
    return np.where(z > delta, 1.0 / safe ** 2, 1.0 / delta ** 2)


class IlqrTaskPolicy:
    """Lane-keeping task controller; callable x -> first planned control."""

    def __init__(self, car, reference_speed=1.0, horizon=20,
                 w_speed=1.0, w_lane=2.0, w_heading=0.5, w_u=0.1,
                 w_barrier=0.05, barrier_delta=0.1, max_iters=30,
                 cost_tol=1e-6, reg_init=1e-6, reg_max=1e8):
        self.car = car
        self.v_ref = reference_speed
        self.H = horizon
        self.w_speed = w_speed
        self.w_lane = w_lane
        self.w_heading = w_heading
        self.w_u = w_u
        self.w_barrier = w_barrier
        self.delta = barrier_delta
        self.max_iters = max_iters
        self.cost_tol = cost_tol
        self.reg_init = reg_init
        self.reg_max = reg_max
        self.prev_us = None
        self.last_converged = True

    # -- cost --------------------------------------------------------------
    def stage_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        c = self.w_lane * x[1] ** 2
        psi = x[self.car.psi_idx]
        c += self.w_heading * psi ** 2
        if self.car.nx == 5:
            c += self.w_speed * (x[2] - self.v_ref) ** 2
        c += self.w_u * float(u @ u)
        if self.w_barrier > 0:
            c += self.w_barrier * float(
                np.sum(relaxed_log_barrier(self._margins(x), self.delta))
            )
        return float(c)

    def _margins(self, x):
        """Individual road-edge and obstacle clearances of the car center."""
        spec = self.car.spec
        px, py = x[0], x[1]
        out = [spec.road_half_width - py, spec.road_half_width + py]
        for x0, x1, y0, y1 in spec.obstacle_boxes:
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            r = 0.5 * np.hypot(x1 - x0, y1 - y0)
            out.append(np.hypot(px - cx, py - cy) - r)
        return np.array(out)

    def _cost_derivs(self, x, u):
        """Analytic stage-cost gradient and Hessian blocks."""
        nx, nu = self.car.nx, self.car.nu
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lx = np.zeros(nx)
        lxx = np.zeros((nx, nx))
        c = self.w_lane * x[1] ** 2
        lx[1] += 2.0 * self.w_lane * x[1]
        lxx[1, 1] += 2.0 * self.w_lane
        pi = self.car.psi_idx
        c += self.w_heading * x[pi] ** 2
        lx[pi] += 2.0 * self.w_heading * x[pi]
        lxx[pi, pi] += 2.0 * self.w_heading
        if nx == 5:
            c += self.w_speed * (x[2] - self.v_ref) ** 2
            lx[2] += 2.0 * self.w_speed * (x[2] - self.v_ref)
            lxx[2, 2] += 2.0 * self.w_speed
        lu = 2.0 * self.w_u * u
        luu = 2.0 * self.w_u * np.eye(nu)
        c += self.w_u * float(u @ u)
        if self.w_barrier > 0:
            wb, delta = self.w_barrier, self.delta
            spec = self.car.spec
            px, py = x[0], x[1]
            # road edges: z linear in p_y
            for sign in (-1.0, 1.0):
                z = spec.road_half_width + sign * py
                c += wb * float(relaxed_log_barrier(z, delta))
                d1 = wb * float(relaxed_log_barrier_d1(z, delta))
                d2 = wb * float(relaxed_log_barrier_d2(z, delta))
                lx[1] += d1 * sign
                lxx[1, 1] += d2
            # obstacles: z = |p - center| - radius
            for x0, x1, y0, y1 in spec.obstacle_boxes:
                cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
                r0 = 0.5 * np.hypot(x1 - x0, y1 - y0)
                dx, dy = px - cx, py - cy
                r = np.hypot(dx, dy)
                if r < 1e-9:
                    r = 1e-9
                z = r - r0
                c += wb * float(relaxed_log_barrier(z, delta))
                d1 = wb * float(relaxed_log_barrier_d1(z, delta))
                d2 = wb * float(relaxed_log_barrier_d2(z, delta))
                n_vec = np.array([dx, dy]) / r
                grad_z = n_vec
                hess_z = (np.eye(2) - np.outer(n_vec, n_vec)) / r
                lx[:2] += d1 * grad_z
                lxx[:2, :2] += d2 * np.outer(grad_z, grad_z) + d1 * hess_z
        lux = np.zeros((nu, nx))
        return c, lx, lu, lxx, luu, lux

    # -- iLQR --------------------------------------------------------------
    def total_cost(self, xs, us):
        c = sum(self.stage_cost(xs[t], us[t]) for t in range(len(us)))
        c += self.stage_cost(xs[-1], np.zeros(self.car.nu))
        return c

    def _rollout(self, x0, us):
        xs = [np.asarray(x0, dtype=float)]
        for u in us:
            xs.append(self.car.step(xs[-1], u, np.zeros(self.car.nd)))
        return np.array(xs)

    def solve(self, x0, us_init=None):
        """Full iLQR solve; returns (xs, us, converged)."""
        H = self.H
        nu = self.car.nu
        us = (np.zeros((H, nu)) if us_init is None
              else np.array(us_init, dtype=float))
        xs = self._rollout(x0, us)
        cost = self.total_cost(xs, us)
        reg = self.reg_init
        converged = False
        for _ in range(self.max_iters):
            # backward pass
            derivs = [self._cost_derivs(xs[t], us[t]) for t in range(H)]
            _, Vx, _, Vxx, _, _ = self._cost_derivs(xs[H], np.zeros(nu))
            ks, Ks = [], []
            failed = False
            for t in reversed(range(H)):
                fx, fu, _ = self.car.jacobians(xs[t], us[t], np.zeros(self.car.nd))
                _, lx, lu, lxx, luu, lux = derivs[t]
                Qx = lx + fx.T @ Vx
                Qu = lu + fu.T @ Vx
                Qxx = lxx + fx.T @ Vxx @ fx
                Quu = luu + fu.T @ Vxx @ fu + reg * np.eye(nu)
                Qux = lux + fu.T @ Vxx @ fx
                try:
                    np.linalg.cholesky(0.5 * (Quu + Quu.T))
                except np.linalg.LinAlgError:
                    failed = True
                    break
                k = -np.linalg.solve(Quu, Qu)
                K = -np.linalg.solve(Quu, Qux)
                ks.append(k)
                Ks.append(K)
                Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
                Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
                Vxx = 0.5 * (Vxx + Vxx.T)
            if failed:
                reg = max(reg * 10.0, 1e-4)
                if reg > self.reg_max:
                    break
                continue
            ks.reverse()
            Ks.reverse()
            # forward pass with backtracking line search
            improved = False
            for alpha in (1.0, 0.5, 0.25, 0.1, 0.03, 0.01):
                xs_new = [xs[0]]
                us_new = []
                for t in range(H):
                    du = alpha * ks[t] + Ks[t] @ (xs_new[t] - xs[t])
                    u = self.car.clamp_control(us[t] + du)
                    us_new.append(u)
                    xs_new.append(self.car.step(xs_new[t], u, np.zeros(self.car.nd)))
                xs_new = np.array(xs_new)
                us_new = np.array(us_new)
                new_cost = self.total_cost(xs_new, us_new)
                if np.isfinite(new_cost) and new_cost < cost:
                    improved = True
                    break
            if not improved:
                reg = max(reg * 10.0, 1e-4)
                if reg > self.reg_max:
                    break
                continue
            reg = max(reg / 10.0, self.reg_init)
            delta = cost - new_cost
            xs, us, cost = xs_new, us_new, new_cost
            if delta < self.cost_tol:
                converged = True
                break
        return xs, us, converged

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        us_init = None
        if self.prev_us is not None:
            us_init = np.vstack([self.prev_us[1:], self.prev_us[-1:]])
        xs, us, converged = self.solve(x, us_init)
        self.last_converged = converged
        if not converged and us_init is not None:
            # fall back to the previous solution shifted by one step
            self.prev_us = us_init
            return us_init[0]
        self.prev_us = us
        return us[0]

    def reset(self):
        self.prev_us = None
