"""Grid solver for the discounted two-player safety fixed point.

Solves V(x) = (1 - gamma) g(x) + gamma * max_u min_d min{g(x), V(f(x, u, d))}
on a tensor grid with multilinear interpolation and exhaustive min/max over
discretized action sets.  Single-player mode uses D_h = {0}.

The solver is written against plain callables (step_fn, margin_fn) so the same
machinery covers the cars and small synthetic games.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


MAGIC = b"GRIDVF01"


@dataclass
class GridValueFunction:
    """Converged value function on a tensor grid."""

    axes: list  # per-dimension monotone node vectors
    values: np.ndarray  # shape = tuple(len(a) for a in axes)
    gamma: float
    mode: str  # "single-player" | "two-player"
    meta: dict = field(default_factory=dict)

    @property
    def ndim(self):
        return len(self.axes)

    def node_states(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def interpolation_weights(axes, x):
    """Clamped multilinear interpolation data for points x (..., n).

    Returns (idx_low (..., n) int, frac (..., n) in [0,1], clipped (...) bool).
    """
    x = np.asarray(x, dtype=float)
    n = len(axes)
    idx = np.empty(x.shape, dtype=np.int64)
    frac = np.empty(x.shape)
    clipped = np.zeros(x.shape[:-1], dtype=bool)
    for k, ax in enumerate(axes):
        xi = x[..., k]
        clipped |= (xi < ax[0]) | (xi > ax[-1])
        xi = np.clip(xi, ax[0], ax[-1])
        i = np.searchsorted(ax, xi, side="right") - 1
        i = np.clip(i, 0, len(ax) - 2)
        idx[..., k] = i
        denom = ax[i + 1] - ax[i]
        frac[..., k] = (xi - ax[i]) / denom
    return idx, frac, clipped


def interpolate(gvf: GridValueFunction, x, return_clipped=False):
    """Multilinear interpolation of the value at x (clamped to the grid box)."""
    idx, frac, clipped = interpolation_weights(gvf.axes, x)
    vals = _gather_interp(gvf.values, idx, frac)
    if return_clipped:
        return vals, clipped
    return vals


def _gather_interp(values, idx, frac):
    n = values.ndim
    strides = np.array(
        [int(np.prod(values.shape[k + 1:])) for k in range(n)], dtype=np.int64
    )
    flat = values.ravel()
    base = np.einsum("...k,k->...", idx, strides).astype(np.int64)
    out = np.zeros(idx.shape[:-1])
    for corner in range(1 << n):
        offset = 0
        w = np.ones(idx.shape[:-1])
        for k in range(n):
            if corner >> k & 1:
                offset += strides[k]
                w = w * frac[..., k]
            else:
                w = w * (1.0 - frac[..., k])
        out += w * flat.take(base + offset)
    return out


@dataclass
class ActionGrid:
    """Tensor-product discretizations of the control and disturbance sets."""

    u_points: np.ndarray  # (nU, nu)
    d_points: np.ndarray  # (nD, nd)

    @classmethod
    def build(cls, control_lo, control_hi, d_max, nd, n_u=5, n_d=3):
        u_axes = [
            np.linspace(lo, hi, n_u) for lo, hi in zip(control_lo, control_hi)
        ]
        u_points = _tensor_points(u_axes)
        if d_max > 0:
            d_axes = [np.linspace(-d_max, d_max, n_d) for _ in range(nd)]
            d_points = _tensor_points(d_axes)
        else:
            d_points = np.zeros((1, nd))
        return cls(u_points, d_points)

    @classmethod
    def single_player(cls, control_lo, control_hi, nd, n_u=5):
        g = cls.build(control_lo, control_hi, 0.0, nd, n_u=n_u)
        return g


def _tensor_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class GridSolver:
    """Discounted value iteration with policy-evaluation inner sweeps.

    Each outer sweep performs the exhaustive max-min backup on every node
    (a Jacobi pass, vectorized over the grid) and records the optimizing
    action pair; the optional inner sweeps then iterate the frozen-policy
    operator, which shares the fixed point and is much cheaper per pass.
    """

    def __init__(self, step_fn, margin_fn, axes, actions: ActionGrid, gamma,
                 mode="two-player"):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.actions = actions
        self.gamma = float(gamma)
        self.mode = mode
        d_points = actions.d_points
        if mode == "single-player":
            d_points = np.zeros((1, actions.d_points.shape[1]))
        self.d_points = d_points
        self.shape = tuple(len(a) for a in self.axes)
        nodes = _tensor_points(self.axes)
        self.g = np.asarray(margin_fn(nodes), dtype=float)
        # precompute interpolation data for every (u, d) pair
        self.n_u = len(actions.u_points)
        self.n_d = len(d_points)
        self._idx = []
        self._frac = []
        strides = np.array(
            [int(np.prod(self.shape[k + 1:])) for k in range(len(self.shape))],
            dtype=np.int64,
        )
        self._strides = strides
        for u in actions.u_points:
            for d in d_points:
                nxt = step_fn(nodes, u, d)
                idx, frac, _ = interpolation_weights(self.axes, nxt)
                self._idx.append(
                    np.einsum("nk,k->n", idx, strides).astype(np.int64)
                )
                self._frac.append(frac.astype(np.float32))
        self._idx = np.stack(self._idx)  # (nU * nD, N)
        self._frac = np.stack(self._frac)  # (nU * nD, N, n)

    def _interp_flat(self, V_flat, base, frac):
        n = len(self.shape)
        out = np.zeros(base.shape)
        for corner in range(1 << n):
            offset = 0
            w = np.ones(base.shape)
            for k in range(n):
                if corner >> k & 1:
                    offset += self._strides[k]
                    w = w * frac[..., k]
                else:
                    w = w * (1.0 - frac[..., k])
            out += w * V_flat.take(base + offset)
        return out

    def backup_all(self, V_flat):
        """One exhaustive max-min Jacobi pass.  Returns (V_new, best_combo)."""
        q = np.empty((self.n_u, len(V_flat)))
        arg = np.empty((self.n_u, len(V_flat)), dtype=np.int64)
        for iu in range(self.n_u):
            qmin = None
            amin = None
            for idd in range(self.n_d):
                c = iu * self.n_d + idd
                vals = self._interp_flat(V_flat, self._idx[c], self._frac[c])
                vals = np.minimum(self.g, vals)
                if qmin is None:
                    qmin, amin = vals, np.full(len(vals), c, dtype=np.int64)
                else:
                    better = vals < qmin
                    qmin = np.where(better, vals, qmin)
                    amin = np.where(better, c, amin)
            q[iu] = qmin
            arg[iu] = amin
        best_u = np.argmax(q, axis=0)
        cols = np.arange(q.shape[1])
        best = q[best_u, cols]
        best_combo = arg[best_u, cols]
        v_new = (1.0 - self.gamma) * self.g + self.gamma * best
        return v_new, best_combo

    def policy_eval(self, V_flat, combo, sweeps):
        """Iterate the frozen-action operator (cheap inner sweeps)."""
        cols = np.arange(len(V_flat))
        base = self._idx[combo, cols]
        frac = self._frac[combo, cols]
        for _ in range(sweeps):
            vals = self._interp_flat(V_flat, base, frac)
            V_flat = (1.0 - self.gamma) * self.g + self.gamma * np.minimum(
                self.g, vals
            )
        return V_flat

    def solve(self, tol=1e-6, max_sweeps=200, inner_sweeps=50, verbose=False,
              v0=None):
        """Returns (GridValueFunction, info dict with residual history)."""
        V = self.g.copy() if v0 is None else np.asarray(v0, dtype=float).ravel().copy()
        residuals = []
        converged = False
        for sweep in range(max_sweeps):
            V_new, combo = self.backup_all(V)
            res = float(np.abs(V_new - V).max())
            residuals.append(res)
            V = V_new
            if res < tol:
                converged = True
                break
            if inner_sweeps:
                V = self.policy_eval(V, combo, inner_sweeps)
            if verbose and sweep % 10 == 0:
                print(f"sweep {sweep}: residual {res:.3e}")
        info = {"residuals": residuals, "converged": converged,
                "sweeps": len(residuals)}
        gvf = GridValueFunction(
            axes=self.axes,
            values=V.reshape(self.shape),
            gamma=self.gamma,
            mode=self.mode,
        )
        return gvf, info


def q_values(gvf: GridValueFunction, step_fn, margin_fn, x, u_points, d_points):
    """min{g(x), V(f(x, u, d))} for all action pairs; x may be batched.

    Returns array of shape (nU, nD) + batch_shape.
    """
    x = np.asarray(x, dtype=float)
    g = margin_fn(x)
    out = np.empty((len(u_points), len(d_points)) + x.shape[:-1])
    for iu, u in enumerate(u_points):
        for idd, d in enumerate(d_points):
            nxt = step_fn(x, u, d)
            out[iu, idd] = np.minimum(g, interpolate(gvf, nxt))
    return out


def optimal_control(gvf, step_fn, margin_fn, x, u_points, d_points):
    """argmax_u min_d of the backup; ties broken by lowest action index."""
    q = q_values(gvf, step_fn, margin_fn, x, u_points, d_points)
    iu = np.argmax(q.min(axis=1), axis=0)
    return u_points[iu]


def optimal_disturbance(gvf, step_fn, margin_fn, x, u, d_points):
    """argmin_d of the backup for the given (possibly batched) control u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    g = margin_fn(x)
    q = np.empty((len(d_points),) + x.shape[:-1])
    for idd, d in enumerate(d_points):
        nxt = step_fn(x, u, d)
        q[idd] = np.minimum(g, interpolate(gvf, nxt))
    idd = np.argmin(q, axis=0)
    return d_points[idd]


@dataclass
class ConfusionCounts:
    true_safe: int
    true_unsafe: int
    false_safe: int
    false_unsafe: int

    @property
    def total(self):
        return self.true_safe + self.true_unsafe + self.false_safe + self.false_unsafe

    @property
    def false_safe_rate(self):
        unsafe = self.true_unsafe + self.false_safe
        return self.false_safe / unsafe if unsafe else 0.0

    @property
    def false_unsafe_rate(self):
        safe = self.true_safe + self.false_unsafe
        return self.false_unsafe / safe if safe else 0.0


def confusion_eval(oracle_safe, predictor_safe):
    """Counts of predictor sign vs. oracle sign over grid cells.

    false_safe = predictor says safe, oracle says unsafe.
    """
    oracle_safe = np.asarray(oracle_safe, dtype=bool).ravel()
    predictor_safe = np.asarray(predictor_safe, dtype=bool).ravel()
    if oracle_safe.shape != predictor_safe.shape:
        raise ValueError("shape mismatch between oracle and predictor")
    return ConfusionCounts(
        true_safe=int(np.sum(oracle_safe & predictor_safe)),
        true_unsafe=int(np.sum(~oracle_safe & ~predictor_safe)),
        false_safe=int(np.sum(~oracle_safe & predictor_safe)),
        false_unsafe=int(np.sum(oracle_safe & ~predictor_safe)),
    )


def save_grid(gvf: GridValueFunction, path, env_hash=None):
    """Binary grid file: header + little-endian float64 value array.

    A JSON sidecar (path + '.json') records provenance.
    """
    mode_code = {"single-player": 0, "two-player": 1}[gvf.mode]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBd", mode_code, gvf.ndim, gvf.gamma))
        for ax in gvf.axes:
            f.write(struct.pack("<q", len(ax)))
            f.write(np.asarray(ax, dtype="<f8").tobytes())
        f.write(np.asarray(gvf.values, dtype="<f8").tobytes())
    sidecar = {"env_hash": env_hash, "gamma": gvf.gamma, "mode": gvf.mode,
               "shape": list(gvf.values.shape)}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


def load_grid(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad grid file magic {magic!r}")
        mode_code, ndim, gamma = struct.unpack("<BBd", f.read(10))
        mode = {0: "single-player", 1: "two-player"}[mode_code]
        axes = []
        for _ in range(ndim):
            (n,) = struct.unpack("<q", f.read(8))
            axes.append(np.frombuffer(f.read(8 * n), dtype="<f8").copy())
        shape = tuple(len(a) for a in axes)
        count = int(np.prod(shape))
        values = np.frombuffer(f.read(8 * count), dtype="<f8").copy().reshape(shape)
    return GridValueFunction(axes=axes, values=values, gamma=gamma, mode=mode)
