"""Evaluation harness: rollout protocols, metrics and artifact I/O.

Three protocols are provided: a robustness sweep of safety controllers
against a worst-case attacker at several disturbance bounds, a filter
comparison on hand-picked hard initial states, and hard-state selection
itself (states where the fallback can survive the attacker but the raw task
policy cannot).  Metrics are written as CSV and traces as JSON lines; both
carry a schema version, and every randomized quantity is driven by a stream
derived from (seed, trajectory index) so serial and parallel runs agree.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .filters import FilterDecision, FilterState, filter_step, \
    direct_rollout_check, value_filter

SCHEMA_VERSION = 1
EVAL_STEPS = 200


def trajectory_rng(seed, index):
    """Independent stream for one trajectory; (seed, index) keyed so worker
    assignment cannot change the result."""
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# attacker adapters -- attacker(x, u, rng) -> d for serial rollouts
# ---------------------------------------------------------------------------

def oracle_attacker(oracle):
    return lambda x, u, rng: oracle.disturbance(x, u)


def learned_attacker(pi_d):
    """Deterministic mode of a trained disturbance policy (ignores u)."""
    return lambda x, u, rng: pi_d.mode(x)


def uniform_attacker(car):
    d_max, nd = car.spec.d_max, car.nd
    return lambda x, u, rng: rng.uniform(-d_max, d_max, nd)


def zero_attacker(car):
    z = np.zeros(car.nd)
    return lambda x, u, rng: z


def clip_attacker(attacker, d_bound):
    """Restrict an attacker's output to a (possibly smaller) bound."""
    return lambda x, u, rng: np.clip(attacker(x, u, rng), -d_bound, d_bound)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def rollout(car, control_fn, attacker, x0, n_steps=EVAL_STEPS, rng=None):
    """Closed-loop trace of a plain controller; stops at first violation."""
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x0, dtype=float)
    states, controls, disturbances, margins = [x.copy()], [], [], []
    safe = True
    for _ in range(n_steps):
        u = car.clamp_control(np.asarray(control_fn(x), dtype=float))
        d = car.clamp_disturbance(np.asarray(attacker(x, u, rng), dtype=float))
        x = car.step(x, u, d)
        states.append(x.copy())
        controls.append(u)
        disturbances.append(d)
        margins.append(float(car.safety_margin(x)))
        if margins[-1] < 0:
            safe = False
            break
    return {
        "states": np.array(states),
        "controls": np.array(controls),
        "disturbances": np.array(disturbances),
        "margins": np.array(margins),
        "safe": safe,
    }


def filtered_rollout(car, policy, attacker, x0, n_steps=EVAL_STEPS, rng=None):
    """Closed-loop trace of a filter policy (see the *FilterPolicy classes).

    Adds per-step branch labels, certification flags and stored plans so the
    finite-horizon guarantee can be audited afterwards.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    policy.reset()
    x = np.asarray(x0, dtype=float)
    states, controls, disturbances, margins = [x.copy()], [], [], []
    branches, certified, plans = [], [], []
    safe = True
    for _ in range(n_steps):
        dec = policy.step(x)
        u = np.asarray(dec.control, dtype=float)
        d = car.clamp_disturbance(np.asarray(attacker(x, u, rng), dtype=float))
        x = car.step(x, u, d)
        states.append(x.copy())
        controls.append(u)
        disturbances.append(d)
        margins.append(float(car.safety_margin(x)))
        branches.append(dec.branch)
        certified.append(dec.certified)
        plans.append(dec.plan)
        if margins[-1] < 0:
            safe = False
            break
    overrides = [b != "task" for b in branches]
    return {
        "states": np.array(states),
        "controls": np.array(controls),
        "disturbances": np.array(disturbances),
        "margins": np.array(margins),
        "branches": branches,
        "certified": np.array(certified, dtype=bool),
        "plans": plans,
        "safe": safe,
        "filter_frequency": float(np.mean(overrides)) if overrides else 0.0,
    }


# ---------------------------------------------------------------------------
# filter policy wrappers -- uniform reset()/step(x) interface
# ---------------------------------------------------------------------------

class RobustFilterPolicy:
    """Task policy shielded by FRS-tube certification with plan tracking."""

    def __init__(self, car, task_policy, pi_safe_mode, horizon,
                 check_kwargs=None):
        self.car = car
        self.task_policy = task_policy
        self.pi_safe_mode = pi_safe_mode
        self.horizon = horizon
        self.check_kwargs = dict(check_kwargs or {})
        self.state = FilterState(horizon=horizon)

    def reset(self):
        self.state = FilterState(horizon=self.horizon)
        if hasattr(self.task_policy, "reset"):
            self.task_policy.reset()

    def step(self, x):
        u_task = self.task_policy(x)
        return filter_step(self.car, self.state, x, u_task,
                           self.pi_safe_mode, self.check_kwargs)


class RolloutFilterPolicy:
    """Task policy shielded by a direct adversarial-rollout check."""

    def __init__(self, car, task_policy, pi_safe_mode, pi_dstb_mode, horizon):
        self.car = car
        self.task_policy = task_policy
        self.pi_safe_mode = pi_safe_mode
        self.pi_dstb_mode = pi_dstb_mode
        self.horizon = horizon

    def reset(self):
        if hasattr(self.task_policy, "reset"):
            self.task_policy.reset()

    def step(self, x):
        u_task = np.asarray(self.task_policy(x), dtype=float)
        ok = direct_rollout_check(self.car, x, u_task, self.pi_safe_mode,
                                  self.pi_dstb_mode, self.horizon)
        if ok:
            return FilterDecision(control=self.car.clamp_control(u_task),
                                  branch="task", certified=False)
        u = self.car.clamp_control(np.asarray(self.pi_safe_mode(x),
                                              dtype=float))
        return FilterDecision(control=u, branch="fallback-policy",
                              certified=False)


class ValueFilterPolicy:
    """Task policy shielded by a value-threshold check (critic or oracle)."""

    def __init__(self, car, task_policy, value_fn, epsilon, pi_safe_mode):
        self.car = car
        self.task_policy = task_policy
        self.value_fn = value_fn
        self.epsilon = epsilon
        self.pi_safe_mode = pi_safe_mode

    def reset(self):
        if hasattr(self.task_policy, "reset"):
            self.task_policy.reset()

    def step(self, x):
        u_task = self.task_policy(x)
        u, fallback = value_filter(x, u_task, self.value_fn, self.epsilon,
                                   self.pi_safe_mode)
        return FilterDecision(control=self.car.clamp_control(u),
                              branch="fallback-policy" if fallback else "task",
                              certified=False)


class UnfilteredPolicy:
    """The raw task policy, labelled like a filter for uniform evaluation."""

    def __init__(self, car, task_policy):
        self.car = car
        self.task_policy = task_policy

    def reset(self):
        if hasattr(self.task_policy, "reset"):
            self.task_policy.reset()

    def step(self, x):
        u = self.car.clamp_control(np.asarray(self.task_policy(x),
                                              dtype=float))
        return FilterDecision(control=u, branch="task", certified=False)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    name: str
    seed: int
    safe_rate: float
    filter_frequency: float
    n_rollouts: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        row = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": int(self.seed),
            "safe_rate": repr(float(self.safe_rate)),
            "filter_frequency": repr(float(self.filter_frequency)),
            "n_rollouts": int(self.n_rollouts),
        }
        for k, v in self.extra.items():
            row[k] = repr(float(v)) if isinstance(v, float) else v
        return row


def metrics_from_traces(name, seed, traces):
    """Recompute the headline metrics from dumped traces."""
    safe = [t["safe"] for t in traces]
    freq = [t.get("filter_frequency", 0.0) for t in traces]
    return MetricsRow(name=name, seed=seed,
                      safe_rate=float(np.mean(safe)),
                      filter_frequency=float(np.mean(freq)),
                      n_rollouts=len(traces))


def emit_metrics(rows, path):
    """CSV out; floats are repr()'d so a rerun diff is bit-meaningful."""
    dicts = [r.to_dict() if isinstance(r, MetricsRow) else dict(r)
             for r in rows]
    fields = ["schema_version", "name", "seed", "safe_rate",
              "filter_frequency", "n_rollouts"]
    for d in dicts:
        for k in d:
            if k not in fields:
                fields.append(k)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for d in dicts:
                writer.writerow(d)
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e}") from e


def read_metrics(path):
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise OSError(f"cannot read metrics from {path}: {e}") from e


def dump_trajectories(traces, path):
    """JSON-lines traces: one object per trajectory, schema versioned."""
    try:
        with open(path, "w") as f:
            for i, t in enumerate(traces):
                rec = {"schema_version": SCHEMA_VERSION, "index": i,
                       "safe": bool(t["safe"])}
                for key in ("states", "controls", "disturbances", "margins"):
                    rec[key] = np.asarray(t[key]).tolist()
                if "branches" in t:
                    rec["branches"] = list(t["branches"])
                    rec["filter_frequency"] = float(t["filter_frequency"])
                f.write(json.dumps(rec) + "\n")
    except OSError as e:
        raise OSError(f"cannot write trajectories to {path}: {e}") from e


def load_trajectories(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def robustness_sweep(car, controllers, d_max_list, attacker, n_rollouts,
                     seeds, n_steps=EVAL_STEPS, state_sampler=None):
    """Safe rate of each controller under the attacker clipped to each bound.

    controllers: {name: batched policy x_batch -> u_batch}
    attacker: batched worst-case disturbance (x_batch, u_batch) -> d_batch,
    produced at the largest bound and clipped down for smaller ones.
    state_sampler(n, rng) overrides the default uniform start distribution
    (useful to restrict to recoverable states).
    Returns per-(controller, d_max, seed) MetricsRow list.
    """
    if state_sampler is None:
        state_sampler = car.sample_initial_states
    rows = []
    for seed in seeds:
        x0 = state_sampler(n_rollouts, trajectory_rng(seed, 0))
        for d_max in d_max_list:
            def attack(x, u, _b=float(d_max)):
                return np.clip(attacker(x, u), -_b, _b)
            for name, control_fn in controllers.items():
                rate = _batched_safe_rate(car, control_fn, attack, x0, n_steps)
                rows.append(MetricsRow(
                    name=name, seed=seed, safe_rate=rate,
                    filter_frequency=0.0, n_rollouts=n_rollouts,
                    extra={"d_max": float(d_max)},
                ))
    return rows


def _batched_safe_rate(car, control_fn, attack, x0, n_steps):
    x = np.array(x0, dtype=float)
    alive = np.ones(len(x), dtype=bool)
    for _ in range(n_steps):
        u = control_fn(x)
        d = attack(x, u)
        x = car.step(x, u, d)
        alive &= car.safety_margin(x) >= 0
    return float(alive.mean())


def sweep_summary(rows):
    """Mean and standard deviation of safe rate over seeds."""
    grouped = {}
    for r in rows:
        grouped.setdefault((r.name, r.extra["d_max"]), []).append(r.safe_rate)
    return {k: (float(np.mean(v)), float(np.std(v)))
            for k, v in grouped.items()}


def filter_comparison(car, filter_factories, attacker, initial_states, seeds,
                      n_steps=EVAL_STEPS, n_threads=1, keep_traces=False):
    """Safe rate and filter frequency per filter, per seed.

    filter_factories: {name: () -> filter policy}; a fresh policy per
    trajectory because filters and task policies carry state.
    """
    rows, all_traces = [], {}
    for name, factory in filter_factories.items():
        for seed in seeds:
            def one(i):
                return filtered_rollout(car, factory(), attacker,
                                        initial_states[i], n_steps,
                                        trajectory_rng(seed, i))
            idx = range(len(initial_states))
            if n_threads > 1:
                with ThreadPoolExecutor(max_workers=n_threads) as pool:
                    traces = list(pool.map(one, idx))
            else:
                traces = [one(i) for i in idx]
            rows.append(metrics_from_traces(name, seed, traces))
            if keep_traces:
                all_traces[(name, seed)] = traces
    return (rows, all_traces) if keep_traces else rows


def select_hard_initial_states(car, n, fallback_policy, attacker,
                               task_policy_factory, n_steps=EVAL_STEPS,
                               budget=None, rng=None, precheck=None):
    """States where the fallback survives the attacker but the task fails.

    precheck(x) -> bool optionally rejects candidates cheaply (e.g. by an
    oracle value threshold) before the expensive paired rollouts.
    Raises RuntimeError when the sample budget is exhausted short of n.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if budget is None:
        budget = 200 * max(n, 1)
    found = []
    for _ in range(budget):
        if len(found) >= n:
            break
        x0 = car.sample_initial_state(rng)
        if precheck is not None and not precheck(x0):
            continue
        fb = rollout(car, fallback_policy, attacker, x0, n_steps, rng)
        if not fb["safe"]:
            continue
        task = rollout(car, task_policy_factory(), attacker, x0, n_steps, rng)
        if task["safe"]:
            continue
        found.append(np.asarray(x0, dtype=float))
    if len(found) < n:
        raise RuntimeError(
            f"hard-state selection yielded {len(found)}/{n} states "
            f"within a budget of {budget} samples"
        )
    return np.array(found)
