"""Command-line interface.

Subcommands cover the full artifact pipeline: train the adversarial safety
policy (or the non-adversarial baselines), solve the grid oracle, then
evaluate — robustness sweep, critic/oracle confusion, filter comparison on
hard initial states, single closed-loop simulation, and a quick numeric
self-check.  Exit codes: 0 ok, 1 experiment failure, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness as hz
from .config import ConfigError, load_config, default_config
from .env import make_car
from .filters import critic_value_source, theorem1_monitor
from .grid import ActionGrid, confusion_eval, load_grid, save_grid
from .ilqr import IlqrTaskPolicy
from .nets import StochasticPolicy, load_weights, make_critic
from .oracle import GridOracle, default_reduced_axes
from .train import Trainer


def _load_cfg(args):
    return load_config(args.config) if args.config else default_config()


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def load_policy(path):
    """Stored stochastic policy (weight file with action bounds)."""
    net, doc = load_weights(path)
    if "bounds" not in doc:
        raise ValueError(f"{path} has no action bounds; not a policy file")
    lo, hi = (np.asarray(b, dtype=float) for b in doc["bounds"])
    return StochasticPolicy(net, lo, hi)


def load_policy_dir(car, path):
    """Artifacts of one training run: (pi_u, pi_d or None, critic)."""
    pi_u = load_policy(os.path.join(path, "pi_u.json"))
    pi_d_path = os.path.join(path, "pi_d.json")
    pi_d = load_policy(pi_d_path) if os.path.exists(pi_d_path) else None
    critic = make_critic(car.nx, car.nu, car.nd)
    critic.net, _ = load_weights(os.path.join(path, "critic.json"))
    return pi_u, pi_d, critic


def load_oracle(car, path):
    gvf = load_grid(path)
    meta = gvf.meta or {}
    actions = ActionGrid.build(car.control_lo, car.control_hi,
                               car.spec.d_max, car.nd,
                               n_u=int(meta.get("n_u", 5)),
                               n_d=int(meta.get("n_d", 3)))
    return GridOracle(car, gvf, actions)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, disturbance_mode=None):
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if disturbance_mode is not None:
        cfg.train.disturbance_mode = disturbance_mode
    car = cfg.make_car()
    out = _out_dir(args)
    trainer = Trainer(car, cfg.train)
    trainer.train(out_dir=out)
    with open(os.path.join(out, "env_spec.json"), "w") as f:
        f.write(car.spec.to_json())
    print(f"trained ({cfg.train.disturbance_mode} disturbance) -> {out}")
    return 0


def cmd_train_baseline(args):
    return cmd_train(args, disturbance_mode={"sac": "none", "dr": "uniform"}[args.mode])


def cmd_solve_grid(args):
    cfg = _load_cfg(args)
    car = cfg.make_car()
    if car.nx != 3:
        raise ConfigError("the grid oracle is only tractable for the "
                          "3-state reduced model")
    exp = cfg.experiment
    axes = default_reduced_axes(car.spec, shape=tuple(exp.grid_shape))
    oracle = GridOracle.solve(car, axes=axes, gamma=exp.grid_gamma,
                              verbose=args.verbose)
    out = _out_dir(args)
    path = os.path.join(out, "grid.npz")
    save_grid(oracle.gvf, path, env_hash=car.spec.content_hash())
    info = oracle.gvf.meta.get("solve_info", {})
    print(f"grid solved (converged={info.get('converged')}, "
          f"sweeps={info.get('sweeps')}) -> {path}")
    return 0


def cmd_sweep(args):
    cfg = _load_cfg(args)
    car = cfg.make_car()
    oracle = load_oracle(car, args.grid)
    controllers = {"oracle": lambda xb: oracle.control(xb)}
    for spec_str in args.policy or []:
        name, _, path = spec_str.partition("=")
        if not path:
            raise ConfigError(f"--policy wants NAME=path, got {spec_str!r}")
        pol = load_policy(path)
        controllers[name] = (lambda p: lambda xb: p.mode(xb))(pol)
    attacker = lambda xb, ub: oracle.disturbance(xb, ub)
    exp = cfg.experiment
    rows = hz.robustness_sweep(car, controllers, exp.d_max_list, attacker,
                               exp.n_rollouts, exp.seeds, exp.n_steps)
    out = _out_dir(args)
    hz.emit_metrics(rows, os.path.join(out, "sweep.csv"))
    for (name, d_max), (mean, std) in sorted(hz.sweep_summary(rows).items()):
        print(f"{name:>12s}  d_max={d_max:.3f}  "
              f"safe_rate={mean:.3f} +/- {std:.3f}")
    return 0


def cmd_confusion(args):
    cfg = _load_cfg(args)
    car = cfg.make_car()
    oracle = load_oracle(car, args.grid)
    pi_u, pi_d, critic = load_policy_dir(car, args.policy_dir)
    if pi_d is None:
        raise ConfigError("confusion needs an adversarially trained run "
                          "(pi_d.json missing)")
    nodes = oracle.gvf.node_states()
    batch = 4096
    pred = np.empty(len(nodes), dtype=bool)
    for i in range(0, len(nodes), batch):
        xb = nodes[i: i + batch]
        q = critic.value(xb, pi_u.mode(xb), pi_d.mode(xb))
        pred[i: i + batch] = q >= 0
    counts = confusion_eval(oracle.gvf.values.ravel() >= 0, pred)
    out = _out_dir(args)
    with open(os.path.join(out, "confusion.json"), "w") as f:
        json.dump({"true_safe": counts.true_safe,
                   "false_safe": counts.false_safe,
                   "true_unsafe": counts.true_unsafe,
                   "false_unsafe": counts.false_unsafe,
                   "false_safe_rate": counts.false_safe_rate,
                   "false_unsafe_rate": counts.false_unsafe_rate}, f,
                  indent=2)
    print(f"false_safe_rate={counts.false_safe_rate:.4f}  "
          f"false_unsafe_rate={counts.false_unsafe_rate:.4f}  "
          f"(n={counts.total})")
    return 0


def _make_filter_factories(car, cfg, pi_u, pi_d, critic):
    exp = cfg.experiment
    pi_safe = lambda x: pi_u.mode(x)
    pi_dstb = lambda x: pi_d.mode(x)
    task = lambda: IlqrTaskPolicy(car, reference_speed=exp.reference_speed,
                                  horizon=exp.ilqr_horizon)
    H = exp.filter_horizon
    critic_fn = critic_value_source(critic, pi_u, pi_d)
    return {
        "robust": lambda: hz.RobustFilterPolicy(car, task(), pi_safe, H),
        "direct": lambda: hz.RolloutFilterPolicy(car, task(), pi_safe,
                                                 pi_dstb, H),
        "critic": lambda: hz.ValueFilterPolicy(car, task(), critic_fn, 0.0,
                                               pi_safe),
        "none": lambda: hz.UnfilteredPolicy(car, task()),
    }


def cmd_filter_eval(args):
    cfg = _load_cfg(args)
    car = cfg.make_car()
    exp = cfg.experiment
    oracle = load_oracle(car, args.grid)
    pi_u, pi_d, critic = load_policy_dir(car, args.policy_dir)
    if pi_d is None:
        raise ConfigError("filter-eval needs an adversarial run (pi_d.json)")
    attacker = hz.oracle_attacker(oracle)
    margin = 0.05
    hard = hz.select_hard_initial_states(
        car, exp.n_hard_states, lambda x: pi_u.mode(x), attacker,
        lambda: IlqrTaskPolicy(car, reference_speed=exp.reference_speed,
                               horizon=exp.ilqr_horizon),
        n_steps=exp.n_steps,
        rng=np.random.default_rng(args.seed or 0),
        precheck=lambda x: oracle.value(x) >= margin)
    factories = _make_filter_factories(car, cfg, pi_u, pi_d, critic)
    rows, traces = hz.filter_comparison(
        car, factories, attacker, hard, exp.seeds, exp.n_steps,
        n_threads=args.threads, keep_traces=True)
    out = _out_dir(args)
    hz.emit_metrics(rows, os.path.join(out, "filter_metrics.csv"))
    verdicts = {}
    for (name, seed), trs in traces.items():
        if name != "robust":
            continue
        for i, t in enumerate(trs):
            v = theorem1_monitor(t["margins"], t["certified"],
                                 exp.filter_horizon, plans=t["plans"],
                                 states=t["states"])
            verdicts[f"{name}/{seed}/{i}"] = {
                "safe": v["safe"], "vacuous": v["vacuous"],
                "violations": len(v["violations"]),
            }
    with open(os.path.join(out, "monitor.json"), "w") as f:
        json.dump(verdicts, f, indent=2)
    for r in rows:
        print(f"{r.name:>8s} seed={r.seed} safe_rate={r.safe_rate:.3f} "
              f"filter_frequency={r.filter_frequency:.3f}")
    return 0


def cmd_simulate(args):
    cfg = _load_cfg(args)
    car = cfg.make_car()
    exp = cfg.experiment
    x0 = np.array([float(v) for v in args.x0.split(",")]) \
        if args.x0 else np.zeros(car.nx)
    if len(x0) != car.nx:
        raise ConfigError(f"x0 needs {car.nx} components")
    task = IlqrTaskPolicy(car, reference_speed=exp.reference_speed,
                          horizon=exp.ilqr_horizon)
    if args.filter == "none" and args.policy_dir is None:
        policy = hz.UnfilteredPolicy(car, task)
    else:
        if args.policy_dir is None:
            raise ConfigError(f"filter {args.filter!r} needs --policy-dir")
        pi_u, pi_d, critic = load_policy_dir(car, args.policy_dir)
        if args.attacker == "oracle" and args.grid is None:
            raise ConfigError("oracle attacker needs --grid")
        if pi_d is None and args.filter in ("direct", "critic"):
            raise ConfigError(f"filter {args.filter!r} needs an adversarial "
                              "run with pi_d.json")
        if pi_d is None:
            pi_d = pi_u  # robust filter never queries the disturbance policy
        factories = _make_filter_factories(car, cfg, pi_u, pi_d, critic)
        if args.filter not in factories:
            raise ConfigError(f"unknown filter {args.filter!r}")
        policy = factories[args.filter]()
    attackers = {
        "none": lambda: hz.zero_attacker(car),
        "uniform": lambda: hz.uniform_attacker(car),
    }
    if args.attacker == "oracle":
        attacker = hz.oracle_attacker(load_oracle(car, args.grid))
    elif args.attacker == "learned":
        if args.policy_dir is None:
            raise ConfigError("learned attacker needs --policy-dir")
        pi_d = load_policy(os.path.join(args.policy_dir, "pi_d.json"))
        attacker = hz.learned_attacker(pi_d)
    elif args.attacker in attackers:
        attacker = attackers[args.attacker]()
    else:
        raise ConfigError(f"unknown attacker {args.attacker!r}")
    rng = hz.trajectory_rng(args.seed or 0, 0)
    trace = hz.filtered_rollout(car, policy, attacker, x0,
                                n_steps=args.steps, rng=rng)
    out = _out_dir(args)
    path = os.path.join(out, "trace.jsonl")
    hz.dump_trajectories([trace], path)
    print(f"simulated {len(trace['margins'])} steps, safe={trace['safe']}, "
          f"filter_frequency={trace['filter_frequency']:.3f} -> {path}")
    return 0


def cmd_check(args):
    """Quick numeric self-checks; exit 1 on any failure."""
    from .env import EnvSpec, BicycleCar, ReducedCar
    from .nets import MlpNet
    _load_cfg(args)  # validate the config file if one was given
    failures = []

    def check(name, ok):
        print(f"  [{'ok' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    spec = EnvSpec()
    car = BicycleCar(spec)
    rng = np.random.default_rng(0)

    # RK4 order: halving dt should shrink the one-step error ~16x
    x = np.array([1.0, 0.1, 1.0, 0.2, 0.1])
    u, d = np.array([0.5, 0.3]), np.array([0.02] * 5)
    def fine(n):
        y = x.copy()
        for _ in range(n):
            y = car.step(y, u, d, dt=spec.dt / n)
        return y
    e1 = np.linalg.norm(fine(1) - fine(64))
    e2 = np.linalg.norm(fine(2) - fine(64))
    order = np.log2(e1 / e2)
    check(f"rk4 convergence order {order:.2f}", 3.5 < order < 4.5)

    # dynamics jacobians vs finite differences
    fx, fu, fd = car.jacobians(x, u, d)
    h = 1e-6
    fx_fd = np.stack([(car.step(x + h * e, u, d) - car.step(x - h * e, u, d))
                      / (2 * h) for e in np.eye(5)], axis=1)
    check("jacobian matches finite differences",
          bool(np.allclose(fx, fx_fd, atol=1e-4)))

    # MLP gradient check on a random scalar loss
    net = MlpNet([3, 16, 2], rng=rng)
    xin = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    out, cache = net.forward(xin, need_cache=True)
    _, grads = net.backward(cache, w)
    g = grads[0][0][0, 0]
    eps = 1e-6
    net.weights[0][0, 0] += eps
    up = float(np.sum(w * net.forward(xin)))
    net.weights[0][0, 0] -= 2 * eps
    dn = float(np.sum(w * net.forward(xin)))
    net.weights[0][0, 0] += eps
    check("mlp gradient matches finite differences",
          abs(g - (up - dn) / (2 * eps)) < 1e-5)

    # rollout determinism under trajectory seeding
    rcar = ReducedCar(EnvSpec())
    ctrl = lambda s: np.array([-2.0 * s[1] - 2.0 * s[2]])
    att = hz.uniform_attacker(rcar)
    t1 = hz.rollout(rcar, ctrl, att, [0, 0.1, 0], 50, hz.trajectory_rng(1, 0))
    t2 = hz.rollout(rcar, ctrl, att, [0, 0.1, 0], 50, hz.trajectory_rng(1, 0))
    check("seeded rollouts are bit-identical",
          bool(np.array_equal(t1["states"], t2["states"])))

    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="safegame",
        description="Safety-policy training, reachability certification, "
                    "and runtime safety filtering for a disturbed vehicle.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory", default=None)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 = strictly serial)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adversarial self-play training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="non-adversarial baselines")
    p.add_argument("--mode", choices=["sac", "dr"], required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("solve-grid", help="grid value iteration oracle")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_solve_grid)

    p = sub.add_parser("sweep", help="safe rate vs disturbance bound")
    p.add_argument("--grid", required=True)
    p.add_argument("--policy", action="append", metavar="NAME=path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("confusion", help="critic sign vs oracle grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--policy-dir", required=True)
    p.set_defaults(func=cmd_confusion)

    p = sub.add_parser("filter-eval", help="filter comparison on hard states")
    p.add_argument("--grid", required=True)
    p.add_argument("--policy-dir", required=True)
    p.set_defaults(func=cmd_filter_eval)

    p = sub.add_parser("simulate", help="single closed-loop trace")
    p.add_argument("--filter", default="none",
                   choices=["none", "robust", "direct", "critic"])
    p.add_argument("--attacker", default="none",
                   choices=["none", "uniform", "oracle", "learned"])
    p.add_argument("--policy-dir", default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--x0", default=None, help="comma-separated state")
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="quick numeric self-checks")
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
