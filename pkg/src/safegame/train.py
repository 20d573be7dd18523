"""Offline safety synthesis: adversarial soft actor-critic self-play.

Co-trains a safety controller and a worst-case disturbance agent on the
discounted safety backup, with the disturbance as follower (updated every
gradient step, controller every tau-th), entropy temperature decay, and a
finite leaderboard of past opponents sampled by softmax of win rates.
The deployed policies are the top-ranked leaderboard entries, not the
final gradient iterates.

Baselines reuse the same loop with the disturbance replaced by zero
(plain SAC) or a uniform sampler over the disturbance set (domain
randomization).
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .nets import Adam, make_critic, make_policy, save_weights, soft_update


@dataclass
class TrainConfig:
    seed: int = 0
    gamma: float = 0.85
    gamma_end: float = 0.999
    gamma_anneal_steps: int = 20_000
    lr_critic: float = 3e-4
    tau_target: float = 5e-3
    lr_ctrl: float = 3e-4
    lr_dstb: float = 3e-4
    ctrl_update_period: int = 2  # tau: controller updated every tau-th step
    alpha_u: float = 0.05
    alpha_d: float = 0.05
    alpha_decay: float = 0.9999
    alpha_floor: float = 1e-3
    episode_len: int = 200
    batch_size: int = 128
    buffer_capacity: int = 200_000
    warmup_random_steps: int = 2_000
    hidden_policy: tuple = (256, 256, 256)
    hidden_critic: tuple = (128, 128, 128)
    # phase budgets (environment steps)
    ctrl_warmstart_steps: int = 30_000
    dstb_warmstart_steps: int = 15_000
    joint_steps: int = 60_000
    episodes_per_round: int = 10
    grad_steps_per_env_step: float = 1.0
    # leaderboard
    k_u: int = 5
    k_d: int = 5
    match_count: int = 20
    # baselines: "learned" | "uniform" | "none"
    disturbance_mode: str = "learned"
    # fraction of adversarial-phase episodes played against uniform noise
    # instead of an archived attacker, so replay coverage of the disturbance
    # box never degenerates to the learned policies' modes
    explore_uniform_prob: float = 0.25
    # candidate next-step disturbances in the backup's inner minimization
    # (1 = a single follower sample, as in plain actor-critic)
    target_d_candidates: int = 4
    # controller update in adversarial phases maximizes the worst case over
    # candidate disturbances instead of the replayed one
    ctrl_worst_case: bool = True
    divergence_guard: float = 1e6

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("hidden_policy", "hidden_critic"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class ReplayBuffer:
    """FIFO ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity, nx, nu, nd):
        self.capacity = capacity
        self.x = np.zeros((capacity, nx))
        self.u = np.zeros((capacity, nu))
        self.d = np.zeros((capacity, nd))
        self.x_next = np.zeros((capacity, nx))
        self.g_next = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def push(self, x, u, d, x_next, g_next):
        i = self.pos
        self.x[i] = x
        self.u[i] = u
        self.d[i] = d
        self.x_next[i] = x_next
        self.g_next[i] = g_next
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "x": self.x[idx], "u": self.u[idx], "d": self.d[idx],
            "x_next": self.x_next[idx], "g_next": self.g_next[idx],
        }


def critic_target_values(batch, target_critic, pi_u, pi_d, gamma, rng,
                         d_candidates=1, d_max=None):
    """Backup target y = (1 - gamma) g' + gamma min{g', Q'(x', u', d')}.

    Uses only the target critic, with next actions freshly sampled from the
    live policies.  The inner minimization over the disturbance can use
    several candidate d' (one policy sample plus uniform draws from the
    disturbance box, taking the smallest Q'): a single sample of a weak
    follower overestimates safety, which feeds back into an over-confident
    controller.
    """
    x2 = batch["x_next"]
    g2 = batch["g_next"]
    u2, _ = pi_u.sample(x2, rng=rng)
    d2 = pi_d(x2, rng)
    q2 = target_critic.value(x2, u2, d2)
    if d_candidates > 1 and d_max is not None:
        nd = np.shape(d2)[-1]
        for _ in range(d_candidates - 1):
            d_alt = rng.uniform(-d_max, d_max, size=(len(x2), nd))
            q2 = np.minimum(q2, target_critic.value(x2, u2, d_alt))
    return (1.0 - gamma) * g2 + gamma * np.minimum(g2, q2)


class _LearnedDisturbance:
    def __init__(self, policy):
        self.policy = policy

    def __call__(self, x, rng):
        d, _ = self.policy.sample(x, rng=rng)
        return d


class _UniformDisturbance:
    def __init__(self, d_max, nd):
        self.d_max = d_max
        self.nd = nd

    def __call__(self, x, rng):
        shape = np.atleast_2d(x).shape[:-1] + (self.nd,)
        d = rng.uniform(-self.d_max, self.d_max, size=shape)
        return d if np.asarray(x).ndim > 1 else d[0]


class _ZeroDisturbance:
    def __init__(self, nd):
        self.nd = nd

    def __call__(self, x, rng):
        shape = np.atleast_2d(x).shape[:-1] + (self.nd,)
        d = np.zeros(shape)
        return d if np.asarray(x).ndim > 1 else d[0]


class Leaderboard:
    """Finite archives of controller and disturbance policies.

    W[i, j] is the safety success rate of controller i against disturbance j.
    Disturbances are sampled for gameplay via softmax of their total win
    rates m_j = mean_i (1 - W[i, j]).
    """

    def __init__(self, k_u, k_d):
        self.k_u = k_u
        self.k_d = k_d
        self.ctrl = []
        self.dstb = []
        self.W = np.zeros((0, 0))

    @property
    def m(self):
        if self.W.size == 0:
            return np.zeros(len(self.dstb))
        return (1.0 - self.W).mean(axis=0)

    @property
    def sampling_probs(self):
        m = self.m
        if len(m) == 0:
            return m
        z = np.exp(m - m.max())
        return z / z.sum()

    def sample_disturbance(self, rng):
        if not self.dstb:
            return None
        probs = self.sampling_probs
        return self.dstb[rng.choice(len(self.dstb), p=probs)]

    def tournament_update(self, cur_ctrl, cur_dstb, play_match, match_count, rng):
        """Add the current policies, fill new W entries, prune, re-rank.

        play_match(ctrl, dstb, rng) -> True iff the controller stays safe.
        """
        n_u0, n_d0 = len(self.ctrl), len(self.dstb)
        self.ctrl.append(cur_ctrl)
        self.dstb.append(cur_dstb)
        W = np.zeros((n_u0 + 1, n_d0 + 1))
        W[:n_u0, :n_d0] = self.W
        for i in range(n_u0 + 1):
            for j in range(n_d0 + 1):
                if i < n_u0 and j < n_d0:
                    continue
                wins = sum(
                    play_match(self.ctrl[i], self.dstb[j], rng)
                    for _ in range(match_count)
                )
                W[i, j] = wins / match_count
        self.W = W
        if len(self.ctrl) > self.k_u:
            worst = int(np.argmin(self.W.mean(axis=1)))
            del self.ctrl[worst]
            self.W = np.delete(self.W, worst, axis=0)
        if len(self.dstb) > self.k_d:
            worst = int(np.argmin((1.0 - self.W).mean(axis=0)))
            del self.dstb[worst]
            self.W = np.delete(self.W, worst, axis=1)

    def snapshot(self):
        return {
            "n_ctrl": len(self.ctrl),
            "n_dstb": len(self.dstb),
            "win_matrix": self.W.tolist(),
            "dstb_win_rates": self.m.tolist(),
            "sampling_probs": self.sampling_probs.tolist(),
        }


class Trainer:
    """Owns the three networks, the buffer, and the update schedule."""

    def __init__(self, car, config: TrainConfig, rng=None):
        self.car = car
        self.cfg = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        nx, nu, nd = car.nx, car.nu, car.nd
        self.pi_u = make_policy(nx, nu, car.control_lo, car.control_hi,
                                hidden=config.hidden_policy, rng=self.rng)
        d_lo = np.full(nd, -car.spec.d_max)
        d_hi = np.full(nd, car.spec.d_max)
        if car.spec.d_max > 0:
            self.pi_d = make_policy(nx, nd, d_lo, d_hi,
                                    hidden=config.hidden_policy, rng=self.rng)
        else:
            self.pi_d = None
        self.critic = make_critic(nx, nu, nd, hidden=config.hidden_critic,
                                  rng=self.rng)
        self.critic_target = make_critic(nx, nu, nd, hidden=config.hidden_critic)
        for li in range(self.critic.net.n_layers):
            self.critic_target.net.weights[li][...] = self.critic.net.weights[li]
            self.critic_target.net.biases[li][...] = self.critic.net.biases[li]
        self.opt_critic = Adam(self.critic.net, lr=config.lr_critic)
        self.opt_ctrl = Adam(self.pi_u.net, lr=config.lr_ctrl)
        self.opt_dstb = (Adam(self.pi_d.net, lr=config.lr_dstb)
                         if self.pi_d is not None else None)
        self.buffer = ReplayBuffer(config.buffer_capacity, nx, nu, nd)
        self.leaderboard = Leaderboard(config.k_u, config.k_d)
        self.env_steps = 0
        self.grad_steps = 0
        self.alpha_u = config.alpha_u
        self.alpha_d = config.alpha_d
        self.log_rows = []

    # -- schedule ----------------------------------------------------------
    def gamma_now(self):
        cfg = self.cfg
        if cfg.gamma_anneal_steps <= 0 or cfg.gamma_end is None:
            return cfg.gamma
        frac = min(1.0, self.grad_steps / cfg.gamma_anneal_steps)
        return cfg.gamma + frac * (cfg.gamma_end - cfg.gamma)

    def _decay_alphas(self, u=True, d=True):
        # each temperature decays with its own player's updates, so the
        # disturbance still explores when its training starts late
        if u:
            self.alpha_u = max(self.cfg.alpha_floor,
                               self.alpha_u * self.cfg.alpha_decay)
        if d:
            self.alpha_d = max(self.cfg.alpha_floor,
                               self.alpha_d * self.cfg.alpha_decay)

    # -- gradient updates --------------------------------------------------
    def critic_step(self, batch, pi_d_sampler, adversarial=False):
        k = self.cfg.target_d_candidates if adversarial else 1
        y = critic_target_values(batch, self.critic_target, self.pi_u,
                                 pi_d_sampler, self.gamma_now(), self.rng,
                                 d_candidates=k, d_max=self.car.spec.d_max)
        q, cache = self.critic.value(batch["x"], batch["u"], batch["d"],
                                     need_cache=True)
        resid = q - y
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss) or loss > self.cfg.divergence_guard:
            raise RuntimeError(
                f"critic loss diverged ({loss:.3e}) at grad step "
                f"{self.grad_steps}; residual range "
                f"[{resid.min():.3e}, {resid.max():.3e}]"
            )
        grads, _ = self.critic.backward(cache, 2.0 * resid / len(resid))
        self.opt_critic.step(self.critic.net, grads)
        soft_update(self.critic_target.net, self.critic.net,
                    self.cfg.tau_target)
        return loss

    def _worst_case_d(self, x, u, d_stored):
        """Per-sample argmin of Q over a candidate disturbance set.

        Candidates: the replayed disturbance, a fresh follower sample, and
        the corners of the disturbance box.  A single replayed d only
        reflects how past attackers played against past controls; the
        Isaacs update needs the minimum over the disturbance set for the
        control being optimized.
        """
        cands = [np.atleast_2d(d_stored)]
        if self.pi_d is not None:
            d_pi, _ = self.pi_d.sample(x, rng=self.rng)
            cands.append(np.atleast_2d(d_pi))
        d_max = self.car.spec.d_max
        for signs in itertools.product((-d_max, d_max), repeat=self.car.nd):
            cands.append(np.broadcast_to(np.array(signs),
                                         cands[0].shape))
        qs = np.stack([self.critic.value(x, u, d) for d in cands])
        pick = np.argmin(qs, axis=0)
        stacked = np.stack(cands)
        return stacked[pick, np.arange(len(pick))]

    def controller_step(self, batch, adversarial=False):
        """Maximize Q with entropy bonus.

        Single-player phases reuse the stored disturbance; adversarial
        phases maximize the worst case over candidate disturbances.
        """
        B = len(batch["x"])
        u_t, logp, pcache = self.pi_u.sample(batch["x"], rng=self.rng,
                                             need_cache=True)
        d_opp = (self._worst_case_d(batch["x"], u_t, batch["d"])
                 if adversarial and self.cfg.ctrl_worst_case else batch["d"])
        q, qcache = self.critic.value(batch["x"], u_t, d_opp,
                                      need_cache=True)
        loss = float(np.mean(-q + self.alpha_u * logp))
        _, (_, du, _) = self.critic.backward(qcache, -np.ones(B) / B)
        _, grads = self.pi_u.backward(pcache, du,
                                      np.full(B, self.alpha_u / B))
        self.opt_ctrl.step(self.pi_u.net, grads)
        return loss

    def disturbance_step(self, batch):
        """Minimize Q with entropy bonus, reusing the stored control."""
        B = len(batch["x"])
        d_t, logp, pcache = self.pi_d.sample(batch["x"], rng=self.rng,
                                             need_cache=True)
        q, qcache = self.critic.value(batch["x"], batch["u"], d_t,
                                      need_cache=True)
        loss = float(np.mean(q + self.alpha_d * logp))
        _, (_, _, dd) = self.critic.backward(qcache, np.ones(B) / B)
        _, grads = self.pi_d.backward(pcache, dd, np.full(B, self.alpha_d / B))
        self.opt_dstb.step(self.pi_d.net, grads)
        return loss

    def gradient_step(self, pi_d_sampler, update_disturbance=True,
                      update_controller=None):
        """One scheduled update: critic + disturbance always, controller
        every ctrl_update_period-th call."""
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        # the backup target must sample d' from the live follower policy,
        # not from whichever archived opponent played this episode
        if update_disturbance and self.pi_d is not None:
            target_sampler = _LearnedDisturbance(self.pi_d)
        else:
            target_sampler = pi_d_sampler
        closs = self.critic_step(batch, target_sampler,
                                 adversarial=update_disturbance
                                 and self.pi_d is not None)
        dloss = np.nan
        uloss = np.nan
        if update_disturbance and self.pi_d is not None:
            dloss = self.disturbance_step(batch)
        self.grad_steps += 1
        if update_controller is None:
            update_controller = self.grad_steps % self.cfg.ctrl_update_period == 0
        if update_controller:
            uloss = self.controller_step(
                batch,
                adversarial=update_disturbance and self.pi_d is not None)
        self._decay_alphas(u=update_controller,
                           d=update_disturbance and self.pi_d is not None)
        return closs, uloss, dloss

    # -- rollouts ----------------------------------------------------------
    def run_episode(self, dstb_sampler, random_actions=False,
                    store=True):
        """One gameplay episode; returns (n_steps, safe_outcome)."""
        cfg = self.cfg
        x = self.car.sample_initial_state(self.rng)
        safe = True
        steps = 0
        for _ in range(cfg.episode_len):
            if random_actions:
                u = self.rng.uniform(self.car.control_lo, self.car.control_hi)
            else:
                u, _ = self.pi_u.sample(x, rng=self.rng)
            d = dstb_sampler(x, self.rng)
            x_next = self.car.step(x, u, d)
            g_next = float(self.car.safety_margin(x_next))
            if store:
                self.buffer.push(x, u, d, x_next, g_next)
            steps += 1
            x = x_next
            if g_next < 0:
                safe = False
                break
        self.env_steps += steps
        return steps, safe

    def episode_disturbance_sampler(self):
        """Per-episode opponent per the configured mode."""
        mode = self.cfg.disturbance_mode
        nd = self.car.nd
        if mode == "none" or self.pi_d is None:
            return _ZeroDisturbance(nd)
        if mode == "uniform":
            return _UniformDisturbance(self.car.spec.d_max, nd)
        if self.rng.uniform() < self.cfg.explore_uniform_prob:
            return _UniformDisturbance(self.car.spec.d_max, nd)
        pick = self.leaderboard.sample_disturbance(self.rng)
        if pick is None:
            return _LearnedDisturbance(self.pi_d)
        return _LearnedDisturbance(pick)

    def play_match(self, ctrl_policy, dstb_policy, rng):
        """One evaluation episode between archived policies (not stored)."""
        x = self.car.sample_initial_state(rng)
        for _ in range(self.cfg.episode_len):
            u, _ = ctrl_policy.sample(x, rng=rng)
            d, _ = dstb_policy.sample(x, rng=rng)
            x = self.car.step(x, u, d)
            if self.car.safety_margin(x) < 0:
                return False
        return True

    # -- phases ------------------------------------------------------------
    def _loop(self, env_step_budget, dstb_sampler_fn, update_disturbance,
              phase, out_dir=None, tournament_every=None):
        cfg = self.cfg
        start = self.env_steps
        round_idx = 0
        while self.env_steps - start < env_step_budget:
            ep_losses = []
            for _ in range(cfg.episodes_per_round):
                sampler = dstb_sampler_fn()
                random_acts = self.buffer.size < cfg.warmup_random_steps
                steps, safe = self.run_episode(sampler,
                                               random_actions=random_acts)
                n_grad = int(round(steps * cfg.grad_steps_per_env_step))
                if self.buffer.size >= cfg.batch_size and not random_acts:
                    for _ in range(n_grad):
                        closs, uloss, dloss = self.gradient_step(
                            sampler, update_disturbance=update_disturbance,
                            update_controller=(
                                None if phase != "dstb_warmstart" else False
                            ),
                        )
                        ep_losses.append((closs, uloss, dloss))
                if self.env_steps - start >= env_step_budget:
                    break
            round_idx += 1
            if tournament_every and round_idx % tournament_every == 0:
                self.leaderboard.tournament_update(
                    self.pi_u_snapshot(), self.pi_d_snapshot(),
                    self.play_match, cfg.match_count, self.rng,
                )
                if out_dir:
                    path = os.path.join(out_dir,
                                        f"leaderboard_{phase}_{round_idx}.json")
                    with open(path, "w") as f:
                        json.dump(self.leaderboard.snapshot(), f, indent=2)
            if ep_losses:
                arr = np.array(ep_losses)

                def _nanmean(col):
                    vals = col[np.isfinite(col)]
                    return float(vals.mean()) if len(vals) else float("nan")

                self.log_rows.append({
                        "phase": phase,
                        "env_steps": self.env_steps,
                        "grad_steps": self.grad_steps,
                        "critic_loss": _nanmean(arr[:, 0]),
                        "ctrl_loss": _nanmean(arr[:, 1]),
                        "dstb_loss": _nanmean(arr[:, 2]),
                        "alpha_u": self.alpha_u,
                        "alpha_d": self.alpha_d,
                        "gamma": self.gamma_now(),
                    })

    def pi_u_snapshot(self):
        snap = make_policy(self.car.nx, self.car.nu, self.pi_u.lo,
                           self.pi_u.hi, hidden=self.cfg.hidden_policy)
        snap.net = self.pi_u.net.copy()
        return snap

    def pi_d_snapshot(self):
        if self.pi_d is None:
            return None
        snap = make_policy(self.car.nx, self.car.nd, self.pi_d.lo,
                           self.pi_d.hi, hidden=self.cfg.hidden_policy)
        snap.net = self.pi_d.net.copy()
        return snap

    def train(self, out_dir=None, tournament_every=2):
        """Full three-phase schedule; returns the trained artifacts."""
        cfg = self.cfg
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        adversarial = cfg.disturbance_mode == "learned" and self.pi_d is not None
        # phase 1: single-player warm start of the controller
        self._loop(cfg.ctrl_warmstart_steps, lambda: _ZeroDisturbance(self.car.nd),
                   update_disturbance=False, phase="ctrl_warmstart",
                   out_dir=out_dir)
        if adversarial:
            # phase 2: disturbance attacks the frozen controller; tournaments
            # already run here so the archive enters phase 3 with a spread of
            # opponents rather than a single late iterate
            self._loop(cfg.dstb_warmstart_steps,
                       lambda: _LearnedDisturbance(self.pi_d),
                       update_disturbance=True, phase="dstb_warmstart",
                       out_dir=out_dir, tournament_every=tournament_every)
            # phase 3: joint adversarial loop with tournaments
            self._loop(cfg.joint_steps, self.episode_disturbance_sampler,
                       update_disturbance=True, phase="joint",
                       out_dir=out_dir, tournament_every=tournament_every)
            # deploy the top-ranked archived policies rather than the live
            # iterates: the joint game oscillates, and the leaderboard's win
            # matrix identifies the strongest controller seen during play
            self.leaderboard.tournament_update(
                self.pi_u_snapshot(), self.pi_d_snapshot(),
                self.play_match, cfg.match_count, self.rng,
            )
            best_u = int(np.argmax(self.leaderboard.W.mean(axis=1)))
            self.pi_u = self.leaderboard.ctrl[best_u]
            best_d = int(np.argmax(self.leaderboard.m))
            self.pi_d = self.leaderboard.dstb[best_d]
        elif cfg.disturbance_mode == "uniform":
            self._loop(cfg.joint_steps,
                       lambda: _UniformDisturbance(self.car.spec.d_max,
                                                   self.car.nd),
                       update_disturbance=False, phase="dr",
                       out_dir=out_dir)
        else:
            self._loop(cfg.joint_steps, lambda: _ZeroDisturbance(self.car.nd),
                       update_disturbance=False, phase="sac",
                       out_dir=out_dir)
        if out_dir:
            self.save(out_dir)
        return {
            "pi_u": self.pi_u,
            "pi_d": self.pi_d,
            "critic": self.critic,
            "leaderboard": self.leaderboard,
            "log": self.log_rows,
        }

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        save_weights(self.pi_u.net, os.path.join(out_dir, "pi_u.json"),
                     bounds=(self.pi_u.lo, self.pi_u.hi))
        if self.pi_d is not None:
            save_weights(self.pi_d.net, os.path.join(out_dir, "pi_d.json"),
                         bounds=(self.pi_d.lo, self.pi_d.hi))
        save_weights(self.critic.net, os.path.join(out_dir, "critic.json"))
        with open(os.path.join(out_dir, "train_config.json"), "w") as f:
            json.dump(self.cfg.to_dict(), f, indent=2)
        write_log_csv(self.log_rows, os.path.join(out_dir, "train_log.csv"))


LOG_FIELDS = ["phase", "env_steps", "grad_steps", "critic_loss", "ctrl_loss",
              "dstb_loss", "alpha_u", "alpha_d", "gamma"]


def write_log_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def evaluate_safe_rate(car, control_fn, attacker_fn, initial_states,
                       n_steps=200):
    """Batched closed-loop safe rate.

    control_fn(x_batch) -> u_batch; attacker_fn(x_batch, u_batch) -> d_batch.
    """
    x = np.array(initial_states, dtype=float)
    alive = np.ones(len(x), dtype=bool)
    for _ in range(n_steps):
        u = control_fn(x)
        d = attacker_fn(x, u)
        x = car.step(x, u, d)
        alive &= car.safety_margin(x) >= 0
    return float(alive.mean())
