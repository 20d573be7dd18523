"""Tests for the adversarial actor-critic trainer.

Heavy full-environment training is exercised by the acceptance suite; here
the update rules, schedules, and leaderboard mechanics are checked on stubs
and on a 1D toy environment where the safe behavior is obvious.
"""

import os
from types import SimpleNamespace

import numpy as np
import pytest

from safegame.nets import MlpNet, Critic, make_critic, make_policy
from safegame.train import (
    Leaderboard,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    critic_target_values,
    evaluate_safe_rate,
)


class LineCar:
    """Double-bounded integrator: x' = clip(x + dt*(u + d)), g = 1 - |x|.

    Staying safe means pushing toward the origin; the worst disturbance
    pushes outward.  Exposes the same interface the trainer needs from the
    vehicle models.
    """

    nx, nu, nd = 1, 1, 1

    def __init__(self, d_max=0.3, dt=1.0):
        self.spec = SimpleNamespace(d_max=d_max, dt=dt)
        self.control_lo = np.array([-1.0])
        self.control_hi = np.array([1.0])

    def step(self, x, u, d):
        u = np.clip(u, self.control_lo, self.control_hi)
        d = np.clip(d, -self.spec.d_max, self.spec.d_max)
        return np.clip(x + self.spec.dt * (u + d), -2.0, 2.0)

    def safety_margin(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 - np.abs(x[..., 0])

    def sample_initial_state(self, rng, max_rejections=1000):
        return rng.uniform(-0.9, 0.9, size=1)


def small_config(**kw):
    base = dict(
        seed=0, hidden_policy=(32, 32), hidden_critic=(32, 32),
        batch_size=64, warmup_random_steps=200, episode_len=30,
        gamma=0.8, gamma_end=0.95, gamma_anneal_steps=500,
        ctrl_warmstart_steps=600, dstb_warmstart_steps=300, joint_steps=600,
        episodes_per_round=5, match_count=3, k_u=3, k_d=3,
        lr_critic=3e-3, lr_ctrl=1e-3, lr_dstb=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


# -- replay buffer [TRIVIAL-style mechanics] --------------------------------

def test_buffer_fifo_wraparound():
    buf = ReplayBuffer(5, 1, 1, 1)
    for i in range(8):
        buf.push([float(i)], [0.0], [0.0], [float(i + 1)], 0.5)
    assert buf.size == 5
    # oldest surviving transition is i=3
    assert sorted(buf.x[:, 0]) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_buffer_sample_shapes_and_membership():
    buf = ReplayBuffer(100, 3, 2, 3)
    rng = np.random.default_rng(0)
    for i in range(10):
        buf.push(np.full(3, i), np.zeros(2), np.zeros(3), np.full(3, i), 0.1)
    batch = buf.sample(32, rng)
    assert batch["x"].shape == (32, 3)
    assert batch["u"].shape == (32, 2)
    assert set(batch["x"][:, 0]).issubset(set(range(10)))


# -- critic target ----------------------------------------------------------

class _RecordingCritic:
    """Test double: returns a fixed Q and records every call."""

    def __init__(self, q):
        self.q = q
        self.calls = []

    def value(self, x, u, d):
        self.calls.append((np.array(x), np.array(u), np.array(d)))
        return np.full(len(np.atleast_2d(x)), self.q)


class _FixedPolicy:
    def __init__(self, a):
        self.a = np.atleast_1d(a)

    def sample(self, x, rng=None):
        a = np.broadcast_to(self.a, np.atleast_2d(x).shape[:-1] + self.a.shape)
        return a.copy(), np.zeros(len(np.atleast_2d(x)))

    def __call__(self, x, rng):
        return self.sample(x, rng)[0]


def test_critic_target_formula():
    # y = (1-gamma) g' + gamma min{g', Q'}; by hand for both min branches
    rng = np.random.default_rng(0)
    batch = {"x_next": np.zeros((2, 1)), "g_next": np.array([0.5, -0.2])}
    target = _RecordingCritic(q=0.1)
    pi = _FixedPolicy(0.0)
    y = critic_target_values(batch, target, pi, pi, 0.9, rng)
    # g'=0.5 > Q'=0.1 -> y = 0.1*0.5 + 0.9*0.1 = 0.14
    # g'=-0.2 < Q'    -> y = 0.1*(-0.2) + 0.9*(-0.2) = -0.2
    assert np.allclose(y, [0.14, -0.2])


def test_critic_target_uses_target_net_and_fresh_actions():
    # the target net must be the one queried, at freshly sampled actions
    rng = np.random.default_rng(0)
    batch = {
        "x_next": np.ones((3, 1)),
        "g_next": np.full(3, 0.4),
        "u": np.full((3, 1), 99.0),  # stored actions must NOT be used
        "d": np.full((3, 1), 99.0),
    }
    target = _RecordingCritic(q=0.0)
    live = _RecordingCritic(q=123.0)
    pi_u = _FixedPolicy(0.25)
    pi_d = _FixedPolicy(-0.5)
    critic_target_values(batch, target, pi_u, pi_d, 0.9, rng)
    assert len(target.calls) == 1
    assert len(live.calls) == 0
    _, u_used, d_used = target.calls[0]
    assert np.allclose(u_used, 0.25)
    assert np.allclose(d_used, -0.5)


# -- single-step update sign checks on an analytic critic -------------------

def _linear_critic(nx, nu, nd, w_u=0.0, w_d=0.0):
    """Q(x, u, d) = w_u * sum(u) + w_d * sum(d), built as a 1-layer net."""
    net = MlpNet([nx + nu + nd, 1])
    net.weights[0][...] = 0.0
    net.weights[0][0, nx:nx + nu] = w_u
    net.weights[0][0, nx + nu:] = w_d
    net.biases[0][...] = 0.0
    return Critic(net, nx, nu, nd)


def test_controller_step_climbs_q():
    # with Q = +sum(u) the controller should push its mean action up
    car = LineCar()
    trainer = Trainer(car, small_config(alpha_u=0.0, alpha_d=0.0, lr_ctrl=1e-2))
    trainer.critic = _linear_critic(1, 1, 1, w_u=1.0)
    x = np.zeros((64, 1))
    batch = {"x": x, "u": np.zeros((64, 1)), "d": np.zeros((64, 1))}
    before = trainer.pi_u.mode(np.zeros(1))[0]
    for _ in range(200):
        trainer.controller_step(batch)
    after = trainer.pi_u.mode(np.zeros(1))[0]
    assert after > before + 0.2


def test_disturbance_step_descends_q():
    # the disturbance minimizes Q = +sum(d), so its mean action goes down
    car = LineCar()
    trainer = Trainer(car, small_config(alpha_u=0.0, alpha_d=0.0, lr_dstb=1e-2))
    trainer.critic = _linear_critic(1, 1, 1, w_d=1.0)
    x = np.zeros((64, 1))
    batch = {"x": x, "u": np.zeros((64, 1)), "d": np.zeros((64, 1))}
    before = trainer.pi_d.mode(np.zeros(1))[0]
    for _ in range(200):
        trainer.disturbance_step(batch)
    after = trainer.pi_d.mode(np.zeros(1))[0]
    assert after < before - 0.05


def test_critic_overfits_fixed_batch():
    # against frozen policies and target the TD loss must collapse
    car = LineCar()
    trainer = Trainer(car, small_config(lr_critic=1e-2, tau_target=0.0,
                                        gamma_anneal_steps=0))
    rng = np.random.default_rng(1)
    batch = {
        "x": rng.uniform(-1, 1, (64, 1)),
        "u": rng.uniform(-1, 1, (64, 1)),
        "d": rng.uniform(-0.3, 0.3, (64, 1)),
        "x_next": rng.uniform(-1, 1, (64, 1)),
        "g_next": rng.uniform(-0.5, 1.0, 64),
    }
    sampler = _FixedPolicy(0.0)
    trainer.pi_u = _FixedPolicy(0.0)  # freeze next-action sampling
    first = trainer.critic_step(batch, sampler)
    for _ in range(2500):
        last = trainer.critic_step(batch, sampler)
    assert last < 1e-3
    assert last < first / 100.0


def test_divergence_guard_raises():
    car = LineCar()
    trainer = Trainer(car, small_config(divergence_guard=1e-12))
    batch = {
        "x": np.zeros((8, 1)), "u": np.zeros((8, 1)), "d": np.zeros((8, 1)),
        "x_next": np.zeros((8, 1)), "g_next": np.full(8, 10.0),
    }
    with pytest.raises(RuntimeError, match="diverged"):
        trainer.critic_step(batch, _FixedPolicy(0.0))


# -- schedules --------------------------------------------------------------

def test_controller_update_period():
    # exactly one controller update per tau gradient steps
    car = LineCar()
    trainer = Trainer(car, small_config(ctrl_update_period=3))
    for _ in range(300):
        trainer.buffer.push(np.zeros(1), np.zeros(1), np.zeros(1),
                            np.zeros(1), 0.5)
    calls = {"n": 0}
    orig = trainer.controller_step

    def counting(batch, **kw):
        calls["n"] += 1
        return orig(batch, **kw)

    trainer.controller_step = counting
    for _ in range(9):
        trainer.gradient_step(_FixedPolicy(0.0))
    assert calls["n"] == 3
    assert trainer.grad_steps == 9


def test_alpha_decay_monotone_with_floor():
    car = LineCar()
    trainer = Trainer(car, small_config(alpha_u=0.1, alpha_d=0.1,
                                        alpha_decay=0.5, alpha_floor=0.01))
    values = [trainer.alpha_u]
    for _ in range(10):
        trainer._decay_alphas()
        values.append(trainer.alpha_u)
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.01)


def test_gamma_anneal_endpoints():
    car = LineCar()
    trainer = Trainer(car, small_config(gamma=0.8, gamma_end=0.99,
                                        gamma_anneal_steps=100))
    assert trainer.gamma_now() == pytest.approx(0.8)
    trainer.grad_steps = 50
    assert trainer.gamma_now() == pytest.approx(0.895)
    trainer.grad_steps = 1000
    assert trainer.gamma_now() == pytest.approx(0.99)


# -- leaderboard ------------------------------------------------------------

class _Tag:
    """Stand-in policy; strength drives the scripted match outcome."""

    def __init__(self, strength):
        self.strength = strength


def _scripted_match(ctrl, dstb, rng):
    return ctrl.strength > dstb.strength


def test_leaderboard_win_matrix_and_probs():
    board = Leaderboard(k_u=4, k_d=4)
    rng = np.random.default_rng(0)
    board.tournament_update(_Tag(1.0), _Tag(0.5), _scripted_match, 4, rng)
    board.tournament_update(_Tag(1.0), _Tag(2.0), _scripted_match, 4, rng)
    assert board.W.shape == (2, 2)
    # both controllers beat the weak disturbance, lose to the strong one
    assert np.allclose(board.W, [[1.0, 0.0], [1.0, 0.0]])
    probs = board.sampling_probs
    assert probs.sum() == pytest.approx(1.0)
    assert probs[1] > probs[0]  # stronger disturbance sampled more often


def test_leaderboard_pruning_keeps_capacity():
    board = Leaderboard(k_u=2, k_d=2)
    rng = np.random.default_rng(0)
    for s in [0.1, 0.5, 0.9, 1.3]:
        board.tournament_update(_Tag(s), _Tag(s - 0.05), _scripted_match, 2, rng)
    assert len(board.ctrl) == 2
    assert len(board.dstb) == 2
    assert board.W.shape == (2, 2)
    # pruning keeps the strongest entries
    assert min(c.strength for c in board.ctrl) >= 0.9


def test_leaderboard_existing_entries_not_replayed():
    board = Leaderboard(k_u=4, k_d=4)
    rng = np.random.default_rng(0)
    count = {"n": 0}

    def counting_match(c, d, r):
        count["n"] += 1
        return _scripted_match(c, d, r)

    board.tournament_update(_Tag(1.0), _Tag(0.5), counting_match, 3, rng)
    first = count["n"]
    board.tournament_update(_Tag(1.0), _Tag(0.5), counting_match, 3, rng)
    # second update fills only the new row and column: 2*2*3 + ... not the
    # old (0,0) cell
    assert count["n"] - first == 3 * 3  # cells (0,1),(1,0),(1,1)
    assert first == 3


# -- end-to-end toy training ------------------------------------------------

def test_training_smoke_and_artifacts(tmp_path):
    # short single-player run: finite losses, logs, reloadable weights
    car = LineCar()
    cfg = small_config(disturbance_mode="none", joint_steps=300)
    trainer = Trainer(car, cfg)
    out = trainer.train(out_dir=str(tmp_path))
    assert trainer.env_steps > 0
    assert len(trainer.log_rows) > 0
    assert all(np.isfinite(r["critic_loss"]) for r in trainer.log_rows)
    assert os.path.exists(tmp_path / "pi_u.json")
    assert os.path.exists(tmp_path / "critic.json")
    assert os.path.exists(tmp_path / "train_log.csv")
    from safegame.nets import load_weights
    net, doc = load_weights(str(tmp_path / "pi_u.json"))
    x = np.array([0.3])
    assert np.allclose(net.forward(x), trainer.pi_u.net.forward(x))


def test_toy_training_learns_safe_direction():
    # after a short adversarial run the controller should steer toward the
    # origin from both ends of the safe interval, and the disturbance should
    # push outward
    car = LineCar(d_max=0.3)
    cfg = small_config(
        disturbance_mode="learned",
        ctrl_warmstart_steps=1500, dstb_warmstart_steps=800, joint_steps=1500,
        alpha_u=0.02, alpha_d=0.02,
    )
    trainer = Trainer(car, cfg)
    trainer.train(tournament_every=3)
    xs = np.array([[0.8], [-0.8]])
    u = trainer.pi_u.mode(xs)
    assert u[0, 0] < 0.0
    assert u[1, 0] > 0.0
    d = trainer.pi_d.mode(xs)
    assert d[0, 0] > 0.0
    assert d[1, 0] < 0.0


def test_trained_controller_beats_naive_on_toy():
    # closed-loop safe rate under the learned attacker: trained controller
    # should clearly beat the do-nothing controller
    car = LineCar(d_max=0.3)
    cfg = small_config(
        disturbance_mode="learned",
        ctrl_warmstart_steps=1500, dstb_warmstart_steps=800, joint_steps=1500,
        alpha_u=0.02, alpha_d=0.02,
    )
    trainer = Trainer(car, cfg)
    trainer.train(tournament_every=3)
    rng = np.random.default_rng(7)
    x0 = np.array([trainer.car.sample_initial_state(rng) for _ in range(50)])

    def attacker(x, u):
        return trainer.pi_d.mode(x)

    trained = evaluate_safe_rate(car, trainer.pi_u.mode, attacker, x0,
                                 n_steps=50)
    passive = evaluate_safe_rate(car, lambda x: np.zeros_like(x), attacker,
                                 x0, n_steps=50)
    assert trained >= passive
    assert trained >= 0.8


def test_evaluate_safe_rate_trivial():
    car = LineCar(d_max=0.0)
    x0 = np.zeros((10, 1))
    rate = evaluate_safe_rate(
        car, lambda x: np.zeros_like(x), lambda x, u: np.zeros_like(x), x0,
        n_steps=20,
    )
    assert rate == 1.0
