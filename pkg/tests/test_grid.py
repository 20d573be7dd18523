import numpy as np
import pytest

from safegame import grid
from safegame.grid import (
    ActionGrid,
    GridSolver,
    GridValueFunction,
    confusion_eval,
    interpolate,
    load_grid,
    optimal_control,
    optimal_disturbance,
    save_grid,
)

# ---------------------------------------------------------------------------
# 1D toy game: x' = clamp(x + u + d), u in {-1,0,1}, d in {-0.5,0,0.5},
# g(x) = 1 - |x| on nodes {-2,...,2}.
# ---------------------------------------------------------------------------

TOY_NODES = np.arange(-2.0, 2.5, 1.0)
TOY_U = np.array([[-1.0], [0.0], [1.0]])
TOY_D = np.array([[-0.5], [0.0], [0.5]])


def toy_step(x, u, d):
    return np.clip(x + u + d, -2.0, 2.0)


def toy_margin(x):
    return 1.0 - np.abs(x[..., 0])


def toy_actions():
    return ActionGrid(u_points=TOY_U, d_points=TOY_D)


def brute_force_toy_fixed_point(gamma, iters=20000):
    """Independent dense fixed-point computation using np.interp only."""
    g = 1.0 - np.abs(TOY_NODES)
    V = g.copy()
    for _ in range(iters):
        V_new = np.empty_like(V)
        for i, x in enumerate(TOY_NODES):
            best_u = -np.inf
            for u in (-1.0, 0.0, 1.0):
                worst_d = np.inf
                for d in (-0.5, 0.0, 0.5):
                    nxt = min(max(x + u + d, -2.0), 2.0)
                    val = min(g[i], np.interp(nxt, TOY_NODES, V))
                    worst_d = min(worst_d, val)
                best_u = max(best_u, worst_d)
            V_new[i] = (1.0 - gamma) * g[i] + gamma * best_u
        if np.abs(V_new - V).max() < 1e-14:
            V = V_new
            break
        V = V_new
    return V


def make_toy_solver(gamma, mode="two-player"):
    return GridSolver(
        toy_step, toy_margin, [TOY_NODES], toy_actions(), gamma, mode=mode
    )


# -- interpolation ----------------------------------------------------------

def test_interpolate_identities():
    rng = np.random.default_rng(0)
    axes = [np.linspace(0, 1, 5), np.linspace(-1, 1, 7)]
    vals = rng.normal(size=(5, 7))
    gvf = GridValueFunction(axes, vals, 0.9, "two-player")
    # node identity
    for i in range(5):
        for j in range(7):
            x = np.array([axes[0][i], axes[1][j]])
            assert interpolate(gvf, x) == pytest.approx(vals[i, j])
    # midpoint mean in 1D slice
    x = np.array([0.5 * (axes[0][0] + axes[0][1]), axes[1][3]])
    assert interpolate(gvf, x) == pytest.approx(0.5 * (vals[0, 3] + vals[1, 3]))
    # constant reproduction
    gvf_c = GridValueFunction(axes, np.full((5, 7), 3.3), 0.9, "two-player")
    pts = rng.uniform([0, -1], [1, 1], size=(50, 2))
    assert np.allclose(interpolate(gvf_c, pts), 3.3)


def test_interpolate_clamps_and_flags():
    axes = [np.linspace(0, 1, 3)]
    gvf = GridValueFunction(axes, np.array([0.0, 1.0, 2.0]), 0.9, "two-player")
    val, clipped = interpolate(gvf, np.array([[2.5], [0.5]]), return_clipped=True)
    assert val[0] == pytest.approx(2.0)
    assert clipped[0] and not clipped[1]


# -- backup and solve -------------------------------------------------------

def test_backup_constant_fixed_point():
    solver = GridSolver(
        toy_step, lambda x: np.full(x.shape[:-1], 0.7), [TOY_NODES],
        toy_actions(), 0.9,
    )
    V = np.full(len(TOY_NODES), 0.7)
    V_new, _ = solver.backup_all(V)
    assert np.allclose(V_new, 0.7)


def test_backup_gamma_zero_returns_margin():
    solver = make_toy_solver(0.0)
    V_new, _ = solver.backup_all(np.zeros(len(TOY_NODES)))
    assert np.allclose(V_new, solver.g)


def test_toy_matches_brute_force():
    gamma = 0.9
    solver = make_toy_solver(gamma)
    gvf, info = solver.solve(tol=1e-12, max_sweeps=5000, inner_sweeps=0)
    ref = brute_force_toy_fixed_point(gamma)
    assert info["converged"]
    assert np.abs(gvf.values - ref).max() <= 1e-9


def test_toy_matches_brute_force_with_inner_sweeps():
    gamma = 0.95
    gvf, _ = make_toy_solver(gamma).solve(tol=1e-12, max_sweeps=5000,
                                          inner_sweeps=20)
    ref = brute_force_toy_fixed_point(gamma)
    assert np.abs(gvf.values - ref).max() <= 1e-9


def test_backup_is_gamma_contraction():
    gamma = 0.9
    solver = make_toy_solver(gamma)
    rng = np.random.default_rng(1)
    for _ in range(30):
        v1 = rng.normal(size=len(TOY_NODES))
        v2 = rng.normal(size=len(TOY_NODES))
        t1, _ = solver.backup_all(v1)
        t2, _ = solver.backup_all(v2)
        assert np.abs(t1 - t2).max() <= gamma * np.abs(v1 - v2).max() + 1e-12


def test_residuals_obey_contraction_bound():
    gamma = 0.9
    solver = make_toy_solver(gamma)
    _, info = solver.solve(tol=1e-10, max_sweeps=2000, inner_sweeps=0)
    res = info["residuals"]
    for k in range(1, len(res)):
        assert res[k] <= gamma ** k * res[0] + 1e-12


def test_single_player_dominates_two_player():
    gamma = 0.9
    two, _ = make_toy_solver(gamma).solve(tol=1e-12, max_sweeps=5000,
                                          inner_sweeps=0)
    one, _ = make_toy_solver(gamma, mode="single-player").solve(
        tol=1e-12, max_sweeps=5000, inner_sweeps=0
    )
    assert np.all(one.values >= two.values - 1e-12)


def test_monotone_in_disturbance_bound():
    gamma = 0.9
    small = ActionGrid(u_points=TOY_U, d_points=0.5 * TOY_D)
    big = toy_actions()
    v_small, _ = GridSolver(toy_step, toy_margin, [TOY_NODES], small, gamma).solve(
        tol=1e-12, max_sweeps=5000, inner_sweeps=0
    )
    v_big, _ = GridSolver(toy_step, toy_margin, [TOY_NODES], big, gamma).solve(
        tol=1e-12, max_sweeps=5000, inner_sweeps=0
    )
    assert np.all(v_big.values <= v_small.values + 1e-12)


def test_range_bound():
    gvf, _ = make_toy_solver(0.9).solve(tol=1e-12, max_sweeps=5000,
                                        inner_sweeps=0)
    g = 1.0 - np.abs(TOY_NODES)
    assert gvf.values.min() >= g.min() - 1e-12
    assert gvf.values.max() <= g.max() + 1e-12


# -- policy extraction ------------------------------------------------------

def test_toy_optimal_policies():
    gvf, _ = make_toy_solver(0.9).solve(tol=1e-12, max_sweeps=5000,
                                        inner_sweeps=0)
    u = optimal_control(gvf, toy_step, toy_margin, np.array([[1.5]]), TOY_U, TOY_D)
    assert u[0, 0] == pytest.approx(-1.0)
    # disturbance choice matches independent enumeration of the backup
    x = 0.5
    u_star = -1.0
    enum = [
        min(
            toy_margin(np.array([x])),
            np.interp(toy_step(np.array([x]), u_star, d), TOY_NODES, gvf.values),
        )
        for d in (-0.5, 0.0, 0.5)
    ]
    d_star = (-0.5, 0.0, 0.5)[int(np.argmin(enum))]
    d = optimal_disturbance(gvf, toy_step, toy_margin, np.array([[x]]),
                            np.array([[u_star]]), TOY_D)
    assert d[0, 0] == pytest.approx(d_star)


def test_argmax_invariant_to_positive_rescale():
    gvf, _ = make_toy_solver(0.9).solve(tol=1e-12, max_sweeps=5000,
                                        inner_sweeps=0)
    xs = np.linspace(-1.9, 1.9, 21)[:, None]
    u1 = optimal_control(gvf, toy_step, toy_margin, xs, TOY_U, TOY_D)
    scaled = GridValueFunction(gvf.axes, 3.0 * gvf.values, gvf.gamma, gvf.mode)
    u2 = optimal_control(
        scaled, toy_step, lambda x: 3.0 * toy_margin(x), xs, TOY_U, TOY_D
    )
    assert np.array_equal(u1, u2)


# -- confusion --------------------------------------------------------------

def test_confusion_self_comparison():
    oracle = np.array([True, False, True, True])
    c = confusion_eval(oracle, oracle)
    assert c.false_safe == 0 and c.false_unsafe == 0
    assert c.total == 4


def test_confusion_degenerate_unsafe_predictor():
    rng = np.random.default_rng(2)
    oracle = rng.random(1000) < 0.7
    c = confusion_eval(oracle, np.zeros(1000, dtype=bool))
    assert c.false_safe == 0
    assert c.false_unsafe == int(oracle.sum())
    assert c.false_unsafe_rate == pytest.approx(1.0)


# -- I/O --------------------------------------------------------------------

def test_grid_roundtrip(tmp_path):
    gvf, _ = make_toy_solver(0.9).solve(tol=1e-10, max_sweeps=2000,
                                        inner_sweeps=0)
    path = tmp_path / "toy.grid"
    save_grid(gvf, path, env_hash="abc123")
    loaded = load_grid(path)
    assert loaded.gamma == gvf.gamma
    assert loaded.mode == gvf.mode
    assert np.array_equal(loaded.values, gvf.values)
    assert all(np.array_equal(a, b) for a, b in zip(loaded.axes, gvf.axes))
    # byte-level roundtrip
    path2 = tmp_path / "toy2.grid"
    save_grid(loaded, path2, env_hash="abc123")
    assert path.read_bytes() == path2.read_bytes()


def test_grid_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.grid"
    path.write_bytes(b"NOTAGRID" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_grid(path)
