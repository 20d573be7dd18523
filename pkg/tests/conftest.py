"""Shared fixtures for the acceptance suite.

The expensive artifacts (solved grid oracle, trained policy runs) are
cached on disk under tests/_artifacts/, keyed by a hash of everything that
determines them, so only the first full run pays the cost.  Delete the
directory to force a rebuild.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from safegame.env import EnvSpec, ReducedCar
from safegame.grid import ActionGrid, load_grid, save_grid
from safegame.oracle import GridOracle
from safegame.train import TrainConfig, Trainer

ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"

# desk-scale training used by the acceptance tests: small nets saturate the
# 3-state problem and keep all nine runs (3 methods x 3 seeds) tractable
ACCEPTANCE_TRAIN = dict(
    hidden_policy=(64, 64),
    hidden_critic=(64, 64),
    ctrl_warmstart_steps=20_000,
    dstb_warmstart_steps=10_000,
    joint_steps=30_000,
)
TRAIN_SEEDS = (0, 1, 2)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: end-to-end acceptance criteria (slow)")


def _key(payload):
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def reduced_car():
    return ReducedCar(EnvSpec())


@pytest.fixture(scope="session")
def grid_oracle(reduced_car):
    """Solved two-player grid on the reduced car (cached, ~1 min to build)."""
    car = reduced_car
    key = _key({"env": car.spec.content_hash(), "kind": "grid-default"})
    path = ARTIFACTS / f"grid_{key}.npz"
    if path.exists():
        gvf = load_grid(path)
        actions = ActionGrid.build(car.control_lo, car.control_hi,
                                   car.spec.d_max, car.nd, n_u=5, n_d=3)
        return GridOracle(car, gvf, actions)
    oracle = GridOracle.solve(car)
    ARTIFACTS.mkdir(exist_ok=True)
    save_grid(oracle.gvf, path, env_hash=car.spec.content_hash())
    return oracle


def _train_run(car, mode, seed):
    cfg = TrainConfig(seed=seed, disturbance_mode=mode, **ACCEPTANCE_TRAIN)
    key = _key({"env": car.spec.content_hash(), "train": cfg.to_dict()})
    out = ARTIFACTS / f"run_{mode}_{seed}_{key}"
    if not (out / "pi_u.json").exists():
        Trainer(car, cfg).train(out_dir=str(out))
    return out


@pytest.fixture(scope="session")
def trained_runs(reduced_car):
    """{(mode, seed): artifact dir} for all methods and seeds (cached)."""
    runs = {}
    for mode in ("learned", "uniform", "none"):
        for seed in TRAIN_SEEDS:
            runs[(mode, seed)] = _train_run(reduced_car, mode, seed)
    return runs


@pytest.fixture(scope="session")
def recoverable_states(reduced_car, grid_oracle):
    """Initial states the oracle can keep safe with slack to spare."""
    from safegame.oracle import grid_lipschitz_margin
    margin = grid_lipschitz_margin(grid_oracle.gvf.axes)
    rng = np.random.default_rng(2024)
    states = []
    while len(states) < 200:
        x = reduced_car.sample_initial_state(rng)
        if grid_oracle.value(x) >= margin:
            states.append(x)
    return np.array(states)
