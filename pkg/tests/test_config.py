"""Tests for JSON config parsing and validation."""

import json
from pathlib import Path

import pytest

from safegame.config import (Config, ConfigError, config_from_dict,
                             default_config, load_config)

PRESETS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    cfg = default_config()
    assert cfg.model == "reduced"
    assert cfg.experiment.filter_horizon == 50
    assert cfg.experiment.epsilon == 0.05
    assert cfg.train.disturbance_mode == "learned"
    assert cfg.make_car().nx == 3


def test_roundtrip_through_dict():
    cfg = config_from_dict({
        "model": "bicycle",
        "env": {"d_max": 0.07},
        "train": {"batch_size": 64},
        "experiment": {"seeds": [4, 5]},
    })
    back = config_from_dict(cfg.to_dict())
    assert back.env.d_max == 0.07
    assert back.train.batch_size == 64
    assert back.experiment.seeds == [4, 5]
    assert back.make_car().nx == 5


@pytest.mark.parametrize("doc,match", [
    ({"modle": "reduced"}, "unknown config sections"),
    ({"model": "hovercraft"}, "unknown model"),
    ({"train": {"batch_sz": 64}}, "bad 'train' section"),
    ({"experiment": {"horizon_filter": 3}}, "bad 'experiment' section"),
    ({"env": {"wheel_base": 0.5}}, "bad 'env' section"),
    ({"env": {"dt": -0.1}}, "invalid 'env' values"),
    ([1, 2], "must be a JSON object"),
])
def test_rejects_malformed(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


@pytest.mark.parametrize("name,model,nx", [
    ("desk.json", "reduced", 3),
    ("paper.json", "bicycle", 5),
])
def test_shipped_presets_load(name, model, nx):
    cfg = load_config(PRESETS / name)
    assert cfg.model == model
    assert cfg.make_car().nx == nx
    assert isinstance(cfg, Config)
    # presets are committed artifacts; keep them strict JSON
    json.loads((PRESETS / name).read_text())
