import json

import pytest

from flowavoid.config import Config, from_dict, load_config, save_config, to_dict
from flowavoid.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = Config()
    cfg.validate()
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert to_dict(back) == to_dict(cfg)


def test_partial_override():
    cfg = from_dict({"train": {"batch": 4, "lr": 0.01}, "observation": {"flow_scale": 2.0}})
    assert cfg.train.batch == 4
    assert cfg.train.lr == 0.01
    assert cfg.observation.flow_scale == 2.0
    assert cfg.train.horizon == Config().train.horizon


def test_published_loss_weights():
    lc = Config().loss
    assert (lc.w_velocity, lc.w_collision, lc.w_accel, lc.w_jerk) == (1, 2, 0.015, 0.003)
    assert tuple(lc.speed_range) == (1.5, 12)


@pytest.mark.parametrize(
    "data",
    [
        {"trian": {}},
        {"train": {"bacth": 3}},
        {"train": {"batch": "three"}},
        {"train": {"batch": 2.5}},
        {"arch": {"central": "yes"}},
        {"train": {"speed_range": [1.0]}},
        {"train": {"lr": -1.0}},
        {"observation": {"crop_fraction": 0.0}},
        {"arch": {"a_max": 50.0}},
        [],
    ],
)
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_unreadable_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_saved_file_is_plain_json(tmp_path):
    save_config(Config(), tmp_path / "c.json")
    data = json.loads((tmp_path / "c.json").read_text())
    assert set(data) >= {"dynamics", "loss", "arch", "train", "eval"}
