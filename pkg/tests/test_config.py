"""Tests for config files, overrides and the effective-config dump."""

import pytest

from pennmpc.config import apply_overrides, config_hash, dump_config, load_config, parse_lines
from pennmpc.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.model.H == 4 and cfg.model.B == 5
    assert cfg.mppi.lambda_ == 1.0
    assert cfg.costs.jrd_threshold is None
    assert cfg.io.data_dir is None


def test_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# history ablation\n"
        "\n"
        "model.H=6\n"
        "mppi.sigma=[0.2, 0.4]\n"
        "mppi.lambda=0.5\n"
        "io.out_dir=runs/h6\n"
        "train.epochs=10\n"
    )
    cfg = load_config(path, ["train.epochs=3", "model.mode=deterministic"])
    assert cfg.model.H == 6
    assert cfg.mppi.sigma == [0.2, 0.4]
    assert cfg.mppi.lambda_ == 0.5
    assert cfg.io.out_dir == "runs/h6"
    assert cfg.train.epochs == 3
    assert cfg.model.mode == "deterministic"


def test_unknown_keys_and_bad_values_are_rejected():
    with pytest.raises(ConfigError, match="model"):
        load_config(overrides=["model.depth=3"])
    with pytest.raises(ConfigError, match="model.H"):
        load_config(overrides=["model.H=0"])
    with pytest.raises(ConfigError):
        load_config(overrides=["mppi.sigma=[0.3]"])
    with pytest.raises(ConfigError):
        load_config(overrides=["model=4"])


def test_variance_bounds_must_be_ordered():
    with pytest.raises(ConfigError, match="var_min"):
        load_config(overrides=["model.var_min=20"])
    with pytest.raises(ConfigError, match="var_min"):
        load_config(overrides=["model.var_min=1.0", "model.var_max=1.0"])
    assert load_config(overrides=["model.var_min=0.5", "model.var_max=2"]).model.var_max == 2.0


def test_explore_speed_envelope_is_opt_in():
    assert load_config().costs.v_limit is None
    assert load_config(overrides=["costs.v_limit=12"]).costs.v_limit == 12.0
    with pytest.raises(ConfigError):
        load_config(overrides=["costs.v_limit=0"])


def test_malformed_line_names_its_location(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("model.H=2\n# ok\nmodel.B 3\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:3"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_values_parse_as_json_with_string_fallback():
    flat = parse_lines("a.x=1\na.y=true\na.z=null\na.w=hello world\na.v=[1, 2]\n")
    assert flat == {"a.x": 1, "a.y": True, "a.z": None, "a.w": "hello world", "a.v": [1, 2]}


def test_dump_reloads_to_the_same_config(tmp_path):
    cfg = load_config(overrides=["model.H=3", "mppi.lambda=0.25", "costs.jrd_threshold=0.4", "io.data_dir=data/run1"])
    text = dump_config(cfg)
    assert "mppi.lambda=0.25\n" in text
    assert "io.checkpoint=null\n" in text
    path = tmp_path / "config.effective"
    path.write_text(text)
    assert load_config(path) == cfg


def test_apply_overrides_keeps_other_values():
    cfg = load_config(overrides=["model.H=3"])
    updated = apply_overrides(cfg, ["mppi.K=64", "seed=7"])
    assert (updated.model.H, updated.mppi.K, updated.seed) == (3, 64, 7)
    assert apply_overrides(cfg, []) is cfg
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["mppi.K=1"])


def test_hash_is_stable_and_sensitive():
    assert config_hash(load_config()) == config_hash(load_config())
    assert config_hash(load_config()) != config_hash(load_config(overrides=["seed=1"]))
