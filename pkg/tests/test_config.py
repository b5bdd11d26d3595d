import pytest

import config
from config import RunConfig, load_config_file, resolve_run_config, threads_from_env


def test_defaults_follow_module_constants():
    cfg = RunConfig()
    assert cfg.members == config.MEMBERS == 10
    assert cfg.batch == 500
    assert cfg.lr == 0.1
    assert cfg.hidden_widths == (64, 64, 32, 16)
    assert cfg.epoch_date == "2017-11-01"
    assert cfg.vehicle_type is None


def test_file_then_flags_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n\nlr=0.01\nepochs = 3\nadv-eps=0.02\nhidden_widths=8, 8,4\n")
    cfg = resolve_run_config(str(path), {"lr": 0.5, "members": None})
    assert cfg.lr == 0.5
    assert cfg.epochs == 3
    assert cfg.adv_eps == 0.02
    assert cfg.hidden_widths == (8, 8, 4)
    assert cfg.members == config.MEMBERS


def test_snapshot_reproduces_the_configuration(tmp_path, monkeypatch):
    monkeypatch.delenv(config.THREADS_ENV_VAR, raising=False)
    cfg = RunConfig(seed=5, lr=0.001, vehicle_type="EV", energy="battery", lr_grid=(0.1, 0.01))
    path = tmp_path / "run_config.txt"
    path.write_text(cfg.to_text())
    assert resolve_run_config(str(path)) == cfg


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate=0.1\n")
    with pytest.raises(KeyError, match="learning_rate"):
        resolve_run_config(str(path))


def test_line_without_equals_is_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("lr 0.1\n")
    with pytest.raises(ValueError, match="key=value"):
        load_config_file(str(path))


def test_empty_optional_text_means_unset():
    cfg = RunConfig(vehicle_type="ICE").with_overrides({"vehicle_type": ""})
    assert cfg.vehicle_type is None


@pytest.mark.parametrize("raw, expected", [("4", 4), ("0", 1), ("abc", 1), ("", 1)])
def test_threads_from_env(monkeypatch, raw, expected):
    monkeypatch.setenv(config.THREADS_ENV_VAR, raw)
    assert threads_from_env() == expected
