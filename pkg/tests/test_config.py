import pytest

from pcrdiff.config import (
    SEED_ENV,
    RunConfig,
    load_run_config,
    require_dataset,
    resolve_seed,
    run_config_from_dict,
)
from pcrdiff.exceptions import ConfigError, IoFailure


def test_defaults():
    config = run_config_from_dict({})
    assert config == RunConfig()
    assert config.schedule.build(10).T == 10


def test_unknown_keys_report_dotted_path():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"train": {"epochs": 2, "momentum": 0.9}})
    assert exc.value.key_path == "train.momentum"
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"optimizer": "sgd"})
    assert exc.value.key_path == "optimizer"


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"train": {"lr": -1.0}})
    assert exc.value.key_path == "train.lr"
    with pytest.raises(ConfigError):
        run_config_from_dict({"schedule": {"offset": 0.0}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"validation": 1.0})
    with pytest.raises(ConfigError):
        run_config_from_dict({"seed": "seven"})
    with pytest.raises(ConfigError):
        run_config_from_dict({"train": 3})


def test_load_run_config_resolves_relative_paths(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'data = "data/clean"\n'
        'out = "/abs/run"\n'
        "seed = 11\n"
        "validation = 0.25\n"
        "[train]\nepochs = 3\nT = 50\n"
        '[model]\nvariant = "cb"\nknn = 4\n'
        "[schedule]\noffset = 0.02\n"
    )
    config = load_run_config(path)
    assert config.data == (tmp_path / "data" / "clean").resolve()
    assert str(config.out) == "/abs/run"
    assert config.seed == 11
    assert config.validation == 0.25
    assert config.train.epochs == 3
    assert config.train.T == 50
    assert config.model == {"variant": "cb", "knn": 4}
    assert config.schedule.offset == 0.02


def test_load_run_config_errors(tmp_path):
    with pytest.raises(IoFailure):
        load_run_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_run_config(broken)


def test_resolve_seed_order(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, None) == 0
    monkeypatch.setenv(SEED_ENV, "42")
    assert resolve_seed(None) == 42
    assert resolve_seed(None, 5) == 5
    assert resolve_seed(3, 5) == 3
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_require_dataset(tmp_path):
    with pytest.raises(ConfigError):
        require_dataset(None)
    with pytest.raises(IoFailure):
        require_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{}")
    assert require_dataset(tmp_path) == tmp_path
