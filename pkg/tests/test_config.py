"""Experiment TOML parsing and environment settings"""
from pathlib import Path

import pytest

from deltadiff.config import Settings, experiment_config_from_dict, load_experiment_config
from deltadiff.errors import ConfigError
from deltadiff.models import Backend, Dialect, OptLevel, PassId


def test_defaults():
    config = experiment_config_from_dict({"model": "tinynet-A"})
    assert config.models == ["tinynet-A"]
    assert config.dialects == [Dialect.NATIVE]
    assert config.backends == [Backend.REFERENCE]
    assert config.opt.levels == [OptLevel.BASIC]
    assert config.noise.sigma == []
    assert config.corpus_is_desk
    assert (config.top_k, config.repeats, config.warmup) == (5, 10, 1)


def test_shorthands():
    config = experiment_config_from_dict({
        "models": ["tinynet-A"],
        "backends": "optimized_layout",
        "opt": {"level": "extended", "disable": ["fast_math"], "enable": ["CombineParallelOps"]},
        "noise": {"sigma": 3.75e-4},
    })
    assert config.backends == [Backend.OPTIMIZED_LAYOUT]
    assert config.opt.levels == [OptLevel.EXTENDED]
    assert config.opt.disable == [PassId.FAST_MATH]
    assert config.opt.enable == [PassId.COMBINE_PARALLEL_OPS]
    assert config.noise.sigma == [3.75e-4]


def test_noise_seed_falls_back_to_experiment_seed():
    assert experiment_config_from_dict({"models": ["tinynet-A"], "seed": 9}).noise_seed == 9
    config = experiment_config_from_dict({"models": ["tinynet-A"], "seed": 9, "noise": {"seed": 2}})
    assert config.noise_seed == 2


@pytest.mark.parametrize("data", [
    {},
    {"models": []},
    {"models": ["tinynet-A"], "dialects": ["onnx"]},
    {"models": ["tinynet-A"], "noise": {"sigma": [-1.0]}},
    {"models": ["tinynet-A"], "opt": {"enable": ["loop_unroll"]}},
    {"models": ["tinynet-A"], "analysis": {"rbo_p": 1.0}},
    {"models": ["tinynet-A"], "repeats": 0},
])
def test_invalid(data):
    with pytest.raises(ConfigError):
        experiment_config_from_dict(data)


def test_load_resolves_paths_against_the_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('models = ["models/a.json"]\n[output]\ndir = "results"\n')
    config = load_experiment_config(path, seed=4)
    assert config.seed == 4
    assert config.output_dir == tmp_path / "results"
    assert config.model_ref("models/a.json") == tmp_path / "models" / "a.json"
    assert config.model_ref("tinynet-B") == "tinynet-B"
    with pytest.raises(ConfigError):
        config.check_paths()


def test_out_override(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('models = ["tinynet-A"]\n')
    config = load_experiment_config(path, out=tmp_path / "elsewhere")
    assert config.output_dir == Path(tmp_path / "elsewhere").absolute()


def test_malformed_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text("models = [")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("DELTADIFF_THREADS", "2")
    monkeypatch.setenv("RBO_P", "0.8")
    settings = Settings()
    assert settings.DELTADIFF_THREADS == 2
    assert settings.RBO_P == 0.8
