import json

import pytest
from pydantic import ValidationError

from app.config import Config, dump_run_config, load_run_config, save_run_config
from app.models import SCHEMA_VERSION, ActorKind, PPOConfig, RunConfig


def test_defaults():
    config = RunConfig()
    assert config.schema_version == SCHEMA_VERSION
    assert config.cfg0 == 5.0
    assert config.actor == ActorKind.QUANTUM
    assert config.vqc.n_params == 24
    assert (config.ppo.clip_eps, config.ppo.gamma, config.ppo.gae_lambda) == (0.1, 0.99, 0.95)
    assert (config.reward.alpha, config.reward.beta, config.reward.lambda_act) == (1.0, 0.2, 0.005)
    assert (config.schedule.t_train, config.schedule.t_sample) == (200, 50)


def test_round_trip(tmp_path, tiny_config):
    path = save_run_config(tiny_config, tmp_path / "config.json")
    assert load_run_config(path) == tiny_config
    assert RunConfig.model_validate_json(dump_run_config(tiny_config)) == tiny_config


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"ppo": {"clip": 0.2}}))
    with pytest.raises(ValueError, match="ppo.clip"):
        load_run_config(path)
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"learning_rate": 1.0})


def test_schema_version_is_checked():
    with pytest.raises(ValueError, match="schema_version"):
        load_run_config(overrides={"schema_version": SCHEMA_VERSION + 1})


def test_missing_keys_take_defaults(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"cfg0": 7.5}))
    config = load_run_config(path)
    assert config.cfg0 == 7.5
    assert config.ppo == PPOConfig()
    assert config.out_dir == Config.OUTPUT_ROOT


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 1, "actor": "quantum", "workers": 2}))
    config = load_run_config(path, {"seed": 9, "actor": "classical", "out_dir": None})
    assert config.seed == 9
    assert config.actor == ActorKind.CLASSICAL
    assert config.workers == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "absent.json")


def test_config_must_be_object(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("[1, 2]")
    with pytest.raises(ValueError):
        load_run_config(path)


def test_minibatch_must_divide_batch():
    with pytest.raises(ValidationError, match="divisible"):
        PPOConfig(n_envs=3, horizon=5, minibatch=4)
    assert PPOConfig(n_envs=8, horizon=512, minibatch=8).minibatch == 8


@pytest.mark.parametrize(
    "section,values",
    [
        ("schedule", {"t_train": 10, "t_sample": 20}),
        ("denoiser", {"time_dim": 15}),
        ("denoiser", {"lr": 1e-4, "lr_min": 1e-3}),
        ("controller", {"cfg_max": 13.0}),
        ("vqc", {"n_qubits": 0}),
    ],
)
def test_invalid_sections(section, values):
    with pytest.raises(ValidationError):
        RunConfig.model_validate({section: values})


def test_matched_classical_width_is_accepted():
    config = RunConfig.model_validate({"actor": "classical", "controller": {"classical_hidden": "matched"}})
    assert config.controller.classical_hidden == "matched"
