import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from app.models import RunConfig

settings.register_profile("fast", max_examples=25, deadline=None)
settings.register_profile(
    "ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """A run small enough to go through every stage in seconds."""
    return RunConfig.model_validate({
        "seed": 7,
        "out_dir": str(tmp_path / "run"),
        "workers": 1,
        "schedule": {"t_train": 20, "t_sample": 5},
        "data": {"n_per_class": 10},
        "denoiser": {"hidden": [32], "epochs": 2, "batch_size": 16},
        "classifier": {"hidden": 16, "epochs": 3, "batch_size": 16},
        "controller": {"critic_hidden": [16], "classical_hidden": [8]},
        "ppo": {"n_envs": 2, "horizon": 12, "epochs": 1, "minibatch": 4, "iterations": 2},
    })
