import numpy as np
import pytest

from ssfl_sim.config import RunConfig


def small_config(**overrides) -> RunConfig:
    """A federation that trains in seconds: short windows, tiny encoder."""
    sections = {
        "dataset": {
            "n_classes": 3,
            "samples_per_class": 30,
            "length": 32,
            "noise_std": 0.3,
            "base_frequency": 2,
            "frequency_step": 1,
            "harmonics": 1,
            "modulation_frequency": 1,
        },
        "federation": {
            "clients": 2,
            "rounds": 3,
            "chi": 0.3,
            "finetune_epochs": 1,
            "min_client_samples": 10,
        },
        "model": {
            "conv_channels": [4, 4],
            "kernel_size": 3,
            "padding": 1,
            "proj_hidden": 8,
            "embed_dim": 4,
        },
        "optim": {"batch_size": 8},
        "trials": {"seeds": [0]},
        "run": {"sequential": True},
        "verify": {
            "bound_trials": 60,
            "pool_size": 64,
            "grad_seeds": 2,
            "aggregation_instances": 10,
        },
    }
    for name, values in overrides.items():
        sections.setdefault(name, {}).update(values)
    return RunConfig().with_updates(**sections)


@pytest.fixture
def cfg() -> RunConfig:
    return small_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
