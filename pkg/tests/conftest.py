import os

import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


TINY = {
    "data.height": "16", "data.width": "24", "data.focal": "14", "data.n_train": "6", "data.n_val": "2",
    "data.n_test": "4", "data.max_objects": "3",
    "schedule.T": "50",
    "codec.latent_channels": "2", "codec.hidden": "8", "codec.epochs": "2", "codec.batch_size": "4",
    "denoiser.channels": "8", "denoiser.blocks": "1", "denoiser.feat_channels": "2,4,4",
    "denoiser.cond_channels": "4", "denoiser.time_dim": "8",
    "train.epochs": "1", "train.inference_count": "5", "train.batch_size": "3", "train.log_every": "1",
}


@pytest.fixture(scope="session")
def tiny_cfg():
    from glassdepth.config import apply_overrides, ExperimentConfig

    return apply_overrides(ExperimentConfig(), TINY)


@pytest.fixture(scope="session")
def tiny_samples(tiny_cfg):
    from glassdepth.dataset import generate_scene, sample_rng

    return [generate_scene(tiny_cfg.data, sample_rng(0, i), f"s{i:05d}") for i in range(6)]


@pytest.fixture(scope="session")
def tiny_split(tiny_samples, tiny_cfg):
    from glassdepth.training import prepare_split

    return prepare_split(tiny_samples, tiny_cfg)


@pytest.fixture(scope="session")
def tiny_codec(tiny_split, tiny_cfg):
    from glassdepth.training import train_codec

    return train_codec(tiny_split, tiny_cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_split, tiny_codec, tiny_cfg):
    from glassdepth.training import train_diffusion

    return train_diffusion(tiny_split, tiny_codec, tiny_cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
