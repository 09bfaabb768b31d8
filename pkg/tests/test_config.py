from pathlib import Path

import numpy as np
import pytest

from msdiff.config import ConfigError, ExperimentConfig, substream_seed

MICRO = Path(__file__).resolve().parents[1] / "configs" / "micro.ini"


def test_defaults_valid_and_round_trip():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()
    assert again.digest() == cfg.digest()


def test_shipped_config_round_trip():
    cfg = ExperimentConfig.load(MICRO)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    assert cfg.fan_geometry().views == cfg.geometry.total_views


def test_partial_text_takes_defaults():
    cfg = ExperimentConfig.from_text("[sampler]\nsteps = 7\n[masks]\nablation_views = 10 , 20\n")
    assert cfg.sampler.steps == 7
    assert cfg.masks.ablation_views == (10, 20)
    assert cfg.schedule == ExperimentConfig().schedule
    assert cfg.sampler.sigma_start is None
    low = ExperimentConfig.from_text("[sampler]\nsigma_start = 0.5\n")
    assert low.sampler_config(0).sigma_start == 0.5
    assert ExperimentConfig.from_text(low.to_text()) == low
    assert "sigma_start = none" in cfg.to_text()


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[sampler]\nstepz = 3\n",
    "[sampler]\nsteps = many\n",
    "[sampler]\npure_noise_start = maybe\n",
    "[sampler]\nsteps = 0\n",
    "[sampler]\nsigma_start = 80\n",
    "[sampler]\nsigma_start = -1\n",
    "[schedule]\nsigma_min = 5\nsigma_max = 1\n",
    "[masks]\nacquired_views = 7\n",
    "[masks]\nacquired_views = 20\nsdm_views = 30\n",
    "[masks]\nablation_views = 10, 40\n",
    "[training]\nview_dilations = 1, 2\n",
    "[data]\nmin_ellipses = 9\nmax_ellipses = 3\n",
    "[data]\ntest_count = 0\n",
    "[run]\nsample_seeds = 0\n",
    "no section header\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "absent.ini")


def test_digest_tracks_content():
    cfg = ExperimentConfig()
    assert cfg.with_seed(1).digest() != cfg.digest()
    assert cfg.with_seed(0).digest() == cfg.digest()


def test_factories():
    cfg = ExperimentConfig()
    assert cfg.acquisition_mask().kept_views == 10
    assert cfg.sdm_mask().kept_views == 60
    assert cfg.acquisition_mask(30).issubset(cfg.sdm_mask())
    assert cfg.sampler_config(4).seed == 4
    assert cfg.train_config(2).seed == 2
    assert cfg.noise_schedule().sigma_max == 50.0


def test_substreams_independent_and_stable():
    seeds = {substream_seed(0, s, i) for s in ("train", "sample", "noise", "phantom") for i in range(4)}
    assert len(seeds) == 16
    assert all(0 <= s < 2**63 for s in seeds)
    assert substream_seed(0, "train", 1) == substream_seed(0, "train", 1)
    assert substream_seed(1, "train", 1) != substream_seed(0, "train", 1)
    a = np.random.default_rng(substream_seed(0, "train")).standard_normal(1000)
    b = np.random.default_rng(substream_seed(0, "sample")).standard_normal(1000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1
