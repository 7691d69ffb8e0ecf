"""Config file round-trips and validation."""

import numpy as np
import pytest

from gamforecast.config import (DataConfig, RunConfig, load_config,
                                parse_config, serialize_config)
from gamforecast.errors import ConfigError


def randomized_config(rng):
    cfg = RunConfig()
    cfg.seed = int(rng.integers(0, 10_000))
    cfg.variant = ["gam", "gam_ta", "lstm", "gru_glucose_only"][
        int(rng.integers(0, 4))]
    cfg.data.catalog = ["glucose_level", "meal", "bolus"][: int(rng.integers(1, 4))]
    cfg.data.train_ratio = float(np.round(rng.uniform(0.5, 0.95), 3))
    cfg.model.history = int(rng.integers(4, 48))
    cfg.model.horizon = int(rng.choice([6, 12]))
    cfg.model.embed_dim = int(rng.integers(2, 64))
    cfg.model.heads = int(rng.integers(1, 5))
    cfg.model.leaky_slope = float(np.round(rng.uniform(0.01, 0.5), 4))
    cfg.train.steps_global = int(rng.integers(1, 20_000))
    cfg.train.lr_stage1 = float(10.0 ** -rng.integers(2, 5))
    cfg.federated.rounds = int(rng.integers(1, 100))
    cfg.synth.participants = int(rng.integers(1, 12))
    cfg.synth.noise_std = float(np.round(rng.uniform(0, 5), 3))
    return cfg


class TestRoundTrip:
    def test_default_round_trip(self):
        cfg = RunConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_randomized_round_trips(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            cfg = randomized_config(rng)
            assert parse_config(serialize_config(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = randomized_config(np.random.default_rng(1))
        path = tmp_path / "run.cfg"
        path.write_text(serialize_config(cfg))
        assert load_config(path) == cfg


class TestParsing:
    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="section"):
            parse_config("[nonsense]\nx = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[model]\nbananas = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="history"):
            parse_config("[model]\nhistory = soon\n")

    def test_policies_parse_as_mapping(self):
        cfg = parse_config("[data]\npolicies = meal:point,sleep:interval\n")
        assert cfg.data.policies == {"meal": "point", "sleep": "interval"}


class TestValidation:
    def test_seed_propagates(self):
        cfg = RunConfig(seed=99)
        cfg.validate()
        assert cfg.train.seed == 99
        assert cfg.federated.seed == 99
        assert cfg.synth.seed == 99

    def test_model_follows_catalog(self):
        cfg = RunConfig()
        cfg.data.catalog = ["glucose_level", "meal"]
        cfg.validate()
        assert cfg.model.n_attributes == 2
        assert cfg.model.target_index == 0

    def test_target_must_be_in_catalog(self):
        cfg = RunConfig()
        cfg.data = DataConfig(catalog=["meal"], target_attribute="glucose_level")
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_bad_variant(self):
        cfg = RunConfig(variant="transformer")
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_temp_basal_cannot_be_a_model_attribute(self):
        cfg = RunConfig()
        cfg.data.catalog = ["glucose_level", "basal", "temp_basal"]
        with pytest.raises(ConfigError, match="temp_basal"):
            cfg.validate()
