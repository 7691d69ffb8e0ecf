"""Shared fixtures: a small synthetic pipeline run end to end."""

import pytest

from gamforecast.cli import main
from gamforecast.config import RunConfig, serialize_config
from gamforecast.storage import load_dataset


def tiny_run_config(seed=0) -> RunConfig:
    """A configuration small enough for fast end-to-end runs."""
    cfg = RunConfig(seed=seed)
    cfg.data.catalog = ["glucose_level", "meal", "bolus", "sleep", "exercise"]
    cfg.model.history = 8
    cfg.model.horizon = 6
    cfg.model.embed_dim = 4
    cfg.model.gat_dim = 4
    cfg.model.hidden_size = 8
    cfg.train.steps_global = 8
    cfg.train.steps_person = 4
    cfg.train.eval_every_global = 4
    cfg.train.eval_every_person = 2
    cfg.train.batch_size = 4
    cfg.train.lr_stage1 = 3e-3
    cfg.train.lr_stage2 = 1e-4
    cfg.federated.rounds = 2
    cfg.federated.client_steps = 3
    cfg.federated.eval_every_rounds = 1
    cfg.federated.steps_person = 2
    cfg.federated.eval_every_person = 1
    cfg.federated.lr_stage2 = 1e-4
    cfg.federated.batch_size = 4
    cfg.synth.participants = 2
    cfg.synth.days = 6
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """synth -> preprocess once for the whole session."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = tiny_run_config()
    cfg_path = root / "run.cfg"
    cfg_path.write_text(serialize_config(cfg))
    events_dir = root / "events"
    assert main(["synth", "--config", str(cfg_path), "--out",
                 str(events_dir)]) == 0
    data_path = root / "dataset.gamds"
    assert main(["preprocess", "--config", str(cfg_path), "--events",
                 str(events_dir), "--out", str(data_path)]) == 0
    return {"root": root, "config": cfg_path, "events": events_dir,
            "data": data_path, "run_config": cfg}


@pytest.fixture(scope="session")
def processed(pipeline):
    return load_dataset(pipeline["data"])
