"""Estimator wrappers: sklearn conventions and end-to-end fits."""

import numpy as np
import pytest
from sklearn.base import clone

from gamforecast.errors import ValidationError
from gamforecast.estimators import (FederatedGlucoseForecaster,
                                    GlucoseForecaster, GridNormalizer)
from gamforecast.ingest import GridSeries


def make_grid(rng, catalog=("glucose_level", "meal"), total=40):
    values = rng.normal(100, 20, size=(len(catalog), total))
    mask = rng.random((len(catalog), total)) < 0.8
    return GridSeries("p1", 0.0, 300.0, np.where(mask, values, 0.0), mask,
                      list(catalog))


def forecaster_kwargs(**kw):
    base = dict(history=6, horizon=6, embed_dim=3, gat_dim=3, hidden_size=4,
                steps_global=6, steps_person=2, eval_every_global=3,
                eval_every_person=1, batch_size=4, lr_stage1=3e-3,
                lr_stage2=1e-4, seed=0)
    base.update(kw)
    return base


class TestGridNormalizer:
    def test_fit_transform(self):
        rng = np.random.default_rng(0)
        grid = make_grid(rng)
        norm = GridNormalizer().fit(grid)
        out = norm.transform(grid)
        observed = out.values[0][out.mask[0]]
        assert abs(observed.mean()) < 1e-9
        assert abs(observed.std() - 1.0) < 1e-9
        assert np.all(out.values[~out.mask] == 0.0)

    def test_sklearn_params(self):
        norm = GridNormalizer(computed_on="train18")
        assert norm.get_params() == {"computed_on": "train18"}
        cloned = clone(norm)
        assert cloned.get_params() == norm.get_params()

    def test_rejects_non_grid(self):
        with pytest.raises(ValidationError):
            GridNormalizer().fit(np.zeros((3, 4)))


class TestGlucoseForecaster:
    def test_get_set_params_round_trip(self):
        est = GlucoseForecaster(**forecaster_kwargs())
        params = est.get_params()
        assert params["history"] == 6
        est.set_params(heads=2)
        assert est.heads == 2
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_fit_predict_on_processed_dataset(self, processed, pipeline):
        cfg = pipeline["run_config"]
        est = GlucoseForecaster(**forecaster_kwargs(
            history=cfg.model.history, embed_dim=4, gat_dim=4, hidden_size=8))
        est.fit(processed)
        assert est.global_best_.params_flat.size > 0
        assert set(est.personal_) == {"p001", "p002"}
        samples = processed.samples("p001", "valid")[:5]
        preds = est.predict(samples, participant="p001")
        assert preds.shape == (5,)
        assert np.all((preds > 0) & (preds < 500))
        report = est.score_report(processed)
        assert set(report.rows) == {"p001", "p002"}

    def test_window_geometry_must_match(self, processed):
        est = GlucoseForecaster(**forecaster_kwargs(history=99))
        with pytest.raises(ValidationError):
            est.fit(processed)


class TestFederatedForecaster:
    def test_fit_predict(self, processed, pipeline):
        cfg = pipeline["run_config"]
        est = FederatedGlucoseForecaster(
            history=cfg.model.history, embed_dim=4, gat_dim=4, hidden_size=8,
            rounds=2, client_steps=2, eval_every_rounds=1, lr_client=3e-3,
            steps_person=1, eval_every_person=1, lr_stage2=1e-4, batch_size=4,
            seed=0, scheduler="serial")
        est.fit(processed)
        assert len(est.rounds_) == 2
        preds = est.predict(processed.samples("p002", "valid")[:3],
                            participant="p002")
        assert preds.shape == (3,)

    def test_clone(self):
        est = FederatedGlucoseForecaster(rounds=3, seed=7)
        cloned = clone(est)
        assert cloned.get_params()["rounds"] == 3
        assert cloned.get_params()["seed"] == 7
