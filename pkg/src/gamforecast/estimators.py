"""Estimator-style wrappers so the engine composes with sklearn tooling.

``GridNormalizer`` is a transformer over :class:`GridSeries`;
``GlucoseForecaster`` and ``FederatedGlucoseForecaster`` are estimators
over processed datasets (participant -> split -> windowed samples) whose
hyperparameters live in ``__init__`` so ``get_params``/``set_params``/
``clone`` behave the usual way.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ValidationError
from .fedsim import FLConfig, run_federated
from .ingest import (GridSeries, NormStats, apply_normalizer, fit_normalizer_pooled)
from .model import GamConfig, build_parameters
from .storage import ProcessedDataset
from .train import (TrainConfig, evaluate, predict_samples, train_pooled)
from .validation import check_datasets, check_grid


class GridNormalizer(BaseEstimator, TransformerMixin):
    """Standard normalization of observed grid cells; padding stays 0."""

    def __init__(self, computed_on: str = "train"):
        self.computed_on = computed_on

    def fit(self, X, y=None):
        grids = [check_grid(g) for g in (X if isinstance(X, list) else [X])]
        self.stats_ = fit_normalizer_pooled(grids, computed_on=self.computed_on)
        return self

    def transform(self, X):
        if isinstance(X, list):
            return [apply_normalizer(check_grid(g), self.stats_) for g in X]
        return apply_normalizer(check_grid(X), self.stats_)


class _ForecasterBase(BaseEstimator):
    """Shared fit plumbing; subclasses provide the stage-1 trainer."""

    def _model_config(self, n_attributes: int, target_index: int) -> GamConfig:
        return GamConfig(
            n_attributes=n_attributes, history=self.history,
            horizon=self.horizon, embed_dim=self.embed_dim,
            gat_dim=self.gat_dim, heads=self.heads,
            gat_layers=self.gat_layers, hidden_size=self.hidden_size,
            gat_nonlinearity=self.gat_nonlinearity,
            leaky_slope=self.leaky_slope, embed_depth=self.embed_depth,
            head_depth=self.head_depth, target_index=target_index)

    def _resolve_inputs(self, data, stats):
        if isinstance(data, ProcessedDataset):
            if data.history != self.history or data.horizon != self.horizon:
                raise ValidationError(
                    f"dataset windows ({data.history}, {data.horizon}) do not "
                    f"match estimator ({self.history}, {self.horizon})")
            datasets = data.as_train_datasets()
            stats = data.stats
            n = len(data.catalog)
            target_index = data.target_index
            target_attribute = data.target_attribute
        else:
            if stats is None:
                raise ValidationError("stats is required when fitting on raw "
                                      "sample dictionaries")
            datasets = data
            any_sample = next(iter(datasets.values()))["train"][0]
            n = any_sample.X.shape[0]
            target_index = 0
            target_attribute = self.target_attribute
        check_datasets(datasets, n, self.history)
        return datasets, stats, n, target_index, target_attribute

    def _params_for(self, pid: str | None):
        if pid is not None and pid in self.personal_:
            flat = self.personal_[pid].params_flat
        else:
            flat = self.global_best_.params_flat
        params = build_parameters(self.model_config_, self.variant)
        params.load_flat(flat)
        return params

    def predict(self, samples, participant: str | None = None) -> np.ndarray:
        """Predictions in original units (mg/dL for glucose targets).

        Uses the participant's fine-tuned parameters when ``participant``
        names a fitted one, the population parameters otherwise.
        """
        params = self._params_for(participant)
        preds = predict_samples(params, samples, self.model_config_, self.variant)
        sd = self.stats_.stds[self.target_attribute_]
        mu = self.stats_.means[self.target_attribute_]
        return preds * sd + mu

    def score_report(self, data: ProcessedDataset, split: str = "valid"):
        """Per-participant metric rows with personalized parameters."""
        from .train import build_report
        rows = {}
        for pid in sorted(data.participants):
            params = self._params_for(pid)
            rows[pid] = evaluate(params, data.samples(pid, split), self.stats_,
                                 self.model_config_, self.variant,
                                 self.target_attribute_)
        return build_report(rows)


class GlucoseForecaster(_ForecasterBase):
    """Pooled two-stage trainer behind a fit/predict interface.

    Fit on a :class:`ProcessedDataset` (or a ``{pid: {"train": [...],
    "valid": [...]}}`` mapping plus ``stats``); prediction returns
    de-normalized values.
    """

    def __init__(self, variant: str = "gam", history: int = 12, horizon: int = 6,
                 embed_dim: int = 32, gat_dim: int = 32, heads: int = 1,
                 gat_layers: int = 1, hidden_size: int = 256,
                 gat_nonlinearity: str = "elu", leaky_slope: float = 0.2,
                 embed_depth: int = 1, head_depth: int = 1,
                 steps_global: int = 10_000, steps_person: int = 800,
                 eval_every_global: int = 1_000, eval_every_person: int = 160,
                 batch_size: int = 128, lr_stage1: float = 1e-3,
                 lr_stage2: float = 1e-5, seed: int = 0,
                 target_attribute: str = "glucose_level"):
        self.variant = variant
        self.history = history
        self.horizon = horizon
        self.embed_dim = embed_dim
        self.gat_dim = gat_dim
        self.heads = heads
        self.gat_layers = gat_layers
        self.hidden_size = hidden_size
        self.gat_nonlinearity = gat_nonlinearity
        self.leaky_slope = leaky_slope
        self.embed_depth = embed_depth
        self.head_depth = head_depth
        self.steps_global = steps_global
        self.steps_person = steps_person
        self.eval_every_global = eval_every_global
        self.eval_every_person = eval_every_person
        self.batch_size = batch_size
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.seed = seed
        self.target_attribute = target_attribute

    def fit(self, X, y=None, stats: NormStats | None = None):
        datasets, stats, n, target_index, target_attribute = \
            self._resolve_inputs(X, stats)
        cfg = self._model_config(n, target_index)
        train_cfg = TrainConfig(
            steps_global=self.steps_global, steps_person=self.steps_person,
            eval_every_global=self.eval_every_global,
            eval_every_person=self.eval_every_person,
            batch_size=self.batch_size, lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2, seed=self.seed)
        result = train_pooled(datasets, cfg, train_cfg, stats, self.variant,
                              target_attribute)
        self.model_config_ = cfg
        self.stats_ = stats
        self.target_attribute_ = target_attribute
        self.global_best_ = result.global_best
        self.personal_ = result.personal
        self.curve_ = result.curve
        self.wallclock_s_ = result.wallclock_s
        return self


class FederatedGlucoseForecaster(_ForecasterBase):
    """Federated-averaging trainer behind the same fit/predict interface."""

    def __init__(self, variant: str = "gam", history: int = 12, horizon: int = 6,
                 embed_dim: int = 32, gat_dim: int = 32, heads: int = 1,
                 gat_layers: int = 1, hidden_size: int = 256,
                 gat_nonlinearity: str = "elu", leaky_slope: float = 0.2,
                 embed_depth: int = 1, head_depth: int = 1,
                 rounds: int = 50, client_steps: int = 80,
                 eval_every_rounds: int = 2, lr_client: float = 1e-3,
                 steps_person: int = 1_600, eval_every_person: int = 160,
                 lr_stage2: float = 1e-5, batch_size: int = 128, seed: int = 0,
                 scheduler: str = "auto",
                 target_attribute: str = "glucose_level"):
        self.variant = variant
        self.history = history
        self.horizon = horizon
        self.embed_dim = embed_dim
        self.gat_dim = gat_dim
        self.heads = heads
        self.gat_layers = gat_layers
        self.hidden_size = hidden_size
        self.gat_nonlinearity = gat_nonlinearity
        self.leaky_slope = leaky_slope
        self.embed_depth = embed_depth
        self.head_depth = head_depth
        self.rounds = rounds
        self.client_steps = client_steps
        self.eval_every_rounds = eval_every_rounds
        self.lr_client = lr_client
        self.steps_person = steps_person
        self.eval_every_person = eval_every_person
        self.lr_stage2 = lr_stage2
        self.batch_size = batch_size
        self.seed = seed
        self.scheduler = scheduler
        self.target_attribute = target_attribute

    def fit(self, X, y=None, stats: NormStats | None = None):
        datasets, stats, n, target_index, target_attribute = \
            self._resolve_inputs(X, stats)
        cfg = self._model_config(n, target_index)
        flcfg = FLConfig(
            rounds=self.rounds, client_steps=self.client_steps,
            eval_every_rounds=self.eval_every_rounds, lr_client=self.lr_client,
            steps_person=self.steps_person,
            eval_every_person=self.eval_every_person, lr_stage2=self.lr_stage2,
            batch_size=self.batch_size, seed=self.seed)
        result = run_federated(datasets, cfg, flcfg, stats, self.variant,
                               target_attribute, scheduler=self.scheduler)
        self.model_config_ = cfg
        self.stats_ = stats
        self.target_attribute_ = target_attribute
        self.global_best_ = result.global_best
        self.personal_ = result.personal
        self.rounds_ = result.rounds
        self.curve_ = result.curve
        return self
