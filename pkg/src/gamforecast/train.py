"""Loss, metrics, and pooled two-stage training.

Stage 1 trains one population model on all participants' training
samples mixed together, checkpointing whenever the mean validation RMSE
across participants strictly improves.  Stage 2 clones the best
population checkpoint per participant and fine-tunes on that
participant's data alone at a reduced learning rate, checkpointing on
the personal validation RMSE.

All metrics are computed in de-normalized units (mg/dL for glucose).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError
from .ingest import NormStats, RegularSample
from .model import GamConfig, build_parameters, forward
from .tensorcore import Adam, ParameterSet, Tensor

MARD_GUARD_MGDL = 1.0  # targets below this are excluded from MARD


@dataclass
class TrainConfig:
    steps_global: int = 10_000
    steps_person: int = 800
    eval_every_global: int = 1_000
    eval_every_person: int = 160
    batch_size: int = 128
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for steps, every, tag in ((self.steps_global, self.eval_every_global, "global"),
                                  (self.steps_person, self.eval_every_person, "person")):
            if every < 1:
                raise ConfigError(f"eval_every_{tag} must be >= 1")
            if steps > 0 and every > steps:
                raise ConfigError(
                    f"eval_every_{tag} ({every}) exceeds steps_{tag} ({steps})")
        if self.lr_stage2 > self.lr_stage1:
            raise ConfigError("stage-2 learning rate must not exceed stage 1's")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRow:
    rmse: float
    mard: float
    mae: float
    n_samples: int
    n_mard_excluded: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    rows: dict[str, MetricsRow]
    config_fingerprint: str = ""

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.rmse for r in self.rows.values()]))

    def averages(self) -> dict:
        keys = ("rmse", "mard", "mae")
        return {k: float(np.mean([getattr(r, k) for r in self.rows.values()]))
                for k in keys}

    def as_dict(self) -> dict:
        return {
            "per_participant": {pid: row.as_dict() for pid, row in
                                sorted(self.rows.items())},
            "averages": self.averages(),
            "total_samples": int(sum(r.n_samples for r in self.rows.values())),
            "config_fingerprint": self.config_fingerprint,
        }


@dataclass
class Checkpoint:
    params_flat: np.ndarray
    step: int
    valid_rmse: float
    opt_state: dict | None = None


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    valid_mean_rmse: float
    wallclock_s: float


@dataclass
class PooledResult:
    global_best: Checkpoint
    personal: dict[str, Checkpoint]
    curve: list[CurvePoint]
    wallclock_s: float


# ---------------------------------------------------------------------------
# loss and metrics


def mse_loss(targets: np.ndarray, preds: list[Tensor] | Tensor) -> Tensor:
    """Mean squared error between a target vector and stacked predictions."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if isinstance(preds, Tensor):
        stacked = preds
    else:
        if len(preds) == 0:
            raise ContractError("mse_loss: empty batch")
        stacked = tc.concat([tc.reshape(p, (1, 1)) for p in preds], axis=0)
    if targets.size == 0 or stacked.data.shape != targets.shape:
        raise ContractError(
            f"mse_loss: got {targets.shape[0]} targets and "
            f"{stacked.data.shape[0]} predictions")
    diff = tc.sub(stacked, tc.constant(targets))
    return tc.mean(tc.hadamard(diff, diff))


def compute_metrics(y_true, y_pred, *, mard_guard: float = MARD_GUARD_MGDL) -> MetricsRow:
    """RMSE / MARD / MAE over de-normalized (y, y_hat) pairs.

    Targets below ``mard_guard`` are excluded from MARD only (division
    hazard); they still count toward RMSE and MAE.
    """
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.size == 0 or y.size != p.size:
        raise ContractError(f"compute_metrics: got {y.size} targets, {p.size} predictions")
    err = p - y
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    ok = y >= mard_guard
    excluded = int(np.sum(~ok))
    mard = float(np.mean(np.abs(err[ok]) / y[ok]) * 100.0) if ok.any() else float("nan")
    return MetricsRow(rmse=rmse, mard=mard, mae=mae, n_samples=int(y.size),
                      n_mard_excluded=excluded)


def predict_samples(params: ParameterSet, samples: list[RegularSample],
                    cfg: GamConfig, variant: str = "gam") -> np.ndarray:
    """Normalized-space predictions, no gradient tracking."""
    out = np.empty(len(samples))
    with tc.no_grad():
        for i, s in enumerate(samples):
            out[i] = forward(s, params, cfg, variant).y_hat.item()
    return out


def evaluate(params: ParameterSet, samples: list[RegularSample],
             stats: NormStats, cfg: GamConfig, variant: str = "gam",
             target_attribute: str = "glucose_level") -> MetricsRow:
    """Metrics of a fixed parameter snapshot on a fixed sample set."""
    preds = predict_samples(params, samples, cfg, variant)
    mu = stats.means[target_attribute]
    sd = stats.stds[target_attribute]
    y_true = np.array([s.y for s in samples]) * sd + mu
    y_pred = preds * sd + mu
    return compute_metrics(y_true, y_pred)


# ---------------------------------------------------------------------------
# training loops

# rng stream tags; all randomness in a run derives from (seed, tag, ...)
_STREAM_INIT = 11
_STREAM_STAGE1 = 101
_STREAM_STAGE2 = 202


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_INIT])


def stage1_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_STAGE1])


def stage2_rng(seed: int, participant_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_STAGE2, participant_index])


def train_step(params: ParameterSet, opt: Adam, batch: list[RegularSample],
               cfg: GamConfig, variant: str) -> float:
    """One optimizer step on a batch; returns the batch loss."""
    preds = [forward(s, params, cfg, variant).y_hat for s in batch]
    loss = mse_loss(np.array([s.y for s in batch]), preds)
    tc.backward(loss)
    opt.step()
    return loss.item()


def mean_valid_rmse(params: ParameterSet, datasets: dict, stats: NormStats,
                    cfg: GamConfig, variant: str, target_attribute: str) -> float:
    rmses = [evaluate(params, datasets[pid]["valid"], stats, cfg, variant,
                      target_attribute).rmse
             for pid in sorted(datasets)]
    return float(np.mean(rmses))


def _check_datasets(datasets: dict) -> None:
    if not datasets:
        raise ConfigError("no participants in the dataset")
    for pid in sorted(datasets):
        if not datasets[pid].get("train"):
            raise ConfigError(f"participant {pid!r} has no training samples")
        if not datasets[pid].get("valid"):
            raise ConfigError(f"participant {pid!r} has no validation samples")


def fine_tune_personal(start_flat: np.ndarray, train_samples: list[RegularSample],
                       valid_samples: list[RegularSample], stats: NormStats,
                       cfg: GamConfig, variant: str, *, lr: float, steps: int,
                       eval_every: int, batch_size: int,
                       rng: np.random.Generator,
                       target_attribute: str = "glucose_level") -> Checkpoint:
    """Personal fine-tuning from a population snapshot (fresh optimizer).

    The starting snapshot is the baseline: it is kept unless a later
    evaluation strictly improves the personal validation RMSE.
    """
    params = build_parameters(cfg, variant)
    params.load_flat(start_flat)
    opt = Adam(params, lr=lr)
    best_rmse = evaluate(params, valid_samples, stats, cfg, variant,
                         target_attribute).rmse
    best = Checkpoint(np.array(start_flat, copy=True), 0, best_rmse,
                      opt.export_state())
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train_samples), size=batch_size)
        train_step(params, opt, [train_samples[i] for i in idx], cfg, variant)
        if step % eval_every == 0:
            rmse = evaluate(params, valid_samples, stats, cfg, variant,
                            target_attribute).rmse
            if rmse < best.valid_rmse:
                best = Checkpoint(params.flat_view(), step, rmse, opt.export_state())
    return best


def train_pooled(datasets: dict, cfg: GamConfig, train_cfg: TrainConfig,
                 stats: NormStats, variant: str = "gam",
                 target_attribute: str = "glucose_level") -> PooledResult:
    """Two-stage training: mixed-pool population model, then per-person tuning.

    ``datasets`` maps participant id -> {"train": [...], "valid": [...]}.
    Batches are drawn with replacement from the seeded generator; the best
    population checkpoint is the one with the lowest mean validation RMSE
    at an evaluation point (the initialization if no evaluation ran).
    """
    train_cfg.validate()
    cfg.validate()
    _check_datasets(datasets)
    t0 = time.perf_counter()

    params = build_parameters(cfg, variant, init_rng(train_cfg.seed))
    opt = Adam(params, lr=train_cfg.lr_stage1)
    pool = [s for pid in sorted(datasets) for s in datasets[pid]["train"]]
    rng = stage1_rng(train_cfg.seed)

    best = Checkpoint(params.flat_view(), 0, float("inf"), opt.export_state())
    curve: list[CurvePoint] = []
    for step in range(1, train_cfg.steps_global + 1):
        idx = rng.integers(0, len(pool), size=train_cfg.batch_size)
        loss = train_step(params, opt, [pool[i] for i in idx], cfg, variant)
        if step % train_cfg.eval_every_global == 0:
            rmse = mean_valid_rmse(params, datasets, stats, cfg, variant,
                                   target_attribute)
            curve.append(CurvePoint(step, loss, rmse, time.perf_counter() - t0))
            if rmse < best.valid_rmse:
                best = Checkpoint(params.flat_view(), step, rmse, opt.export_state())

    personal: dict[str, Checkpoint] = {}
    for p_index, pid in enumerate(sorted(datasets)):
        personal[pid] = fine_tune_personal(
            best.params_flat, datasets[pid]["train"], datasets[pid]["valid"],
            stats, cfg, variant,
            lr=train_cfg.lr_stage2, steps=train_cfg.steps_person,
            eval_every=train_cfg.eval_every_person,
            batch_size=train_cfg.batch_size,
            rng=stage2_rng(train_cfg.seed, p_index),
            target_attribute=target_attribute)

    return PooledResult(best, personal, curve, time.perf_counter() - t0)


def build_report(per_pid_rows: dict[str, MetricsRow],
                 config_fingerprint: str = "") -> MetricsReport:
    return MetricsReport(rows=dict(per_pid_rows),
                         config_fingerprint=config_fingerprint)
