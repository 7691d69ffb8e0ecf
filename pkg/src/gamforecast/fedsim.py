"""Federated-averaging simulation over per-participant clients.

Each round the server broadcasts the population parameter snapshot to
every client; each client overwrites its local parameters, trains on its
own data for a fixed number of steps with a fresh optimizer, and returns
its snapshot; the server averages all snapshots (unweighted, in sorted
participant order) into the next population snapshot.  Personal data
never crosses the client boundary: the only objects exchanged are
:class:`RoundMessage` parameter payloads.

Clients are independent, so the serial and thread-pool schedulers
produce identical results; wallclock is reported both as the serial sum
of client times and as the per-round maximum (idealized parallel time).
Stage 2 reuses the pooled trainer's personal fine-tuning unchanged.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ClientError, ConfigError, ProtocolError
from .ingest import NormStats, RegularSample
from .model import GamConfig, build_parameters
from .tensorcore import Adam
from .train import (Checkpoint, CurvePoint, fine_tune_personal, init_rng,
                    mean_valid_rmse, stage2_rng, train_step)


@dataclass
class FLConfig:
    rounds: int = 50                 # server aggregation rounds
    client_steps: int = 80           # local optimizer steps per round
    eval_every_rounds: int = 2
    lr_client: float = 1e-3
    steps_person: int = 1_600        # stage-2 fine-tuning
    eval_every_person: int = 160
    lr_stage2: float = 1e-5
    batch_size: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.client_steps < 1:
            raise ConfigError(f"client_steps must be >= 1, got {self.client_steps}")
        if self.eval_every_rounds < 1:
            raise ConfigError("eval_every_rounds must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_stage2 > self.lr_client:
            raise ConfigError("stage-2 learning rate must not exceed the client's")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundMessage:
    direction: str        # "server_to_client" | "client_to_server"
    round: int
    participant: str
    payload: np.ndarray   # immutable flat parameter snapshot


@dataclass
class RoundLog:
    round: int
    mean_valid_rmse: float | None
    wallclock_serial_s: float
    wallclock_parallel_s: float


@dataclass
class FederatedResult:
    global_best: Checkpoint
    personal: dict[str, Checkpoint]
    rounds: list[RoundLog]
    curve: list[CurvePoint]
    messages: list[RoundMessage] = field(default_factory=list)


def client_rng(seed: int, participant_index: int,
               round_index: int) -> np.random.Generator:
    """Client generator: base seed + participant index, separated per round.

    Deriving from the round index keeps a client's batch stream independent
    of when its worker runs, so scheduling order cannot leak into results.
    """
    return np.random.default_rng([seed + participant_index, 7, round_index])


def server_aggregate(client_params: list[np.ndarray]) -> np.ndarray:
    """Unweighted elementwise mean of client snapshots, fixed order.

    Callers pass snapshots sorted by participant id; summation follows
    list order so the result is reproducible regardless of which worker
    finished first.
    """
    if not client_params:
        raise ProtocolError("server_aggregate: no client snapshots")
    length = client_params[0].size
    for i, p in enumerate(client_params):
        if p.size != length:
            raise ProtocolError(
                f"server_aggregate: snapshot {i} has length {p.size}, expected {length}")
    total = np.zeros(length)
    for p in client_params:
        total += p
    return total / len(client_params)


def client_round(global_params: np.ndarray, train_samples: list[RegularSample],
                 cfg: GamConfig, flcfg: FLConfig, rng: np.random.Generator,
                 variant: str = "gam") -> np.ndarray:
    """One client's local training for a round.

    The client overwrites its parameters with the population snapshot,
    then runs ``client_steps`` batch steps with a fresh optimizer (local
    moments do not survive the overwrite).  Returns the post-training
    snapshot; the input and output arrays are the only objects that cross
    the client boundary.
    """
    if not train_samples:
        raise ClientError("client has no training samples")
    params = build_parameters(cfg, variant)
    params.load_flat(global_params)
    opt = Adam(params, lr=flcfg.lr_client)
    for _ in range(flcfg.client_steps):
        idx = rng.integers(0, len(train_samples), size=flcfg.batch_size)
        train_step(params, opt, [train_samples[i] for i in idx], cfg, variant)
    return params.flat_view()


def _num_workers() -> int:
    raw = os.environ.get("GAM_NUM_WORKERS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_federated(datasets: dict, cfg: GamConfig, flcfg: FLConfig,
                  stats: NormStats, variant: str = "gam",
                  target_attribute: str = "glucose_level",
                  scheduler: str = "auto",
                  keep_messages: bool = False) -> FederatedResult:
    """Synchronous federated rounds with full participation, then stage 2.

    ``scheduler`` is "serial", "thread", or "auto" (thread pool when
    GAM_NUM_WORKERS > 1).  A client failure aborts the round: there is no
    partial averaging.
    """
    flcfg.validate()
    cfg.validate()
    if not datasets:
        raise ConfigError("no participants in the dataset")
    for pid in sorted(datasets):
        if not datasets[pid].get("valid"):
            raise ConfigError(f"participant {pid!r} has no validation samples")
    if scheduler not in ("auto", "serial", "thread"):
        raise ConfigError(f"unknown scheduler: {scheduler}")
    workers = _num_workers() if scheduler == "auto" else (1 if scheduler == "serial"
                                                          else _num_workers())
    use_threads = scheduler == "thread" or (scheduler == "auto" and workers > 1)

    pids = sorted(datasets)
    global_params = build_parameters(cfg, variant, init_rng(flcfg.seed)).flat_view()
    eval_params = build_parameters(cfg, variant)
    best = Checkpoint(global_params.copy(), 0, float("inf"))
    rounds_log: list[RoundLog] = []
    curve: list[CurvePoint] = []
    messages: list[RoundMessage] = []
    t0 = time.perf_counter()

    def run_client(p_index: int, pid: str, round_index: int,
                   snapshot: np.ndarray) -> tuple[np.ndarray, float]:
        start = time.perf_counter()
        try:
            out = client_round(snapshot, datasets[pid]["train"], cfg, flcfg,
                               client_rng(flcfg.seed, p_index, round_index),
                               variant)
        except Exception as exc:
            raise ClientError(f"client {pid!r} failed in round {round_index}: {exc}") from exc
        return out, time.perf_counter() - start

    for round_index in range(1, flcfg.rounds + 1):
        if keep_messages:
            for pid in pids:
                messages.append(RoundMessage("server_to_client", round_index,
                                             pid, global_params.copy()))
        if use_threads:
            with ThreadPoolExecutor(max_workers=max(2, workers)) as pool:
                futures = [pool.submit(run_client, i, pid, round_index, global_params)
                           for i, pid in enumerate(pids)]
                results = [f.result() for f in futures]
        else:
            results = [run_client(i, pid, round_index, global_params)
                       for i, pid in enumerate(pids)]
        snapshots = [r[0] for r in results]
        times = [r[1] for r in results]
        if keep_messages:
            for pid, snap in zip(pids, snapshots):
                messages.append(RoundMessage("client_to_server", round_index,
                                             pid, snap.copy()))
        global_params = server_aggregate(snapshots)

        rmse = None
        if round_index % flcfg.eval_every_rounds == 0:
            eval_params.load_flat(global_params)
            rmse = mean_valid_rmse(eval_params, datasets, stats, cfg, variant,
                                   target_attribute)
            curve.append(CurvePoint(round_index, float("nan"), rmse,
                                    time.perf_counter() - t0))
            if rmse < best.valid_rmse:
                best = Checkpoint(global_params.copy(), round_index, rmse)
        rounds_log.append(RoundLog(round_index, rmse, sum(times), max(times)))

    personal: dict[str, Checkpoint] = {}
    for p_index, pid in enumerate(pids):
        personal[pid] = fine_tune_personal(
            best.params_flat, datasets[pid]["train"], datasets[pid]["valid"],
            stats, cfg, variant,
            lr=flcfg.lr_stage2, steps=flcfg.steps_person,
            eval_every=flcfg.eval_every_person, batch_size=flcfg.batch_size,
            rng=stage2_rng(flcfg.seed, p_index),
            target_attribute=target_attribute)

    return FederatedResult(best, personal, rounds_log, curve, messages)
