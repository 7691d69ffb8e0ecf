"""Command-line driver: synth, preprocess, train, train-fl, evaluate,
export-attention, plot-data.

Configuration comes from defaults, then an optional config file, then
flags (flags win).  Every command writes its artifacts plus a manifest
recording the config fingerprint and input/output hashes.  Timing logs
(the federated round log) are listed in the manifest without hashes
because wallclock readings are not reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import tensorcore as tc
from .config import RunConfig, load_config
from .errors import (ClientError, ConfigError, ContractError, DomainError,
                     FingerprintError, GamError, OptimizerError, ParseError,
                     ProtocolError, SchemaError, ShapeError, StorageError,
                     ValidationError)
from .fedsim import run_federated
from .ingest import (GRID_STEP_SECONDS, IngestStats, apply_normalizer,
                     fit_normalizer_pooled, merge_basal, parse_events,
                     regularize, split_train_valid, window_samples)
from .model import build_parameters, forward
from .storage import (LoadedCheckpoint, ProcessedDataset, SplitArrays,
                      check_compatible, fingerprint, load_checkpoint,
                      load_dataset, save_checkpoint, save_dataset,
                      write_manifest)
from .synth import write_dataset as synth_write_dataset
from .train import build_report, evaluate, predict_samples, train_pooled

EXIT_CODES = [
    ((ConfigError,), 2),
    ((ParseError, SchemaError, ValidationError), 3),
    ((FingerprintError,), 4),
    ((StorageError, OSError), 5),
    ((ContractError, ShapeError, DomainError, OptimizerError,
      ProtocolError, ClientError), 6),
]


def _category(exc: Exception) -> tuple[str, int]:
    for types, code in EXIT_CODES:
        if isinstance(exc, types):
            return type(exc).__name__, code
    return type(exc).__name__, 70


def _eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("GAM_NUM_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="config file (ini-style sections)")
    p.add_argument("--seed", type=int, help="base seed for all randomness")
    p.add_argument("--out", type=Path, required=True, help="output directory or file")
    p.add_argument("--variant", choices=("gam", "gam_ta", "lstm", "gru_glucose_only"))
    p.add_argument("--horizon", type=int, choices=(6, 12),
                   help="prediction horizon in 5-minute steps")
    p.add_argument("--history", type=int, help="input window length in steps")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gamforecast",
                                 description="graph-attentive forecasting engine")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic event CSVs")
    _add_common(p)
    p.add_argument("--participants", type=int)
    p.add_argument("--days", type=int)

    p = sub.add_parser("preprocess", help="events -> windowed training dataset")
    _add_common(p)
    p.add_argument("--events", type=Path, required=True,
                   help="events directory (events_*.csv) or a single file")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    for name, help_text in (("train", "pooled two-stage training"),
                            ("train-fl", "federated training simulation")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--data", type=Path, required=True, help="GAMDS1 dataset")

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint file, or a train output directory "
                        "(uses per-participant checkpoints)")
    p.add_argument("--split", default="valid")

    p = sub.add_parser("export-attention", help="attention weights as JSON lines")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="valid")
    p.add_argument("--participant", help="restrict to one participant")
    p.add_argument("--max-samples", type=int, default=1,
                   help="samples exported per participant")
    p.add_argument("--beta-out", type=Path,
                   help="also write time-attention weights (gam_ta only)")

    p = sub.add_parser("plot-data", help="prediction-vs-truth curves as CSV")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="valid")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant is not None:
        cfg.variant = args.variant
    if args.horizon is not None:
        cfg.model.horizon = args.horizon
    if args.history is not None:
        cfg.model.history = args.history
    if getattr(args, "participants", None) is not None:
        cfg.synth.participants = args.participants
    if getattr(args, "days", None) is not None:
        cfg.synth.days = args.days
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    paths = synth_write_dataset(cfg.synth, out_dir)
    write_manifest(out_dir / "manifest.json", command="synth",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed, inputs={},
                   outputs={pid: p for pid, p in paths.items()})
    print(f"wrote {len(paths)} participant event files to {out_dir}")
    return 0


def _event_files(events: Path, fmt: str) -> list[Path]:
    if events.is_dir():
        pattern = "events_*.csv" if fmt == "csv" else "events_*.jsonl"
        files = sorted(events.glob(pattern))
        if not files:
            raise ValidationError(f"no {pattern} files under {events}")
        return files
    if not events.exists():
        raise ValidationError(f"events path does not exist: {events}")
    return [events]


def preprocess_events(cfg: RunConfig, files: list[Path], fmt: str) -> ProcessedDataset:
    """Full ingest pipeline over one event file per participant."""
    catalog = list(cfg.data.catalog)
    # temp_basal records are accepted on input and merged away before gridding
    parse_catalog = catalog + (["temp_basal"] if "basal" in catalog else [])
    history, horizon = cfg.model.history, cfg.model.horizon
    stats_counter = IngestStats()
    grids = {}
    for path in files:
        with open(path, "rb") as fh:
            stream = parse_events(fh, fmt, parse_catalog,
                                  strict=cfg.data.strict_attributes,
                                  stats=stats_counter)
        if not stream.events:
            raise ValidationError(f"{path}: no events parsed")
        stream = merge_basal(stream)
        times = [e.timestamp for e in stream.events]
        ends = [e.end_timestamp for e in stream.events if e.end_timestamp]
        start = (min(times) // GRID_STEP_SECONDS) * GRID_STEP_SECONDS
        last = max(times + ends)
        grid_len = int((last - start) // GRID_STEP_SECONDS) + 1
        grid = regularize(stream, start, grid_len,
                          {a: cfg.data.policy_for(a) for a in catalog},
                          stats=stats_counter)
        grids[stream.participant_id] = split_train_valid(
            grid, cfg.data.train_ratio, min_len=history + horizon)

    norm = fit_normalizer_pooled([g[0] for _, g in sorted(grids.items())])
    target_row = catalog.index(cfg.data.target_attribute)
    participants = {}
    for pid, (train_grid, valid_grid) in grids.items():
        by_split = {}
        for split, grid in (("train", train_grid), ("valid", valid_grid)):
            samples = window_samples(apply_normalizer(grid, norm),
                                     history, horizon, target_row)
            if not samples:
                raise ValidationError(
                    f"participant {pid!r} yields no {split} windows")
            by_split[split] = SplitArrays.from_samples(samples, len(catalog), history)
        participants[pid] = by_split

    ds = ProcessedDataset(
        catalog=catalog, history=history, horizon=horizon,
        step=GRID_STEP_SECONDS, target_attribute=cfg.data.target_attribute,
        stats=norm, participants=participants,
        ingest_stats=stats_counter.as_dict(),
        fingerprint=fingerprint({
            "catalog": catalog, "history": history, "horizon": horizon,
            "target": cfg.data.target_attribute,
            "ratio": cfg.data.train_ratio,
        }))
    return ds


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    files = _event_files(args.events, args.format)
    ds = preprocess_events(cfg, files, args.format)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.is_dir():
        out = out / "dataset.gamds"
    save_dataset(out, ds)
    write_manifest(out.parent / "manifest.json", command="preprocess",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed,
                   inputs={p.name: p for p in files}, outputs={"dataset": out})
    counts = {pid: {split: len(arr) for split, arr in by_split.items()}
              for pid, by_split in ds.participants.items()}
    print(f"wrote {out} with windows per participant: {counts}")
    return 0


def _load_for_training(args, cfg: RunConfig) -> ProcessedDataset:
    ds = load_dataset(args.data)
    # the dataset's window geometry and catalog are authoritative
    cfg.data.catalog = list(ds.catalog)
    cfg.data.target_attribute = ds.target_attribute
    cfg.model.history = ds.history
    cfg.model.horizon = ds.horizon
    cfg.validate()
    return ds


def _save_checkpoints(out_dir: Path, cfg: RunConfig, ds: ProcessedDataset,
                      global_best, personal) -> dict[str, Path]:
    params = build_parameters(cfg.model, cfg.variant)
    names = params.names()
    shapes = [params[n].shape for n in names]
    outputs = {}

    def save(name: str, ckpt):
        path = out_dir / f"{name}.gamck"
        save_checkpoint(path, ckpt, names=names, shapes=shapes,
                        variant=cfg.variant, model_config=cfg.model.as_dict(),
                        data_fingerprint=ds.fingerprint)
        outputs[name] = path

    save("global", global_best)
    for pid, ckpt in sorted(personal.items()):
        save(pid, ckpt)
    return outputs


def _personal_report(cfg: RunConfig, ds: ProcessedDataset, personal,
                     split: str = "valid"):
    params = build_parameters(cfg.model, cfg.variant)
    rows = {}
    for pid in sorted(ds.participants):
        params.load_flat(personal[pid].params_flat)
        rows[pid] = evaluate(params, ds.samples(pid, split), ds.stats,
                             cfg.model, cfg.variant, ds.target_attribute)
    return build_report(rows, fingerprint(cfg.fingerprint_payload()))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = _load_for_training(args, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train_pooled(ds.as_train_datasets(), cfg.model, cfg.train,
                          ds.stats, cfg.variant, ds.target_attribute)
    outputs = _save_checkpoints(out_dir, cfg, ds, result.global_best,
                                result.personal)
    report = _personal_report(cfg, ds, result.personal)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report.as_dict(), indent=2,
                                       sort_keys=True) + "\n")
    outputs["metrics"] = metrics_path
    curve_path = out_dir / "curve.csv"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "valid_mean_rmse"])
        for pt in result.curve:
            writer.writerow([pt.step, repr(pt.train_loss), repr(pt.valid_mean_rmse)])
    outputs["curve"] = curve_path
    write_manifest(out_dir / "manifest.json", command="train",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed, inputs={"dataset": args.data}, outputs=outputs)
    print(f"train done: mean valid RMSE {report.averages()['rmse']:.3f} mg/dL "
          f"(global best {result.global_best.valid_rmse:.3f} at step "
          f"{result.global_best.step}); artifacts in {out_dir}")
    return 0


def cmd_train_fl(args) -> int:
    cfg = resolve_config(args)
    ds = _load_for_training(args, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_federated(ds.as_train_datasets(), cfg.model, cfg.federated,
                           ds.stats, cfg.variant, ds.target_attribute)
    outputs = _save_checkpoints(out_dir, cfg, ds, result.global_best,
                                result.personal)
    report = _personal_report(cfg, ds, result.personal)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report.as_dict(), indent=2,
                                       sort_keys=True) + "\n")
    outputs["metrics"] = metrics_path
    rounds_path = out_dir / "rounds.csv"
    with open(rounds_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "mean_valid_rmse", "wallclock_serial_s",
                         "wallclock_parallel_s"])
        for row in result.rounds:
            writer.writerow([row.round,
                             "" if row.mean_valid_rmse is None
                             else repr(row.mean_valid_rmse),
                             f"{row.wallclock_serial_s:.6f}",
                             f"{row.wallclock_parallel_s:.6f}"])
    write_manifest(out_dir / "manifest.json", command="train-fl",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed, inputs={"dataset": args.data}, outputs=outputs,
                   timing_outputs={"rounds": rounds_path})
    print(f"train-fl done: mean valid RMSE {report.averages()['rmse']:.3f} mg/dL "
          f"over {cfg.federated.rounds} rounds; artifacts in {out_dir}")
    return 0


def _load_eval_checkpoints(path: Path, ds: ProcessedDataset) \
        -> dict[str, LoadedCheckpoint]:
    """Map participant -> checkpoint; a single file serves all participants."""
    if path.is_dir():
        loaded = {}
        for pid in sorted(ds.participants):
            ck_path = path / f"{pid}.gamck"
            if not ck_path.exists():
                ck_path = path / "global.gamck"
            loaded[pid] = load_checkpoint(ck_path)
        return loaded
    one = load_checkpoint(path)
    return {pid: one for pid in sorted(ds.participants)}


def _evaluate_one(ds: ProcessedDataset, pid: str, loaded: LoadedCheckpoint,
                  split: str):
    # each worker builds its own parameters: evaluation contexts are
    # thread-local and share only the immutable checkpoint snapshot
    model_cfg = _config_from_checkpoint(loaded)
    params = build_parameters(model_cfg, loaded.variant)
    params.load_flat(loaded.checkpoint.params_flat)
    return evaluate(params, ds.samples(pid, split), ds.stats, model_cfg,
                    loaded.variant, ds.target_attribute)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    checkpoints = _load_eval_checkpoints(Path(args.checkpoint), ds)
    for loaded in checkpoints.values():
        check_compatible(loaded, ds)
    pids = sorted(checkpoints)
    workers = _eval_workers()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pid: pool.submit(_evaluate_one, ds, pid,
                                        checkpoints[pid], args.split)
                       for pid in pids}
            rows = {pid: futures[pid].result() for pid in pids}
    else:
        rows = {pid: _evaluate_one(ds, pid, checkpoints[pid], args.split)
                for pid in pids}
    report = build_report(rows, fingerprint(cfg.fingerprint_payload()))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report.as_dict(), indent=2,
                                       sort_keys=True) + "\n")
    write_manifest(out_dir / "manifest.json", command="evaluate",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed,
                   inputs={"dataset": args.data, "checkpoint": args.checkpoint},
                   outputs={"metrics": metrics_path})
    avg = report.averages()
    for pid, row in sorted(rows.items()):
        print(f"{pid}: RMSE {row.rmse:.3f}  MARD {row.mard:.3f}%  MAE {row.mae:.3f}  "
              f"({row.n_samples} samples)")
    print(f"average: RMSE {avg['rmse']:.3f}  MARD {avg['mard']:.3f}%  "
          f"MAE {avg['mae']:.3f}")
    return 0


def _config_from_checkpoint(loaded: LoadedCheckpoint):
    from .model import GamConfig
    return GamConfig(**loaded.model_config)


def cmd_export_attention(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    loaded = load_checkpoint(Path(args.checkpoint))
    check_compatible(loaded, ds)
    if loaded.variant not in ("gam", "gam_ta"):
        raise ConfigError(f"variant {loaded.variant!r} has no graph attention")
    model_cfg = _config_from_checkpoint(loaded)
    params = build_parameters(model_cfg, loaded.variant)
    params.load_flat(loaded.checkpoint.params_flat)
    pids = [args.participant] if args.participant else sorted(ds.participants)
    out_path = Path(args.out)
    if out_path.is_dir():
        out_path = out_path / "attention.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = 0
    beta_rows = []
    with open(out_path, "w") as fh, tc.no_grad():
        for pid in pids:
            samples = ds.samples(pid, args.split)[:max(0, args.max_samples)]
            for sample in samples:
                res = forward(sample, params, model_cfg, loaded.variant,
                              collect_snapshots=True)
                for snap in res.snapshots:
                    for (layer, head), weights in sorted(snap.attention.items()):
                        edges = [{"src": ds.catalog[j], "dst": ds.catalog[i],
                                  "alpha": alpha}
                                 for (i, j), alpha in sorted(weights.items())]
                        fh.write(json.dumps({
                            "participant": pid,
                            "window_end_time": sample.window_end_time,
                            "t": snap.t, "layer": layer, "head": head,
                            "edges": edges,
                        }) + "\n")
                        lines += 1
                if res.beta is not None:
                    beta_rows.append({"participant": pid,
                                      "window_end_time": sample.window_end_time,
                                      "beta": [float(b) for b in res.beta]})
    outputs = {"attention": out_path}
    if args.beta_out and beta_rows:
        beta_path = Path(args.beta_out)
        with open(beta_path, "w") as fh:
            for row in beta_rows:
                fh.write(json.dumps(row) + "\n")
        outputs["beta"] = beta_path
    write_manifest(out_path.parent / "manifest.json", command="export-attention",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed,
                   inputs={"dataset": args.data, "checkpoint": args.checkpoint},
                   outputs=outputs)
    print(f"wrote {lines} attention lines to {out_path}")
    return 0


def cmd_plot_data(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    checkpoints = _load_eval_checkpoints(Path(args.checkpoint), ds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for pid, loaded in sorted(checkpoints.items()):
        check_compatible(loaded, ds)
        model_cfg = _config_from_checkpoint(loaded)
        params = build_parameters(model_cfg, loaded.variant)
        params.load_flat(loaded.checkpoint.params_flat)
        samples = ds.samples(pid, args.split)
        preds = predict_samples(params, samples, model_cfg, loaded.variant)
        sd = ds.stats.stds[ds.target_attribute]
        mu = ds.stats.means[ds.target_attribute]
        path = out_dir / f"plot_{pid}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target_time", "ground_truth", "prediction"])
            horizon_s = ds.horizon * ds.step
            for sample, pred in zip(samples, preds):
                writer.writerow([repr(float(sample.window_end_time + horizon_s)),
                                 repr(float(sample.y * sd + mu)),
                                 repr(float(pred * sd + mu))])
        outputs[pid] = path
    write_manifest(out_dir / "manifest.json", command="plot-data",
                   config_fingerprint=fingerprint(cfg.fingerprint_payload()),
                   seed=cfg.seed,
                   inputs={"dataset": args.data, "checkpoint": args.checkpoint},
                   outputs=outputs)
    print(f"wrote {len(outputs)} plot files to {out_dir}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "train-fl": cmd_train_fl,
    "evaluate": cmd_evaluate,
    "export-attention": cmd_export_attention,
    "plot-data": cmd_plot_data,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except GamError as exc:
        name, code = _category(exc)
        print(f"error [{name}]: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error [IOError]: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
