"""Versioned binary containers, fingerprints, and run manifests.

Both container formats share one framing: an ASCII magic line, one JSON
header line, then raw numpy arrays written with ``numpy.lib.format`` in
the exact order listed by the header.  Readers verify the magic before
touching anything else.

  GAMDS1 - processed dataset: per-participant windowed sample arrays per
           split, plus the fitted normalizer and the ingest fingerprint.
  GAMCK1 - parameter checkpoint: named flat arrays with shapes, optional
           optimizer moments, training step, and validation RMSE.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npfmt

from .errors import FingerprintError, StorageError
from .ingest import NormStats, RegularSample
from .train import Checkpoint

DATASET_MAGIC = b"GAMDS1\n"
CHECKPOINT_MAGIC = b"GAMCK1\n"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    """Stable hash of a JSON-serializable configuration object."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def sha256_file(path: Path) -> str:
    """Digest of a file, or of a directory's file names and digests."""
    path = Path(path)
    digest = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(child.name.encode())
            digest.update(sha256_file(child).encode())
        return digest.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# processed dataset


@dataclass
class SplitArrays:
    """Windowed samples of one participant/split as stacked arrays."""

    X: np.ndarray          # (S, N, T) float64
    mask: np.ndarray       # (S, N, T) bool
    y: np.ndarray          # (S,) float64
    end_time: np.ndarray   # (S,) float64

    @classmethod
    def from_samples(cls, samples: list[RegularSample], n: int, t: int) -> "SplitArrays":
        s = len(samples)
        arr = cls(X=np.zeros((s, n, t)), mask=np.zeros((s, n, t), dtype=bool),
                  y=np.zeros(s), end_time=np.zeros(s))
        for i, smp in enumerate(samples):
            arr.X[i] = smp.X
            arr.mask[i] = smp.mask
            arr.y[i] = smp.y
            arr.end_time[i] = smp.window_end_time
        return arr

    def to_samples(self, participant_id: str) -> list[RegularSample]:
        return [RegularSample(self.X[i], self.mask[i], float(self.y[i]),
                              participant_id, float(self.end_time[i]))
                for i in range(self.X.shape[0])]

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class ProcessedDataset:
    catalog: list[str]
    history: int
    horizon: int
    step: float
    target_attribute: str
    stats: NormStats
    participants: dict[str, dict[str, SplitArrays]]  # pid -> split -> arrays
    ingest_stats: dict = field(default_factory=dict)
    fingerprint: str = ""

    @property
    def target_index(self) -> int:
        return self.catalog.index(self.target_attribute)

    def splits(self) -> list[str]:
        first = next(iter(self.participants.values()))
        return list(first)

    def samples(self, pid: str, split: str) -> list[RegularSample]:
        return self.participants[pid][split].to_samples(pid)

    def as_train_datasets(self) -> dict:
        """The {pid: {"train": [...], "valid": [...]}} view trainers consume."""
        return {pid: {split: arrs.to_samples(pid) for split, arrs in by_split.items()}
                for pid, by_split in self.participants.items()}


_SPLIT_FIELDS = ("X", "mask", "y", "end_time")


def save_dataset(path: Path, ds: ProcessedDataset) -> None:
    entries = []
    arrays = []
    for pid in sorted(ds.participants):
        for split in sorted(ds.participants[pid]):
            arrs = ds.participants[pid][split]
            entries.append({"participant": pid, "split": split, "count": len(arrs)})
            arrays.extend(getattr(arrs, name) for name in _SPLIT_FIELDS)
    header = {
        "catalog": ds.catalog,
        "history": ds.history,
        "horizon": ds.horizon,
        "step": ds.step,
        "target_attribute": ds.target_attribute,
        "stats": {"means": ds.stats.means, "stds": ds.stats.stds,
                  "computed_on": ds.stats.computed_on},
        "entries": entries,
        "ingest_stats": ds.ingest_stats,
        "fingerprint": ds.fingerprint,
    }
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write((canonical_json(header) + "\n").encode())
        for arr in arrays:
            npfmt.write_array(fh, np.ascontiguousarray(arr))


def load_dataset(path: Path) -> ProcessedDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise StorageError(f"{path}: not a GAMDS1 dataset (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        participants: dict[str, dict[str, SplitArrays]] = {}
        for entry in header["entries"]:
            fields = {name: npfmt.read_array(fh) for name in _SPLIT_FIELDS}
            participants.setdefault(entry["participant"], {})[entry["split"]] = \
                SplitArrays(**fields)
    stats = NormStats(means=header["stats"]["means"], stds=header["stats"]["stds"],
                      computed_on=header["stats"]["computed_on"])
    return ProcessedDataset(
        catalog=header["catalog"], history=header["history"],
        horizon=header["horizon"], step=header["step"],
        target_attribute=header["target_attribute"], stats=stats,
        participants=participants, ingest_stats=header["ingest_stats"],
        fingerprint=header["fingerprint"])


# ---------------------------------------------------------------------------
# parameter checkpoints


def save_checkpoint(path: Path, ckpt: Checkpoint, *, names: list[str],
                    shapes: list[tuple[int, ...]], variant: str,
                    model_config: dict, data_fingerprint: str = "") -> None:
    header = {
        "names": names,
        "shapes": [list(s) for s in shapes],
        "variant": variant,
        "model_config": model_config,
        "data_fingerprint": data_fingerprint,
        "step": ckpt.step,
        "valid_rmse": ckpt.valid_rmse,
        "has_optimizer": ckpt.opt_state is not None,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((canonical_json(header) + "\n").encode())
        npfmt.write_array(fh, np.ascontiguousarray(ckpt.params_flat))
        if ckpt.opt_state is not None:
            npfmt.write_array(fh, np.asarray([ckpt.opt_state["t"]], dtype=np.float64))
            for name in names:
                npfmt.write_array(fh, np.ascontiguousarray(ckpt.opt_state["m"][name]))
            for name in names:
                npfmt.write_array(fh, np.ascontiguousarray(ckpt.opt_state["v"][name]))


@dataclass
class LoadedCheckpoint:
    checkpoint: Checkpoint
    names: list[str]
    shapes: list[tuple[int, ...]]
    variant: str
    model_config: dict
    data_fingerprint: str


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise StorageError(f"{path}: not a GAMCK1 checkpoint (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        params_flat = npfmt.read_array(fh)
        opt_state = None
        if header["has_optimizer"]:
            t = int(npfmt.read_array(fh)[0])
            m = {name: npfmt.read_array(fh) for name in header["names"]}
            v = {name: npfmt.read_array(fh) for name in header["names"]}
            opt_state = {"t": t, "m": m, "v": v}
    ckpt = Checkpoint(params_flat, int(header["step"]),
                      float(header["valid_rmse"]), opt_state)
    return LoadedCheckpoint(ckpt, header["names"],
                            [tuple(s) for s in header["shapes"]],
                            header["variant"], header["model_config"],
                            header["data_fingerprint"])


def check_compatible(loaded: LoadedCheckpoint, ds: ProcessedDataset) -> None:
    """Reject a checkpoint trained under a different data geometry."""
    mc = loaded.model_config
    problems = []
    if mc.get("n_attributes") != len(ds.catalog):
        problems.append(f"n_attributes {mc.get('n_attributes')} vs catalog "
                        f"size {len(ds.catalog)}")
    if mc.get("history") != ds.history:
        problems.append(f"history {mc.get('history')} vs dataset {ds.history}")
    if mc.get("horizon") != ds.horizon:
        problems.append(f"horizon {mc.get('horizon')} vs dataset {ds.horizon}")
    if loaded.data_fingerprint and ds.fingerprint and \
            loaded.data_fingerprint != ds.fingerprint:
        problems.append("data fingerprint mismatch")
    if problems:
        raise FingerprintError(
            "checkpoint is incompatible with this dataset: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path: Path, *, command: str, config_fingerprint: str,
                   seed: int, inputs: dict[str, Path],
                   outputs: dict[str, Path],
                   timing_outputs: dict[str, Path] | None = None) -> dict:
    """Record what a command consumed and produced.

    ``outputs`` are hashed (rerunning with unchanged inputs must reproduce
    them byte for byte); ``timing_outputs`` carry wallclock readings and
    are listed without hashes.
    """
    import numpy
    from . import __version__
    manifest = {
        "command": command,
        "config_fingerprint": config_fingerprint,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(Path(p))}
                   for name, p in sorted(inputs.items())},
        "outputs": {name: {"path": str(p), "sha256": sha256_file(Path(p))}
                    for name, p in sorted(outputs.items())},
        "timing_outputs": {name: {"path": str(p)}
                           for name, p in sorted((timing_outputs or {}).items())},
        "versions": {"gamforecast": __version__, "numpy": numpy.__version__},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
