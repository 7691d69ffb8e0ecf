"""Input validation helpers shared by the estimator layer and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .ingest import GridSeries, RegularSample


def check_grid(grid: GridSeries) -> GridSeries:
    if not isinstance(grid, GridSeries):
        raise ValidationError(f"expected a GridSeries, got {type(grid).__name__}")
    if grid.values.shape != grid.mask.shape:
        raise ValidationError(
            f"grid values {grid.values.shape} and mask {grid.mask.shape} disagree")
    if grid.values.shape[0] != len(grid.catalog):
        raise ValidationError(
            f"grid has {grid.values.shape[0]} rows for {len(grid.catalog)} attributes")
    if not np.all(np.isfinite(grid.values[grid.mask])):
        raise ValidationError("grid holds non-finite observed values")
    return grid


def check_samples(samples: list[RegularSample], n_attributes: int,
                  history: int) -> list[RegularSample]:
    if not samples:
        raise ValidationError("empty sample list")
    for i, s in enumerate(samples):
        if s.X.shape != (n_attributes, history):
            raise ValidationError(
                f"sample {i} has shape {s.X.shape}, expected "
                f"({n_attributes}, {history})")
        if s.mask.shape != s.X.shape:
            raise ValidationError(f"sample {i}: mask shape differs from X")
        if not np.isfinite(s.y):
            raise ValidationError(f"sample {i}: non-finite target")
        if not np.all(np.isfinite(s.X[s.mask])):
            raise ValidationError(f"sample {i}: non-finite observed values")
    return samples


def check_datasets(datasets: dict, n_attributes: int, history: int,
                   splits: tuple[str, ...] = ("train", "valid")) -> dict:
    if not datasets:
        raise ValidationError("no participants")
    for pid, by_split in datasets.items():
        for split in splits:
            if split not in by_split:
                raise ValidationError(f"participant {pid!r} is missing split {split!r}")
            check_samples(by_split[split], n_attributes, history)
    return datasets
