"""Irregular event streams onto a regular 5-minute grid.

Pipeline: parse events (CSV/JSONL) -> merge temporary basal overrides ->
regularize onto a fixed grid with an observation mask -> chronological
train/validation split -> standard normalization fitted on observed
training cells -> sliding-window samples.

Unobserved grid cells carry the value 0 with ``mask`` false; after
normalization an observed cell holding the attribute mean is also 0, so
zero padding is the same as mean padding and the mask is the only
authority on observedness.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, ValidationError

GRID_STEP_SECONDS = 300.0

#: How an attribute's events map onto grid cells.
#:   point    - snap to the containing cell; multiple values in a cell average
#:   interval - every cell overlapped by [timestamp, end_timestamp) gets the value
#:   stepwise - the value holds from its cell until superseded by the next event
POLICIES = ("point", "interval", "stepwise")


@dataclass
class EventRecord:
    attribute: str
    timestamp: float
    value: float
    end_timestamp: float | None = None

    def validate(self) -> None:
        if not math.isfinite(self.timestamp):
            raise ValidationError(f"event timestamp not finite: {self.attribute}")
        if not math.isfinite(self.value):
            raise ValidationError(f"event value not finite: {self.attribute}")
        if self.end_timestamp is not None and self.end_timestamp < self.timestamp:
            raise ValidationError(
                f"event end_timestamp precedes timestamp: {self.attribute}")


@dataclass
class EventStream:
    participant_id: str
    events: list[EventRecord]
    attribute_catalog: list[str]

    def validate(self) -> None:
        if len(set(self.attribute_catalog)) != len(self.attribute_catalog):
            raise SchemaError("attribute catalog contains duplicates")
        known = set(self.attribute_catalog)
        for ev in self.events:
            if ev.attribute not in known:
                raise SchemaError(f"event attribute not in catalog: {ev.attribute}")


@dataclass
class GridSeries:
    participant_id: str
    grid_start: float
    step: float
    values: np.ndarray  # (N, T_total) float64
    mask: np.ndarray    # (N, T_total) bool
    catalog: list[str]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Per-attribute mean/std computed over observed training cells."""

    means: dict[str, float]
    stds: dict[str, float]
    computed_on: str = ""


@dataclass
class RegularSample:
    X: np.ndarray       # (N, T) normalized values, 0 where mask is false
    mask: np.ndarray    # (N, T) bool
    y: float            # normalized target at the horizon (always observed)
    participant_id: str
    window_end_time: float  # absolute time of the last in-window grid cell


@dataclass
class IngestStats:
    """Counters for records silently handled during regularization."""

    dropped_before_grid: int = 0
    dropped_after_grid: int = 0
    dropped_unknown_attribute: int = 0
    bad_rows: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "dropped_before_grid": self.dropped_before_grid,
            "dropped_after_grid": self.dropped_after_grid,
            "dropped_unknown_attribute": self.dropped_unknown_attribute,
            "bad_rows": self.bad_rows,
            "counts": dict(self.counts),
        }


# ---------------------------------------------------------------------------
# parsing


def parse_timestamp(text: str) -> float:
    """Epoch seconds from an integer/float literal or an ISO-8601 string."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        iso = text.replace("Z", "+00:00")
        dt = datetime.fromisoformat(iso)
    except ValueError as exc:
        raise ValueError(f"unrecognized timestamp: {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


CSV_COLUMNS = ("participant", "attribute", "timestamp", "value", "end_timestamp")


def parse_events(source, fmt: str, catalog: list[str], *,
                 strict: bool = True,
                 stats: IngestStats | None = None) -> EventStream:
    """Parse one participant's events from a CSV or JSONL byte/text stream.

    Events are returned sorted ascending by timestamp (stable).  The
    stream's catalog is the configured ``catalog``, not the set of
    attributes observed.  With ``strict`` off, events for attributes
    outside the catalog are dropped and counted instead of raising.
    """
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown event format: {fmt}")
    if isinstance(source, (bytes, bytearray)):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    elif hasattr(source, "read") and "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8")

    known = set(catalog)
    events: list[EventRecord] = []
    participant = ""

    def handle(line_no: int, rec: dict) -> None:
        nonlocal participant
        missing = [k for k in ("participant", "attribute", "timestamp", "value")
                   if rec.get(k) in (None, "")]
        if missing:
            raise ParseError(f"line {line_no}: missing fields {missing}")
        pid = str(rec["participant"])
        if participant and pid != participant:
            raise SchemaError(
                f"line {line_no}: multiple participants in one stream "
                f"({participant!r} then {pid!r})")
        participant = pid
        attr = str(rec["attribute"])
        if attr not in known:
            if strict:
                raise SchemaError(f"line {line_no}: unknown attribute {attr!r}")
            if stats is not None:
                stats.dropped_unknown_attribute += 1
            return
        try:
            ts = parse_timestamp(str(rec["timestamp"]))
            value = float(rec["value"])
            end_raw = rec.get("end_timestamp")
            end = None if end_raw in (None, "") else parse_timestamp(str(end_raw))
        except (ValueError, TypeError) as exc:
            raise ParseError(f"line {line_no}: {exc}") from exc
        ev = EventRecord(attr, ts, value, end)
        try:
            ev.validate()
        except ValidationError as exc:
            raise ParseError(f"line {line_no}: {exc}") from exc
        events.append(ev)

    if fmt == "csv":
        reader = csv.reader(source)
        header = next(reader, None)
        if header is None:
            return EventStream("", [], list(catalog))
        header = [h.strip() for h in header]
        if not set(("participant", "attribute", "timestamp", "value")) <= set(header):
            raise SchemaError(f"CSV header missing required columns: {header}")
        col = {name: header.index(name) for name in header}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            rec = {name: row[i] for name, i in col.items()}
            handle(line_no, rec)
    else:
        for line_no, line in enumerate(source, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {line_no}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"line {line_no}: expected an object")
            handle(line_no, rec)

    events.sort(key=lambda e: e.timestamp)
    stream = EventStream(participant, events, list(catalog))
    stream.validate()
    return stream


# ---------------------------------------------------------------------------
# basal merging


def merge_basal(stream: EventStream, *, basal: str = "basal",
                temp_basal: str = "temp_basal") -> EventStream:
    """Fold temporary basal overrides into a single stepwise basal series.

    Within any temporary interval the override value applies; outside,
    the normal stepwise basal value applies.  Overlapping temporary
    intervals are rejected: there is no defined precedence.
    """
    basal_events = [e for e in stream.events if e.attribute == basal]
    temp_events = [e for e in stream.events if e.attribute == temp_basal]
    others = [e for e in stream.events
              if e.attribute not in (basal, temp_basal)]
    catalog = [a for a in stream.attribute_catalog if a != temp_basal]
    if not temp_events:
        kept = [e for e in stream.events if e.attribute != temp_basal]
        return EventStream(stream.participant_id, kept, catalog)

    temps = sorted(temp_events, key=lambda e: e.timestamp)
    for ev in temps:
        if ev.end_timestamp is None:
            raise ValidationError(f"{temp_basal} event without end_timestamp")
    for prev, nxt in zip(temps, temps[1:]):
        if nxt.timestamp < prev.end_timestamp:
            raise ValidationError(
                f"overlapping {temp_basal} intervals at "
                f"{prev.timestamp}..{prev.end_timestamp} and {nxt.timestamp}")

    normals = sorted(basal_events, key=lambda e: e.timestamp)

    def normal_at(ts: float) -> float | None:
        val = None
        for ev in normals:
            if ev.timestamp <= ts:
                val = ev.value
            else:
                break
        return val

    # timeline breakpoints where the effective rate can change
    points = sorted({e.timestamp for e in normals}
                    | {e.timestamp for e in temps}
                    | {e.end_timestamp for e in temps})
    merged: list[EventRecord] = []
    last_val = None
    for ts in points:
        inside = next((t for t in temps
                       if t.timestamp <= ts < t.end_timestamp), None)
        val = inside.value if inside is not None else normal_at(ts)
        if val is None:
            continue  # rate unknown before the first normal basal event
        if last_val is None or val != last_val:
            merged.append(EventRecord(basal, ts, val))
            last_val = val
    out = sorted(merged + others, key=lambda e: e.timestamp)
    return EventStream(stream.participant_id, out, catalog)


# ---------------------------------------------------------------------------
# regularization


def regularize(stream: EventStream, grid_start: float, grid_len: int,
               policies: dict[str, str], *, step: float = GRID_STEP_SECONDS,
               stats: IngestStats | None = None) -> GridSeries:
    """Resample events onto a fixed grid (pre-normalization values).

    Observed cells carry their value with mask true; everything else is
    0 with mask false.  Events before ``grid_start`` are dropped and
    counted.  A record with an ``end_timestamp`` is always spread over
    the cells it overlaps, whatever the attribute's declared policy.
    """
    if grid_len <= 0:
        raise ConfigError(f"grid_len must be positive, got {grid_len}")
    for attr, pol in policies.items():
        if pol not in POLICIES:
            raise ConfigError(f"unknown policy {pol!r} for attribute {attr!r}")
    stats = stats if stats is not None else IngestStats()
    catalog = stream.attribute_catalog
    row = {a: i for i, a in enumerate(catalog)}
    n = len(catalog)
    acc = np.zeros((n, grid_len))
    cnt = np.zeros((n, grid_len), dtype=np.int64)
    step_rows: dict[int, list[tuple[int, float]]] = {}

    for ev in stream.events:
        if ev.timestamp < grid_start:
            stats.dropped_before_grid += 1
            continue
        cell = int((ev.timestamp - grid_start) // step)
        if cell >= grid_len:
            stats.dropped_after_grid += 1
            continue
        r = row[ev.attribute]
        stats.counts[ev.attribute] = stats.counts.get(ev.attribute, 0) + 1
        policy = policies.get(ev.attribute, "point")
        if policy == "stepwise":
            step_rows.setdefault(r, []).append((cell, ev.value))
        elif ev.end_timestamp is not None and ev.end_timestamp > ev.timestamp:
            last = int(math.ceil((ev.end_timestamp - grid_start) / step)) - 1
            last = min(last, grid_len - 1)
            for c in range(cell, last + 1):
                acc[r, c] += ev.value
                cnt[r, c] += 1
        else:
            acc[r, cell] += ev.value
            cnt[r, cell] += 1

    values = np.zeros((n, grid_len))
    mask = cnt > 0
    np.divide(acc, cnt, out=values, where=mask)

    for r, entries in step_rows.items():
        entries.sort(key=lambda e: e[0])
        for i, (cell, val) in enumerate(entries):
            end = entries[i + 1][0] if i + 1 < len(entries) else grid_len
            end = max(end, cell + 1)  # same-cell successor: later value wins
            values[r, cell:end] = val
            mask[r, cell:end] = True

    return GridSeries(stream.participant_id, float(grid_start), float(step),
                      values, mask, list(catalog))


def split_train_valid(grid: GridSeries, ratio: float,
                      min_len: int = 1) -> tuple[GridSeries, GridSeries]:
    """Chronological split: the first ``ratio`` of the time axis trains.

    ``min_len`` is the shortest usable side (history + horizon), so a
    split leaving either side without a full window is rejected.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    total = grid.length
    cut = int(total * ratio)
    if cut < min_len or total - cut < min_len:
        raise ValidationError(
            f"grid of {total} steps cannot be split {ratio:.2f} with "
            f"at least {min_len} steps per side")
    train = GridSeries(grid.participant_id, grid.grid_start, grid.step,
                       grid.values[:, :cut].copy(), grid.mask[:, :cut].copy(),
                       list(grid.catalog))
    valid = GridSeries(grid.participant_id, grid.grid_start + cut * grid.step,
                       grid.step, grid.values[:, cut:].copy(),
                       grid.mask[:, cut:].copy(), list(grid.catalog))
    return train, valid


# ---------------------------------------------------------------------------
# normalization


def fit_normalizer(train: GridSeries, *, computed_on: str = "train") -> NormStats:
    """Per-attribute mean/std over observed cells (population std)."""
    return fit_normalizer_pooled([train], computed_on=computed_on)


def fit_normalizer_pooled(grids: list[GridSeries], *,
                          computed_on: str = "train") -> NormStats:
    """Fit one normalizer over the observed training cells of many grids."""
    if not grids:
        raise ValidationError("no grids to fit a normalizer on")
    catalog = grids[0].catalog
    for g in grids:
        if g.catalog != catalog:
            raise ValidationError("grids disagree on the attribute catalog")
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    empty: list[str] = []
    constant: list[str] = []
    for i, attr in enumerate(catalog):
        observed = np.concatenate([g.values[i][g.mask[i]] for g in grids])
        if observed.size == 0:
            empty.append(attr)
            continue
        mu = float(observed.mean())
        sd = float(observed.std())  # population formula (divisor = count)
        if sd < 1e-12:
            constant.append(attr)
            continue
        means[attr] = mu
        stds[attr] = sd
    if empty or constant:
        parts = []
        if empty:
            parts.append(f"no observed cells: {empty}")
        if constant:
            parts.append(f"zero variance: {constant}")
        raise ValidationError("cannot normalize attributes - " + "; ".join(parts))
    return NormStats(means, stds, computed_on)


def apply_normalizer(grid: GridSeries, stats: NormStats) -> GridSeries:
    """(v - mean) / std on observed cells; unobserved cells forced to 0."""
    missing = [a for a in grid.catalog if a not in stats.means]
    if missing:
        raise ValidationError(f"attributes missing from normalizer stats: {missing}")
    mu = np.array([stats.means[a] for a in grid.catalog]).reshape(-1, 1)
    sd = np.array([stats.stds[a] for a in grid.catalog]).reshape(-1, 1)
    values = np.where(grid.mask, (grid.values - mu) / sd, 0.0)
    return GridSeries(grid.participant_id, grid.grid_start, grid.step,
                      values, grid.mask.copy(), list(grid.catalog))


def denormalize_target(y, stats: NormStats, attribute: str):
    return np.asarray(y) * stats.stds[attribute] + stats.means[attribute]


# ---------------------------------------------------------------------------
# windowing


def window_samples(grid: GridSeries, history: int, horizon: int,
                   target_row: int) -> list[RegularSample]:
    """Stride-1 sliding windows with an observed target at the horizon.

    A window starting at cell s covers cells [s, s+history); its target is
    the cell at offset history+horizon-1 past s.  Windows whose target
    cell is unobserved are skipped; a grid shorter than history+horizon
    yields no samples.
    """
    if history < 1 or horizon < 1:
        raise ConfigError(f"history and horizon must be >= 1, got {history}, {horizon}")
    if not 0 <= target_row < grid.values.shape[0]:
        raise ConfigError(f"target_row {target_row} out of range")
    span = history + horizon
    out: list[RegularSample] = []
    for s in range(grid.length - span + 1):
        tc = s + span - 1
        if not grid.mask[target_row, tc]:
            continue
        out.append(RegularSample(
            X=grid.values[:, s:s + history].copy(),
            mask=grid.mask[:, s:s + history].copy(),
            y=float(grid.values[target_row, tc]),
            participant_id=grid.participant_id,
            window_end_time=grid.grid_start + (s + history - 1) * grid.step,
        ))
    return out
