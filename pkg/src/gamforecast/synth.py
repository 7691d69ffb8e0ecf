"""Synthetic event-stream generator with causal meal/bolus dynamics.

Glucose follows a discrete process around a per-participant baseline:
a sinusoidal daily rhythm, an autoregressive disturbance, a slow
two-compartment positive response to carbohydrate intake, and a slower
negative response to insulin boluses, plus smoothed sensor noise.  The
response kernels peak 30-60 minutes after the event, so meals and
boluses carry predictive signal about future glucose that the glucose
history alone does not yet show.  Values are clamped to [40, 400] mg/dL.

Events are emitted irregularly: near-5-minute glucose readings with
dropout, self-reported meals/boluses/sleep/exercise, and occasional
finger-stick checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError

EPOCH_START = 1_609_459_200  # 2021-01-01T00:00:00Z
STEP = 300
STEPS_PER_DAY = 288
GLUCOSE_MIN, GLUCOSE_MAX = 40.0, 400.0


@dataclass
class SynthSpec:
    participants: int = 2
    days: int = 7
    meals_per_day: float = 3.0
    bolus_rate: float = 0.9          # probability a meal is covered by a bolus
    decay: float = 0.94              # response-state retention per 5-minute step
    meal_gain: float = 0.55          # mg/dL per gram-step of absorbed carbs
    bolus_gain: float = 5.5          # mg/dL per unit-step of absorbed insulin
    noise_std: float = 2.0           # mg/dL innovation noise
    rhythm_amplitude: float = 18.0   # daily sinusoid amplitude
    glucose_dropout: float = 0.03    # probability a reading is missing
    seed: int = 0

    def validate(self) -> None:
        if self.participants < 1 or self.days < 1:
            raise ConfigError("participants and days must be >= 1")
        for name in ("meals_per_day", "noise_std", "rhythm_amplitude",
                     "meal_gain", "bolus_gain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("decay must be in [0, 1)")
        if not 0.0 <= self.glucose_dropout < 1.0:
            raise ConfigError("glucose_dropout must be in [0, 1)")
        if not 0.0 <= self.bolus_rate <= 1.0:
            raise ConfigError("bolus_rate must be in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthEvent:
    attribute: str
    timestamp: int
    value: float
    end_timestamp: int | None = None


# absorption retention per step (meals absorb faster than insulin acts)
MEAL_ABSORB = 0.78
BOLUS_ABSORB = 0.88
NOISE_SMOOTH = 0.8


def baseline_trajectory(mu: float, amplitude: float, phase: float,
                        n_steps: int) -> np.ndarray:
    """Pure rhythm baseline: what glucose does with no events and no noise."""
    tod = (np.arange(n_steps) * STEP) % 86400
    return np.clip(mu + amplitude * np.sin(2 * np.pi * (tod - phase) / 86400.0),
                   GLUCOSE_MIN, GLUCOSE_MAX)


def _draw_profile(spec: SynthSpec, rng: np.random.Generator) -> dict:
    """Participants differ markedly in baseline, rhythm, and dynamics."""
    return {
        "mu": 120.0 + rng.uniform(0.0, 60.0),
        "phase": rng.uniform(0.0, 86400.0),
        "amplitude": spec.rhythm_amplitude * rng.uniform(0.6, 1.4),
        "decay": min(spec.decay * rng.uniform(0.97, 1.03), 0.985),
        "meal_gain": spec.meal_gain * rng.uniform(0.55, 1.45),
        "bolus_gain": spec.bolus_gain * rng.uniform(0.55, 1.45),
    }


def participant_profile(spec: SynthSpec, index: int) -> dict:
    """The per-participant dynamics actually used by ``generate_participant``."""
    return _draw_profile(spec, np.random.default_rng([spec.seed, index]))


def generate_participant(spec: SynthSpec, index: int) -> tuple[str, list[SynthEvent]]:
    """Deterministic event stream for one participant."""
    rng = np.random.default_rng([spec.seed, index])
    n_steps = spec.days * STEPS_PER_DAY
    profile = _draw_profile(spec, rng)
    mu, phase = profile["mu"], profile["phase"]
    amplitude, decay = profile["amplitude"], profile["decay"]
    meal_gain, bolus_gain = profile["meal_gain"], profile["bolus_gain"]

    carbs_in = np.zeros(n_steps)
    units_in = np.zeros(n_steps)
    events: list[SynthEvent] = []

    for day in range(spec.days):
        day_start = day * STEPS_PER_DAY
        n_meals = int(rng.poisson(spec.meals_per_day))
        anchors = [8.0, 13.0, 19.0, 11.0, 16.0, 21.5]
        for k in range(n_meals):
            hour = anchors[k % len(anchors)] + rng.uniform(-0.75, 0.75)
            step = day_start + int(hour * 12) % STEPS_PER_DAY
            if step >= n_steps:
                continue
            carbs = float(np.clip(rng.normal(55.0, 15.0), 10.0, 120.0))
            ts = EPOCH_START + step * STEP + int(rng.integers(0, STEP))
            events.append(SynthEvent("meal", ts, round(carbs, 1)))
            carbs_in[step] += carbs
            if rng.random() < spec.bolus_rate:
                delay = int(rng.integers(1, 5))
                bstep = step + delay
                if bstep < n_steps:
                    units = float(np.clip(carbs / 10.0 + rng.normal(0.0, 0.4),
                                          0.5, 20.0))
                    bts = EPOCH_START + bstep * STEP + int(rng.integers(0, STEP))
                    if rng.random() < 0.1:  # extended delivery
                        end = bts + int(rng.integers(1800, 3600))
                        events.append(SynthEvent("bolus", bts, round(units, 1), end))
                    else:
                        events.append(SynthEvent("bolus", bts, round(units, 1)))
                    units_in[bstep] += units
        # nightly sleep interval, self-scored quality
        sleep_start = day_start + int((23.0 + rng.uniform(-0.7, 0.7)) * 12)
        sleep_len = int(rng.uniform(6.5, 8.5) * 12)
        if sleep_start < n_steps:
            ts = EPOCH_START + sleep_start * STEP
            end = EPOCH_START + min(sleep_start + sleep_len, n_steps) * STEP
            events.append(SynthEvent("sleep", ts, float(rng.integers(1, 4)), end))
        if rng.random() < 0.5:  # afternoon exercise
            ex_start = day_start + int((17.0 + rng.uniform(-1.5, 1.5)) * 12)
            ex_len = int(rng.uniform(0.5, 1.0) * 12)
            if ex_start < n_steps:
                ts = EPOCH_START + ex_start * STEP
                end = EPOCH_START + min(ex_start + ex_len, n_steps) * STEP
                events.append(SynthEvent("exercise", ts, float(rng.integers(1, 11)), end))

    base = baseline_trajectory(mu, amplitude, phase, n_steps)
    glucose = np.empty(n_steps)
    meal_absorb = meal_response = 0.0
    bolus_absorb = bolus_response = 0.0
    noise = 0.0
    for k in range(n_steps):
        glucose[k] = float(np.clip(base[k] + meal_gain * meal_response
                                   - bolus_gain * bolus_response + noise,
                                   GLUCOSE_MIN, GLUCOSE_MAX))
        meal_response = decay * meal_response + (1 - MEAL_ABSORB) * meal_absorb
        meal_absorb = MEAL_ABSORB * meal_absorb + carbs_in[k]
        bolus_response = decay * bolus_response + (1 - BOLUS_ABSORB) * bolus_absorb
        bolus_absorb = BOLUS_ABSORB * bolus_absorb + units_in[k]
        if spec.noise_std > 0:
            noise = NOISE_SMOOTH * noise + float(rng.normal(0.0, spec.noise_std))

    for k in range(n_steps):
        if spec.glucose_dropout and rng.random() < spec.glucose_dropout:
            continue
        events.append(SynthEvent("glucose_level", EPOCH_START + k * STEP,
                                 round(float(glucose[k]), 1)))
    # a couple of finger sticks per day with meter noise
    for _ in range(2 * spec.days):
        k = int(rng.integers(0, n_steps))
        value = float(np.clip(glucose[k] + rng.normal(0.0, 8.0),
                              GLUCOSE_MIN, GLUCOSE_MAX))
        ts = EPOCH_START + k * STEP + int(rng.integers(0, STEP))
        events.append(SynthEvent("finger_stick", ts, round(value, 1)))

    events.sort(key=lambda e: (e.timestamp, e.attribute))
    return f"p{index + 1:03d}", events


def generate(spec: SynthSpec) -> dict[str, list[SynthEvent]]:
    spec.validate()
    return dict(generate_participant(spec, i) for i in range(spec.participants))


def write_event_csv(path: Path, participant: str,
                    events: list[SynthEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["participant", "attribute", "timestamp", "value",
                         "end_timestamp"])
        for ev in events:
            writer.writerow([participant, ev.attribute, ev.timestamp,
                             repr(ev.value),
                             "" if ev.end_timestamp is None else ev.end_timestamp])


def write_dataset(spec: SynthSpec, out_dir: Path) -> dict[str, Path]:
    """Generate and write one CSV per participant; returns the file map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for pid, events in generate(spec).items():
        path = out_dir / f"events_{pid}.csv"
        write_event_csv(path, pid, events)
        paths[pid] = path
    return paths
