"""Synthetic generator: determinism, dynamics, and causal structure."""

import numpy as np
import pytest

from gamforecast.errors import ConfigError
from gamforecast.synth import (EPOCH_START, STEP, SynthSpec,
                               baseline_trajectory, generate,
                               generate_participant, participant_profile,
                               write_dataset)


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        spec = SynthSpec(participants=2, days=2, seed=42)
        a, b = generate(spec), generate(spec)
        assert a.keys() == b.keys()
        for pid in a:
            assert len(a[pid]) == len(b[pid])
            for e1, e2 in zip(a[pid], b[pid]):
                assert (e1.attribute, e1.timestamp, e1.value,
                        e1.end_timestamp) == \
                    (e2.attribute, e2.timestamp, e2.value, e2.end_timestamp)

    def test_zero_noise_zero_meals_gives_pure_rhythm(self):
        spec = SynthSpec(participants=1, days=2, meals_per_day=0.0,
                         noise_std=0.0, glucose_dropout=0.0, seed=3)
        pid, events = generate_participant(spec, 0)
        glucose = [e for e in events if e.attribute == "glucose_level"]
        assert len(glucose) == 2 * 288
        profile = participant_profile(spec, 0)
        base = baseline_trajectory(profile["mu"], profile["amplitude"],
                                   profile["phase"], 2 * 288)
        values = np.array([e.value for e in glucose])
        np.testing.assert_allclose(values, np.round(base, 1), atol=1e-9)
        times = np.array([e.timestamp for e in glucose])
        np.testing.assert_array_equal(times,
                                      EPOCH_START + np.arange(2 * 288) * STEP)


class TestDynamics:
    def _glucose_array(self, spec, index=0):
        _, events = generate_participant(spec, index)
        by_step = {}
        for e in events:
            if e.attribute == "glucose_level":
                by_step[(e.timestamp - EPOCH_START) // STEP] = e.value
        return by_step, events

    def test_meals_raise_glucose(self):
        quiet = SynthSpec(participants=1, days=4, meal_gain=0.0,
                          bolus_gain=0.0, noise_std=0.0, glucose_dropout=0.0,
                          seed=5)
        fed = SynthSpec(participants=1, days=4, meal_gain=0.8, bolus_gain=0.0,
                        noise_std=0.0, glucose_dropout=0.0, seed=5)
        g_quiet, _ = self._glucose_array(quiet)
        g_fed, events = self._glucose_array(fed)
        meals = [e for e in events if e.attribute == "meal"]
        assert meals, "expected meal events"
        diffs = []
        for meal in meals:
            step = (meal.timestamp - EPOCH_START) // STEP
            probe = step + 10  # ~50 minutes later
            if probe in g_fed and probe in g_quiet:
                diffs.append(g_fed[probe] - g_quiet[probe])
        assert np.mean(diffs) > 10.0

    def test_boluses_lower_glucose(self):
        no_insulin = SynthSpec(participants=1, days=4, meal_gain=0.6,
                               bolus_gain=0.0, noise_std=0.0,
                               glucose_dropout=0.0, seed=6)
        insulin = SynthSpec(participants=1, days=4, meal_gain=0.6,
                            bolus_gain=8.0, noise_std=0.0,
                            glucose_dropout=0.0, seed=6)
        g_no, _ = self._glucose_array(no_insulin)
        g_yes, events = self._glucose_array(insulin)
        boluses = [e for e in events if e.attribute == "bolus"]
        assert boluses, "expected bolus events"
        diffs = []
        for bolus in boluses:
            step = (bolus.timestamp - EPOCH_START) // STEP
            probe = step + 12
            if probe in g_no and probe in g_yes:
                diffs.append(g_no[probe] - g_yes[probe])
        assert np.mean(diffs) > 10.0

    def test_values_clamped(self):
        spec = SynthSpec(participants=2, days=3, meal_gain=3.0, noise_std=30.0,
                         seed=7)
        for events in generate(spec).values():
            for e in events:
                if e.attribute == "glucose_level":
                    assert 40.0 <= e.value <= 400.0


class TestSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            SynthSpec(participants=0).validate()
        with pytest.raises(ConfigError):
            SynthSpec(decay=1.5).validate()
        SynthSpec().validate()

    def test_write_dataset(self, tmp_path):
        spec = SynthSpec(participants=2, days=1, seed=8)
        paths = write_dataset(spec, tmp_path)
        assert sorted(paths) == ["p001", "p002"]
        text = paths["p001"].read_text().splitlines()
        assert text[0] == "participant,attribute,timestamp,value,end_timestamp"
        assert all(line.startswith("p001,") for line in text[1:])
