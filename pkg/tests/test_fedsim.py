"""Federated averaging: aggregation identities, equivalences, scheduling."""

import numpy as np
import pytest

from gamforecast.errors import ClientError, ConfigError, ProtocolError
from gamforecast.fedsim import (FLConfig, RoundMessage, client_rng,
                                client_round, run_federated, server_aggregate)
from gamforecast.ingest import NormStats, RegularSample
from gamforecast.model import GamConfig, build_parameters
from gamforecast.tensorcore import Adam
from gamforecast.train import init_rng, train_step

IDENTITY_STATS = NormStats({"glucose_level": 0.0}, {"glucose_level": 1.0})


def tiny_config(**kw):
    defaults = dict(n_attributes=2, history=4, horizon=6, embed_dim=3,
                    gat_dim=3, heads=1, gat_layers=1, hidden_size=4)
    defaults.update(kw)
    return GamConfig(**defaults)


def make_datasets(cfg, pids, seed=0, n_train=30, n_valid=10):
    rng = np.random.default_rng(seed)
    datasets = {}
    for pid in pids:
        samples = []
        for _ in range(n_train + n_valid):
            X = rng.normal(size=(cfg.n_attributes, cfg.history))
            mask = np.ones_like(X, dtype=bool)
            y = 0.8 * X[0, -1] + 0.3 * X[1, -2]
            samples.append(RegularSample(X, mask, float(y), pid, 0.0))
        datasets[pid] = {"train": samples[:n_train], "valid": samples[n_train:]}
    return datasets


def kahan_mean(snapshots):
    total = np.zeros_like(snapshots[0])
    comp = np.zeros_like(snapshots[0])
    for p in snapshots:
        y = p - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / len(snapshots)


class TestServerAggregate:
    def test_scalar_mean(self):
        out = server_aggregate([np.array([1.0]), np.array([3.0])])
        assert out[0] == 2.0

    def test_single_client_identity_bitwise(self):
        snap = np.random.default_rng(0).normal(size=50)
        out = server_aggregate([snap])
        assert np.array_equal(out, snap)

    def test_identical_clients(self):
        snap = np.random.default_rng(1).normal(size=50)
        out = server_aggregate([snap.copy() for _ in range(5)])
        np.testing.assert_allclose(out, snap, atol=1e-15)

    def test_matches_kahan_oracle(self):
        rng = np.random.default_rng(2)
        snaps = [rng.normal(size=200) * 10.0 ** float(rng.integers(-3, 4))
                 for _ in range(7)]
        out = server_aggregate(snaps)
        np.testing.assert_allclose(out, kahan_mean(snaps), rtol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ProtocolError):
            server_aggregate([np.zeros(3), np.zeros(4)])

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            server_aggregate([])


class TestClientRound:
    def test_zero_steps_returns_global_unchanged(self):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1"])
        flcfg = FLConfig(rounds=1, client_steps=0, batch_size=4, seed=0)
        start = build_parameters(cfg, "gam", np.random.default_rng(3)).flat_view()
        out = client_round(start, datasets["p1"]["train"], cfg, flcfg,
                           client_rng(0, 0, 1))
        np.testing.assert_array_equal(out, start)

    def test_empty_training_set_rejected(self):
        cfg = tiny_config()
        flcfg = FLConfig(rounds=1, client_steps=1, batch_size=4)
        with pytest.raises(ClientError):
            client_round(np.zeros(10), [], cfg, flcfg, client_rng(0, 0, 1))

    def test_zero_gradients_keep_parameters(self):
        # zero-weight head and zero targets: loss is identically 0
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1"])
        for s in datasets["p1"]["train"]:
            s.y = 0.0
        params = build_parameters(cfg, "gam", np.random.default_rng(4))
        params["head.0.w"].data[...] = 0.0
        params["head.0.b"].data[...] = 0.0
        start = params.flat_view()
        flcfg = FLConfig(rounds=1, client_steps=5, batch_size=4, seed=1)
        out = client_round(start, datasets["p1"]["train"], cfg, flcfg,
                           client_rng(1, 0, 1))
        np.testing.assert_array_equal(out, start)


class TestRunFederated:
    def _flcfg(self, **kw):
        defaults = dict(rounds=3, client_steps=4, eval_every_rounds=1,
                        lr_client=3e-3, steps_person=2, eval_every_person=1,
                        lr_stage2=1e-4, batch_size=4, seed=5)
        defaults.update(kw)
        return FLConfig(**defaults)

    def test_single_client_equals_sequential_training(self):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1"], seed=6)
        flcfg = self._flcfg(rounds=3, client_steps=4, steps_person=0)
        result = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                               scheduler="serial")

        # oracle: sequential pooled steps with per-round moment resets and
        # the same per-round generators
        params = build_parameters(cfg, "gam", init_rng(5))
        pool = datasets["p1"]["train"]
        for round_index in range(1, 4):
            opt = Adam(params, lr=flcfg.lr_client)  # reset each round
            rng = client_rng(5, 0, round_index)
            for _ in range(4):
                idx = rng.integers(0, len(pool), size=4)
                train_step(params, opt, [pool[i] for i in idx], cfg, "gam")
        # the last aggregated global equals the oracle's final parameters
        final_round_global = result.rounds[-1]
        assert final_round_global.round == 3
        best = result.global_best
        # with eval every round, the best checkpoint is one of the round
        # iterates; re-walk the oracle to find the matching round
        np.testing.assert_allclose(best.params_flat.size, params.total_size)
        oracle_final = params.flat_view()
        # rerun trainer with rounds=3 and compare the final global directly
        # through a fresh federated run that evaluates nothing
        flcfg2 = self._flcfg(rounds=3, client_steps=4, steps_person=0,
                             eval_every_rounds=3)
        result2 = run_federated(datasets, cfg, flcfg2, IDENTITY_STATS,
                                scheduler="serial")
        np.testing.assert_allclose(result2.global_best.params_flat,
                                   oracle_final, atol=1e-12)

    def test_identical_twins_average_to_themselves(self):
        # same data, same global snapshot, same generator: the two client
        # rounds are bitwise equal and the average equals either of them
        cfg = tiny_config()
        data = make_datasets(cfg, ["p1"], seed=7)["p1"]["train"]
        twin = [RegularSample(s.X.copy(), s.mask.copy(), s.y, "p2",
                              s.window_end_time) for s in data]
        flcfg = self._flcfg(rounds=1, steps_person=0)
        start = build_parameters(cfg, "gam", init_rng(3)).flat_view()
        out1 = client_round(start, data, cfg, flcfg, client_rng(3, 0, 1))
        out2 = client_round(start, twin, cfg, flcfg, client_rng(3, 0, 1))
        np.testing.assert_array_equal(out1, out2)
        np.testing.assert_array_equal(server_aggregate([out1, out2]), out1)

    def test_serial_and_thread_schedulers_agree(self, monkeypatch):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1", "p2", "p3"], seed=8)
        monkeypatch.setenv("GAM_NUM_WORKERS", "3")
        flcfg = self._flcfg(rounds=2, steps_person=2)
        serial = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                               scheduler="serial")
        threaded = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                                 scheduler="thread")
        np.testing.assert_allclose(threaded.global_best.params_flat,
                                   serial.global_best.params_flat, atol=1e-12)
        for pid in serial.personal:
            np.testing.assert_allclose(threaded.personal[pid].params_flat,
                                       serial.personal[pid].params_flat,
                                       atol=1e-12)

    def test_client_order_cannot_change_results(self):
        # run the clients by hand in both orders and aggregate sorted; the
        # orchestrator's one-round result must match the hand-driven mean
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1", "p2"], seed=9)
        flcfg = self._flcfg(rounds=1, steps_person=0, eval_every_rounds=1)
        global0 = build_parameters(cfg, "gam", init_rng(flcfg.seed)).flat_view()
        pids = sorted(datasets)
        forward_order = [client_round(global0, datasets[pid]["train"], cfg,
                                      flcfg, client_rng(flcfg.seed, i, 1))
                         for i, pid in enumerate(pids)]
        reverse_order = {}
        for i, pid in reversed(list(enumerate(pids))):
            reverse_order[pid] = client_round(global0, datasets[pid]["train"],
                                              cfg, flcfg,
                                              client_rng(flcfg.seed, i, 1))
        agg1 = server_aggregate(forward_order)
        agg2 = server_aggregate([reverse_order[pid] for pid in pids])
        np.testing.assert_allclose(agg1, agg2, atol=1e-12)
        result = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                               scheduler="serial")
        np.testing.assert_allclose(result.global_best.params_flat, agg1,
                                   atol=1e-12)

    def test_round_bookkeeping(self):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1", "p2"], seed=10)
        flcfg = self._flcfg(rounds=4, steps_person=0, eval_every_rounds=2)
        result = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                               scheduler="serial", keep_messages=True)
        assert [r.round for r in result.rounds] == [1, 2, 3, 4]
        for round_index in range(1, 5):
            outs = [m for m in result.messages
                    if m.round == round_index and m.direction == "server_to_client"]
            ins = [m for m in result.messages
                   if m.round == round_index and m.direction == "client_to_server"]
            assert {m.participant for m in outs} == {"p1", "p2"}
            assert {m.participant for m in ins} == {"p1", "p2"}
        evaluated = [r for r in result.rounds if r.mean_valid_rmse is not None]
        assert [r.round for r in evaluated] == [2, 4]
        for r in result.rounds:
            assert r.wallclock_serial_s >= r.wallclock_parallel_s > 0

    def test_privacy_boundary_only_parameter_payloads(self):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1"], seed=11)
        flcfg = self._flcfg(rounds=1, steps_person=0)
        result = run_federated(datasets, cfg, flcfg, IDENTITY_STATS,
                               scheduler="serial", keep_messages=True)
        expected_len = build_parameters(cfg, "gam").total_size
        assert result.messages, "round messages must be observable"
        for msg in result.messages:
            assert isinstance(msg, RoundMessage)
            assert msg.direction in ("server_to_client", "client_to_server")
            assert isinstance(msg.payload, np.ndarray)
            assert msg.payload.dtype == np.float64
            assert msg.payload.shape == (expected_len,)

    def test_validation_required(self):
        cfg = tiny_config()
        datasets = make_datasets(cfg, ["p1"], seed=12)
        datasets["p1"]["valid"] = []
        with pytest.raises(ConfigError):
            run_federated(datasets, cfg, self._flcfg(), IDENTITY_STATS)


class TestFLConfig:
    def test_bounds(self):
        with pytest.raises(ConfigError):
            FLConfig(rounds=0).validate()
        with pytest.raises(ConfigError):
            FLConfig(client_steps=0).validate()
        FLConfig().validate()
