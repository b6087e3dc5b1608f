from dataclasses import replace

import numpy as np
import pytest

from irxfb import fec

from irxfb.fallback import CostMatrix
from irxfb.linkchan import LinkConfig, draw_channel, transmit
from irxfb.mfdet import DetectorConfig
from irxfb.mlp import HIDDEN, TrainConfig, init_params
from irxfb.modem import ModFormat
from irxfb.rx import eirc
from irxfb.xp import (CSV_COLUMNS, Artifacts, RateReport, SweepSpec, crossing_db, csv_body,
                      error_rate_sweep, gen_training_set, loss_curves, reports_to_csv, run_block,
                      simulate_point, throughput_sweep)

QPSK_16 = LinkConfig(desired_format=ModFormat.QPSK, interference_format=ModFormat.QAM16)


def some_artifacts():
    p = init_params((4,) + HIDDEN, 0)
    return Artifacts(CostMatrix.from_theta(0.5, 4), p)


class TestRateReport:
    def test_counts(self):
        correct = np.array([1, 1, 1, 0, 0, 1, 0, 1], bool)
        fb = np.array([1, 0, 0, 1, 0, 0, 0, 1], bool)
        r = RateReport.from_decisions(5.0, "x", correct, fb)
        assert (r.n_blocks, r.n_correct, r.n_fb_correct, r.n_keep_wrong, r.n_fallback) == \
            (8, 5, 2, 2, 3)
        assert r.p_d == 5 / 8 and r.p_e == 3 / 8
        assert r.gamma_e1 == 2 / 5 and r.gamma_e2 == 2 / 3
        assert r.r_e == pytest.approx(4 / 8, abs=1e-15)
        assert r.throughput is None

    def test_empty_conditioning(self):
        r = RateReport.from_decisions(0.0, "x", np.ones(4, bool), np.zeros(4, bool))
        assert np.isnan(r.gamma_e2) and r.r_e == 0.0

    def test_halfwidth(self):
        assert RateReport.halfwidth(0.5, 100) == pytest.approx(1.959964 * 0.05, rel=1e-6)


@pytest.fixture(scope="module")
def small_sweep():
    spec = SweepSpec((0.0, 10.0, 20.0), 300, policies=("none", "oracle", "bayes", "dnn",
                                                      "always_fallback", "genie"), seed=3)
    return error_rate_sweep(spec, some_artifacts())


class TestErrorSweep:
    def test_identities(self, small_sweep):
        for r in small_sweep:
            assert r.p_d + r.p_e == 1.0
            t1 = r.p_d * r.gamma_e1 if r.n_correct else 0.0
            t2 = r.p_e * r.gamma_e2 if r.n_wrong else 0.0
            assert r.r_e == t1 + t2
            for v in (r.p_d, r.p_e, r.r_e, r.p_fallback):
                assert 0.0 <= v <= 1.0

    def test_none_policy(self, small_sweep):
        for r in (r for r in small_sweep if r.policy == "none"):
            assert r.gamma_e1 == 0.0 and r.gamma_e2 == 1.0 and r.r_e == r.p_e

    def test_oracle_policy(self, small_sweep):
        for r in (r for r in small_sweep if r.policy == "oracle"):
            assert r.r_e == 0.0

    def test_shared_detection(self, small_sweep):
        by_snr = {}
        for r in small_sweep:
            by_snr.setdefault(r.snr_db, set()).add(r.n_correct)
        assert all(len(v) == 1 for v in by_snr.values())

    def test_detection_improves(self, small_sweep):
        p_d = [r.p_d for r in small_sweep if r.policy == "none"]
        assert p_d[0] < p_d[2]

    def test_missing_artifact(self):
        with pytest.raises(ValueError, match="bayes"):
            error_rate_sweep(SweepSpec((10.0,), 10, policies=("bayes",)), Artifacts())

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SweepSpec((10.0,), 0)
        with pytest.raises(ValueError):
            SweepSpec((10.0,), 10, policies=("magic",))


class TestDeterminism:
    def test_workers(self):
        spec = SweepSpec((5.0, 15.0), 600, policies=("none", "bayes", "dnn"), seed=1,
                         chunk_size=100)
        a = reports_to_csv(error_rate_sweep(spec, some_artifacts(), workers=1), ["a"])
        b = reports_to_csv(error_rate_sweep(spec, some_artifacts(), workers=3), ["b"])
        assert a != b and csv_body(a) == csv_body(b)

    def test_prefix_stable(self):
        spec = SweepSpec((10.0,), 500, seed=2)
        a = simulate_point(spec, Artifacts(), 0)
        b = simulate_point(SweepSpec((10.0,), 250, seed=2), Artifacts(), 0)
        assert np.array_equal(a.detected[:250], b.detected)
        assert np.array_equal(a.mu[:250], b.mu)


class TestCsv:
    def test_format(self, small_sweep):
        text = reports_to_csv(small_sweep, ["irxfb sweep-error", "seed=3"])
        lines = text.splitlines()
        assert lines[:2] == ["# irxfb sweep-error", "# seed=3"]
        assert lines[2].split(",") == list(CSV_COLUMNS)
        assert len(lines) == 3 + len(small_sweep)
        row = lines[3].split(",")
        assert row[1] == "none" and row[CSV_COLUMNS.index("throughput")] == ""
        assert int(row[CSV_COLUMNS.index("n_blocks")]) == 300


class TestTrainingSet:
    def test_infinite_snr(self):
        ts = gen_training_set(snr_spec=float("inf"), count=2000, seed=0)
        assert not ts.labels.any()
        assert np.array_equal(ts.detected, ts.true_index)

    def test_chance_level(self):
        ts = gen_training_set(snr_spec=-40.0, count=100_000, seed=1)
        assert abs(np.mean(ts.labels == 0) - 0.25) <= 0.02

    def test_deterministic(self):
        a = gen_training_set(snr_spec=(0.0, 10.0), count=3000, seed=5)
        b = gen_training_set(snr_spec=(0.0, 10.0), count=3000, seed=5)
        assert a.mu.tobytes() == b.mu.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_mixture_uniform(self):
        ts = gen_training_set(snr_spec=(0.0, 4.0, 8.0), count=30_000, seed=2)
        counts = np.array([np.sum(ts.snr_db == s) for s in (0.0, 4.0, 8.0)])
        assert counts.sum() == 30_000 and np.all(np.abs(counts / 30_000 - 1 / 3) < 0.015)

    def test_rows_on_simplex(self):
        ts = gen_training_set(snr_spec=5.0, count=500, seed=3)
        np.testing.assert_allclose(ts.mu.sum(axis=1), 1.0, atol=1e-12)

    def test_count(self):
        with pytest.raises(ValueError):
            gen_training_set(count=0)


def one_block(link, seed):
    chan = draw_channel(link, (seed, 0))
    _, y = transmit(link, chan, (seed, 1))
    return chan, y


class TestRunBlock:
    def test_always_fallback_is_eirc(self):
        link = QPSK_16
        for seed in range(5):
            chan, y = one_block(link, seed)
            out = run_block(link, chan, y, "always_fallback", Artifacts())
            ref = eirc(chan, y)
            assert out["receiver"] == "eirc" and out["fall_back"]
            assert np.array_equal(out["equalized"].s_tilde, ref.s_tilde)

    def test_genie_uses_true_format(self):
        link = LinkConfig(snr_db=-5.0, inr_db=-5.0, interference_format=ModFormat.QAM64)
        for seed in range(10):
            chan, y = one_block(link, seed)
            out = run_block(link, chan, y, "genie", Artifacts())
            assert out["receiver"] == "slic" and not out["fall_back"]
            assert out["chosen_hypothesis"] == DetectorConfig().index_of(ModFormat.QAM64)

    def test_record(self):
        chan, y = one_block(QPSK_16, 0)
        out = run_block(QPSK_16, chan, y, "dnn", some_artifacts())
        assert out["true_format"] == ModFormat.QAM16
        assert out["mu"].shape == (4,)
        assert out["fall_back"] == (out["chosen_hypothesis"] == 4)

    def test_coded(self):
        link = replace(QPSK_16, block_len=294, snr_db=30.0, inr_db=30.0)
        msg = np.random.default_rng(0).integers(0, 2, fec.INFO_BITS)
        chan = draw_channel(link, (0, 0))
        _, y = transmit(link, chan, (0, 1), fec.encode(msg))
        assert run_block(link, chan, y, "genie", Artifacts(), info_bits=msg)["ok"]

    def test_needs_artifacts(self):
        chan, y = one_block(QPSK_16, 0)
        with pytest.raises(ValueError):
            run_block(QPSK_16, chan, y, "bayes", Artifacts())


class TestThroughput:
    def test_none_close_to_genie_at_20db(self):
        spec = SweepSpec((20.0,), 2000, QPSK_16, ("none", "genie"), seed=4, format_mix=None)
        none, genie = throughput_sweep(spec, Artifacts())
        assert (1 - none.throughput) <= (1 - genie.throughput) + 0.01

    def test_high_snr(self):
        spec = SweepSpec((60.0,), 200, QPSK_16,
                         ("always_fallback", "genie", "none", "bayes", "dnn"), seed=5,
                         format_mix=None)
        for r in throughput_sweep(spec, some_artifacts()):
            assert r.throughput == 1.0, r.policy

    def test_eirc_below_genie(self):
        spec = SweepSpec((0.0, 4.0, 8.0), 500, QPSK_16, ("always_fallback", "genie"), seed=6,
                         format_mix=None, inr_offset_db=10.0)
        reps = throughput_sweep(spec, Artifacts())
        for e, g in zip(reps[0::2], reps[1::2]):
            assert e.throughput <= g.throughput + e.ci_throughput + g.ci_throughput

    def test_crossing(self):
        assert crossing_db([0, 1, 2], [0.5, 0.8, 1.0]) == pytest.approx(1.5)
        assert crossing_db([0, 1], [0.95, 1.0]) == 0.0
        assert crossing_db([0, 1], [0.1, 0.2]) == float("inf")


class TestLossCurves:
    def test_trace_length_and_summary(self):
        traces, summary = loss_curves((0.0, 20.0), TrainConfig(total_samples=1600), restarts=1)
        assert set(traces) == {"snr_0", "snr_20", "mixture"}
        assert all(t.batch_loss.size == 100 for t in traces.values())
        assert summary["mean_per_snr"] == pytest.approx((summary["snr_0"] + summary["snr_20"]) / 2)
        assert summary["mixture_rel_gap"] >= 0
