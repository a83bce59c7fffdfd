import json

import numpy as np
import pytest

from gapcast import (BenchmarkConfig, MaskingConfig, ProtocolError,
                     TrainingConfig, UsageError, benchmark,
                     make_synthetic_dataset, run_baseline)
from gapcast.benchmark import _pairwise_section, build_eval_windows
from gapcast.data import SeriesRecord, synthetic_mask


def quick_cfg(**kw):
    defaults = dict(in_len=12, horizon=4, stride=2, eval_stride=3, test_len=16,
                    enc_hidden=4, dec_hidden=4,
                    masking=MaskingConfig(q0=0.1, widths=(3, 4), seed=1),
                    train=TrainingConfig(epochs=3, batch_size=32, seed=0))
    defaults.update(kw)
    return BenchmarkConfig(**defaults)


@pytest.fixture(scope="module")
def dataset():
    return make_synthetic_dataset(n_series=2, length=90, seed=3)


class TestEvalWindows:
    def test_anchor_count_and_layout(self, dataset):
        cfg = quick_cfg()
        rec = dataset[0]
        masked = synthetic_mask(rec, cfg.masking)
        windows = build_eval_windows(masked, rec, cfg)
        # anchors step by eval_stride through the test tail
        expected = len(range(rec.length - cfg.test_len,
                             rec.length - cfg.horizon + 1, cfg.eval_stride))
        assert len(windows) == expected
        for ew in windows:
            assert ew.anchor >= rec.length - cfg.test_len
            assert ew.example.encoded_input.length == cfg.in_len
            assert ew.truth_y.shape == (cfg.horizon, 1)


class TestRunBaseline:
    def test_copy_previous_replicates_last_observed(self, dataset):
        cfg = quick_cfg()
        rec = dataset[0]
        masked = synthetic_mask(rec, cfg.masking)
        windows = build_eval_windows(masked, rec, cfg)
        out = run_baseline("copy_previous", [], windows, cfg,
                           {masked.series_id: masked})
        for ew in windows:
            preds = out["preds"][(ew.series_id, ew.anchor)]
            prior = np.flatnonzero(masked.observed[:ew.anchor])
            want = masked.y[prior[-1], 0]
            assert np.all(preds == want)

    def test_unknown_method_rejected(self, dataset):
        cfg = quick_cfg()
        with pytest.raises(UsageError):
            run_baseline("nope", [], [], cfg, {})


class TestBenchmark:
    def test_report_structure_and_tie_rules(self, dataset):
        cfg = quick_cfg()
        report = benchmark(["degd", "copy_previous"], dataset, cfg)
        assert report.methods == ["degd", "copy_previous"]
        assert set(report.series_ids) == {r.series_id for r in dataset}
        for sid in report.series_ids:
            for m in report.methods:
                cell = report.per_series[sid][m]
                assert cell["n_windows"] > 0
        assert len(report.pairwise) == 1
        pw = report.pairwise[0]
        assert pw["a_better_pct"] + pw["b_better_pct"] == pytest.approx(100.0)
        assert pw["incumbent"] == "copy_previous"  # the baseline takes ties
        parsed = json.loads(report.to_json())
        assert parsed["tie_rule"]
        text = report.to_text()
        assert "pairwise" in text

    def test_single_method_has_no_pairwise_section(self, dataset):
        cfg = quick_cfg()
        report = benchmark(["copy_previous"], dataset, cfg)
        assert report.pairwise == []
        assert set(report.aggregates) == {"copy_previous"}

    def test_degenerate_single_series_collapses_aggregates(self, dataset):
        cfg = quick_cfg()
        report = benchmark(["copy_previous"], dataset[:1], cfg)
        agg = report.aggregates["copy_previous"]["mase"]
        assert agg["max"] == agg["avg"] == agg["min"]

    def test_mismatched_seeds_rejected(self, dataset):
        cfg = quick_cfg()
        with pytest.raises(ProtocolError):
            benchmark(["degd", "bedxm"], dataset, cfg,
                      train_overrides={"bedxm": TrainingConfig(epochs=3, seed=99)})

    def test_deterministic_reports(self, dataset):
        cfg = quick_cfg()
        r1 = benchmark(["bedxm", "copy_previous"], dataset, cfg)
        r2 = benchmark(["bedxm", "copy_previous"], dataset, cfg)
        assert r1.to_json() == r2.to_json()

    def test_self_comparison_splits_fifty_fifty(self, dataset):
        cfg = quick_cfg()
        report = benchmark(["copy_previous", "copy_previous"], dataset, cfg)
        pw = report.pairwise[0]
        assert pw["a_better_pct"] == 50.0 and pw["b_better_pct"] == 50.0

    def test_csv_export_parses(self, dataset):
        cfg = quick_cfg()
        report = benchmark(["copy_previous"], dataset, cfg)
        lines = report.per_series_csv().strip().splitlines()
        assert lines[0].startswith("series_id,method")
        assert len(lines) == 1 + len(report.series_ids)

    def test_background_mode_runs(self, dataset):
        cfg = quick_cfg(mode="background")
        report = benchmark(["bedxm", "copy_previous"], dataset, cfg)
        for sid in report.series_ids:
            assert np.isfinite(report.per_series[sid]["bedxm"]["mase"])


class TestPairwiseFixture:
    def build(self, mases_a, mases_b):
        sids = [f"s{i}" for i in range(len(mases_a))]
        per_series = {sid: {"a": {"mase": ma, "mape": 1.0},
                            "b": {"mase": mb, "mape": 1.0}}
                      for sid, ma, mb in zip(sids, mases_a, mases_b)}
        window_metrics = {sid: {"a": {"mase": [per_series[sid]["a"]["mase"]] * 3,
                                      "mape": []},
                                "b": {"mase": [per_series[sid]["b"]["mase"]] * 3,
                                      "mape": []}}
                          for sid in sids}
        return _pairwise_section(["a", "b"], sids, per_series, window_metrics)

    def test_hand_assigned_percentages(self):
        # a wins on 3 of 4; the tie goes to b (later-listed, so incumbent)
        out = self.build([0.2, 0.3, 0.4, 0.5], [0.9, 0.8, 0.1, 0.5])
        pw = out[0]
        assert pw["a_better_pct"] == 50.0  # 2 strict wins of 4
        assert pw["b_better_pct"] == 50.0  # 1 strict win + 1 tie
        assert pw["n_ties"] == 1
        assert pw["cond_a_better"]["n"] == 2
        assert pw["cond_a_better"]["a_avg"] == pytest.approx(0.25)
        assert pw["cond_a_better"]["b_avg"] == pytest.approx(0.85)
        assert pw["cond_a_better"]["diff"] == pytest.approx(0.6)
        assert pw["cond_b_better"]["n"] == 1

    def test_welch_reported_per_series(self):
        out = self.build([0.2, 0.3], [0.9, 0.8])
        pw = out[0]
        assert set(pw["welch_per_series"]) == {"s0", "s1"}
