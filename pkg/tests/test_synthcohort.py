import numpy as np
import pytest

from connectoflow import synthcohort as sc
from connectoflow.errors import ConfigError
from connectoflow.graphbuild import pearson_matrix


def small_config(**kw):
    base = dict(
        n_stable=12,
        n_progressive=8,
        n_nodes=21,
        n_samples=16,
        max_visits=4,
        horizon_months=60.0,
        effect_size=0.3,
        seed=5,
    )
    base.update(kw)
    return sc.SynthConfig(**base)


class TestGenerate:
    def test_sizes_and_labels(self):
        subjects, truth = sc.generate(small_config())
        assert len(subjects) == 20
        assert sum(s.label for s in subjects) == 8
        for s in subjects:
            assert 1 <= s.n_visits <= 4
            assert s.visit_months == sorted(s.visit_months)
            for sig in s.signals:
                assert sig.shape == (21, 16)
                assert np.all(np.isfinite(sig))

    def test_deterministic_bit_identical(self):
        a, _ = sc.generate(small_config())
        b, _ = sc.generate(small_config())
        for ra, rb in zip(a, b):
            assert ra.visit_months == rb.visit_months
            for sa, sb in zip(ra.signals, rb.signals):
                np.testing.assert_array_equal(sa, sb)

    def test_planted_edge_correlation_shift(self):
        cfg = sc.SynthConfig(
            n_stable=40, n_progressive=40, n_nodes=30, n_samples=64,
            max_visits=4, horizon_months=60.0, effect_size=0.4, seed=11,
        )
        subjects, truth = sc.generate(cfg)
        by_label = {0: [], 1: []}
        for rec in subjects:
            last = rec.signals[-1]
            corr = pearson_matrix(last)
            vals = [corr[i, j] for i, j in truth.planted_edges]
            by_label[rec.label].append(np.mean(vals))
        gap = np.mean(by_label[1]) - np.mean(by_label[0])
        # progressive last visits average ~60% of horizon -> shift well above delta/2
        assert gap >= cfg.effect_size / 2 * 0.55

    def test_null_cohort_classes_exchangeable_in_moments(self):
        cfg = small_config(effect_size=0.0, n_stable=30, n_progressive=30)
        subjects, truth = sc.generate(cfg)
        means = {0: [], 1: []}
        for rec in subjects:
            means[rec.label].append(np.mean([s.mean() for s in rec.signals]))
        assert abs(np.mean(means[0]) - np.mean(means[1])) < 0.25

    def test_stable_law_time_stationary(self):
        cfg = sc.SynthConfig(
            n_stable=200, n_progressive=0, n_nodes=14, n_samples=32,
            max_visits=6, horizon_months=100.0, effect_size=0.3, seed=3,
        )
        subjects, _ = sc.generate(cfg)
        ts, cs = [], []
        for rec in subjects:
            for t, sig in zip(rec.visit_months, rec.signals):
                corr = pearson_matrix(sig)
                ts.append(t)
                cs.append(corr[0, 1])
        ts = np.asarray(ts)
        cs = np.asarray(cs)
        slope = np.polyfit(ts, cs, 1)[0]
        resid = cs - np.polyval(np.polyfit(ts, cs, 1), ts)
        se = resid.std() / (ts.std() * np.sqrt(len(ts)))
        assert abs(slope) < 3 * se + 1e-4

    def test_infeasible_delta_rejected(self):
        with pytest.raises(ConfigError):
            sc.generate(small_config(effect_size=0.9))

    def test_default_planted_sets_valid(self):
        cfg = sc.SynthConfig()
        rois = cfg.resolved_rois()
        edges = cfg.resolved_edges()
        assert len(rois) == 10 and len(set(rois)) == 10
        assert len(edges) == 12 and len(set(edges)) == 12
        roi_set = set(rois)
        for i, j in edges:
            assert i < j
            assert i not in roi_set and j not in roi_set
            assert sc.network_of(i, 100) != sc.network_of(j, 100)


class TestDropObservations:
    def test_rate_zero_noop(self):
        subjects, _ = sc.generate(small_config())
        dropped = sc.drop_observations(subjects, 0.0, seed=1)
        for a, b in zip(subjects, dropped):
            for ma, mb in zip(a.masks, b.masks):
                np.testing.assert_array_equal(ma, mb)

    def test_rate_half_masks_about_half(self):
        subjects, _ = sc.generate(small_config(n_samples=32))
        dropped = sc.drop_observations(subjects, 0.5, seed=2)
        rates = [m.mean() for rec in dropped for m in rec.masks]
        assert 0.4 < np.mean(rates) < 0.6

    def test_floor_of_three_survivors(self):
        subjects, _ = sc.generate(small_config(n_samples=4))
        dropped = sc.drop_observations(subjects, 0.9, seed=3)
        for rec in dropped:
            for m in rec.masks:
                assert m.sum() >= 3

    def test_rate_out_of_range(self):
        subjects, _ = sc.generate(small_config())
        with pytest.raises(ConfigError):
            sc.drop_observations(subjects, 0.95, seed=1)

    def test_signals_unchanged(self):
        subjects, _ = sc.generate(small_config())
        dropped = sc.drop_observations(subjects, 0.5, seed=4)
        for a, b in zip(subjects, dropped):
            for sa, sb in zip(a.signals, b.signals):
                np.testing.assert_array_equal(sa, sb)


class TestScoreRecovery:
    def test_perfect_recovery(self):
        _, truth = sc.generate(small_config())
        scores = np.zeros(21)
        scores[list(truth.planted_rois)] = 1.0
        sig = set(truth.planted_edges)
        out = sc.score_recovery(scores, sig, truth)
        assert out["roi_precision_at_k"] == 1.0
        assert out["edge_recall"] == 1.0

    def test_empty_significant_set(self):
        _, truth = sc.generate(small_config())
        out = sc.score_recovery(np.zeros(21), set(), truth)
        assert out["edge_recall"] == 0.0

    def test_random_report_low_precision(self):
        cfg = sc.SynthConfig(n_stable=2, n_progressive=2, n_nodes=100, n_samples=8,
                             max_visits=2, seed=1)
        _, truth = sc.generate(cfg)
        hits = []
        from connectoflow.diffcore import RandomStream
        rng = RandomStream(0)
        for _ in range(200):
            scores = rng.uniform(100)
            out = sc.score_recovery(scores, set(), truth)
            hits.append(out["roi_precision_at_k"])
        # hypergeometric expectation: |S|/N = 0.1
        assert abs(np.mean(hits) - 0.1) < 0.05


class TestTruncateVisits:
    def test_truncation_lengths(self):
        subjects, _ = sc.generate(small_config())
        cut = sc.truncate_visits(subjects, 1)
        for rec in cut:
            assert rec.n_visits == 1
            assert len(rec.signals) == 1

    def test_invalid_truncation(self):
        with pytest.raises(ConfigError):
            sc.truncate_visits([], 0)


class TestCohortIo:
    def test_roundtrip(self, tmp_path):
        subjects, truth = sc.generate(small_config())
        dropped = sc.drop_observations(subjects, 0.3, seed=9)
        sc.save_cohort(dropped, truth, tmp_path)
        back, back_truth = sc.load_cohort(tmp_path)
        assert len(back) == len(dropped)
        for a, b in zip(dropped, back):
            assert a.subject_id == b.subject_id
            assert a.label == b.label
            assert a.visit_months == b.visit_months
            for sa, sb in zip(a.signals, b.signals):
                np.testing.assert_array_equal(sa, sb)
            for ma, mb in zip(a.masks, b.masks):
                np.testing.assert_array_equal(ma, mb)
        assert back_truth is not None
        assert back_truth.planted_rois == truth.planted_rois
        assert back_truth.planted_edges == truth.planted_edges
        assert back_truth.config == truth.config
