"""Metric tests: cosine reconstruction loss, exhaustive kNN against a
second implementation, recall accounting, and normalized entropy."""

import numpy as np
import pytest

from sidekit import metrics as m
from oracles import naive_knn


def unit(rows, dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, dim))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


class TestCosineReconLoss:
    def test_identity_is_zero(self):
        x = unit(20, 8, 0)
        assert m.cosine_recon_loss(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_antipodal_is_two(self):
        x = unit(20, 8, 1)
        assert m.cosine_recon_loss(x, -x) == pytest.approx(2.0, abs=1e-6)

    def test_zero_norm_row_names_index(self):
        x = unit(5, 4, 2)
        bad = x.copy()
        bad[3] = 0.0
        with pytest.raises(m.MetricError, match="row 3"):
            m.cosine_recon_loss(x, bad)

    def test_scale_invariance(self):
        x = unit(10, 6, 3)
        assert m.cosine_recon_loss(x, 7.0 * x) == pytest.approx(0.0, abs=1e-6)

    def test_paper_style_delta_percent(self):
        # percentage-increase column: 100 * (fusion - iso) / iso
        assert m.delta_percent(0.2224, 0.1995) == pytest.approx(11.47, abs=0.01)
        assert m.delta_percent(0.2365, 0.2319) == pytest.approx(1.98, abs=0.01)
        assert m.delta_percent(0.2803, 0.2435) == pytest.approx(15.11, abs=0.01)


class TestKnnGroundTruth:
    def test_duplicate_ranked_first(self):
        x = unit(30, 8, 4)
        x[17] = x[3]  # duplicate of the query, different row
        gt = m.knn_ground_truth(x, np.array([3]), depth=5)
        assert gt[0, 0] == 17

    def test_near_parallel_wins(self):
        base = np.eye(4, dtype=np.float32)[:3]
        near = np.array([[0.99, 0.01, 0.0, 0.0]], dtype=np.float32)
        corpus = np.concatenate([base, near])
        gt = m.knn_ground_truth(corpus, np.array([0]), depth=1)
        assert gt[0, 0] == 3

    def test_matches_naive_double_loop(self):
        x = unit(120, 16, 5)
        queries = np.arange(0, 120, 7)
        gt = m.knn_ground_truth(x, queries, depth=10)
        expect = naive_knn(x, queries, 10)
        np.testing.assert_array_equal(gt, expect)

    def test_self_excluded(self):
        x = unit(40, 8, 6)
        queries = np.arange(40)
        gt = m.knn_ground_truth(x, queries, depth=5)
        for i in range(40):
            assert i not in gt[i]

    def test_depth_bound(self):
        x = unit(10, 4, 7)
        with pytest.raises(m.MetricError, match="depth"):
            m.knn_ground_truth(x, np.array([0]), depth=10)

    def test_permutation_equivariance(self):
        x = unit(50, 8, 8)
        gt = m.knn_ground_truth(x, np.array([5]), depth=8)
        rng = np.random.default_rng(9)
        perm = rng.permutation(50)
        inv = np.argsort(perm)
        gt_perm = m.knn_ground_truth(x[perm], np.array([inv[5]]), depth=8)
        np.testing.assert_array_equal(perm[gt_perm[0]], gt[0])

    def test_thread_cap_respected(self, monkeypatch):
        monkeypatch.setenv("SIDEKIT_THREADS", "2")
        assert m.worker_count() == 2
        x = unit(60, 8, 10)
        gt = m.knn_ground_truth(x, np.arange(60), depth=5)
        monkeypatch.setenv("SIDEKIT_THREADS", "1")
        gt_serial = m.knn_ground_truth(x, np.arange(60), depth=5)
        np.testing.assert_array_equal(gt, gt_serial)


class TestRecallAtK:
    def test_perfect_candidates(self):
        gt = np.arange(40).reshape(2, 20)
        cands = np.concatenate([gt, 1000 + np.arange(160).reshape(2, 80)],
                               axis=1)
        report = m.recall_at_k(gt, cands)
        assert report.recalls[0] == 1.0

    def test_disjoint_candidates(self):
        gt = np.arange(40).reshape(2, 20)
        cands = 1000 + np.arange(200).reshape(2, 100)
        report = m.recall_at_k(gt, cands)
        assert report.recalls == (0.0, 0.0, 0.0)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(11)
        gt = np.stack([rng.choice(500, size=20, replace=False)
                       for _ in range(30)])
        cands = np.stack([rng.permutation(500)[:100] for _ in range(30)])
        report = m.recall_at_k(gt, cands)
        assert report.recalls[0] <= report.recalls[1] <= report.recalls[2]

    def test_short_candidate_lists_rejected(self):
        gt = np.arange(20).reshape(1, 20)
        with pytest.raises(m.MetricError, match="too short"):
            m.recall_at_k(gt, np.arange(50).reshape(1, 50))

    def test_paper_reference_rows_are_monotone(self):
        # reported recall tables are valid instances of the report type
        for r20, r50, r100 in [(0.1467, 0.3326, 0.5088),
                               (0.2370, 0.4187, 0.5998),
                               (0.1703, 0.3418, 0.5213),
                               (0.1323, 0.2943, 0.4848)]:
            report = m.RecallReport((20, 50, 100), (r20, r50, r100),
                                    1000, 200_000, 20)
            assert report.recalls[0] <= report.recalls[1] <= report.recalls[2]

    def test_random_baseline(self):
        assert m.random_baseline_recall(20_000, 100) == pytest.approx(
            100 / 19_999)


class TestNormalizedEntropy:
    def test_prior_predictor_is_one(self):
        rng = np.random.default_rng(12)
        y = (rng.random(5000) < 0.23).astype(int)
        report = m.normalized_entropy(y, np.full(5000, y.mean()))
        assert report.ne == pytest.approx(1.0, abs=1e-9)

    def test_perfect_predictor_near_zero(self):
        rng = np.random.default_rng(13)
        y = (rng.random(1000) < 0.4).astype(int)
        report = m.normalized_entropy(y, y.astype(float))
        assert report.ne == pytest.approx(0.0, abs=1e-5)

    def test_hand_derived_case(self):
        # y=(1,0), p=(0.8,0.2): mean ll = ln 0.8, prior entropy = ln 0.5
        report = m.normalized_entropy([1, 0], [0.8, 0.2])
        assert report.ne == pytest.approx(np.log(0.8) / np.log(0.5), abs=1e-9)
        assert report.prior == 0.5
        assert report.n == 2

    def test_single_class_rejected(self):
        with pytest.raises(m.MetricError, match="single-class"):
            m.normalized_entropy([1, 1, 1], [0.5, 0.5, 0.5])

    def test_nonbinary_rejected(self):
        with pytest.raises(m.MetricError, match="binary"):
            m.normalized_entropy([0.5, 1.0], [0.5, 0.5])

    def test_extreme_predictions_clipped(self):
        report = m.normalized_entropy([1, 0], [1.0, 0.0])
        assert np.isfinite(report.ne)


class TestRendering:
    def test_recon_table_has_delta_column(self):
        rows = [
            {"setting": "1:1", "method": "dpca", "image": 0.1870, "text": 0.2319},
            {"setting": "1:1", "method": "fsq", "image": 0.1549, "text": 0.2435},
            {"setting": "fusion", "method": "dpca", "image": 0.1945, "text": 0.2365},
            {"setting": "fusion", "method": "fsq", "image": 0.21607, "text": 0.2803},
        ]
        table = m.format_recon_table(rows)
        assert "4.01%" in table
        assert "1.98%" in table
        assert "15.11%" in table

    def test_recall_table_renders(self):
        report = m.RecallReport((20, 50, 100), (0.1, 0.2, 0.3), 10, 100, 20)
        table = m.format_recall_table(
            [{"corpus": "x", "method": "fsq", "report": report}])
        assert "R@20" in table and "0.1000" in table

    def test_json_emission(self, capsys):
        report = m.normalized_entropy([1, 0], [0.8, 0.2])
        m.emit_report({"ne": report}, as_json=True)
        out = capsys.readouterr().out
        import json
        payload = json.loads(out)
        assert payload["ne"]["n"] == 2
