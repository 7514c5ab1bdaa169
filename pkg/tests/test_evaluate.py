import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sora.alignment import AlignmentProjection
from sora.anchors import OrganAnchorPair, TextHead
from sora.core import load_tensor
from sora.corpus import SymptomRecord
from sora.errors import ContractError, DegenerateVectorError, DimensionError
from sora.evaluate import (average_precision, build_gallery, closest_farthest, export_probability_overlay,
                           gallery_scores, heatmap_csv, heatmap_pgm, infer_organ_scores, make_results,
                           mean_average_precision, metrics_report, metrics_to_json, organ_correlation_matrix,
                           out_of_domain_features, positive_labels, probability_overlay, rank_k_accuracy,
                           rank_organs)
from sora.volumes import OrganVolume


# -- brute-force oracles ------------------------------------------------------

def _rank_oracle(scores):
    return sorted(range(len(scores)), key=lambda o: (-scores[o], o))


def _rank_k_oracle(S, primary, k):
    return sum(primary[q] in _rank_oracle(S[q])[:k] for q in range(len(S))) / len(S)


def _ap_pairwise(scores, relevant):
    """AP without sorting: the rank of each item is 1 + #items strictly ahead of it."""
    n = len(scores)
    ahead = lambda i, j: scores[j] > scores[i] or (scores[j] == scores[i] and j < i)   # noqa: E731
    pos = [i for i in range(n) if relevant[i]]
    total = 0.0
    for i in pos:
        r = 1 + sum(ahead(i, j) for j in range(n))
        hits = 1 + sum(ahead(i, j) for j in pos)
        total += hits / r
    return total / len(pos)


def _map_oracle(S, positives):
    n_q, n = S.shape
    aps = []
    for c in range(n):
        rel = [c in positives[q] for q in range(n_q)]
        if any(rel):
            aps.append(_ap_pairwise(S[:, c], rel))
    return np.mean(aps)


class TestRanking:
    def test_ties_by_organ_id(self):
        assert rank_organs([0.5, 0.9, 0.5, 0.9]).tolist() == [1, 3, 0, 2]

    def test_perfect_ranking(self):
        S = np.eye(5) + 0.1
        res = make_results(S, np.arange(5))
        assert all(rank_k_accuracy(res, k) == 1.0 for k in range(1, 6))

    def test_k_equals_n(self):
        S = np.random.default_rng(0).uniform(size=(20, 7))
        assert rank_k_accuracy(make_results(S, np.random.default_rng(1).integers(0, 7, 20)), 7) == 1.0

    def test_sort_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            S = np.round(rng.uniform(size=(15, 7)), 1)   # rounding forces ties
            primary = rng.integers(0, 7, 15)
            res = make_results(S, primary)
            for q, r in enumerate(res):
                assert r.ranking.tolist() == _rank_oracle(S[q])
            for k in range(1, 8):
                assert rank_k_accuracy(res, k) == _rank_k_oracle(S, primary, k)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        res = make_results(rng.uniform(size=(12, 6)), rng.integers(0, 6, 12))
        acc = [rank_k_accuracy(res, k) for k in range(1, 7)]
        assert all(a <= b for a, b in zip(acc, acc[1:]))

    @pytest.mark.parametrize("k", [0, 8])
    def test_k_out_of_range(self, k):
        with pytest.raises(ContractError):
            rank_k_accuracy(make_results(np.ones((2, 7)), [0, 1]), k)


class TestAveragePrecision:
    def test_positives_first(self):
        assert average_precision([1, 1, 1, 0, 0]) == 1.0

    @pytest.mark.parametrize("r", [1, 2, 5, 9])
    def test_single_positive(self, r):
        rel = np.zeros(10, dtype=bool)
        rel[r - 1] = True
        assert average_precision(rel) == pytest.approx(1.0 / r, abs=1e-15)

    def test_no_positive(self):
        with pytest.raises(ContractError):
            average_precision([0, 0])

    def test_map_all_positives_above_negatives(self):
        S = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]])
        assert mean_average_precision(make_results(S, [0, 0, 1])) == 1.0

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            S = np.round(rng.uniform(size=(9, 4)), 1)
            primary = rng.integers(0, 4, 9)
            extra = [set(rng.choice(4, rng.integers(0, 2), replace=False).tolist()) for _ in range(9)]
            res = make_results(S, primary, extra)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = mean_average_precision(res)
            assert abs(got - _map_oracle(S, [r.positives for r in res])) < 1e-12

    def test_query_wise_variant(self):
        S = np.array([[0.2, 0.9, 0.1], [0.8, 0.1, 0.3]])
        res = make_results(S, [0, 0])
        # query 0 ranks organ 0 second, query 1 first
        assert mean_average_precision(res, per="query") == pytest.approx(0.75)

    def test_missing_class_excluded_with_warning(self):
        S = np.random.default_rng(4).uniform(size=(4, 3))
        with pytest.warns(UserWarning, match=r"\[2\]"):
            mean_average_precision(make_results(S, [0, 1, 0, 1]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(0.01, 1, size=(10, 4))
        primary = np.arange(10) % 4
        base = mean_average_precision(make_results(S, primary))
        for f in (np.log, lambda x: x ** 3, lambda x: 2 * x + 5):
            assert mean_average_precision(make_results(f(S), primary)) == pytest.approx(base, abs=1e-12)

    def test_positive_labels_threshold(self):
        rec = SymptomRecord("a", 1, "", np.ones(2), planted_weights=np.array([0.5, 1.0, 0.49]))
        assert positive_labels(rec) == {0, 1}

    def test_report_json(self):
        res = make_results(np.eye(3), [0, 1, 2])
        report = metrics_report(res, "abc")
        assert set(report) == {"rank1", "rank2", "rank3", "map", "n_queries", "config_hash"}
        assert json.loads(metrics_to_json(report)) == report


def _records(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return [SymptomRecord(f"r{i:03d}", 0, "", rng.normal(size=d)) for i in range(n)]


class TestClosestFarthest:
    def test_anchor_in_corpus(self):
        recs = _records(10)
        near, far = closest_farthest(recs[4].embedding, recs, 1)
        assert near[0].id == "r004"
        assert far[0].id != "r004"

    def test_full_size_consistent(self):
        recs = _records(12)
        near, far = closest_farthest(np.zeros(4), recs, 12)
        assert [r.id for r in near] == [r.id for r in far][::-1]

    def test_sort_oracle(self):
        recs = _records(100, seed=1)
        a = np.random.default_rng(2).normal(size=4)
        d = {r.id: float(np.sqrt(((r.embedding - a) ** 2).sum())) for r in recs}
        order = sorted(d, key=lambda i: (d[i], i))
        near, far = closest_farthest(a, recs, 7)
        assert [r.id for r in near] == order[:7]
        assert [r.id for r in far] == sorted(d, key=lambda i: (-d[i], i))[:7]

    def test_ties_by_id(self):
        recs = [SymptomRecord(i, 0, "", np.array([1.0, 0.0])) for i in ("c", "a", "b")]
        near, _ = closest_farthest(np.zeros(2), recs, 3)
        assert [r.id for r in near] == ["a", "b", "c"]

    def test_clamp(self):
        with pytest.warns(UserWarning):
            near, far = closest_farthest(np.zeros(4), _records(3), 5)
        assert len(near) == len(far) == 3


class TestCorrelation:
    def test_duplicate_columns(self):
        x = np.random.default_rng(5).uniform(size=50)
        corr = organ_correlation_matrix(np.stack([x, x, 1 - x], axis=1))
        assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert corr[0, 2] == pytest.approx(-1.0, abs=1e-12)
        np.testing.assert_array_equal(np.diag(corr), 1.0)

    def test_independent_columns(self):
        y = np.random.default_rng(6).uniform(size=(1000, 5))
        corr = organ_correlation_matrix(y)
        assert np.abs(corr - np.eye(5)).max() < 0.15

    def test_formula_oracle(self):
        y = np.random.default_rng(7).uniform(size=(30, 4))
        n = len(y)
        ref = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                mi, mj = sum(y[:, i]) / n, sum(y[:, j]) / n
                cov = sum((y[k, i] - mi) * (y[k, j] - mj) for k in range(n)) / (n - 1)
                vi = sum((y[k, i] - mi) ** 2 for k in range(n)) / (n - 1)
                vj = sum((y[k, j] - mj) ** 2 for k in range(n)) / (n - 1)
                ref[i, j] = cov / np.sqrt(vi * vj)
        corr = organ_correlation_matrix(y)
        np.testing.assert_allclose(corr, ref, atol=1e-10)
        np.testing.assert_array_equal(corr, corr.T)

    def test_zero_variance(self):
        y = np.random.default_rng(8).uniform(size=(10, 3))
        y[:, 1] = 0.4
        with pytest.warns(UserWarning):
            corr = organ_correlation_matrix(y)
        assert corr[0, 1] == 0.0 and corr[1, 1] == 1.0

    def test_renders(self):
        m = np.array([[1.0, -1.0], [-1.0, 1.0]])
        assert heatmap_csv(m).splitlines() == ["1.0,-1.0", "-1.0,1.0"]
        pgm = heatmap_pgm(m, cell=2)
        header, body = pgm[:11], pgm[11:]
        assert header == b"P5\n4 4\n255\n" and len(body) == 16
        assert body[0] == 255 and body[2] == 0


def _vol(organ, mask):
    mask = np.asarray(mask, dtype=float)
    return OrganVolume(organ, mask * 0.5, mask)


class TestOverlay:
    def test_zero_scores(self):
        masks = [np.ones((2, 3, 3)), np.zeros((2, 3, 3))]
        assert np.all(probability_overlay(masks, [0.0, 0.0]) == 0)

    def test_single_organ_unit_score(self):
        m = (np.random.default_rng(9).uniform(size=(3, 4, 4)) > 0.5).astype(float)
        np.testing.assert_array_equal(probability_overlay([m], [1.0]), m)

    def test_loop_oracle(self, tmp_path):
        rng = np.random.default_rng(10)
        masks = [(rng.uniform(size=(2, 4, 5)) > 0.6).astype(float) for _ in range(3)]
        scores = rng.uniform(size=3)
        ref = np.zeros((2, 4, 5))
        for z in range(2):
            for y in range(4):
                for x in range(5):
                    vals = [scores[i] for i in range(3) if masks[i][z, y, x] > 0]
                    ref[z, y, x] = max(vals) if vals else 0.0
        out = export_probability_overlay([_vol(i, m) for i, m in enumerate(masks)], scores, tmp_path / "o.ten")
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(load_tensor(tmp_path / "o.ten"), ref)
        side = json.loads((tmp_path / "o.ten.json").read_text())
        assert side["organ_ids"] == [0, 1, 2] and side["scores"] == scores.tolist()

    def test_shape_disagreement(self):
        with pytest.raises(DimensionError):
            probability_overlay([np.ones((1, 2, 2)), np.ones((1, 2, 3))], [0.1, 0.2])


@pytest.fixture(scope="module")
def scorer():
    rng = np.random.default_rng(11)
    head = TextHead(6, 12, 5, 3, rng)
    proj = AlignmentProjection(4, 5, rng)
    gallery = build_gallery(rng.normal(size=(2, 3, 4, 4)))
    return head, proj, gallery


class TestScoring:
    def test_gallery_layout(self):
        x = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
        g = build_gallery(x)
        assert g.shape == (3, 8, 5)
        np.testing.assert_array_equal(g[1, 4:], x[1, 1])

    def test_gallery_score_oracle(self):
        rng = np.random.default_rng(12)
        q, g = rng.normal(size=(2, 4)), rng.normal(size=(3, 5, 4))
        ref = np.array([[(np.mean([qq @ r / np.linalg.norm(qq) / np.linalg.norm(r) for r in g[n]]) + 1) / 2
                         for n in range(3)] for qq in q])
        np.testing.assert_allclose(gallery_scores(q, g), ref, atol=1e-12)

    def test_identical_queries(self, scorer):
        e = np.random.default_rng(13).normal(size=6)
        a = infer_organ_scores(e, *scorer)
        b = infer_organ_scores(e.copy(), *scorer)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (3,) and np.all((a >= 0) & (a <= 1))

    def test_scale_invariance_of_projected_query(self, scorer):
        head, proj, gallery = scorer
        q = np.random.default_rng(14).normal(size=(1, 4))
        np.testing.assert_allclose(gallery_scores(q * 17.0, gallery), gallery_scores(q, gallery), atol=1e-12)

    def test_zero_query(self, scorer):
        with pytest.raises(DegenerateVectorError):
            infer_organ_scores(np.zeros(6), *scorer)

    def test_missing_organ(self, scorer):
        with pytest.raises(ContractError):
            infer_organ_scores(np.ones(6), *scorer, n_organs=4)

    def test_anchor_variant(self, scorer):
        rng = np.random.default_rng(15)
        anchors = [OrganAnchorPair(i, rng.normal(size=6), rng.normal(size=6)) for i in range(3)]
        a = infer_organ_scores(np.ones(6), *scorer, anchors=anchors, use_anchors=True)
        b = infer_organ_scores(-np.ones(6), *scorer, anchors=anchors, use_anchors=True)
        assert a.shape == (3,) and a.tobytes() == b.tobytes()
        with pytest.raises(ContractError):
            infer_organ_scores(np.ones(6), *scorer, anchors=anchors[:2], use_anchors=True)

    def test_out_of_domain_features_orthogonal(self):
        rng = np.random.default_rng(16)
        feats = rng.normal(size=(30, 8)) + 3 * np.repeat(np.eye(3, 8), 10, axis=0)
        organs = np.repeat(np.arange(3), 10)
        ood = out_of_domain_features(feats, organs, 5, np.random.default_rng(0))
        centroids = np.stack([feats[organs == i].mean(axis=0) for i in range(3)])
        np.testing.assert_allclose(ood @ centroids.T, 0.0, atol=1e-10)
        np.testing.assert_allclose(np.linalg.norm(ood, axis=1), np.linalg.norm(feats, axis=1).mean())
