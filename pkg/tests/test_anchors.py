import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sora.anchors import (AnchorTrainConfig, OrganAnchorPair, TextHead, TextHeadConfig, anchor_loss,
                          anchor_similarities, anchors_from_json, anchors_to_json, embed_text, hard_labels,
                          margin_fn, read_soft_labels_csv, separation_rates, soft_label, soft_labels, text_loss,
                          train_anchors, train_text_head, write_soft_labels_csv)
from sora.core import Tensor, finite_diff_check, no_grad
from sora.corpus import CorpusConfig, embedding_matrix, generate_synthetic_corpus, organ_ids
from sora.errors import ConfigError, ContractError, DegenerateVectorError, DimensionError
from sora.evaluate import organ_correlation_matrix


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _at_angle(deg):
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


class TestSimilarities:
    def test_embedding_equals_positive(self):
        v = _unit([0.3, -1.2, 2.0])
        s_plus, _ = anchor_similarities(OrganAnchorPair(0, v, _unit([1, 0, 0])), v)
        assert s_plus == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_to_both(self):
        pair = OrganAnchorPair(0, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        assert anchor_similarities(pair, np.array([0, 0, 2.0])) == (0.0, 0.0)

    def test_formula_oracle(self):
        rng = np.random.default_rng(0)
        vp, vm, e = rng.normal(size=(3, 16))
        s_plus, s_minus = anchor_similarities(OrganAnchorPair(0, vp, vm), e)
        assert s_plus == pytest.approx(vp @ e / (np.linalg.norm(vp) * np.linalg.norm(e)), abs=1e-12)
        assert s_minus == pytest.approx(vm @ e / (np.linalg.norm(vm) * np.linalg.norm(e)), abs=1e-12)

    def test_degenerate_embedding(self):
        with pytest.raises(DegenerateVectorError):
            anchor_similarities(OrganAnchorPair(0, np.ones(3), np.ones(3)), np.zeros(3))


class TestMarginFn:
    @pytest.mark.parametrize("s_plus,s_minus,expected", [(0.9, 0.1, 0.0), (0.5, 0.5, 0.6), (0.8, 0.2, 0.0)])
    def test_examples(self, s_plus, s_minus, expected):
        assert margin_fn(s_plus, s_minus, 0.8) == expected

    def test_monotone_on_grid(self):
        grid = np.linspace(-1, 1, 41)
        vals = np.array([[margin_fn(p, q, 0.8) for q in grid] for p in grid])
        assert np.all(np.diff(vals, axis=0) <= 0)   # non-increasing in s_plus
        assert np.all(np.diff(vals, axis=1) >= 0)   # non-decreasing in s_minus
        assert np.all(vals >= 0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.51, 0.99))
    def test_zero_iff_both_thresholds_met(self, p, q, m):
        dp, dq, dm = (Decimal(repr(v)) for v in (p, q, m))
        assert (margin_fn(p, q, m) == 0.0) == (dp >= dm and dq + dm <= 1)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_agrees_with_float_form(self, p, q):
        assert margin_fn(p, q, 0.8) == pytest.approx(max(0.0, 0.8 - p) + max(0.0, q - 0.2), abs=1e-15)

    def test_margin_range(self):
        with pytest.raises(ConfigError):
            margin_fn(0.5, 0.5, 0.4)


class TestAnchorLoss:
    def test_single_organ_saturated(self):
        e = np.array([[1.0, 0.0], [0.6, 0.8]])
        vp, vm = Tensor(e[:1]), Tensor(-e[:1])
        # Only the first record has s+ = 1 / s- = -1; use just that record.
        for form in ("separate", "swapped"):
            assert anchor_loss(vp, vm, e[:1], [0], 0.8, form).item() == 0.0

    def test_two_organs_saturated_separate_form(self):
        e = np.eye(2)
        loss = anchor_loss(Tensor(e), Tensor(-e), e, [0, 1], 0.8, "separate")
        assert loss.item() == 0.0

    def test_reduces_to_margin_fn(self):
        emb = np.array([[1.0, 0.0]])
        loss = anchor_loss(Tensor(_at_angle(60)[None]), Tensor(_at_angle(-60)[None]), emb, [0], 0.8)
        assert loss.item() == pytest.approx(0.6, abs=1e-12)

    def test_negative_forms_differ_as_documented(self):
        # One positive for organ 0 and one record of organ 1 seen by organ 0's anchors.
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        vp = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        vm = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))   # organ 0's negative anchor points at organ 1
        sep = anchor_loss(vp, vm, emb, [0, 1], 0.8, "separate").item()
        swp = anchor_loss(vp, vm, emb, [0, 1], 0.8, "swapped").item()
        # separate: organ 1's record has s_0^- = 1 -> 0.8 penalty, same for organ 0's record under organ 1.
        assert sep == pytest.approx(1.6, abs=1e-12)
        # swapped: M(s^- = 1, s^+ = 0) = 0 for both negatives.
        assert swp == pytest.approx(0.0, abs=1e-12)

    def test_missing_organ_skips_terms(self):
        e = np.eye(3)
        loss = anchor_loss(Tensor(e), Tensor(-e), e[:1], [0], 0.8).item()
        assert loss == 0.0

    @pytest.mark.parametrize("form", ["separate", "swapped"])
    def test_gradient_micro_corpus(self, form):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(4, 5))
        labels = [0, 0, 1, 1]
        vm = rng.normal(size=(2, 5))
        for _ in range(10):
            vp = rng.normal(size=(2, 5))
            assert finite_diff_check(lambda x: anchor_loss(x, Tensor(vm), emb, labels, 0.8, form), vp) < 1e-4
            assert finite_diff_check(lambda x: anchor_loss(Tensor(vp), x, emb, labels, 0.8, form), vm) < 1e-4

    def test_bad_inputs(self):
        with pytest.raises(ContractError):
            anchor_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), np.eye(2), [0, 2], 0.8)
        with pytest.raises(DimensionError):
            anchor_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), np.ones((2, 3)), [0, 1], 0.8)
        with pytest.raises(ConfigError):
            anchor_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), np.eye(2), [0, 1], 0.8, "other")


@pytest.fixture(scope="module")
def noiseless():
    records = generate_synthetic_corpus(CorpusConfig(per_organ=30, mixture_alpha=0.0, noise_sigma=0.0))
    result = train_anchors(records, AnchorTrainConfig(epochs=150))
    return records, result


class TestTrainAnchors:
    def test_noiseless_converges(self, noiseless):
        records, result = noiseless
        final = anchor_loss(Tensor(np.stack([a.v_plus for a in result.anchors])),
                            Tensor(np.stack([a.v_minus for a in result.anchors])),
                            embedding_matrix(records), organ_ids(records), 0.8).item()
        assert final < 1e-3

    def test_noiseless_separation(self, noiseless):
        records, result = noiseless
        pos, neg = separation_rates(result.anchors, records, 0.8)
        assert pos >= 0.99 and neg >= 0.99

    def test_deterministic(self):
        recs = generate_synthetic_corpus(CorpusConfig(per_organ=10))
        a = train_anchors(recs, AnchorTrainConfig(epochs=3))
        b = train_anchors(recs, AnchorTrainConfig(epochs=3))
        for x, y in zip(a.anchors, b.anchors):
            assert x.v_plus.tobytes() == y.v_plus.tobytes() and x.v_minus.tobytes() == y.v_minus.tobytes()
        assert a.loss_trace == b.loss_trace

    def test_anchors_non_degenerate(self, noiseless):
        for a in noiseless[1].anchors:
            assert np.linalg.norm(a.v_plus) > 1e-9 and np.linalg.norm(a.v_minus) > 1e-9

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AnchorTrainConfig(margin=0.5).validate()
        with pytest.raises(ConfigError):
            AnchorTrainConfig(negative_term="mirror").validate()


class TestSoftLabels:
    def test_closed_forms(self):
        v = _unit([1.0, 2.0, -0.5])
        w = _unit([2.0, -1.0, 0.0])          # orthogonal to v
        anchors = [OrganAnchorPair(0, v, v)]
        assert soft_label(anchors, v)[0] == 1.0
        assert soft_label(anchors, w)[0] == 0.5
        assert soft_label(anchors, -v)[0] == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_range_and_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        anchors = [OrganAnchorPair(i, rng.normal(size=8), rng.normal(size=8)) for i in range(4)]
        e = rng.normal(size=8)
        y = soft_label(anchors, e)
        assert np.all((y >= 0) & (y <= 1))
        np.testing.assert_allclose(soft_label(anchors, c * e), y, atol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        anchors = [OrganAnchorPair(i, rng.normal(size=6), rng.normal(size=6)) for i in range(3)]
        E = rng.normal(size=(5, 6))
        np.testing.assert_allclose(soft_labels(anchors, E), np.stack([soft_label(anchors, e) for e in E]), atol=1e-15)

    def test_hard_labels_one_hot(self):
        np.testing.assert_array_equal(hard_labels([2, 0], 3), [[0, 0, 1], [1, 0, 0]])

    def test_overlapping_pair_correlates_more(self):
        cfg = CorpusConfig(per_organ=60, overlap_pairs=[(0, 1)])
        records = generate_synthetic_corpus(cfg)
        anchors = train_anchors(records, AnchorTrainConfig(epochs=30)).anchors
        corr = organ_correlation_matrix(soft_labels(anchors, embedding_matrix(records)))
        assert corr[0, 1] > corr[2, 3]
        assert corr[0, 1] > corr[4, 5]

    def test_files_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        anchors = [OrganAnchorPair(i, rng.normal(size=4), rng.normal(size=4)) for i in range(3)]
        back = anchors_from_json(anchors_to_json(anchors, {"config_hash": "x"}))
        assert all(a.v_plus.tobytes() == b.v_plus.tobytes() for a, b in zip(anchors, back))
        y = rng.uniform(size=(2, 3))
        write_soft_labels_csv(tmp_path / "y.csv", ["a", "b"], y)
        ids, y2 = read_soft_labels_csv(tmp_path / "y.csv")
        assert ids == ["a", "b"] and y2.tobytes() == y.tobytes()

    def test_anchor_file_version_checked(self):
        with pytest.raises(ContractError):
            anchors_from_json({"version": 99, "anchors": []})


class TestTextHead:
    def test_half_targets_optimum(self):
        head = TextHead(4, 8, 4, 3, np.random.default_rng(0))
        for p in head.head.parameters():
            p.data[:] = 0.0
        x = np.random.default_rng(1).normal(size=(5, 4))
        loss = text_loss(head, x, np.full((5, 3), 0.5))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
        from sora.core import backward
        backward(loss)
        np.testing.assert_allclose(head.head.bias.grad, 0.0, atol=1e-15)

    def test_noiseless_fit(self):
        records = generate_synthetic_corpus(CorpusConfig(per_organ=20, mixture_alpha=0.0, noise_sigma=0.0))
        anchors = train_anchors(records, AnchorTrainConfig(epochs=100)).anchors
        y = soft_labels(anchors, embedding_matrix(records))
        head, trace = train_text_head(records, y, TextHeadConfig(epochs=300))
        with no_grad():
            y_hat = head(Tensor(embedding_matrix(records))).data
        assert np.abs(y_hat - y).mean() < 0.05
        assert trace[-1] < trace[0]
        assert np.all((y_hat > 0) & (y_hat < 1))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        head = TextHead(4, 8, 4, 3, rng)
        x, y = rng.normal(size=(5, 4)), rng.uniform(size=(5, 3))
        w = head.fc1.weight
        base = w.data.copy()

        def fn(t):
            w.data = t.data
            return text_loss(head, x, y) if not t.requires_grad else _loss_through(head, t, x, y)

        assert finite_diff_check(fn, base) < 1e-4
        w.data = base

    def test_targets_out_of_range(self):
        recs = generate_synthetic_corpus(CorpusConfig(per_organ=2))
        with pytest.raises(ContractError):
            train_text_head(recs, np.full((14, 7), 1.2), TextHeadConfig(epochs=1))

    def test_embed_text_zero_weights(self):
        head = TextHead(4, 8, 4, 3, np.random.default_rng(0))
        for p in head.parameters():
            p.data[:] = 0.0
        np.testing.assert_array_equal(embed_text(head, np.ones(4)), np.zeros(4))

    def test_embed_text_manual_oracle(self):
        from scipy.special import erf
        rng = np.random.default_rng(5)
        head = TextHead(4, 8, 6, 3, rng)
        x = rng.normal(size=4)
        h = x @ head.fc1.weight.data + head.fc1.bias.data
        h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
        ref = h @ head.fc2.weight.data + head.fc2.bias.data
        np.testing.assert_allclose(embed_text(head, x), ref, atol=1e-12)
        np.testing.assert_array_equal(embed_text(head, x), embed_text(head, x.copy()))

    def test_embed_text_dimension(self):
        head = TextHead(4, 8, 4, 3, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            embed_text(head, np.ones(5))


def _loss_through(head, w, x, y):
    """text loss with ``w`` substituted for the first-layer weight (keeps the tape path)."""
    from sora.core import ops
    h = ops.gelu(ops.add(ops.matmul(Tensor(x), w), head.fc1.bias))
    f = head.fc2(h)
    return ops.bce_with_logits(head.head(f), y)
