import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lfl.model import (
    Dyad, LabelSpace, LflModel, ModelError, apply_rule, baseline_model, compute_scores,
    expand_stereotype, extend_cold, new_model, predict, predict_link_directed,
    predict_link_symmetric, predict_multirelational, predict_proba, predict_proba_baseline,
    predict_proba_batch, softmax,
)


def softmax_oracle(scores):
    """Plain-float softmax, no vectorization, used as an independent reference."""
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return [v / z for v in e]


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def random_model(variant, seed, n=5, labels=3, rank=2, bias=True, side_dim=0, scale=1.0):
    rng = np.random.default_rng(seed)
    if variant in ("symmetric-link", "directed-link", "multi-relational"):
        ls = LabelSpace.binary()
    else:
        ls = LabelSpace(list(range(labels)))
    if variant == "symmetric-link":
        bias = False
    m = new_model(ls, n, n, rank, variant, bias, side_dim=side_dim,
                  n_relations=3 if variant == "multi-relational" else 0,
                  stereotype_rank=2 if variant == "stereotype" else 0)
    for name, w in m.params.items():
        mask = m.free_mask(name)
        w[mask] = rng.uniform(-scale, scale, size=w.shape)[mask]
    return m


VARIANTS = ["dyadic", "symmetric-link", "directed-link", "multi-relational", "stereotype"]


class TestLabelSpace:
    def test_default_base_is_last(self):
        assert LabelSpace(["a", "b", "c"]).base_index == 2

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ModelError):
            LabelSpace([1, 1, 2])

    def test_ordinal_requires_increasing_values(self):
        with pytest.raises(ModelError):
            LabelSpace([1, 2, 3], "ordinal", [1.0, 3.0, 2.0])
        with pytest.raises(ModelError):
            LabelSpace([1, 2], "ordinal")

    def test_bad_base_index(self):
        with pytest.raises(ModelError):
            LabelSpace([0, 1], base_index=2)

    def test_dict_round_trip(self):
        ls = LabelSpace.ordinal([1, 2, 5], base_index=0)
        assert LabelSpace.from_dict(ls.to_dict()) == ls


class TestPredictProba:
    def test_zero_weights_uniform(self):
        m = new_model(LabelSpace([0, 1, 2]), 3, 3, rank=4)
        np.testing.assert_allclose(predict_proba(m, Dyad(1, 2)), [1 / 3] * 3, atol=1e-15)

    def test_binary_hand_value(self):
        m = new_model(LabelSpace([0, 1], base_index=0), 1, 1, rank=1, bias=False)
        m.params["row"][1, 0] = [2.0]
        m.params["col"][1, 0] = [1.0]
        p = predict_proba(m, Dyad(0, 0))
        assert p[1] == pytest.approx(0.880797, abs=1e-6)
        assert p[1] == pytest.approx(sig(2.0), abs=1e-15)

    def test_three_label_softmax_oracle(self):
        m = new_model(LabelSpace([0, 1, 2]), 1, 1, rank=1, bias=False)
        m.params["row"][0, 0] = [1.0]
        m.params["col"][0, 0] = [1.0]
        m.params["row"][1, 0] = [-1.0]
        m.params["col"][1, 0] = [1.0]
        p = predict_proba(m, Dyad(0, 0))
        np.testing.assert_allclose(p, softmax_oracle([1.0, -1.0, 0.0]), atol=1e-15)
        np.testing.assert_allclose(p, [0.66524, 0.09003, 0.24473], atol=1e-5)

    def test_side_information_term(self):
        m = new_model(LabelSpace([0, 1, 2]), 2, 2, rank=1, side_dim=2)
        m.params["side"][0] = [1.0, -2.0]
        p = predict_proba(m, Dyad(0, 1, side=np.array([0.5, 0.25])))
        np.testing.assert_allclose(p, softmax_oracle([0.0, 0.0, 0.0]), atol=1e-15)
        p = predict_proba(m, Dyad(0, 1, side=np.array([1.0, 0.0])))
        np.testing.assert_allclose(p, softmax_oracle([1.0, 0.0, 0.0]), atol=1e-15)

    def test_scores_magnitude_700_no_overflow(self):
        m = new_model(LabelSpace([0, 1, 2]), 1, 1, rank=1, bias=False)
        m.params["row"][0, 0] = [700.0]
        m.params["col"][0, 0] = [1.0]
        m.params["row"][1, 0] = [-700.0]
        m.params["col"][1, 0] = [1.0]
        p = predict_proba(m, Dyad(0, 0))
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)

    def test_index_out_of_bounds(self):
        m = new_model(LabelSpace([0, 1]), 2, 2, rank=1)
        with pytest.raises(ModelError):
            predict_proba(m, Dyad(2, 0))
        with pytest.raises(ModelError):
            predict_proba(m, Dyad(0, -1))

    def test_side_dimension_mismatch(self):
        m = new_model(LabelSpace([0, 1]), 2, 2, rank=1, side_dim=3)
        with pytest.raises(ModelError):
            predict_proba(m, Dyad(0, 0, side=np.ones(2)))
        with pytest.raises(ModelError):
            predict_proba(m, Dyad(0, 0))

    def test_base_weights_stay_zero(self):
        m = random_model("dyadic", 0)
        assert np.all(m.params["row"][m.base] == 0)
        assert np.all(m.params["col"][m.base] == 0)
        assert np.all(compute_scores(m, [0, 1], [2, 3])[:, m.base] == 0)

    def test_bias_columns_frozen_at_one(self):
        m = random_model("dyadic", 1, bias=True)
        live = [y for y in range(3) if y != m.base]
        assert np.all(m.params["row"][live, :, 0] == 1.0)
        assert np.all(m.params["col"][live, :, 1] == 1.0)
        assert m.k_total == m.rank + 2


class TestBaseline:
    def test_zero_weights_uniform(self):
        m = baseline_model(LabelSpace([0, 1, 2, 3]), 3, 3)
        np.testing.assert_allclose(predict_proba_baseline(m, Dyad(2, 1)), [0.25] * 4, atol=1e-15)

    def test_hand_value(self):
        m = baseline_model(LabelSpace([0, 1], base_index=0), 2, 2)
        m.params["row"][1, 0, 1] = 1.0  # row bias alpha_{r,1}
        m.params["col"][1, 1, 0] = 1.0  # col bias beta_{c,1}
        p = predict_proba_baseline(m, Dyad(0, 1))
        assert p[1] == pytest.approx(sig(2.0), abs=1e-15)
        assert p[1] == pytest.approx(0.880797, abs=1e-6)

    def test_offset_enters_every_dyad(self):
        m = baseline_model(LabelSpace([0, 1], base_index=0), 2, 2)
        m.params["offset"][1] = -0.5
        for r in range(2):
            for c in range(2):
                assert predict_proba_baseline(m, Dyad(r, c))[1] == pytest.approx(sig(-0.5))

    def test_requires_bias_only_model(self):
        with pytest.raises(ModelError):
            predict_proba_baseline(new_model(LabelSpace([0, 1]), 2, 2, rank=1), Dyad(0, 0))

    @staticmethod
    def _fill(m, seed):
        rng = np.random.default_rng(seed)
        for name, w in m.params.items():
            mask = m.free_mask(name)
            w[mask] = rng.normal(size=w.shape)[mask]
        return m

    @staticmethod
    def _same_order(P):
        """Every row of P orders the columns identically (ties ignored)."""
        d = P[:, :, None] - P[:, None, :]
        clear = np.all(np.abs(d) > 1e-12, axis=0)
        return bool(np.all(np.sign(d)[:, clear] == np.sign(d)[0, clear]))

    def test_identical_column_ranking_binary(self):
        m = self._fill(baseline_model(LabelSpace([0, 1], base_index=0), 5, 5), 3)
        P = np.stack([predict_proba_batch(m, [r] * 5, range(5))[:, 1] for r in range(5)])
        assert self._same_order(P)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_score_ranking_identical_across_rows(self, seed, labels):
        m = self._fill(baseline_model(LabelSpace(list(range(labels))), 4, 6), seed)
        y = seed % labels
        S = np.stack([compute_scores(m, [r] * 6, range(6))[:, y] for r in range(4)])
        assert self._same_order(S)

    @given(st.integers(0, 2**32 - 1))
    def test_probability_ranking_binary_property(self, seed):
        m = self._fill(baseline_model(LabelSpace([0, 1], base_index=0), 4, 6), seed)
        P = np.stack([predict_proba_batch(m, [r] * 6, range(6))[:, 1] for r in range(4)])
        assert self._same_order(P)

    def test_probability_ranking_can_differ_with_three_labels(self):
        # the normalizer couples row and column biases once |Y| > 2
        m = baseline_model(LabelSpace([0, 1, 2]), 2, 2)
        row, col = m.params["row"], m.params["col"]
        col[0, 0, 0], col[1, 0, 0] = 0.0, -3.0
        col[0, 1, 0], col[1, 1, 0] = 1.0, 3.0
        row[1, 0, 1] = -5.0
        row[1, 1, 1] = 5.0
        p0 = predict_proba_batch(m, [0, 0], [0, 1])[:, 0]
        p1 = predict_proba_batch(m, [1, 1], [0, 1])[:, 0]
        assert (p0[0] > p0[1]) != (p1[0] > p1[1])


class TestPredictRules:
    def test_mode(self):
        assert apply_rule(np.array([0.2, 0.5, 0.3]), LabelSpace([0, 1, 2]), "mode")[0] == 1

    def test_mode_tie_lowest_index(self):
        assert apply_rule(np.array([0.4, 0.2, 0.4]), LabelSpace([0, 1, 2]), "mode")[0] == 0

    def test_mean_uniform(self):
        ls = LabelSpace.ordinal([1, 2, 3, 4, 5])
        assert apply_rule(np.full(5, 0.2), ls, "mean")[0] == pytest.approx(3.0)

    def test_median_cdf(self):
        ls = LabelSpace.ordinal([1, 2, 3])
        idx = apply_rule(np.array([0.2, 0.2, 0.6]), ls, "median")[0]
        assert ls.labels[idx] == 3

    def test_median_exact_half(self):
        ls = LabelSpace.ordinal([1, 2, 3])
        assert apply_rule(np.array([0.25, 0.25, 0.5]), ls, "median")[0] == 1

    def test_rule_kind_mismatch(self):
        with pytest.raises(ModelError):
            apply_rule(np.array([0.5, 0.5]), LabelSpace(["a", "b"]), "mean")
        with pytest.raises(ModelError):
            apply_rule(np.array([0.5, 0.5]), LabelSpace(["a", "b"]), "median")

    def test_predict_returns_label_or_value(self):
        m = new_model(LabelSpace.ordinal([1, 2, 3]), 1, 1, rank=1)
        assert predict(m, Dyad(0, 0), "mean") == pytest.approx(2.0)
        assert predict(m, Dyad(0, 0), "mode") == 1
        assert predict(m, Dyad(0, 0), "median") == 2


class TestLinkVariants:
    def test_symmetric_zero(self):
        m = new_model(LabelSpace.binary(), 4, 4, 2, "symmetric-link", bias=False)
        assert predict_link_symmetric(m, 0, 3) == 0.5

    def test_symmetric_orthogonal(self):
        m = new_model(LabelSpace.binary(), 2, 2, 2, "symmetric-link", bias=False)
        m.params["shared"][0] = [1, 2]
        m.params["shared"][1] = [2, -1]
        assert predict_link_symmetric(m, 0, 1) == 0.5

    def test_symmetric_swap_exact(self, rng):
        m = random_model("symmetric-link", 4, n=20, rank=3)
        for r, c in rng.integers(0, 20, size=(100, 2)):
            assert predict_link_symmetric(m, r, c) == predict_link_symmetric(m, c, r)

    def test_symmetric_requires_no_bias(self):
        with pytest.raises(ModelError):
            new_model(LabelSpace.binary(), 3, 3, 2, "symmetric-link", bias=True)

    def test_link_requires_binary_square(self):
        with pytest.raises(ModelError):
            new_model(LabelSpace([0, 1, 2]), 3, 3, 2, "directed-link")
        with pytest.raises(ModelError):
            new_model(LabelSpace.binary(), 3, 4, 2, "directed-link")

    def test_directed_zero(self):
        m = new_model(LabelSpace.binary(), 3, 3, 1, "directed-link", bias=False)
        assert predict_link_directed(m, 0, 1) == 0.5

    def test_directed_cancellation(self):
        m = new_model(LabelSpace.binary(), 2, 2, 1, "directed-link", bias=False)
        m.params["alpha"][0] = [1]
        m.params["beta"][1] = [1]
        m.params["gamma"][0] = [1]
        m.params["gamma"][1] = [-1]
        assert predict_link_directed(m, 0, 1) == 0.5

    def test_directed_asymmetric(self):
        rng = np.random.default_rng(5)
        m = new_model(LabelSpace.binary(), 4, 4, 2, "directed-link", bias=False)
        m.params["alpha"][:] = rng.normal(size=(4, 2))
        m.params["beta"][:] = rng.normal(size=(4, 2))
        a, b = m.params["alpha"], m.params["beta"]
        assert a[0] @ b[1] != a[1] @ b[0]
        assert predict_link_directed(m, 0, 1) != predict_link_directed(m, 1, 0)

    def test_directed_matches_formula(self):
        m = random_model("directed-link", 6)
        p = m.params
        z = p["alpha"][1] @ p["beta"][3] + p["gamma"][1] @ p["gamma"][3]
        assert predict_link_directed(m, 1, 3) == pytest.approx(sig(z), abs=1e-15)

    def test_multirelational_zero_scale(self):
        m = random_model("multi-relational", 7)
        m.params["scale"][1] = 0.0
        assert predict_multirelational(m, 2, 3, 1) == 0.5

    def test_multirelational_hand_value(self):
        m = new_model(LabelSpace.binary(), 1, 1, 2, "multi-relational", bias=False, n_relations=1)
        m.params["alpha"][0] = [1, 1]
        m.params["beta"][0] = [1, 1]
        m.params["scale"][0] = [2, -1]
        assert predict_multirelational(m, 0, 0, 0) == pytest.approx(0.731059, abs=1e-6)

    def test_opposite_relations_sum_to_one(self):
        m = random_model("multi-relational", 8)
        m.params["scale"][1] = -m.params["scale"][0]
        for r in range(5):
            for c in range(5):
                total = predict_multirelational(m, r, c, 0) + predict_multirelational(m, r, c, 1)
                assert total == pytest.approx(1.0, abs=1e-15)

    def test_invalid_relation(self):
        m = random_model("multi-relational", 9)
        with pytest.raises(ModelError):
            predict_multirelational(m, 0, 0, 3)

    def test_wrong_variant(self):
        with pytest.raises(ModelError):
            predict_link_symmetric(random_model("directed-link", 1), 0, 1)


class TestStereotype:
    def test_zero_phi_gives_base_equivalent(self):
        m = random_model("stereotype", 10)
        m.params["phi"][:] = 0.0
        np.testing.assert_allclose(predict_proba(m, Dyad(1, 1)), [1 / 3] * 3, atol=1e-15)

    def test_scalar_multiply(self):
        m = new_model(LabelSpace([0, 1]), 1, 1, 1, "stereotype", bias=False, stereotype_rank=1)
        m.params["row"][0, 0] = [1.5]
        m.params["col"][0, 0] = [1.0]
        m.params["phi"][0, 0] = 2.0
        assert expand_stereotype(m, 0)[0, 0] == pytest.approx(3.0)
        assert compute_scores(m, [0], [0])[0, 0] == pytest.approx(3.0)

    @pytest.mark.parametrize("bias", [False, True])
    def test_identity_assignment_reproduces_dyadic(self, bias):
        ls = LabelSpace([0, 1, 2, 3])
        dy = random_model("dyadic", 11, n=4, labels=4, rank=2, bias=bias)
        st_m = new_model(ls, 4, 4, 2, "stereotype", bias=bias, stereotype_rank=3)
        live = [y for y in range(4) if y != ls.base_index]
        for i, y in enumerate(live):
            st_m.params["row"][i] = dy.params["row"][y]
            st_m.params["col"][i] = dy.params["col"][y]
            st_m.params["phi"][i, y] = 1.0
        rows, cols = np.meshgrid(range(4), range(4), indexing="ij")
        a = predict_proba_batch(dy, rows.ravel(), cols.ravel())
        b = predict_proba_batch(st_m, rows.ravel(), cols.ravel())
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_expand_matches_scores(self):
        m = random_model("stereotype", 12)
        for y in range(3):
            E = expand_stereotype(m, y)
            S = compute_scores(m, [2], [4])[0]
            assert E[2, 4] == pytest.approx(S[y], abs=1e-12)

    def test_phi_base_frozen(self):
        m = random_model("stereotype", 13)
        assert np.all(m.params["phi"][:, m.base] == 0)


class TestExtendCold:
    def test_new_objects_get_cold_weights(self):
        m = random_model("dyadic", 14, n=3)
        e = extend_cold(m, 5, 4, reset_rows=[1])
        assert e.params["row"].shape[1] == 5
        assert e.params["col"].shape[1] == 4
        live = [y for y in range(3) if y != m.base]
        # frozen bias constants stay, every free entry is zero
        assert np.all(e.params["row"][live][:, [1, 3, 4], 1:] == 0)
        assert np.all(e.params["row"][live][:, [1, 3, 4], 0] == 1)
        np.testing.assert_array_equal(e.params["row"][:, 0], m.params["row"][:, 0])
        assert m.params["row"].shape[1] == 3


class TestProperties:
    @given(st.sampled_from(VARIANTS), st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
    def test_normalization(self, variant, seed, scale):
        m = random_model(variant, seed, scale=scale)
        rng = np.random.default_rng(seed)
        rows, cols = rng.integers(0, 5, 10), rng.integers(0, 5, 10)
        rel = rng.integers(0, 3, 10) if variant == "multi-relational" else None
        P = predict_proba_batch(m, rows, cols, relation=rel)
        assert np.all((P >= 0) & (P <= 1))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_base_repinning(self, seed, labels):
        rng = np.random.default_rng(seed)
        S = rng.normal(scale=5, size=(8, labels))
        ref = softmax(S)
        for b in range(labels):
            np.testing.assert_allclose(softmax(S - S[:, [b]]), ref, atol=1e-12, rtol=0)

    @given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, seed, shift):
        S = np.random.default_rng(seed).normal(scale=3, size=(6, 4))
        np.testing.assert_allclose(softmax(S + shift), softmax(S), atol=1e-12, rtol=0)

    @given(st.integers(0, 2**32 - 1))
    def test_softmax_matches_oracle(self, seed):
        s = np.random.default_rng(seed).normal(scale=10, size=5)
        np.testing.assert_allclose(softmax(s[None])[0], softmax_oracle(list(s)), atol=1e-14)

    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_link_exact_symmetry(self, seed):
        m = random_model("symmetric-link", seed, n=8, rank=3, scale=3.0)
        P = predict_proba_batch(m, np.repeat(np.arange(8), 8), np.tile(np.arange(8), 8))[:, 1]
        P = P.reshape(8, 8)
        assert np.array_equal(P, P.T)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 62))
    def test_stability_large_weights(self, seed, rank):
        rng = np.random.default_rng(seed)
        m = new_model(LabelSpace([0, 1, 2]), 2, 2, rank)
        assert m.k_total <= 64
        for name, w in m.params.items():
            mask = m.free_mask(name)
            w[mask] = rng.uniform(-1e3, 1e3, size=w.shape)[mask]
        P = predict_proba_batch(m, [0, 1, 0, 1], [0, 0, 1, 1])
        assert np.all(np.isfinite(P))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    @given(st.sampled_from(VARIANTS), st.integers(0, 2**32 - 1))
    def test_json_round_trip_exact(self, variant, seed):
        m = random_model(variant, seed, scale=1e3)
        m.meta = {"row_ids": ["a", "b"]}
        back = LflModel.from_json(m.to_json())
        assert back.variant == m.variant and back.meta == m.meta
        for name in m.params:
            assert np.array_equal(back.params[name], m.params[name])
        assert back.to_json() == m.to_json()
