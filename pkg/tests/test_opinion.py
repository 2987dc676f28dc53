import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_on_simplex, opinions
from fedtrust.opinion import (
    VACUOUS, AllZeroWeights, InteractionRecord, Opinion, Outcome, WeightConfig, combine_opinions,
    frequency_weight, fuse_recommended, local_opinion, mean_link_failure, opinion_from_counts,
    reputation_value, weighted_counts,
)


def recs(pos, neg, task_index=0, u=0.0, publisher="p", worker="w"):
    out = [InteractionRecord(publisher, worker, task_index, Outcome.POSITIVE, u)] * pos
    return out + [InteractionRecord(publisher, worker, task_index, Outcome.NEGATIVE, u)] * neg


class TestOpinionType:
    def test_valid(self):
        assert Opinion(0.6, 0.2, 0.2).as_tuple() == (0.6, 0.2, 0.2)

    @pytest.mark.parametrize("b,d,u", [(0.5, 0.5, 0.5), (-0.1, 0.6, 0.5), (1.2, 0, 0), (0.3, 0.3, 0.3)])
    def test_rejects_off_simplex(self, b, d, u):
        with pytest.raises(ValueError):
            Opinion(b, d, u)

    def test_vacuous(self):
        assert VACUOUS == Opinion(0.0, 0.0, 1.0) == Opinion.vacuous()


class TestWeightConfig:
    def test_defaults(self):
        cfg = WeightConfig()
        assert (cfg.gamma, cfg.w_recent, cfg.w_past, cfg.rho_pos, cfg.rho_neg,
                cfg.recency_window) == (0.5, 0.8, 0.2, 0.4, 0.6, 3)

    @pytest.mark.parametrize("kw", [dict(w_recent=0.7, w_past=0.2), dict(rho_pos=0.0),
                                    dict(gamma=1.5), dict(recency_window=0),
                                    dict(rho_neg=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            WeightConfig(**kw)

    def test_recency_boundary(self):
        cfg = WeightConfig(recency_window=3)
        assert cfg.is_recent(7, 9)
        assert not cfg.is_recent(6, 9)
        assert cfg.timeliness(9, 9) == 0.8 and cfg.timeliness(0, 9) == 0.2


class TestWeightedCounts:
    def test_unit_weights_reduce_to_raw_counts(self):
        cfg = WeightConfig(w_recent=1.0, w_past=0.0, rho_pos=1.0, rho_neg=1.0)
        assert weighted_counts(recs(3, 1), 0, cfg) == (3.0, 1.0)

    def test_hand_example(self):
        a, b = weighted_counts(recs(5, 5), 0, WeightConfig())
        assert a == pytest.approx(1.6, abs=1e-12)
        assert b == pytest.approx(2.4, abs=1e-12)

    def test_empty(self):
        assert weighted_counts([], 5, WeightConfig()) == (0.0, 0.0)

    def test_window_split(self):
        history = recs(2, 0, task_index=0) + recs(1, 1, task_index=5)
        a, b = weighted_counts(history, 5, WeightConfig())
        assert a == pytest.approx(0.4 * (0.8 * 1 + 0.2 * 2))
        assert b == pytest.approx(0.6 * 0.8)

    def test_future_record_rejected(self):
        with pytest.raises(ValueError):
            weighted_counts(recs(1, 0, task_index=4), 3, WeightConfig())


class TestLocalOpinion:
    def test_from_counts_hand_example(self):
        op = opinion_from_counts(3, 1, 0.2)
        assert op.as_tuple() == pytest.approx((0.6, 0.2, 0.2), abs=1e-12)

    def test_no_history_is_vacuous(self):
        for u in (0.0, 0.3, 1.0):
            assert local_opinion([], 0, WeightConfig(), u) == VACUOUS

    def test_symmetric_counts(self):
        assert opinion_from_counts(2.5, 2.5, 0.0).as_tuple() == (0.5, 0.5, 0.0)

    def test_uses_effective_counts(self):
        op = local_opinion(recs(5, 5), 0, WeightConfig(), 0.0)
        assert op.belief == pytest.approx(0.4) and op.distrust == pytest.approx(0.6)

    def test_mean_link_failure(self):
        history = recs(1, 0, u=0.1) + recs(0, 1, u=0.3)
        assert mean_link_failure(history) == pytest.approx(0.2)
        assert mean_link_failure([]) == 0.0


class TestReputationValue:
    def test_examples(self):
        assert reputation_value(Opinion(0.6, 0.2, 0.2), 0.5) == pytest.approx(0.7)
        assert reputation_value(VACUOUS, 0.5) == 0.5
        for g in (0.0, 0.3, 1.0):
            assert reputation_value(Opinion(1, 0, 0), g) == 1.0

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            reputation_value(VACUOUS, 1.1)

    @given(opinions(), st.floats(0, 1))
    def test_in_unit_interval(self, op, gamma):
        assert 0.0 <= reputation_value(op, gamma) <= 1.0


class TestFrequencyWeight:
    @pytest.mark.parametrize("n,mean,expected", [(30, 30, 1.0), (10, 40, 0.25), (50, 25, 1.0),
                                                 (0, 0, 1.0), (0, 5, 0.0)])
    def test_examples(self, n, mean, expected):
        assert frequency_weight(n, mean) == expected

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_clamped(self, n, mean):
        assert 0.0 <= frequency_weight(n, mean) <= 1.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            frequency_weight(-1, 2)


class TestFuse:
    def test_mean(self):
        op = fuse_recommended([(Opinion(0.6, 0.2, 0.2), 1), (Opinion(0.4, 0.4, 0.2), 1)])
        assert op.as_tuple() == pytest.approx((0.5, 0.3, 0.2), abs=1e-12)

    def test_single_is_identity(self):
        x = Opinion(0.3, 0.1, 0.6)
        assert fuse_recommended([(x, 0.7)]) is x

    def test_idempotent(self):
        x = Opinion(0.25, 0.35, 0.4)
        assert fuse_recommended([(x, 2), (x, 5)]).as_tuple() == pytest.approx(x.as_tuple(), abs=1e-15)

    def test_zero_weights(self):
        with pytest.raises(AllZeroWeights):
            fuse_recommended([(Opinion(1, 0, 0), 0.0)])
        with pytest.raises(AllZeroWeights):
            fuse_recommended([])

    def test_zero_weight_entry_ignored(self):
        x, y = Opinion(0.2, 0.2, 0.6), Opinion(1, 0, 0)
        assert fuse_recommended([(x, 1.0), (y, 0.0)]) == x

    @settings(max_examples=200)
    @given(st.lists(st.tuples(opinions(), st.floats(0.01, 10)), min_size=1, max_size=8))
    def test_matches_brute_force_mean(self, entries):
        fused = fuse_recommended(entries)
        total = sum(w for _, w in entries)
        for i in range(3):
            brute = sum(op.as_tuple()[i] * w for op, w in entries) / total
            assert fused.as_tuple()[i] == pytest.approx(brute, abs=1e-12)
        assert_on_simplex(fused)


class TestCombine:
    def test_hand_example(self):
        op = combine_opinions(Opinion(0.6, 0.2, 0.2), Opinion(0.5, 0.3, 0.2))
        # kappa = 0.36
        assert op.as_tuple() == pytest.approx((0.22 / 0.36, 0.1 / 0.36, 0.04 / 0.36), abs=1e-12)
        assert op.belief == pytest.approx(0.6111, abs=1e-4)

    def test_vacuous_neutral(self):
        x = Opinion(0.6, 0.2, 0.2)
        assert combine_opinions(x, VACUOUS) == x
        assert combine_opinions(VACUOUS, x) == x
        assert combine_opinions(VACUOUS, VACUOUS) == VACUOUS

    def test_dogmatic_fallback(self):
        op = combine_opinions(Opinion(1, 0, 0), Opinion(0, 1, 0))
        assert op.as_tuple() == (0.5, 0.5, 0.0)

    def test_composite_example_value(self):
        op = combine_opinions(Opinion(0.6, 0.2, 0.2), Opinion(0.5, 0.3, 0.2))
        assert reputation_value(op, 0.5) == pytest.approx(0.6667, abs=1e-4)

    @settings(max_examples=300)
    @given(opinions(), opinions())
    def test_simplex_closure(self, a, b):
        assert_on_simplex(combine_opinions(a, b))

    @given(opinions())
    def test_vacuous_neutral_property(self, x):
        out = combine_opinions(x, VACUOUS)
        assert out.as_tuple() == pytest.approx(x.as_tuple(), abs=1e-12)


class TestMonotonicity:
    @given(st.floats(0.01, 100), st.floats(0, 100), st.floats(0.001, 100), st.floats(0, 0.99),
           st.floats(0, 1))
    def test_more_negative_lowers_reputation(self, alpha, beta, extra, u, gamma):
        lo = reputation_value(opinion_from_counts(alpha, beta + extra, u), gamma)
        hi = reputation_value(opinion_from_counts(alpha, beta, u), gamma)
        assert lo < hi
