import numpy as np
import pytest

from webnoise.detectors import CleanScores, Origin
from webnoise.schedule import CombinationStrategy, StrategyKind, active_scores


def scores(values, origin=Origin.SMALL_LOSS, ids=None):
    values = np.asarray(values, dtype=float)
    if ids is None:
        ids = np.array([f"s{i}" for i in range(len(values))])
    return CleanScores(ids, values, origin)


Z = scores([0.9, 0.2, 0.7, 0.4])
W = scores([0.1, 0.8, 0.6, 0.3], origin=Origin.LINEAR_SEP)


class TestPassThrough:
    def test_z_only_identity(self):
        out = active_scores(CombinationStrategy(StrategyKind.Z_ONLY), 3, Z, W)
        np.testing.assert_array_equal(out.values, Z.values)
        assert out.origin == Origin.SMALL_LOSS

    def test_w_only_identity(self):
        out = active_scores(CombinationStrategy(StrategyKind.W_ONLY), 3, Z, W)
        np.testing.assert_array_equal(out.values, W.values)

    def test_alternate_parity(self):
        strat = CombinationStrategy(StrategyKind.ALTERNATE_MOD2)
        even = active_scores(strat, 0, Z, W)
        odd = active_scores(strat, 1, Z, W)
        np.testing.assert_array_equal(even.values, W.values)
        np.testing.assert_array_equal(odd.values, Z.values)

    def test_alternate_visit_counts(self):
        strat = CombinationStrategy(StrategyKind.ALTERNATE_MOD2)
        for total in (7, 8):
            picks = [active_scores(strat, e, Z, W).origin for e in range(total)]
            n_w = sum(1 for p in picks if p == Origin.LINEAR_SEP)
            assert n_w == -(-total // 2)  # ceil
            assert total - n_w == total // 2


class TestBooleanCombos:
    def test_and_truth_table(self):
        z = scores([1.0, 0.0])  # clean, noisy
        w = scores([0.0, 0.0], origin=Origin.LINEAR_SEP)  # noisy, noisy
        out = active_scores(CombinationStrategy(StrategyKind.AND), 0, z, w)
        np.testing.assert_array_equal(out.values, [1.0, 0.0])
        assert out.origin == Origin.COMBINED

    def test_or_truth_table(self):
        z = scores([1.0, 1.0, 0.0, 0.0])
        w = scores([1.0, 0.0, 1.0, 0.0], origin=Origin.LINEAR_SEP)
        out = active_scores(CombinationStrategy(StrategyKind.OR), 0, z, w)
        np.testing.assert_array_equal(out.values, [1.0, 0.0, 0.0, 0.0])

    def test_and_clean_superset_of_or(self):
        rng = np.random.default_rng(0)
        z = scores(rng.random(50))
        w = scores(rng.random(50), origin=Origin.LINEAR_SEP)
        both = active_scores(CombinationStrategy(StrategyKind.AND), 0, z, w)
        either = active_scores(CombinationStrategy(StrategyKind.OR), 0, z, w)
        assert set(np.flatnonzero(either.values)) <= set(np.flatnonzero(both.values))

    def test_tie_binarizes_clean(self):
        z = scores([0.5])
        w = scores([0.5], origin=Origin.LINEAR_SEP)
        out = active_scores(CombinationStrategy(StrategyKind.OR), 0, z, w)
        np.testing.assert_array_equal(out.values, [1.0])


class TestSuccessive:
    def test_z_then_w(self):
        strat = CombinationStrategy(StrategyKind.Z_THEN_W, switch_epoch=5)
        np.testing.assert_array_equal(active_scores(strat, 4, Z, W).values, Z.values)
        np.testing.assert_array_equal(active_scores(strat, 5, Z, W).values, W.values)

    def test_w_then_z(self):
        strat = CombinationStrategy(StrategyKind.W_THEN_Z, switch_epoch=2)
        np.testing.assert_array_equal(active_scores(strat, 0, Z, W).values, W.values)
        np.testing.assert_array_equal(active_scores(strat, 2, Z, W).values, Z.values)

    def test_switch_epoch_required(self):
        with pytest.raises(ValueError, match="switch_epoch"):
            CombinationStrategy(StrategyKind.Z_THEN_W)

    def test_switch_epoch_inside_run(self):
        strat = CombinationStrategy(StrategyKind.Z_THEN_W, switch_epoch=10)
        with pytest.raises(ValueError):
            strat.validate_for(10)


class TestRandomKinds:
    def test_random_epoch_reproducible(self):
        strat = CombinationStrategy(StrategyKind.RANDOM_EPOCH, seed=3)
        picks1 = [active_scores(strat, e, Z, W, np.random.default_rng(11)).origin for e in range(10)]
        picks2 = [active_scores(strat, e, Z, W, np.random.default_rng(11)).origin for e in range(10)]
        assert picks1 == picks2

    def test_random_sample_marginal_frequency(self):
        n = 10_000
        rng = np.random.default_rng(5)
        z = scores(np.zeros(n))
        w = scores(np.ones(n), origin=Origin.LINEAR_SEP)
        out = active_scores(CombinationStrategy(StrategyKind.RANDOM_SAMPLE), 0, z, w, rng)
        freq_w = out.values.mean()  # w contributes the ones
        assert abs(freq_w - 0.5) < 0.02

    def test_random_sample_reproducible(self):
        a = active_scores(CombinationStrategy(StrategyKind.RANDOM_SAMPLE), 0, Z, W, np.random.default_rng(2))
        b = active_scores(CombinationStrategy(StrategyKind.RANDOM_SAMPLE), 0, Z, W, np.random.default_rng(2))
        np.testing.assert_array_equal(a.values, b.values)

    def test_rng_required(self):
        with pytest.raises(ValueError, match="rng"):
            active_scores(CombinationStrategy(StrategyKind.RANDOM_EPOCH), 0, Z, W)


class TestEdges:
    def test_id_mismatch_rejected(self):
        other = scores([0.1, 0.2, 0.3, 0.4], ids=np.array(["x0", "x1", "x2", "x3"]))
        with pytest.raises(ValueError, match="aligned"):
            active_scores(CombinationStrategy(StrategyKind.AND), 0, Z, other)

    def test_warmup_fallback_uses_w(self):
        out = active_scores(CombinationStrategy(StrategyKind.ALTERNATE_MOD2), 1, None, W)
        np.testing.assert_array_equal(out.values, W.values)

    def test_warmup_fallback_all_clean(self):
        out = active_scores(CombinationStrategy(StrategyKind.ALTERNATE_MOD2), 1, Z, None)
        np.testing.assert_array_equal(out.values, np.ones(4))
