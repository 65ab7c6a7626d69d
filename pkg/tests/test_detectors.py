import numpy as np
import pytest

from webnoise.detectors import (
    CleanScores,
    GaussianMixture1D,
    Origin,
    apply_separator,
    auroc,
    fit_gmm_1d,
    fit_linear_separator,
    knn_clean_scores,
    pearson_corr,
    recall_clean,
    recall_noise,
    small_loss_clean_scores,
)


def brute_force_auroc(scores, flags):
    scores = np.asarray(scores, dtype=float)
    flags = np.asarray(flags, dtype=bool)
    total = 0.0
    for sc in scores[flags]:
        for sn in scores[~flags]:
            if sc > sn:
                total += 1.0
            elif sc == sn:
                total += 0.5
    return total / (flags.sum() * (~flags).sum())


class TestGaussianMixture1D:
    def test_two_cluster_fixed_point(self):
        g = fit_gmm_1d([0, 0, 0, 1, 1, 1])
        np.testing.assert_allclose(g.means_, [0.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(g.weights_, [0.5, 0.5], atol=1e-6)

    def test_degenerate_flag(self):
        g = fit_gmm_1d([0.3] * 10)
        assert g.degenerate_
        assert g.means_[0] == g.means_[1] == 0.3
        np.testing.assert_array_equal(g.posterior_low([0.3, 0.3]), [1.0, 1.0])

    def test_sampled_mixture_recovery(self):
        rng = np.random.default_rng(12)
        x = np.concatenate([rng.normal(0.2, 0.01, 250), rng.normal(0.8, 0.01, 250)])
        g = fit_gmm_1d(x)
        assert abs(g.means_[0] - 0.2) < 0.02
        assert abs(g.means_[1] - 0.8) < 0.02

    def test_log_likelihood_monotone(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = np.concatenate([rng.normal(0.3, 0.05, 100), rng.normal(0.7, 0.08, 150)])
            g = fit_gmm_1d(x)
            diffs = np.diff(g.log_likelihood_trace_)
            assert np.all(diffs >= -1e-9)

    def test_components_sorted_by_mean(self):
        rng = np.random.default_rng(5)
        x = np.concatenate([rng.normal(0.9, 0.02, 80), rng.normal(0.1, 0.02, 20)])
        g = fit_gmm_1d(x)
        assert g.means_[0] < g.means_[1]

    def test_too_few_values(self):
        with pytest.raises(ValueError):
            fit_gmm_1d([0.1, 0.9])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            fit_gmm_1d([0.1, 0.2, np.nan, 0.9])

    def test_sklearn_params_round_trip(self):
        g = GaussianMixture1D(tol=1e-5, max_iter=50)
        assert g.get_params()["tol"] == 1e-5
        g.set_params(max_iter=75)
        assert g.max_iter == 75


class TestSmallLossScores:
    def test_separated_clusters(self):
        s = small_loss_clean_scores([0.01] * 10 + [5.0] * 10)
        assert np.all(s.values[:10] > 0.99)
        assert np.all(s.values[10:] < 0.01)
        assert s.origin == Origin.SMALL_LOSS

    def test_single_outlier(self):
        losses = [0.05, 0.06, 0.055, 0.052, 0.049, 0.061, 0.05, 4.0]
        s = small_loss_clean_scores(losses)
        assert s.values[-1] < 0.5

    def test_monotone_between_modes(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.normal(0.2, 0.03, 100), rng.normal(0.8, 0.05, 100)])
        g = fit_gmm_1d(x)
        grid = np.linspace(g.means_[0], g.means_[1], 200)
        post = g.posterior_low(grid)
        assert np.all(np.diff(post) <= 1e-12)

    def test_affine_rescale_invariance(self):
        rng = np.random.default_rng(8)
        losses = rng.gamma(2.0, 1.0, 300)
        a = small_loss_clean_scores(losses)
        b = small_loss_clean_scores(3.5 * losses + 11.0)
        np.testing.assert_allclose(a.values, b.values, atol=1e-8)

    def test_degenerate_all_clean(self):
        s = small_loss_clean_scores([0.4] * 12)
        np.testing.assert_array_equal(s.values, 1.0)


class TestKnnScores:
    def test_same_label_cluster(self):
        f = np.array([[1, 0], [0.999, 0.04], [0.998, 0.06], [0, 1.0]])
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
        s = knn_clean_scores(f, np.array([0, 0, 0, 1]), k=2)
        np.testing.assert_array_equal(s.values[:3], 1.0)

    def test_isolated_label(self):
        f = np.array([[1, 0], [0.999, 0.04], [0.998, 0.06]])
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
        s = knn_clean_scores(f, np.array([0, 0, 1]), k=2)
        assert s.values[2] == 0.0

    def test_chance_level_random_labels(self):
        rng = np.random.default_rng(21)
        f = rng.normal(size=(2000, 16))
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
        labels = rng.integers(0, 5, 2000)
        s = knn_clean_scores(f.astype(np.float32), labels, k=10)
        assert abs(s.values.mean() - 0.2) < 0.05

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(150, 8))
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
        labels = rng.integers(0, 3, 150)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        a = knn_clean_scores(f.astype(np.float32), labels, k=7)
        rotated = (f @ q).astype(np.float32)
        rotated = rotated / np.linalg.norm(rotated, axis=1, keepdims=True)
        b = knn_clean_scores(rotated, labels, k=7)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_bad_k(self):
        f = np.eye(4, dtype=np.float32)
        with pytest.raises(ValueError):
            knn_clean_scores(f, np.zeros(4, dtype=int), k=0)
        with pytest.raises(ValueError):
            knn_clean_scores(f, np.zeros(4, dtype=int), k=4)


def separable_clusters(n=200, d=6, flip=0.1, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    X = np.vstack(
        [rng.normal(1.0, 0.3, (half, d)), rng.normal(-1.0, 0.3, (n - half, d))]
    )
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    truth = np.concatenate([np.ones(half, bool), np.zeros(n - half, bool)])
    noisy = truth.copy()
    flips = rng.choice(n, int(flip * n), replace=False)
    noisy[flips] = ~noisy[flips]
    return X, truth, noisy


class TestLinearSeparator:
    def test_robust_to_flipped_targets(self):
        for seed in range(5):
            X, truth, noisy = separable_clusters(seed=seed)
            sep = fit_linear_separator(X, noisy.astype(float))
            sc = apply_separator(sep, X)
            assert auroc(sc, truth) >= 0.99

    def test_oracle_targets_recover_probe(self):
        X, truth, _ = separable_clusters(flip=0.0, seed=3)
        sep_oracle = fit_linear_separator(X, truth.astype(float))
        sc = apply_separator(sep_oracle, X)
        assert auroc(sc, truth) >= 0.99

    def test_boundary_point_half(self):
        X, _, noisy = separable_clusters(seed=1)
        sep = fit_linear_separator(X, noisy.astype(float))
        # construct a point exactly on the decision hyperplane
        w = sep.coef_
        x0 = -sep.intercept_ * w / (w @ w)
        prob = sep.predict_proba(x0[None, :])[0, 1]
        assert prob == pytest.approx(0.5, abs=1e-9)

    def test_orientation_clean_above_noisy(self):
        X, truth, noisy = separable_clusters(seed=2)
        sc = apply_separator(fit_linear_separator(X, noisy.astype(float)), X)
        assert sc.values[truth].mean() > sc.values[~truth].mean()

    def test_monotone_along_weight_direction(self):
        X, _, noisy = separable_clusters(seed=4)
        sep = fit_linear_separator(X, noisy.astype(float))
        ts = np.linspace(-2, 2, 9)
        pts = ts[:, None] * sep.coef_[None, :] / np.linalg.norm(sep.coef_)
        probs = sep.predict_proba(pts)[:, 1]
        assert np.all(np.diff(probs) > 0)

    def test_permutation_invariance(self):
        X, _, noisy = separable_clusters(seed=5)
        ids = np.array([f"s{i}" for i in range(len(X))])
        sc = apply_separator(fit_linear_separator(X, noisy.astype(float)), X, ids=ids)
        perm = np.random.default_rng(0).permutation(len(X))
        sc_p = apply_separator(
            fit_linear_separator(X[perm], noisy[perm].astype(float)), X[perm], ids=ids[perm]
        )
        lookup = dict(zip(sc_p.ids, sc_p.values))
        np.testing.assert_allclose([lookup[i] for i in sc.ids], sc.values, atol=1e-6)

    def test_single_class_targets_hint(self):
        X, _, _ = separable_clusters(seed=6)
        with pytest.raises(ValueError, match="threshold"):
            fit_linear_separator(X, np.ones(len(X)))

    def test_dimension_mismatch(self):
        X, _, noisy = separable_clusters(seed=7)
        sep = fit_linear_separator(X, noisy.astype(float))
        with pytest.raises(ValueError, match="dimension"):
            apply_separator(sep, X[:, :3])


class TestAuroc:
    def test_perfect_and_inverted(self):
        flags = [True, True, False, False]
        assert auroc([0.9, 0.8, 0.3, 0.1], flags) == 1.0
        assert auroc([0.1, 0.2, 0.8, 0.9], flags) == 0.0

    def test_all_ties(self):
        assert auroc([0.5] * 4, [True, True, False, False]) == 0.5

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(4, 201))
            # coarse grid makes ties frequent
            scores = rng.integers(0, 12, n) / 11.0
            flags = rng.random(n) < rng.uniform(0.2, 0.8)
            if flags.all() or not flags.any():
                continue
            assert auroc(scores, flags) == brute_force_auroc(scores, flags)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(23)
        scores = rng.random(80)
        flags = rng.random(80) < 0.4
        a = auroc(scores, flags)
        b = auroc(1.0 / (1.0 + np.exp(-7 * scores)), flags)
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.9], [True, True])


class TestRecalls:
    def test_perfect_detection(self):
        oracle = np.array([True, True, False, False])
        assert recall_clean(oracle, oracle) == 1.0
        assert recall_noise(oracle, oracle) == 1.0

    def test_all_declared_clean(self):
        oracle = np.array([True, False, True, False])
        declared = np.ones(4, bool)
        assert recall_clean(declared, oracle) == 1.0
        assert recall_noise(declared, oracle) == 0.0

    def test_empty_stratum_rejected(self):
        with pytest.raises(ValueError):
            recall_clean(np.ones(3, bool), np.zeros(3, bool))
        with pytest.raises(ValueError):
            recall_noise(np.ones(3, bool), np.ones(3, bool))


class TestPearson:
    def test_identical_and_negated(self):
        v = np.array([0.3, 0.7, 0.1, 0.9])
        assert pearson_corr(v, v) == pytest.approx(1.0)
        assert pearson_corr(v, 1 - v) == pytest.approx(-1.0)

    def test_against_numpy_reference(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        b = np.array([1.0, -1.0, 1.0, -1.0])
        expected = np.corrcoef(a, b)[0, 1]
        assert pearson_corr(a, b) == pytest.approx(expected, abs=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            pearson_corr([1.0, 1.0, 1.0], [0.1, 0.2, 0.3])


class TestCleanScores:
    def test_range_validated(self):
        with pytest.raises(ValueError):
            CleanScores(np.array(["a"]), np.array([1.5]), Origin.KNN)

    def test_csv_round_trip(self, tmp_path):
        s = CleanScores(np.array(["a", "b"]), np.array([0.25, 1.0]), Origin.LINEAR_SEP)
        path = tmp_path / "scores.csv"
        s.to_csv(path, config_hash="abc123")
        loaded = CleanScores.from_csv(path)
        np.testing.assert_array_equal(loaded.ids, s.ids)
        np.testing.assert_array_equal(loaded.values, s.values)
        assert loaded.origin == Origin.LINEAR_SEP
        assert "config=abc123" in path.read_text()

    def test_binarize_threshold_tie_is_clean(self):
        s = CleanScores(np.array(["a", "b"]), np.array([0.5, 0.49]), Origin.KNN)
        np.testing.assert_array_equal(s.binarize(), [True, False])


class TestModeSeparationGuard:
    def test_unimodal_losses_all_clean(self):
        rng = np.random.default_rng(11)
        losses = rng.normal(2.0, 0.08, 400)
        s = small_loss_clean_scores(losses, min_separation=0.25)
        np.testing.assert_array_equal(s.values, 1.0)

    def test_bimodal_losses_unaffected(self):
        rng = np.random.default_rng(12)
        losses = np.concatenate([rng.normal(0.2, 0.03, 200), rng.normal(3.0, 0.3, 200)])
        guarded = small_loss_clean_scores(losses, min_separation=0.25)
        plain = small_loss_clean_scores(losses)
        np.testing.assert_array_equal(guarded.values, plain.values)
        assert guarded.values[:200].mean() > 0.99

    def test_guard_off_by_default(self):
        rng = np.random.default_rng(13)
        losses = rng.normal(2.0, 0.08, 400)
        s = small_loss_clean_scores(losses)
        assert s.values.min() < 0.5  # the forced split stays visible
