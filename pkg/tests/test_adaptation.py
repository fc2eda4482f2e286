import numpy as np
import pytest

from acoustic_cnn.adaptation import (DiagonalGMM, FMLLRTransform, STCTransform, adapt_features, adapt_utterance,
                                     estimate_fmllr, estimate_stc, fmllr_objective, read_transform, train_diag_gmm,
                                     unadapt_features, write_transform)
from acoustic_cnn.features import UtteranceFeatures, compute_deltas


def _sample_gmm(gmm, n, seed):
    g = np.random.default_rng(seed)
    comp = g.choice(gmm.num_components, size=n, p=gmm.weights)
    return gmm.means[comp] + np.sqrt(gmm.variances[comp]) * g.standard_normal((n, gmm.dim))


def _weighted_cov(X, gmm):
    """GMM-posterior-weighted average of within-component covariances."""
    gamma, _ = gmm.posteriors(X)
    D = X.shape[1]
    total = np.zeros((D, D))
    for k in range(gmm.num_components):
        w = gamma[:, k]
        mu = w @ X / w.sum()
        diff = X - mu
        total += (diff * w[:, None]).T @ diff
    return total / len(X)


def _off_diagonal_mass(C):
    return np.sqrt(np.sum(C ** 2) - np.sum(np.diag(C) ** 2))


def _correlated_frames(n=4000, D=4, seed=0):
    g = np.random.default_rng(seed)
    L = np.eye(D) + 0.7 * np.tril(g.standard_normal((D, D)), -1)
    centers = np.array([[-3.0] * D, [3.0] * D])
    labels = g.integers(0, 2, n)
    return centers[labels] + g.standard_normal((n, D)) @ L.T


class TestDiagonalGMM:
    def test_single_component_is_the_sample_moments(self):
        X = np.random.default_rng(0).normal(2.0, 3.0, (500, 3))
        gmm = train_diag_gmm(X, 1, 3)
        np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(gmm.variances[0], X.var(axis=0), rtol=1e-10)

    def test_two_clusters(self):
        g = np.random.default_rng(1)
        centers = np.array([[-5.0, 0.0], [5.0, 2.0]])
        X = np.concatenate([centers[0] + g.standard_normal((1000, 2)), centers[1] + g.standard_normal((1000, 2))])
        gmm = train_diag_gmm(X, 2, 20)
        order = np.argsort(gmm.means[:, 0])
        np.testing.assert_allclose(gmm.means[order], centers, atol=0.1)

    def test_zero_iterations_returns_the_initialization(self):
        X = np.random.default_rng(2).standard_normal((50, 2))
        a = train_diag_gmm(X, 3, 0, seed=4)
        np.testing.assert_allclose(a.weights, 1.0 / 3)
        np.testing.assert_allclose(a.variances, np.tile(X.var(axis=0), (3, 1)))
        assert len(a.history) == 1

    def test_log_likelihood_nondecreasing(self):
        X = _correlated_frames(2000, 5, seed=3)
        gmm = train_diag_gmm(X, 8, 15)
        h = np.array(gmm.history)
        assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))

    def test_variances_respect_the_floor(self):
        X = np.random.default_rng(4).standard_normal((200, 2))
        X[:100, 1] = 0.0
        gmm = train_diag_gmm(X, 4, 10)
        assert np.all(gmm.variances >= 1e-4 * X.var(axis=0) - 1e-15)
        np.testing.assert_allclose(gmm.weights.sum(), 1.0, atol=1e-8)

    def test_needs_enough_frames(self):
        with pytest.raises(ValueError):
            train_diag_gmm(np.zeros((3, 2)), 4, 1)

    def test_deterministic(self):
        X = _correlated_frames(500, 3)
        a, b = train_diag_gmm(X, 4, 5, seed=9), train_diag_gmm(X, 4, 5, seed=9)
        np.testing.assert_array_equal(a.means, b.means)

    def test_text_round_trip_is_exact(self, tmp_path):
        gmm = train_diag_gmm(_correlated_frames(300, 3), 3, 4)
        write_transform(tmp_path / "gmm.txt", gmm)
        back = read_transform(tmp_path / "gmm.txt")
        np.testing.assert_array_equal(back.means, gmm.means)
        np.testing.assert_array_equal(back.variances, gmm.variances)
        np.testing.assert_array_equal(back.weights, gmm.weights)


class TestSTC:
    def test_zero_iterations_is_identity(self):
        X = _correlated_frames(400, 3)
        stc = estimate_stc(train_diag_gmm(X, 2, 5), X, outer_iters=0)
        np.testing.assert_array_equal(stc.S, np.eye(3))

    def test_uncorrelated_data_gives_a_near_diagonal_transform(self):
        g = np.random.default_rng(5)
        X = g.standard_normal((5000, 4)) * np.array([1.0, 2.0, 0.5, 3.0])
        stc = estimate_stc(train_diag_gmm(X, 1, 5), X, outer_iters=5)
        S = stc.S / np.abs(np.diag(stc.S))[:, None]
        assert np.max(np.abs(S - np.diag(np.diag(S)))) < 0.05

    def test_two_dimensional_correlation_is_reduced(self):
        g = np.random.default_rng(6)
        X = g.multivariate_normal([0.0, 0.0], [[1.0, 0.8], [0.8, 1.0]], size=4000)
        gmm = train_diag_gmm(X, 1, 5)
        stc = estimate_stc(gmm, X, outer_iters=5)
        before = abs(_weighted_cov(X, gmm)[0, 1])
        Y = stc.transform(X)
        after = _weighted_cov(Y, stc.transformed_gmm())
        after = abs(after[0, 1]) / np.sqrt(after[0, 0] * after[1, 1])
        assert after <= 0.5 * before

    def test_objective_nondecreasing_and_decorrelates(self):
        X = _correlated_frames(3000, 5, seed=7)
        gmm = train_diag_gmm(X, 2, 10)
        stc = estimate_stc(gmm, X, outer_iters=6)
        h = np.array(stc.history)
        assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))
        assert abs(np.linalg.det(stc.S)) > 1e-12

        def normalized_mass(Y, model):
            C = _weighted_cov(Y, model)
            d = np.sqrt(np.diag(C))
            return _off_diagonal_mass(C / np.outer(d, d))

        assert normalized_mass(stc.transform(X), stc.transformed_gmm()) < normalized_mass(X, gmm)

    def test_carries_the_gmm_tag(self, tmp_path):
        X = _correlated_frames(400, 3)
        gmm = train_diag_gmm(X, 2, 3)
        stc = estimate_stc(gmm, X, outer_iters=2)
        assert stc.gmm_tag == gmm.checksum()
        write_transform(tmp_path / "stc.txt", stc)
        back = read_transform(tmp_path / "stc.txt")
        assert isinstance(back, STCTransform)
        np.testing.assert_array_equal(back.S, stc.S)
        assert back.gmm_tag == stc.gmm_tag


@pytest.fixture(scope="module")
def model():
    g = np.random.default_rng(8)
    D, K = 4, 6
    return DiagonalGMM(np.full(K, 1.0 / K), g.normal(0.0, 3.0, (K, D)), g.uniform(0.5, 1.5, (K, D)))


class TestFMLLR:
    def test_shift_is_inverted(self, model):
        delta = np.array([1.0, -0.5, 0.3, 0.8])
        X = _sample_gmm(model, 5000, 9) + delta
        t = estimate_fmllr(model, X, iters=10)
        np.testing.assert_allclose(t.A, np.eye(4), atol=0.1)
        np.testing.assert_allclose(t.b, -delta, atol=0.1)

    def test_zero_iterations(self, model):
        t = estimate_fmllr(model, _sample_gmm(model, 100, 1), iters=0)
        np.testing.assert_array_equal(t.A, np.eye(4))
        np.testing.assert_array_equal(t.b, np.zeros(4))

    def test_too_few_frames_gives_identity(self, model):
        t = estimate_fmllr(model, _sample_gmm(model, 3, 1), iters=5)
        np.testing.assert_array_equal(t.A, np.eye(4))

    def test_matched_data_gains_little(self, model):
        X = _sample_gmm(model, 5000, 10)
        t = estimate_fmllr(model, X, iters=5)
        base = fmllr_objective(model, X, np.eye(4), np.zeros(4))
        gain = t.objective_history[-1] - base
        assert 0.0 <= gain < 0.01 * abs(base)

    def test_auxiliary_and_likelihood_nondecreasing(self, model):
        g = np.random.default_rng(11)
        A = np.eye(4) + 0.2 * g.standard_normal((4, 4))
        X = _sample_gmm(model, 3000, 12) @ A.T + 0.5
        t = estimate_fmllr(model, X, iters=6)
        for sweep in t.aux_history:
            s = np.array(sweep)
            assert np.all(np.diff(s) >= -1e-6 * np.abs(s[:-1]))
        h = np.array(t.objective_history)
        assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))
        assert t.objective_history[-1] >= t.objective_history[0]

    def test_text_round_trip(self, model, tmp_path):
        t = estimate_fmllr(model, _sample_gmm(model, 500, 2) + 1.0, iters=2, speaker_id="spk7")
        write_transform(tmp_path / "f.txt", t)
        back = read_transform(tmp_path / "f.txt")
        assert back.speaker_id == "spk7"
        np.testing.assert_array_equal(back.A, t.A)
        np.testing.assert_array_equal(back.b, t.b)


def _stc(S):
    D = S.shape[0]
    return STCTransform(S, np.ones((1, D)), np.zeros((1, D)), np.ones(1))


class TestAdaptFeatures:
    def test_identity_chain_is_exact(self):
        X = np.random.default_rng(0).standard_normal((7, 3))
        out = adapt_features(X, _stc(np.eye(3)), FMLLRTransform.identity("s", 3))
        np.testing.assert_array_equal(out, X)

    def test_offset_on_first_dimension(self):
        X = np.random.default_rng(1).standard_normal((5, 3))
        out = adapt_features(X, _stc(np.eye(3)), FMLLRTransform("s", np.eye(3), np.array([1.0, 0.0, 0.0])))
        expected = X.copy()
        expected[:, 0] += 1.0
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_matches_explicit_matrix_chain(self):
        g = np.random.default_rng(2)
        D = 5
        S = np.eye(D) + 0.3 * g.standard_normal((D, D))
        A = np.eye(D) + 0.3 * g.standard_normal((D, D))
        b = g.standard_normal(D)
        X = g.standard_normal((20, D))
        S_inv = np.linalg.inv(S)
        expected = np.array([S_inv @ (A @ (S @ f) + b) for f in X])
        out = adapt_features(X, _stc(S), FMLLRTransform("s", A, b))
        np.testing.assert_allclose(out, expected, atol=1e-10)
        back = unadapt_features(out, _stc(S), FMLLRTransform("s", A, b))
        np.testing.assert_allclose(back, X, atol=1e-8)

    def test_utterance_deltas_are_recomputed(self):
        g = np.random.default_rng(3)
        static = g.standard_normal((12, 3))
        utt = UtteranceFeatures("u", "spk", compute_deltas(static))
        fm = FMLLRTransform("spk", 2.0 * np.eye(3), np.ones(3))
        out = adapt_utterance(utt, _stc(np.eye(3)), fm)
        np.testing.assert_allclose(out.frames, compute_deltas(2.0 * static + 1.0), atol=1e-12)

    def test_speaker_mismatch(self):
        utt = UtteranceFeatures("u", "a", np.zeros((4, 2, 1)))
        with pytest.raises(ValueError, match="speaker"):
            adapt_utterance(utt, _stc(np.eye(2)), FMLLRTransform.identity("b", 2))
