import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acoustic_cnn import features
from acoustic_cnn.features import (FilterbankConfig, NormalizationStats, UtteranceFeatures, append_energy,
                                   apply_warp, compute_deltas, mel_filterbank, normalize_corpus, remove_energy,
                                   splice_context)


def _oracle_edges(num_filters, warp, lo=0.0, hi=8000.0, nyquist=8000.0):
    """Warped filter edges from scratch: mel spacing, then the piecewise-linear warp."""
    m_lo = 2595.0 * np.log10(1.0 + lo / 700.0)
    m_hi = 2595.0 * np.log10(1.0 + hi / 700.0)
    hz = 700.0 * (10.0 ** (np.linspace(m_lo, m_hi, num_filters + 2) / 2595.0) - 1.0)
    knee = 0.8 * nyquist
    out = []
    for f in hz:
        if f <= knee:
            out.append(warp * f)
        else:
            out.append(warp * knee + (nyquist - warp * knee) * (f - knee) / (nyquist - knee))
    return np.array(out)


def _oracle_centers(num_filters, warp):
    return _oracle_edges(num_filters, warp)[1:-1]


def _oracle_filterbank(spectrum, config):
    """Direct triangular-weight summation, one filter and one bin at a time."""
    edges = _oracle_edges(config.num_filters, config.warp_factor, *config.freq_range, config.nyquist)
    freqs = np.linspace(0.0, config.nyquist, config.fft_bins)
    out = []
    for m in range(config.num_filters):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        weights = []
        for f in freqs:
            if left < f <= center:
                weights.append((f - left) / (center - left))
            elif center < f < right:
                weights.append((right - f) / (right - center))
            else:
                weights.append(0.0)
        weights = np.array(weights)
        out.append(np.log(np.dot(weights / weights.sum(), spectrum) + 1e-10))
    return np.array(out)


class TestFilterbank:
    def test_flat_spectrum_gives_equal_energies(self):
        config = FilterbankConfig(num_filters=3, fft_bins=65)
        out = mel_filterbank(np.ones((2, 65)), config)
        np.testing.assert_allclose(out, 0.0, atol=1e-9)
        assert out.shape == (2, 3)

    def test_zero_spectrum_hits_the_floor(self):
        config = FilterbankConfig(num_filters=5, fft_bins=65)
        out = mel_filterbank(np.zeros((1, 65)), config)
        np.testing.assert_array_equal(out, np.log(1e-10))

    @pytest.mark.parametrize("m", [0, 7, 19])
    def test_tone_at_filter_center_peaks_in_that_filter(self, m):
        config = FilterbankConfig(num_filters=20, fft_bins=513)
        freqs = config.bin_frequencies()
        center = config.edge_frequencies()[m + 1]
        spectrum = np.zeros(513)
        spectrum[np.argmin(np.abs(freqs - center))] = 1.0
        out = mel_filterbank(spectrum[None], config)[0]
        assert np.argmax(out) == m
        assert np.sum(out == out.max()) == 1
        np.testing.assert_allclose(out, _oracle_filterbank(spectrum, config), rtol=1e-6)

    def test_matches_direct_summation_on_random_spectra(self):
        config = FilterbankConfig(num_filters=12, fft_bins=129, warp_factor=0.93)
        spectrum = np.random.default_rng(3).gamma(2.0, size=129)
        np.testing.assert_allclose(mel_filterbank(spectrum[None], config)[0],
                                   _oracle_filterbank(spectrum, config), rtol=1e-9)

    def test_rejects_bad_input(self):
        config = FilterbankConfig(num_filters=4, fft_bins=33)
        with pytest.raises(ValueError, match="expected"):
            mel_filterbank(np.ones((2, 32)), config)
        bad = np.ones((2, 33))
        bad[0, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            mel_filterbank(bad, config)
        with pytest.raises(ValueError, match="nonnegative"):
            mel_filterbank(-bad[1:], config)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FilterbankConfig(num_filters=0)
        with pytest.raises(ValueError):
            FilterbankConfig(freq_range=(4000.0, 3000.0))
        with pytest.raises(ValueError):
            FilterbankConfig(warp_factor=1.3)

    def test_filters_have_contiguous_support(self):
        for warp in (0.8, 1.0, 1.2):
            w = FilterbankConfig(num_filters=40, fft_bins=257, warp_factor=warp).weights()
            for row in w:
                nz = np.flatnonzero(row)
                assert nz.size > 0
                assert nz[-1] - nz[0] + 1 == nz.size

    def test_interior_points_are_covered_by_two_filters(self):
        config = FilterbankConfig(num_filters=10, fft_bins=257)
        edges = config.edge_frequencies()
        w = config.weights()
        freqs = config.bin_frequencies()
        inside = (freqs > edges[1]) & (freqs < edges[-2])
        covered = (w[:, inside] > 0).sum(axis=0)
        on_center = np.isin(freqs[inside], edges)
        assert np.all(covered[~on_center] == 2)


class TestWarp:
    def test_identity_warp_is_bit_identical(self):
        config = FilterbankConfig(num_filters=23, fft_bins=257)
        warped = apply_warp(config, 1.0)
        assert warped == config
        np.testing.assert_array_equal(warped.weights(), config.weights())

    def test_out_of_range_factor(self):
        with pytest.raises(ValueError):
            apply_warp(FilterbankConfig(), 0.7)

    def test_warp_fixes_nyquist_and_scales_below_breakpoint(self):
        f = np.array([0.0, 1000.0, 6400.0, 8000.0])
        out = features.vtln_warp(f, 0.9, 8000.0)
        np.testing.assert_allclose(out, [0.0, 900.0, 5760.0, 8000.0])

    def test_centers_match_analytic_warp(self):
        for warp in (0.9, 1.1):
            config = apply_warp(FilterbankConfig(num_filters=20, fft_bins=513), warp)
            np.testing.assert_allclose(config.edge_frequencies()[1:-1], _oracle_centers(20, warp), rtol=1e-4)

    def test_tone_peak_moves_to_the_predicted_filter(self):
        base = FilterbankConfig(num_filters=20, fft_bins=1025)
        freqs = base.bin_frequencies()
        tone_hz = base.edge_frequencies()[12]
        spectrum = np.zeros(1025)
        spectrum[np.argmin(np.abs(freqs - tone_hz))] = 1.0
        peaks = {}
        for warp in (0.9, 1.1):
            out = mel_filterbank(spectrum[None], apply_warp(base, warp))[0]
            predicted = int(np.argmin(np.abs(_oracle_centers(20, warp) - tone_hz)))
            assert np.argmax(out) == predicted
            peaks[warp] = predicted
        assert peaks[0.9] != peaks[1.1]
        assert peaks[0.9] > 11 > peaks[1.1]


def _direct_delta(x, window=2):
    T = x.shape[0]
    out = np.zeros_like(x)
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    for t in range(T):
        acc = np.zeros(x.shape[1:])
        for n in range(1, window + 1):
            acc += n * (x[min(t + n, T - 1)] - x[max(t - n, 0)])
        out[t] = acc / denom
    return out


class TestDeltas:
    def test_constant_signal_has_zero_deltas(self):
        out = compute_deltas(np.full((7, 4), 2.5))
        np.testing.assert_array_equal(out[:, :, 1:], 0.0)
        np.testing.assert_array_equal(out[:, :, 0], 2.5)

    def test_linear_ramp(self):
        t = np.arange(20, dtype=float)
        out = compute_deltas(np.stack([0.5 * t, -2.0 * t], axis=1))
        np.testing.assert_allclose(out[2:-2, 0, 1], 0.5)
        np.testing.assert_allclose(out[2:-2, 1, 1], -2.0)
        np.testing.assert_allclose(out[4:-4, :, 2], 0.0, atol=1e-12)

    def test_random_input_matches_regression_formula(self):
        x = np.random.default_rng(0).standard_normal((5, 6))
        out = compute_deltas(x)
        d = _direct_delta(x)
        np.testing.assert_allclose(out[:, :, 1], d, atol=1e-12)
        np.testing.assert_allclose(out[:, :, 2], _direct_delta(d), atol=1e-12)

    def test_window_validation(self):
        with pytest.raises(ValueError):
            compute_deltas(np.zeros((3, 2)), window=0)
        with pytest.raises(ValueError):
            compute_deltas(np.zeros((0, 2)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)),
           arrays(np.float64, (6, 3), elements=st.floats(-10, 10)),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, x, y, a, b):
        lhs = compute_deltas(a * x + b * y)
        rhs = a * compute_deltas(x) + b * compute_deltas(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestEnergy:
    def test_appends_one_row(self):
        frames = np.zeros((2, 4))
        out = append_energy(frames, [1.0, 2.0])
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out[:, -1], [1.0, 2.0])

    def test_empty_utterance(self):
        out = append_energy(np.zeros((0, 4, 1)), np.zeros(0))
        assert out.shape == (0, 5, 1)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        frames = rng.standard_normal((9, 4, 1))
        energy = rng.standard_normal(9)
        back, e = remove_energy(append_energy(frames, energy))
        np.testing.assert_array_equal(back, frames)
        np.testing.assert_array_equal(e, energy)

    def test_delta_channels_follow_the_energy(self):
        energy = np.arange(10, dtype=float)
        out = append_energy(compute_deltas(np.zeros((10, 3))), energy)
        np.testing.assert_array_equal(out[:, -1, :], compute_deltas(energy[:, None])[:, 0, :])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            append_energy(np.zeros((3, 2)), [1.0, 2.0])


def _utt(i, frames, labels=None):
    return UtteranceFeatures(f"u{i}", "s", frames, labels)


class TestNormalization:
    def test_hand_example(self):
        corpus = [_utt(0, np.array([[-1.0]])), _utt(1, np.array([[3.0]]))]
        out, stats = normalize_corpus(corpus)
        np.testing.assert_allclose(stats.mean, [[1.0]])
        np.testing.assert_allclose(np.sqrt(stats.variance), [[2.0]])
        np.testing.assert_allclose([u.frames[0, 0, 0] for u in out], [-1.0, 1.0])

    def test_moments_by_recomputation(self):
        rng = np.random.default_rng(4)
        corpus = [_utt(i, rng.normal(3.0, 2.0, (30 + i, 5, 3))) for i in range(6)]
        out, _ = normalize_corpus(corpus)
        data = np.concatenate([u.frames for u in out])
        np.testing.assert_allclose(data.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(data.var(axis=0), 1.0, atol=1e-3)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        out, _ = normalize_corpus([_utt(i, rng.normal(1.0, 4.0, (40, 3))) for i in range(3)])
        again, stats = normalize_corpus(out)
        for a, b in zip(out, again):
            np.testing.assert_allclose(a.frames, b.frames, atol=1e-6)
        np.testing.assert_allclose(stats.mean, 0.0, atol=1e-6)

    def test_constant_dimension_is_left_unscaled(self, caplog):
        frames = np.ones((10, 2))
        frames[:, 1] = np.arange(10)
        out, stats = normalize_corpus([_utt(0, frames)])
        assert stats.constant[0, 0] and not stats.constant[1, 0]
        np.testing.assert_array_equal(out[0].frames[:, 0, 0], 0.0)
        assert "zero-variance" in caplog.text

    def test_stats_text_round_trip(self):
        rng = np.random.default_rng(6)
        _, stats = normalize_corpus([_utt(0, rng.standard_normal((20, 4, 3)))])
        back = NormalizationStats.from_text(stats.to_text())
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.variance, stats.variance)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            normalize_corpus([])


class TestSplice:
    def test_context_zero(self):
        x = np.random.default_rng(0).standard_normal((6, 4, 3))
        out = splice_context(x, 0)
        assert out.shape == (6, 1, 4, 3)
        np.testing.assert_array_equal(out[:, 0], x)

    def test_nine_frame_windows(self):
        x = np.arange(12, dtype=float)[:, None, None] * np.ones((12, 2, 1))
        out = splice_context(x, 4)
        assert out.shape == (12, 9, 2, 1)
        np.testing.assert_array_equal(out[6, :, 0, 0], np.arange(2, 11))
        np.testing.assert_array_equal(out[0, :, 0, 0], [0, 0, 0, 0, 0, 1, 2, 3, 4])

    def test_single_frame_is_replicated(self):
        x = np.array([[[1.0], [2.0]]])
        out = splice_context(x, 2)
        assert out.shape == (1, 5, 2, 1)
        for k in range(5):
            np.testing.assert_array_equal(out[0, k], x[0])

    def test_negative_context(self):
        with pytest.raises(ValueError):
            splice_context(np.zeros((2, 2)), -1)


class TestUtteranceFeatures:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            UtteranceFeatures("u", "s", np.array([[np.inf]]))

    def test_label_length(self):
        with pytest.raises(ValueError):
            UtteranceFeatures("u", "s", np.zeros((3, 2)), [0, 1])
