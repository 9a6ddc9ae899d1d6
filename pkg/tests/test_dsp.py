"""Tests for indices, spectra, scalograms and featurisation."""


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpfd.dsp import (DESK, INDEX_NAMES, PAPER, DegenerateSignalWarning, Spectrum, cwt,
                        dft_magnitudes, featurize, featurize_records, fit_normalization,
                        freq_indices, get_profile, index_names, scalogram_band, spectrum,
                        time_indices, write_index_csv)
from fedpfd.errors import ConfigurationError, DomainError, SizeError
from fedpfd.synth import DESK_CHANNELS, FAULT_TYPES, MachineSpec, synthesize_record

FS = 2048.0
N = 1024


def tone(freq, amp=1.0, n=N, fs=FS, phase=0.0):
    t = np.arange(n) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


class TestTimeIndices:
    def test_sine_closed_form(self):
        x = tone(64.0, amp=2.0)   # 32 whole periods
        peak, rms, kurt, skew, crest, impulse = time_indices(x)
        assert peak == pytest.approx(2.0, abs=1e-9)
        assert rms == pytest.approx(2 / np.sqrt(2), abs=1e-9)
        assert crest == pytest.approx(np.sqrt(2), abs=1e-9)
        assert kurt == pytest.approx(1.5, abs=1e-2)
        assert skew == pytest.approx(0.0, abs=1e-2)
        # 32 samples per period: mean |sin| over one sampled period
        mean_abs = 2.0 * np.mean(np.abs(np.sin(2 * np.pi * np.arange(32) / 32)))
        assert impulse == pytest.approx(2.0 / mean_abs, rel=1e-9)

    def test_moments_against_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(500) ** 3
        m2 = sum(v * v for v in x) / len(x)
        m3 = sum(v ** 3 for v in x) / len(x)
        m4 = sum(v ** 4 for v in x) / len(x)
        got = time_indices(x)
        assert got[2] == pytest.approx(m4 / m2 ** 2, rel=1e-10)
        assert got[3] == pytest.approx(m3 / m2 ** 1.5, rel=1e-10)

    def test_constant_signal(self):
        peak, rms, kurt, skew, crest, impulse = time_indices(np.full(64, 3.0))
        assert (peak, rms) == pytest.approx((3.0, 3.0))
        assert (crest, impulse, kurt) == pytest.approx((1.0, 1.0, 1.0))

    def test_zero_signal_degenerate(self):
        with pytest.warns(DegenerateSignalWarning):
            out = time_indices(np.zeros(32))
        assert np.array_equal(out, np.zeros(6))

    def test_too_short(self):
        with pytest.raises(SizeError):
            time_indices(np.ones(4))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 10_000))
    def test_scaling(self, alpha, seed):
        x = np.random.default_rng(seed).standard_normal(256)
        a, b = time_indices(x), time_indices(alpha * x)
        np.testing.assert_allclose(b[:2], alpha * a[:2], rtol=1e-10)
        np.testing.assert_allclose(b[2:], a[2:], rtol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariants(self, seed):
        x = np.random.default_rng(seed).standard_normal(128)
        peak, rms, kurt, skew, crest, impulse = time_indices(x)
        assert peak >= rms > 0
        assert crest >= 1 and impulse >= crest


class TestSpectrum:
    def test_bin_centred_unit_tone(self):
        f = 50 * FS / N   # bin 50
        sp = spectrum(tone(f), FS)
        assert sp.magnitudes.size == N // 2
        assert sp.bin_width == FS / N
        assert sp.magnitudes[50] == pytest.approx(1.0, abs=1e-6)
        others = np.delete(sp.magnitudes, 50)
        assert others.max() <= 1e-6

    def test_zero(self):
        assert not spectrum(np.zeros(64), 100.0).magnitudes.any()

    def test_superposition(self):
        a, b = tone(20 * FS / N, 0.7), tone(90 * FS / N, 1.3, phase=0.4)
        sp = spectrum(a + b, FS)
        assert sp.magnitudes[20] == pytest.approx(0.7, abs=1e-9)
        assert sp.magnitudes[90] == pytest.approx(1.3, abs=1e-9)

    def test_against_direct_dft(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(64)
        k = np.arange(64)
        direct = np.array([abs(np.sum(x * np.exp(-2j * np.pi * j * k / 64))) for j in range(32)])
        expect = direct * 2 / 64
        expect[0] /= 2
        np.testing.assert_allclose(spectrum(x, 1.0).magnitudes, expect, atol=1e-12)

    def test_parseval(self):
        x = np.random.default_rng(2).standard_normal(N)
        mags = dft_magnitudes(x)
        assert np.sum(mags ** 2) / N == pytest.approx(np.sum(x ** 2), rel=1e-6)

    def test_non_power_of_two(self):
        with pytest.raises(SizeError):
            spectrum(np.ones(1000), FS)


class TestFreqIndices:
    def test_unit_sine_at_1x(self):
        fr = 50 * FS / N / 1.0   # put 1X on a bin
        sp = spectrum(tone(fr), FS)
        amps = freq_indices(sp, fr)
        assert amps[1] == pytest.approx(1.0, abs=1e-6)
        assert np.delete(amps, 1).max() <= 1e-6

    def test_zero_spectrum(self):
        sp = Spectrum(np.zeros(512), 2.0)
        assert not freq_indices(sp, 50.0).any()

    def test_window_is_plus_minus_two_bins(self):
        mags = np.zeros(512)
        mags[25 + 2] = 0.5   # inside the window of 1X (bin 25)
        mags[50 + 3] = 0.9   # outside the window of 2X (bin 50)
        amps = freq_indices(Spectrum(mags, 2.0), 50.0)
        assert amps[1] == 0.5 and amps[2] == 0.0

    def test_bad_rotating_frequency(self):
        sp = Spectrum(np.zeros(16), 1.0)
        with pytest.raises(DomainError):
            freq_indices(sp, 0.0)
        with pytest.raises(DomainError):
            freq_indices(sp, 4.0)   # 5X = 20 Hz >= Nyquist 16 Hz

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([0.5, 1, 2, 3, 4, 5]), st.floats(0.01, 5.0), st.integers(0, 999))
    def test_monotone_under_added_tone(self, k, amp, seed):
        fr = 40.0
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(N) * 0.1
        i = [0.5, 1, 2, 3, 4, 5].index(k)
        base = freq_indices(spectrum(x, FS), fr)[i]
        b = round(k * fr / (FS / N))
        # in phase with the bin's current content; an opposed tone could cancel it
        phase = np.angle(np.fft.rfft(x)[b]) + np.pi / 2
        bumped = freq_indices(spectrum(x + tone(b * FS / N, amp, phase=phase), FS), fr)[i]
        assert bumped >= base - 1e-12


class TestCwt:
    def test_zero(self):
        assert not cwt(np.zeros(256), 1000.0, 8, 10.0, 250.0).any()

    def test_positive_homogeneity(self):
        x = np.random.default_rng(0).standard_normal(256)
        np.testing.assert_allclose(cwt(3.5 * x, 1000.0, 8, 10, 250, 32),
                                   3.5 * cwt(x, 1000.0, 8, 10, 250, 32), rtol=1e-10)

    def test_tone_peaks_at_matching_scale(self):
        fs, f0 = 1024.0, 100.0
        mag = cwt(tone(f0, n=1024, fs=fs), fs, 16, 10.0, 256.0)
        freqs = np.geomspace(256.0, 10.0, 16)
        row = np.argmax(mag[:, 256:768].mean(axis=1))
        assert abs(np.log(freqs[row] / f0)) <= np.log(256 / 10) / 15   # within one scale step

    def test_shape_and_sign(self):
        mag = cwt(np.random.default_rng(1).standard_normal(1024), 4000.0, 16, 25.0, 1000.0, 64)
        assert mag.shape == (16, 64) and (mag >= 0).all()

    def test_bearing_localisation(self):
        spec = MachineSpec(1, 1, 0, 50.0, 1.0, 1)
        fs = DESK_CHANNELS[2].sampling_rate
        lab_b = np.array([int(f == "bearing") for f in FAULT_TYPES])
        h = synthesize_record(spec, DESK_CHANNELS, np.zeros(4), 11).channels[2]
        b = synthesize_record(spec, DESK_CHANNELS, lab_b, 11).channels[2]
        lo, hi = scalogram_band(fs, 50.0)
        sh, sb = cwt(h, fs, 16, lo, hi, 64), cwt(b, fs, 16, lo, hi, 64)
        top = slice(0, 4)   # highest-frequency rows
        assert sb[top].var(axis=1).mean() > sh[top].var(axis=1).mean()

    def test_too_few_scales(self):
        with pytest.raises(SizeError):
            cwt(np.ones(64), 100.0, 3, 1.0, 20.0)


class TestFeaturize:
    def _records(self, n=6):
        spec = MachineSpec(1, 1, 0, 50.0, 1.0, n, {"bearing": 0.5})
        rng = np.random.default_rng(0)
        return [synthesize_record(spec, DESK_CHANNELS, (rng.random(4) < 0.3).astype(int), s)
                for s in range(n)]

    def test_bundle_matches_profile(self):
        rates = [c.sampling_rate for c in DESK_CHANNELS]
        b = featurize(self._records(1)[0], rates, DESK)
        shapes = [x.shape for x in b.model_inputs()]
        assert shapes == [(1024,)] * 3 + [(512,)] * 3 + [(16, 64)] * 3
        assert b.indices.shape == (36,)

    def test_deterministic(self):
        rates = [c.sampling_rate for c in DESK_CHANNELS]
        rec = self._records(1)[0]
        a, b = featurize(rec, rates, DESK), featurize(rec, rates, DESK)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.model_inputs(), b.model_inputs()))

    def test_normalisation_on_training_rows(self):
        rates = [c.sampling_rate for c in DESK_CHANNELS]
        table = featurize_records(self._records(8), rates, DESK)
        rows = np.arange(6)
        normed = fit_normalization(table, rows).apply(table).take(rows)
        for a in normed.inputs:
            m, s = a.mean(axis=0), a.std(axis=0)
            assert np.abs(m).max() <= 0.05
            live = s > 0
            assert np.abs(s[live] - 1).max() <= 0.05

    def test_channel_count_checked(self):
        rec = self._records(1)[0]
        rec.channels = rec.channels[:2]
        with pytest.raises(SizeError):
            featurize(rec, [2000.0, 4000.0], DESK)

    def test_profiles(self):
        assert get_profile("desk") is DESK
        assert PAPER.input_shapes()["scalogram2"] == (1, 384, 384)
        with pytest.raises(ConfigurationError):
            get_profile("huge")

    def test_index_csv(self, tmp_path):
        path = tmp_path / "idx.csv"
        write_index_csv(path, [1, 2], np.arange(72, dtype=float).reshape(2, 36))
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[1:] == index_names(3)
        assert len(index_names(1)) == len(INDEX_NAMES) == 12
        assert len(lines) == 3
