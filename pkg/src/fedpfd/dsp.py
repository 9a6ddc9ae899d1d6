"""Feature extraction from vibration records.

Produces the nine model inputs (raw signal, magnitude spectrum and Morlet
scalogram for each of three channels) plus the 12-per-channel condition
index vector used for clustering machines.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, SizeError

TIME_INDEX_NAMES = ("peak", "rms", "kurtosis", "skewness", "crest_factor", "impulse_factor")
ORDERS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
FREQ_INDEX_NAMES = tuple(f"amp_{k:g}X" for k in ORDERS)
INDEX_NAMES = TIME_INDEX_NAMES + FREQ_INDEX_NAMES

MORLET_W0 = 6.0
_EPS = 1e-12


class DegenerateSignalWarning(UserWarning):
    """Emitted when a signal has no energy and its indices are zeroed."""


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    """Input sizes for one model/feature configuration."""

    name: str
    signal_lengths: tuple[int, ...]
    spectrum_bins: tuple[int, ...]
    scalogram_shapes: tuple[tuple[int, int], ...]

    @property
    def n_channels(self) -> int:
        return len(self.signal_lengths)

    def input_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample shapes of the nine model inputs, in model order."""
        shapes: dict[str, tuple[int, ...]] = {}
        for c, n in enumerate(self.signal_lengths):
            shapes[f"signal{c}"] = (1, n)
        for c, f in enumerate(self.spectrum_bins):
            shapes[f"spectrum{c}"] = (1, f)
        for c, (s, t) in enumerate(self.scalogram_shapes):
            shapes[f"scalogram{c}"] = (1, s, t)
        return shapes


DESK = Profile("desk", (1024, 1024, 1024), (512, 512, 512), ((16, 64),) * 3)
PAPER = Profile("paper-shape", (4096, 8192, 16384), (128, 128, 256),
                ((128, 128), (256, 256), (384, 384)))
PROFILES = {DESK.name: DESK, PAPER.name: PAPER}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        from .errors import ConfigurationError
        raise ConfigurationError(f"unknown profile {name!r}; known: {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------
# Indices
# ---------------------------------------------------------------------------


def time_indices(signal: np.ndarray) -> np.ndarray:
    """Peak, RMS, kurtosis, skewness, crest and impulse factor.

    Moments are taken about zero (vibration signals are AC), with the biased
    1/n normalisation: kurtosis = m4/m2**2, skewness = m3/m2**1.5.
    An all-zero signal yields six zeros and a :class:`DegenerateSignalWarning`.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 8:
        raise SizeError(f"time_indices needs a 1-d signal of length >= 8, got shape {x.shape}")
    ax = np.abs(x)
    peak = ax.max()
    if peak <= 0:
        warnings.warn("all-zero signal: indices set to 0", DegenerateSignalWarning, stacklevel=2)
        return np.zeros(6)
    x2 = x * x
    m2 = x2.mean()
    m3 = (x2 * x).mean()
    m4 = (x2 * x2).mean()
    rms = np.sqrt(m2)
    mean_abs = ax.mean()
    return np.array([
        peak,
        rms,
        m4 / max(m2 * m2, _EPS),
        m3 / max(m2 ** 1.5, _EPS),
        peak / max(rms, _EPS),
        peak / max(mean_abs, _EPS),
    ])


def _check_pow2(n: int) -> None:
    if n < 2 or n & (n - 1):
        raise SizeError(f"signal length {n} is not a power of two")


def dft_magnitudes(signal: np.ndarray) -> np.ndarray:
    """Unnormalised two-sided DFT magnitudes |X_k|, k = 0..L-1."""
    x = np.asarray(signal, dtype=np.float64)
    _check_pow2(x.size)
    return np.abs(np.fft.fft(x))


@dataclass(frozen=True)
class Spectrum:
    magnitudes: np.ndarray
    bin_width: float

    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.size) * self.bin_width


def spectrum(signal: np.ndarray, sampling_rate: float) -> Spectrum:
    """One-sided amplitude spectrum with L/2 bins.

    Scaled by 2/L (1/L at DC) so a unit sinusoid centred on a bin reads 1.0.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise SizeError("spectrum expects a 1-d signal")
    n = x.size
    _check_pow2(n)
    mags = np.abs(np.fft.rfft(x))[: n // 2] * (2.0 / n)
    mags[0] *= 0.5
    return Spectrum(mags, sampling_rate / n)


def freq_indices(spec: Spectrum, rotating_freq: float, half_window: int = 2) -> np.ndarray:
    """Amplitudes at 0.5X, 1X, ..., 5X: max magnitude within +-2 bins."""
    if not rotating_freq > 0:
        raise DomainError(f"rotating frequency must be positive, got {rotating_freq}")
    mags = spec.magnitudes
    n = mags.size
    nyquist = n * spec.bin_width
    if 5 * rotating_freq >= nyquist:
        raise DomainError(f"5X = {5 * rotating_freq} Hz is not below Nyquist {nyquist} Hz")
    out = np.empty(len(ORDERS))
    for i, k in enumerate(ORDERS):
        centre = int(round(k * rotating_freq / spec.bin_width))
        lo, hi = max(centre - half_window, 0), min(centre + half_window + 1, n)
        out[i] = mags[lo:hi].max()
    return out


def index_vector(channels: Sequence[np.ndarray], sampling_rates: Sequence[float],
                 rotating_freq: float) -> np.ndarray:
    """12 indices per channel, concatenated channel by channel."""
    parts = []
    for x, fs in zip(channels, sampling_rates):
        parts.append(time_indices(x))
        parts.append(freq_indices(spectrum(x, fs), rotating_freq))
    return np.concatenate(parts)


def index_names(n_channels: int) -> list[str]:
    return [f"ch{c}_{name}" for c in range(n_channels) for name in INDEX_NAMES]


def write_index_csv(path: str | Path, machine_ids: Sequence[int], indices: np.ndarray) -> None:
    """Debug dump: one row per record, header with index names."""
    indices = np.atleast_2d(indices)
    n_channels = indices.shape[1] // len(INDEX_NAMES)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["machine_id"] + index_names(n_channels))
        for mid, row in zip(machine_ids, indices):
            writer.writerow([mid] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Continuous wavelet transform
# ---------------------------------------------------------------------------


def morlet_scales(n_scales: int, sampling_rate: float, f_min: float, f_max: float,
                  w0: float = MORLET_W0) -> tuple[np.ndarray, np.ndarray]:
    """Geometric scales (in seconds) whose Fourier frequencies span [f_min, f_max].

    Returns ``(scales, frequencies)`` ordered from high to low frequency.
    """
    if n_scales < 4:
        raise SizeError(f"need at least 4 scales, got {n_scales}")
    if not 0 < f_min < f_max:
        raise DomainError(f"invalid frequency range [{f_min}, {f_max}]")
    freqs = np.geomspace(f_max, f_min, n_scales)
    # Fourier period of the Morlet wavelet (Torrence & Compo 1998, table 1)
    fourier_factor = 4 * np.pi / (w0 + np.sqrt(2 + w0 ** 2))
    scales = 1.0 / (fourier_factor * freqs)
    return scales, freqs


def _pool_time(mat: np.ndarray, out_len: int) -> np.ndarray:
    n = mat.shape[-1]
    if n % out_len:
        raise SizeError(f"cannot average-pool length {n} to {out_len}")
    return mat.reshape(*mat.shape[:-1], out_len, n // out_len).mean(axis=-1)


def cwt(signal: np.ndarray, sampling_rate: float, n_scales: int, f_min: float, f_max: float,
        out_len: int | None = None, w0: float = MORLET_W0) -> np.ndarray:
    """Morlet CWT magnitude, shape ``(n_scales, out_len)``.

    Computed in the frequency domain with the analytic Morlet wavelet
    (Torrence & Compo normalisation).  The time axis is average-pooled down
    to ``out_len`` samples.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = x.size
    _check_pow2(n)
    scales, _ = morlet_scales(n_scales, sampling_rate, f_min, f_max, w0)
    dt = 1.0 / sampling_rate
    omega = 2 * np.pi * np.fft.fftfreq(n, d=dt)
    pos = omega > 0
    arg = scales[:, None] * omega[None, pos]
    daughter = np.zeros((n_scales, n))
    daughter[:, pos] = (np.pi ** -0.25) * np.sqrt(2 * np.pi * scales[:, None] / dt) \
        * np.exp(-0.5 * (arg - w0) ** 2)
    coeffs = np.fft.ifft(np.fft.fft(x)[None, :] * daughter, axis=1)
    mag = np.abs(coeffs)
    if out_len is not None and out_len != n:
        mag = _pool_time(mag, out_len)
    return mag


def scalogram_band(sampling_rate: float, rotating_freq: float) -> tuple[float, float]:
    """Frequency band covered by the scalogram: [rotating/2, Nyquist/2]."""
    return rotating_freq / 2.0, sampling_rate / 4.0


# ---------------------------------------------------------------------------
# Featurisation
# ---------------------------------------------------------------------------


def _resample_bins(mags: np.ndarray, bins: int) -> np.ndarray:
    # Max-pool the one-sided spectrum down to the profile's bin count.
    n = mags.size
    if bins == n:
        return mags
    if n % bins:
        raise SizeError(f"cannot reduce {n} spectrum bins to {bins}")
    return mags.reshape(bins, n // bins).max(axis=1)


@dataclass
class FeatureBundle:
    """Features of one record, before normalisation."""

    signals: list[np.ndarray]
    spectra: list[np.ndarray]
    scalograms: list[np.ndarray]
    indices: np.ndarray

    def model_inputs(self) -> list[np.ndarray]:
        return list(self.signals) + list(self.spectra) + list(self.scalograms)


def featurize_channels(channels: Sequence[np.ndarray], sampling_rates: Sequence[float],
                       rotating_freq: float, profile: Profile) -> FeatureBundle:
    if len(channels) != profile.n_channels:
        raise SizeError(f"profile {profile.name} expects {profile.n_channels} channels, "
                        f"got {len(channels)}")
    signals, spectra, scalograms = [], [], []
    for c, (x, fs) in enumerate(zip(channels, sampling_rates)):
        x = np.asarray(x, dtype=np.float64)
        if x.size != profile.signal_lengths[c]:
            raise SizeError(f"channel {c}: length {x.size} != profile {profile.signal_lengths[c]}")
        spec = spectrum(x, fs)
        s, t = profile.scalogram_shapes[c]
        f_lo, f_hi = scalogram_band(fs, rotating_freq)
        signals.append(x)
        spectra.append(_resample_bins(spec.magnitudes, profile.spectrum_bins[c]))
        scalograms.append(cwt(x, fs, s, f_lo, f_hi, out_len=t))
    return FeatureBundle(signals, spectra, scalograms,
                         index_vector(channels, sampling_rates, rotating_freq))


def featurize(record, sampling_rates: Sequence[float], profile: Profile) -> FeatureBundle:
    """Raw (un-normalised) features of one :class:`~fedpfd.synth.VibrationRecord`."""
    return featurize_channels(record.channels, sampling_rates, record.rotating_freq, profile)


@dataclass
class FeatureTable:
    """Stacked features of many records, one array per model input.

    ``inputs[i]`` has shape ``(R, *input_shape_i)``.  Arrays are float32.
    """

    inputs: list[np.ndarray]
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    def take(self, rows) -> "FeatureTable":
        rows = np.asarray(rows, dtype=np.intp)
        return FeatureTable([a[rows] for a in self.inputs], self.indices[rows])


def stack_bundles(bundles: Sequence[FeatureBundle]) -> FeatureTable:
    if not bundles:
        raise SizeError("no feature bundles to stack")
    n_inputs = len(bundles[0].model_inputs())
    inputs = []
    for i in range(n_inputs):
        arr = np.stack([b.model_inputs()[i] for b in bundles]).astype(np.float32)
        inputs.append(arr[:, None])  # add the channel axis
    return FeatureTable(inputs, np.stack([b.indices for b in bundles]))


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-score parameters for each model input."""

    means: tuple[np.ndarray, ...]
    stds: tuple[np.ndarray, ...]

    def apply(self, table: FeatureTable) -> FeatureTable:
        inputs = [((a - m) / s).astype(np.float32)
                  for a, m, s in zip(table.inputs, self.means, self.stds)]
        return FeatureTable(inputs, table.indices)


def fit_normalization(table: FeatureTable, rows=None) -> NormStats:
    """Per-dimension mean/std over ``rows`` (training records only).

    Dimensions with zero spread keep unit scale.
    """
    means, stds = [], []
    for a in table.inputs:
        sub = a if rows is None else a[np.asarray(rows)]
        m = sub.mean(axis=0, dtype=np.float64)
        s = sub.std(axis=0, dtype=np.float64)
        s[s <= 1e-12] = 1.0
        means.append(m.astype(np.float32))
        stds.append(s.astype(np.float32))
    return NormStats(tuple(means), tuple(stds))


def featurize_records(records: Sequence, sampling_rates: Sequence[float],
                      profile: Profile) -> FeatureTable:
    """Stack the raw features of many records into one table."""
    return stack_bundles([featurize(r, sampling_rates, profile) for r in records])
