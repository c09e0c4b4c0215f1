"""Signal-processing primitives shared by the target and feature pipelines.

All functions are pure: they never modify their inputs and hold no state
beyond cached filter designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal as sps
from scipy.ndimage import uniform_filter1d

from .errors import DegenerateRange, EmptyInput, InvalidCutoff, RateTooLow

TARGET_RATE_HZ = 100.0
RESAMPLE_CUTOFF_HZ = 45.0
RESAMPLE_TRANSITION_HZ = 10.0
RESAMPLE_ATTEN_DB = 60.0


@dataclass(frozen=True)
class Signal:
    """A mono waveform with its sampling rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"Signal must be 1-D, got shape {x.shape}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise ValueError("Signal contains NaN or Inf")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class Series100:
    """A trace sampled at the fixed 100 Hz target rate."""

    values: np.ndarray
    rate_hz: float = field(default=TARGET_RATE_HZ, init=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Corpus-wide min/max used to map a trace kind onto [-1, 1]."""

    min: float
    max: float

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * (x - self.min) / (self.max - self.min) - 1.0

    def denormalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y + 1.0) * 0.5 * (self.max - self.min) + self.min

    def to_dict(self):
        return {"min": float(self.min), "max": float(self.max)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["min"]), float(d["max"]))


def _require_nonempty(x, name="signal"):
    if x.shape[0] == 0:
        raise EmptyInput(f"{name} is empty")


def highpass(signal: Signal, cutoff_hz: float, order: int = 4) -> Signal:
    """Zero-phase Butterworth high-pass (forward-backward filtering).

    The magnitude response is that of the ``order``-th order Butterworth
    section applied twice, i.e. ``1 / (1 + (fc/f)**(2*order))``.
    """
    nyquist = signal.sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise InvalidCutoff(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")
    x = signal.samples
    if len(x) == 0:
        return signal
    sos = _butter_highpass(order, float(cutoff_hz), float(signal.sample_rate_hz))
    # sosfiltfilt's default pad length exceeds very short inputs
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    y = sps.sosfiltfilt(sos, x, padlen=padlen)
    return Signal(y, signal.sample_rate_hz)


@lru_cache(maxsize=32)
def _butter_highpass(order, cutoff_hz, fs):
    return sps.butter(order, cutoff_hz, btype="highpass", fs=fs, output="sos")


def butterworth_highpass_gain(freq_hz, cutoff_hz, order=4, passes=2):
    """Analytic magnitude of the (possibly forward-backward) Butterworth high-pass."""
    f = np.asarray(freq_hz, dtype=np.float64)
    single = 1.0 / np.sqrt(1.0 + (cutoff_hz / f) ** (2 * order))
    return single**passes


def window_samples(window_ms: float, sample_rate_hz: float) -> int:
    return int(round(window_ms * 1e-3 * sample_rate_hz))


def rms_envelope(signal: Signal, window_ms: float = 25.0) -> Signal:
    """sqrt of the centred rectangular moving average of the squared signal.

    Edges use reflect padding.
    """
    x = signal.samples
    _require_nonempty(x)
    n = window_samples(window_ms, signal.sample_rate_hz)
    if n < 1:
        raise ValueError(f"window of {window_ms} ms is shorter than one sample")
    power = uniform_filter1d(x * x, size=n, mode="reflect")
    # running-sum filters can leave -1e-17 residue on silent stretches
    return Signal(np.sqrt(np.maximum(power, 0.0)), signal.sample_rate_hz)


def hilbert_envelope(signal: Signal) -> Signal:
    """Magnitude of the analytic signal."""
    x = signal.samples
    _require_nonempty(x)
    if len(x) < 2:
        return Signal(np.abs(x), signal.sample_rate_hz)
    return Signal(np.abs(sps.hilbert(x)), signal.sample_rate_hz)


@lru_cache(maxsize=32)
def _lowpass_taps(fs: float) -> np.ndarray:
    nyq = fs / 2.0
    numtaps, beta = sps.kaiserord(RESAMPLE_ATTEN_DB, RESAMPLE_TRANSITION_HZ / nyq)
    numtaps |= 1  # odd length keeps the filter centred (zero delay)
    return sps.firwin(numtaps, RESAMPLE_CUTOFF_HZ, window=("kaiser", beta), fs=fs)


def decimation_indices(n_samples: int, sample_rate_hz: float) -> np.ndarray:
    """Source-sample index of each 100 Hz output frame: ``floor(k * fs / 100 + 0.5)``."""
    fs = float(sample_rate_hz)
    n_out = int(np.floor(n_samples * TARGET_RATE_HZ / fs + 1e-9))
    idx = np.floor(np.arange(n_out) * fs / TARGET_RATE_HZ + 0.5).astype(np.int64)
    return np.minimum(idx, max(n_samples - 1, 0))


def resample_to_100hz(signal: Signal) -> Series100:
    """Low-pass at 45 Hz with a Kaiser-windowed sinc, then pick every
    ``round(k * fs / 100)``-th sample.

    Output length is ``floor(duration_s * 100)``.
    """
    fs = float(signal.sample_rate_hz)
    if fs < 2 * TARGET_RATE_HZ:
        raise RateTooLow(f"sample rate {fs} Hz is below {2 * TARGET_RATE_HZ} Hz")
    x = signal.samples
    idx = decimation_indices(len(x), fs)
    if len(idx) == 0:
        return Series100(np.zeros(0))
    taps = _lowpass_taps(fs)
    half = len(taps) // 2
    padded = np.pad(x, half, mode="reflect") if len(x) > 1 else np.pad(x, half, mode="edge")
    smooth = sps.fftconvolve(padded, taps, mode="valid")
    return Series100(smooth[idx])


def resample_audio(signal: Signal, target_rate_hz: float) -> Signal:
    """Polyphase resampling of audio to ``target_rate_hz``."""
    if signal.sample_rate_hz == target_rate_hz:
        return signal
    ratio = Fraction(target_rate_hz / signal.sample_rate_hz).limit_denominator(10_000)
    y = sps.resample_poly(signal.samples, ratio.numerator, ratio.denominator)
    n_out = int(np.floor(len(signal) * target_rate_hz / signal.sample_rate_hz + 1e-9))
    y = y[:n_out]
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return Signal(y, target_rate_hz)


def minmax_normalize_corpus(series_list):
    """Map every series onto [-1, 1] using the corpus-wide min and max.

    Returns the normalized arrays and the :class:`NormStats` so the same map
    can be applied to held-out data.
    """
    arrays = [np.asarray(getattr(s, "values", s), dtype=np.float64) for s in series_list]
    nonempty = [a for a in arrays if a.size]
    if not nonempty:
        raise EmptyInput("corpus contains no samples")
    lo = min(float(a.min()) for a in nonempty)
    hi = max(float(a.max()) for a in nonempty)
    if not hi > lo:
        raise DegenerateRange(f"corpus range is degenerate (min == max == {lo})")
    stats = NormStats(lo, hi)
    return [stats.normalize(a) for a in arrays], stats


def upsample_x2(series):
    """Double the frame rate by linear interpolation; the last frame repeats.

    Works along axis 0, so ``(T, ...)`` arrays are accepted.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyInput("cannot upsample an empty sequence")
    nxt = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=np.float64)
    out[0::2] = x
    out[1::2] = 0.5 * (x + nxt)
    return out
