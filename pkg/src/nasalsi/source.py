"""Frame-level F0, periodicity and aperiodicity from 16 kHz audio.

A transparent normalized-autocorrelation tracker. Every 10 ms a 40 ms
window is analysed; the best normalized autocorrelation peak inside the
50-500 Hz lag band gives both the pitch estimate and the periodic energy
fraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import medfilt

from .dsp import Signal
from .errors import RateMismatch

SOURCE_RATE_HZ = 16000
HOP_MS = 10.0
WINDOW_MS = 40.0
F0_MIN_HZ = 50.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.3
SILENCE_REL_FLOOR = 1e-4
SILENCE_ABS_FLOOR = 1e-12
MEDIAN_FRAMES = 5
# F0 is reported on a 1e-4 Hz grid so amplitude scaling cannot perturb it by roundoff
F0_RESOLUTION_HZ = 1e-4


@dataclass(frozen=True)
class SourceFrames:
    f0_hz: np.ndarray
    periodicity: np.ndarray
    aperiodicity: np.ndarray
    hop_ms: float = HOP_MS

    def __len__(self):
        return self.f0_hz.shape[0]


def _frame(x, hop, win):
    n_frames = len(x) // hop
    half = win // 2
    padded = np.pad(x, (half, half + hop))
    starts = np.arange(n_frames) * hop + hop // 2
    idx = starts[:, None] + np.arange(win)[None, :]
    return padded[idx]


def normalized_autocorrelation(frames, min_lag, max_lag):
    """NCCF of each row against itself for lags ``min_lag..max_lag``.

    ``r[k] = sum(s[n] s[n+k]) / sqrt(sum(s[:W-k]**2) * sum(s[k:]**2))``
    over the overlapping part of the window.
    """
    frames = np.atleast_2d(frames)
    w = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * w)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 1]
    cum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    e_head = cum[:, w - lags]
    e_tail = cum[:, w][:, None] - cum[:, lags]
    denom = np.sqrt(np.maximum(e_head * e_tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, acf / np.where(denom > 0, denom, 1.0), 0.0)
    return r[:, min_lag:]


def _pick_peak(r_row, min_lag):
    """First local maximum within 90% of the best local maximum."""
    inner = r_row[1:-1]
    is_peak = (inner > r_row[:-2]) & (inner >= r_row[2:])
    peaks = np.flatnonzero(is_peak) + 1
    if peaks.size == 0:
        return 0.0, 0.0
    best = r_row[peaks].max()
    k = peaks[np.argmax(r_row[peaks] >= 0.9 * best)]
    # parabolic refinement of the lag
    a, b, c = r_row[k - 1], r_row[k], r_row[k + 1]
    denom = a - 2 * b + c
    shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
    return float(min_lag + k + shift), float(b)


def estimate_source_frames(audio: Signal) -> SourceFrames:
    """Pitch, periodic and aperiodic energy fractions every 10 ms.

    Frames whose peak normalized autocorrelation falls below 0.3 are
    unvoiced (f0 = 0, periodicity = 0). Aperiodicity is ``1 - periodicity``
    except on silent frames, where all three outputs are 0.
    """
    if audio.sample_rate_hz != SOURCE_RATE_HZ:
        raise RateMismatch(f"expected {SOURCE_RATE_HZ} Hz audio, got {audio.sample_rate_hz} Hz")
    fs = SOURCE_RATE_HZ
    hop = int(fs * HOP_MS / 1000)
    win = int(fs * WINDOW_MS / 1000)
    min_lag = int(np.floor(fs / F0_MAX_HZ))
    max_lag = int(np.ceil(fs / F0_MIN_HZ))
    frames = _frame(audio.samples, hop, win)
    n = frames.shape[0]
    f0 = np.zeros(n)
    per = np.zeros(n)
    aper = np.zeros(n)
    if n == 0:
        return SourceFrames(f0, per, aper)

    frames = frames - frames.mean(axis=1, keepdims=True)
    energy = np.mean(frames**2, axis=1)
    floor = max(SILENCE_REL_FLOOR * float(np.median(energy)), SILENCE_ABS_FLOOR)
    active = energy > floor

    # one lag of margin on each side for the local-maximum test
    r = normalized_autocorrelation(frames, min_lag - 1, max_lag + 1)
    for i in np.flatnonzero(active):
        lag, peak = _pick_peak(r[i], min_lag - 1)
        if peak >= VOICING_THRESHOLD and lag > 0:
            hz = fs / lag
            if F0_MIN_HZ <= hz <= F0_MAX_HZ:
                f0[i] = np.round(hz / F0_RESOLUTION_HZ) * F0_RESOLUTION_HZ
                per[i] = min(max(peak, 0.0), 1.0)
    aper[active] = 1.0 - per[active]

    if n >= MEDIAN_FRAMES:
        f0 = medfilt(f0, MEDIAN_FRAMES)
    return SourceFrames(f0, per, aper)
