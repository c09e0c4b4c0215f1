"""Ground-truth trace generation: nasalance, EGG envelope and source features."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dsp import (
    NormStats,
    Series100,
    Signal,
    decimation_indices,
    highpass,
    hilbert_envelope,
    minmax_normalize_corpus,
    resample_audio,
    resample_to_100hz,
    rms_envelope,
)
from .errors import ChannelMismatch, DegenerateRange, EmptyInput, MissingChannel
from .source import SOURCE_RATE_HZ, estimate_source_frames

log = logging.getLogger(__name__)

ADULT_CUTOFF_HZ = 20.0
CHILD_CUTOFF_HZ = 10.0
EGG_CUTOFF_HZ = 20.0
SMOOTHING_MS = 25.0
SILENCE_REL_FLOOR = 1e-4
COMBINED_PEAK = 0.9

TRACE_KINDS = ("vp", "egg_env", "per", "aper", "f0")
PROFILES = ("adult", "child")


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker_id: str
    profile: str
    oral: Signal
    nasal: Signal
    egg: Optional[Signal] = None
    transcript: Optional[str] = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.oral.sample_rate_hz != self.nasal.sample_rate_hz or len(self.oral) != len(self.nasal):
            raise ChannelMismatch(
                f"{self.id}: oral ({len(self.oral)} @ {self.oral.sample_rate_hz}) and nasal "
                f"({len(self.nasal)} @ {self.nasal.sample_rate_hz}) channels differ"
            )
        if self.egg is not None and abs(self.egg.duration_s - self.oral.duration_s) > 0.010:
            raise ChannelMismatch(f"{self.id}: EGG duration differs from audio by more than 10 ms")

    @property
    def duration_s(self):
        return self.oral.duration_s

    @property
    def cutoff_hz(self):
        return ADULT_CUTOFF_HZ if self.profile == "adult" else CHILD_CUTOFF_HZ


@dataclass(frozen=True)
class NasalanceSeries(Series100):
    """Raw nasalance at 100 Hz with a per-frame silence flag."""

    silence: np.ndarray = None


@dataclass
class TargetTraces:
    """Aligned 100 Hz traces; ``egg_env`` is None when no EGG exists."""

    vp: np.ndarray
    per: np.ndarray
    aper: np.ndarray
    f0: np.ndarray
    egg_env: Optional[np.ndarray] = None
    silence: Optional[np.ndarray] = None
    utterance_id: str = ""

    def kinds(self):
        return tuple(k for k in TRACE_KINDS if getattr(self, k) is not None)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.kinds()}

    def __len__(self):
        return len(self.vp)


def combined_audio(oral: Signal, nasal: Signal, rate_hz: float = SOURCE_RATE_HZ) -> Signal:
    """Model input: oral + nasal, peak-normalized to 0.9, at ``rate_hz``."""
    mixed = oral.samples + nasal.samples
    peak = np.max(np.abs(mixed)) if mixed.size else 0.0
    if peak > 0:
        mixed = mixed * (COMBINED_PEAK / peak)
    return resample_audio(Signal(mixed, oral.sample_rate_hz), rate_hz)


def _acoustic_energy(sig: Signal, cutoff_hz):
    return rms_envelope(highpass(sig, cutoff_hz), SMOOTHING_MS).samples


def envelope_silence_floor(oral: Signal, nasal: Signal, cutoff_hz) -> float:
    """1e-4 times the median of AEnasal + AEoral over the utterance."""
    total = _acoustic_energy(oral, cutoff_hz) + _acoustic_energy(nasal, cutoff_hz)
    return SILENCE_REL_FLOOR * float(np.median(total))


def compute_nasalance(oral: Signal, nasal: Signal, hp_cutoff_hz: float = ADULT_CUTOFF_HZ,
                      silence_floor: Optional[float] = None) -> NasalanceSeries:
    """Nasalance = AEnasal / (AEnasal + AEoral), resampled to 100 Hz.

    Both channels are high-passed, turned into 25 ms RMS envelopes, and the
    sample-wise ratio is resampled. Frames whose total envelope energy (read
    at the frame's source sample, so filter ringing cannot mask silence) is
    below ``silence_floor`` are set to 0 and flagged. When no floor is given
    it is derived from the utterance itself.
    """
    if oral.sample_rate_hz != nasal.sample_rate_hz or len(oral) != len(nasal):
        raise ChannelMismatch("oral and nasal channels must share rate and length")
    if len(oral) == 0:
        raise EmptyInput("empty channels")
    ae_oral = _acoustic_energy(oral, hp_cutoff_hz)
    ae_nasal = _acoustic_energy(nasal, hp_cutoff_hz)
    total = ae_oral + ae_nasal
    if silence_floor is None:
        silence_floor = SILENCE_REL_FLOOR * float(np.median(total))
    with np.errstate(invalid="ignore", divide="ignore"):
        # exact-zero energy is neutral here; such frames are flagged below
        ratio = np.where(total > 0, ae_nasal / np.where(total > 0, total, 1.0), 0.5)
    fs = oral.sample_rate_hz
    vp = resample_to_100hz(Signal(ratio, fs)).values
    silence = total[decimation_indices(len(total), fs)] <= silence_floor
    vp = np.clip(vp, 0.0, 1.0)
    vp[silence] = 0.0
    return NasalanceSeries(vp, silence=silence)


def compute_egg_envelope(egg: Optional[Signal]) -> Series100:
    """High-pass at 20 Hz, Hilbert magnitude, resample to 100 Hz."""
    if egg is None:
        raise MissingChannel("no EGG channel")
    env = hilbert_envelope(highpass(egg, EGG_CUTOFF_HZ))
    out = resample_to_100hz(env).values
    return Series100(np.maximum(out, 0.0))


def prepare_targets(rec: UtteranceRecord, silence_floor: Optional[float] = None) -> TargetTraces:
    """Raw (un-normalized) traces for one utterance.

    Adult records use the 20 Hz cutoff and gain an EGG envelope when EGG was
    recorded; child records use 10 Hz and never carry one.
    """
    nas = compute_nasalance(rec.oral, rec.nasal, rec.cutoff_hz, silence_floor)
    egg_env = None
    if rec.profile == "adult" and rec.egg is not None:
        egg_env = compute_egg_envelope(rec.egg).values
    src = estimate_source_frames(combined_audio(rec.oral, rec.nasal))
    parts = [nas.values, nas.silence, src.f0_hz, src.periodicity, src.aperiodicity]
    if egg_env is not None:
        parts.append(egg_env)
    n = min(len(p) for p in parts)
    return TargetTraces(
        vp=nas.values[:n],
        per=src.periodicity[:n],
        aper=src.aperiodicity[:n],
        f0=src.f0_hz[:n],
        egg_env=None if egg_env is None else egg_env[:n],
        silence=nas.silence[:n],
        utterance_id=rec.id,
    )


def normalize_dataset(traces_list, stats=None):
    """Normalize each trace kind to [-1, 1] with corpus-wide min/max.

    Pass previously computed ``stats`` to apply an existing map (held-out
    data); otherwise stats are computed from ``traces_list``.
    """
    traces_list = list(traces_list)
    if not traces_list:
        raise EmptyInput("empty dataset")
    if stats is None:
        stats = {}
        for kind in TRACE_KINDS:
            series = [getattr(t, kind) for t in traces_list if getattr(t, kind) is not None]
            if not series:
                continue
            try:
                _, stats[kind] = minmax_normalize_corpus(series)
            except DegenerateRange as exc:
                raise DegenerateRange(f"trace kind {kind!r}: {exc}", kind=kind) from None
    out = []
    for t in traces_list:
        updates = {k: stats[k].normalize(getattr(t, k)) for k in t.kinds() if k in stats}
        out.append(replace(t, **updates))
    return out, stats


def stats_to_dict(stats):
    return {k: v.to_dict() for k, v in stats.items()}


def stats_from_dict(d):
    return {k: NormStats.from_dict(v) for k, v in d.items()}


def write_traces_csv(path, traces: TargetTraces):
    """One row per 10 ms frame; the egg_env column is omitted when absent."""
    cols = ["t_s", "vp"] + (["egg_env"] if traces.egg_env is not None else []) + ["per", "aper", "f0", "silence_flag"]
    silence = traces.silence if traces.silence is not None else np.zeros(len(traces), dtype=bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(traces)):
            row = [f"{i / 100:.2f}", repr(float(traces.vp[i]))]
            if traces.egg_env is not None:
                row.append(repr(float(traces.egg_env[i])))
            row += [repr(float(traces.per[i])), repr(float(traces.aper[i])), repr(float(traces.f0[i])),
                    str(int(bool(silence[i])))]
            w.writerow(row)


def read_traces_csv(path, utterance_id="") -> TargetTraces:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}
    return TargetTraces(
        vp=data["vp"], per=data["per"], aper=data["aper"], f0=data["f0"],
        egg_env=data.get("egg_env"), silence=data["silence_flag"].astype(bool),
        utterance_id=utterance_id,
    )
