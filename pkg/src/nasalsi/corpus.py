"""Audio ingestion, corpus manifests and the synthetic nasometry corpus."""

from __future__ import annotations

import json
import logging
import os
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .dsp import Signal, rms_envelope
from .errors import ChannelMismatch, FormatError, IoError, ManifestError
from .targets import PROFILES, UtteranceRecord

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WavInfo:
    sample_rate_hz: int
    n_channels: int
    n_frames: int
    dtype: str


def read_wav(path):
    """Read a PCM (16/24/32-bit) or float WAV file as float64 channels in [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: unsupported or malformed WAV ({exc})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 1:
        x = x[:, None]
    info = WavInfo(int(rate), x.shape[1], x.shape[0], str(data.dtype))
    return [Signal(x[:, c], float(rate)) for c in range(x.shape[1])], info


def ingest_wav(path, expected_channels=1):
    """Read ``path`` and split it into ``expected_channels`` signals."""
    signals, info = read_wav(path)
    if info.n_channels != expected_channels:
        raise ChannelMismatch(f"{path}: expected {expected_channels} channel(s), found {info.n_channels}")
    return signals


def write_wav(path, signals, subtype="PCM_16"):
    """Write equal-length signals as one interleaved WAV file.

    ``subtype`` is ``PCM_16``, ``PCM_24`` or ``FLOAT``.
    """
    if isinstance(signals, Signal):
        signals = [signals]
    rate = signals[0].sample_rate_hz
    if any(s.sample_rate_hz != rate or len(s) != len(signals[0]) for s in signals):
        raise ChannelMismatch("all channels must share rate and length")
    data = np.stack([s.samples for s in signals], axis=1)
    if subtype == "FLOAT":
        wavfile.write(str(path), int(rate), data.astype(np.float32))
        return
    if subtype == "PCM_16":
        width, scale = 2, 32768
    elif subtype == "PCM_24":
        width, scale = 3, 8388608
    else:
        raise FormatError(f"unsupported subtype {subtype!r}")
    # same full-scale convention as read_wav, so a round trip is within half an LSB
    ints = np.clip(np.round(data * scale), -scale, scale - 1).astype("<i4")
    raw = ints.view(np.uint8).reshape(-1, 4)[:, :width].tobytes()
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(data.shape[1])
        fh.setsampwidth(width)
        fh.setframerate(int(rate))
        fh.writeframes(raw)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    profile: str
    oral_path: str
    nasal_path: str
    egg_path: Optional[str] = None
    language: Optional[str] = None
    transcript: Optional[str] = None

    def to_json(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class CorpusManifest:
    """JSON-lines manifest: one header object, then one object per utterance.

    Relative paths resolve against ``root`` (the manifest's directory).
    """

    dataset_name: str
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def write(self, path):
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"manifest_version": MANIFEST_VERSION, "dataset_name": self.dataset_name}) + "\n")
            for e in self.entries:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if "dataset_name" not in header:
            raise ManifestError(f"{path}: first line must be a header with dataset_name")
        entries = []
        for i, ln in enumerate(lines[1:], start=2):
            try:
                entries.append(ManifestEntry(**json.loads(ln)))
            except TypeError as exc:
                raise ManifestError(f"{path}:{i}: bad entry ({exc})") from None
        return cls(header["dataset_name"], entries, path.parent)

    def resolve(self, p):
        return p if os.path.isabs(p) else str(self.root / p)

    @property
    def speakers(self):
        return sorted({e.speaker_id for e in self.entries})

    def validate(self, allow_egg=False):
        """Check ids, profiles and file existence.

        Child entries that list an EGG file are dropped with a warning unless
        ``allow_egg``; the dropped ids are returned.
        """
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ManifestError(f"duplicate utterance id {e.utterance_id!r}")
            seen.add(e.utterance_id)
            if e.profile not in PROFILES:
                raise ManifestError(f"{e.utterance_id}: profile must be one of {PROFILES}")
            for p in (e.oral_path, e.nasal_path, e.egg_path):
                if p is not None and not os.path.exists(self.resolve(p)):
                    raise ManifestError(f"{e.utterance_id}: missing file {p}")
        rejected = []
        if not allow_egg:
            for e in self.entries:
                if e.profile == "child" and e.egg_path is not None:
                    log.warning("%s: child entry lists an EGG file; rejected (use --allow-egg)", e.utterance_id)
                    rejected.append(e.utterance_id)
            self.entries = [e for e in self.entries if e.utterance_id not in rejected]
        return rejected

    def load_record(self, entry: ManifestEntry) -> UtteranceRecord:
        if entry.oral_path == entry.nasal_path:
            oral, nasal = ingest_wav(self.resolve(entry.oral_path), 2)
        else:
            (oral,) = ingest_wav(self.resolve(entry.oral_path), 1)
            (nasal,) = ingest_wav(self.resolve(entry.nasal_path), 1)
        egg = None
        if entry.egg_path is not None:
            (egg,) = ingest_wav(self.resolve(entry.egg_path), 1)
        return UtteranceRecord(entry.utterance_id, entry.speaker_id, entry.profile, oral, nasal, egg,
                               entry.transcript)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

VOWELS = ((730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410),
          (300, 870, 2240), (660, 1720, 2410), (490, 1350, 1690))

# segment kind -> (nasalance range, voiced, duration range in s)
SEGMENT_KINDS = {
    "vowel": ((0.05, 0.2), True, (0.10, 0.25)),
    "nasal": ((0.75, 0.95), True, (0.06, 0.12)),
    "nasal_vowel": ((0.35, 0.6), True, (0.10, 0.22)),
    "fricative": ((0.02, 0.1), False, (0.06, 0.14)),
    "pause": ((0.0, 0.0), False, (0.10, 0.25)),
}
SEGMENT_WEIGHTS = {"vowel": 0.38, "nasal": 0.2, "nasal_vowel": 0.14, "fricative": 0.16, "pause": 0.12}


@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 14
    n_utterances: int = 15
    duration_min_s: float = 3.0
    duration_max_s: float = 6.0
    sample_rate_hz: int = 16000
    seed: int = 0
    profile: str = "adult"
    include_egg: bool = True
    f0_shift: float = 1.0
    formant_shift: float = 1.0
    plateaus: Optional[tuple] = None
    plateau_s: float = 0.6
    dataset_name: str = "synthetic"
    speaker_prefix: str = "spk"

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_utterances < 1:
            raise ValueError("speaker and utterance counts must be positive")
        if not 0 < self.duration_min_s <= self.duration_max_s:
            raise ValueError("need 0 < duration_min_s <= duration_max_s")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")


def child_domain(spec: SyntheticSpec, **overrides) -> SyntheticSpec:
    """Child-like domain: higher F0, shorter vocal tract, no EGG."""
    base = dict(asdict(spec))
    base.update(profile="child", include_egg=False, f0_shift=1.9, formant_shift=1.3,
                dataset_name=spec.dataset_name + "-child", speaker_prefix="kid")
    base.update(overrides)
    return SyntheticSpec(**base)


@dataclass
class SyntheticUtterance:
    record: UtteranceRecord
    # programmed nasalance sampled at 100 Hz (0 in pauses)
    nasalance: np.ndarray
    plateaus: list = field(default_factory=list)


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    utterances: list
    manifest: Optional[CorpusManifest] = None

    @property
    def records(self):
        return [u.record for u in self.utterances]


def _resonator(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _formant_filter(x, formants, fs, bws=(80.0, 110.0, 160.0)):
    y = x
    for f, bw in zip(formants, bws):
        if f < fs / 2 - bw:
            b, a = _resonator(f, bw, fs)
            y = sps.lfilter(b, a, y)
    return y


def _smooth(x, n):
    if n <= 1:
        return x
    k = np.ones(n) / n
    return np.convolve(np.pad(x, (n // 2, n - 1 - n // 2), mode="edge"), k, mode="valid")


def _local_unit_rms(x, fs):
    env = rms_envelope(Signal(x, fs), 25.0).samples
    env = _smooth(env, int(0.05 * fs))
    return x / np.maximum(env, 1e-8)


class _Speaker:
    def __init__(self, rng, spec):
        self.f0 = rng.uniform(90.0, 210.0) * spec.f0_shift
        self.formant_scale = rng.uniform(0.92, 1.08) * spec.formant_shift
        self.nasal_formant = rng.uniform(230.0, 300.0) * spec.formant_shift
        self.level = rng.uniform(0.25, 0.45)


def _plan_segments(rng, duration_s):
    kinds = list(SEGMENT_WEIGHTS)
    probs = np.array([SEGMENT_WEIGHTS[k] for k in kinds])
    plan = [("pause", rng.uniform(0.08, 0.15))]
    total = plan[0][1]
    while total < duration_s - 0.1:
        kind = kinds[rng.choice(len(kinds), p=probs)]
        if kind == "pause" and plan[-1][0] == "pause":
            continue
        lo, hi = SEGMENT_KINDS[kind][2]
        d = rng.uniform(lo, hi)
        plan.append((kind, d))
        total += d
    plan.append(("pause", max(duration_s - total, 0.0)))
    return plan


def synthesize_utterance(rng, spec: SyntheticSpec, speaker: _Speaker, duration_s: float,
                         plateaus=None):
    """Oral, nasal and EGG channels with a known nasalance trajectory.

    The oral and nasal carriers are the same glottal source through
    different resonances, each scaled to unit local RMS; the channels are
    then ``A(t) * (1 - n(t)) * oral`` and ``A(t) * n(t) * nasal``, so the
    25 ms energy ratio reproduces ``n(t)``.
    """
    fs = spec.sample_rate_hz
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs

    if plateaus is not None:
        seg_len = spec.plateau_s
        plan = [("vowel", seg_len)] * len(plateaus)
        n = int(round(seg_len * len(plateaus) * fs))
        t = np.arange(n) / fs
    else:
        plan = _plan_segments(rng, duration_s)

    nas = np.zeros(n)
    voiced = np.zeros(n)
    unvoiced = np.zeros(n)
    level = np.zeros(n)
    vowel_idx = np.zeros(n, dtype=int)
    bounds = []
    pos = 0
    vowel = int(rng.integers(len(VOWELS)))
    for i, (kind, d) in enumerate(plan):
        stop = n if i == len(plan) - 1 else min(n, pos + int(round(d * fs)))
        (lo, hi), is_voiced, _ = SEGMENT_KINDS[kind]
        value = plateaus[i] if plateaus is not None else rng.uniform(lo, hi)
        nas[pos:stop] = value
        if kind != "pause":
            level[pos:stop] = rng.uniform(0.6, 1.0)
            (voiced if is_voiced else unvoiced)[pos:stop] = 1.0
        if kind in ("vowel", "nasal_vowel"):
            vowel = int(rng.integers(len(VOWELS)))
        vowel_idx[pos:stop] = vowel
        bounds.append((pos / fs, stop / fs, value))
        pos = stop

    ramp = int(0.015 * fs)
    if plateaus is None:
        nas = _smooth(nas, ramp)
    level = _smooth(level, ramp)
    voiced = _smooth(voiced, ramp)
    unvoiced = _smooth(unvoiced, ramp)

    f0 = speaker.f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= 1.0 - 0.1 * t / max(t[-1], 1e-9)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    k_max = int(min(4000.0, 0.45 * fs) // f0.max())
    glottal = np.zeros(n)
    for k in range(1, k_max + 1):
        glottal += np.sin(k * phase) / k**1.2
    glottal /= np.sqrt(np.mean(glottal**2))
    noise = rng.standard_normal(n)
    source = voiced * (glottal + 0.05 * noise) + unvoiced * noise

    oral_c = np.zeros(n)
    for v in np.unique(vowel_idx):
        formants = [f * speaker.formant_scale for f in VOWELS[v]]
        sel = vowel_idx == v
        oral_c[sel] = _formant_filter(source, formants, fs)[sel]
    fric = unvoiced > 0.5
    if fric.any():
        hp = sps.butter(2, min(2500.0, 0.4 * fs), "highpass", fs=fs, output="sos")
        oral_c = np.where(fric, sps.sosfilt(hp, source), oral_c)
    nasal_c = _formant_filter(source, (speaker.nasal_formant, 1000.0 * speaker.formant_scale), fs, (60.0, 200.0))
    oral_c = _local_unit_rms(oral_c, fs)
    nasal_c = _local_unit_rms(nasal_c, fs)

    amp = speaker.level * level
    oral = amp * (1.0 - nas) * oral_c
    nasal = amp * nas * nasal_c
    peak = max(np.abs(oral).max(), np.abs(nasal).max(), 1e-12)
    if peak > 0.95:
        oral, nasal, amp = oral * 0.95 / peak, nasal * 0.95 / peak, amp * 0.95 / peak
    egg = None
    if spec.include_egg:
        egg = amp * voiced * (np.sin(phase) + 0.3 * np.sin(2 * phase)) * 0.8

    idx100 = np.minimum((np.arange(int(n * 100 // fs)) * fs / 100).astype(int), n - 1)
    truth = np.where(level[idx100] > 0, nas[idx100], 0.0)
    return oral, nasal, egg, truth, bounds


def make_synthetic_corpus(spec: SyntheticSpec, out_dir=None) -> SyntheticCorpus:
    """Generate a seeded corpus; with ``out_dir`` also write WAVs and a manifest."""
    fs = spec.sample_rate_hz
    utterances = []
    for s in range(spec.n_speakers):
        spk_rng = np.random.default_rng([spec.seed, s])
        speaker = _Speaker(spk_rng, spec)
        spk_id = f"{spec.speaker_prefix}{s:02d}"
        for u in range(spec.n_utterances):
            utt_rng = np.random.default_rng([spec.seed, s, u, 1])
            duration = utt_rng.uniform(spec.duration_min_s, spec.duration_max_s)
            oral, nasal, egg, truth, bounds = synthesize_utterance(utt_rng, spec, speaker, duration, spec.plateaus)
            rec = UtteranceRecord(
                id=f"{spk_id}_u{u:03d}", speaker_id=spk_id, profile=spec.profile,
                oral=Signal(oral, fs), nasal=Signal(nasal, fs),
                egg=None if egg is None else Signal(egg, fs),
            )
            utterances.append(SyntheticUtterance(rec, truth, bounds if spec.plateaus is not None else []))
    corpus = SyntheticCorpus(spec, utterances)
    if out_dir is not None:
        corpus.manifest = write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: SyntheticCorpus, out_dir) -> CorpusManifest:
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise IoError(f"{out} is not writable")
    entries = []
    for u in corpus.utterances:
        r = u.record
        oral_p, nasal_p = f"audio/{r.id}_oral.wav", f"audio/{r.id}_nasal.wav"
        write_wav(out / oral_p, r.oral)
        write_wav(out / nasal_p, r.nasal)
        egg_p = None
        if r.egg is not None:
            egg_p = f"audio/{r.id}_egg.wav"
            write_wav(out / egg_p, r.egg)
        entries.append(ManifestEntry(r.id, r.speaker_id, r.profile, oral_p, nasal_p, egg_p))
    manifest = CorpusManifest(corpus.spec.dataset_name, entries, out)
    manifest.write(out / "manifest.jsonl")
    return manifest
