"""Frame-feature stacks at 50 Hz and their learned layer fusion.

The built-in extractor stands in for the hidden layers of a self-supervised
speech model: a log-mel front end is turned into ``L`` distinct
pseudo-layers, each a seeded orthogonal remix of the features after a
progressively wider temporal context. Real embeddings exported elsewhere can
be loaded with :func:`import_feature_stack`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .dsp import Signal
from .errors import FormatError, RateMismatch, ShapeError

FEATURE_RATE_HZ = 50
INPUT_RATE_HZ = 16000
STACK_MAGIC = b"NSTK1"
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrontendConfig:
    n_layers: int = 25
    n_mels: int = 40
    window_ms: float = 25.0
    hop_ms: float = 20.0
    n_fft: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    context_step: int = 3
    seed: int = 0


@dataclass(frozen=True)
class FeatureStack:
    """``layers`` has shape (L, T, D); frames are 20 ms apart."""

    layers: np.ndarray
    frame_rate_hz: int = FEATURE_RATE_HZ

    def __post_init__(self):
        a = np.asarray(self.layers)
        if a.ndim != 3:
            raise ShapeError(f"feature stack must be 3-D (L, T, D), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("feature stack contains NaN or Inf")
        object.__setattr__(self, "layers", a)

    @property
    def shape(self):
        return self.layers.shape

    @property
    def n_layers(self):
        return self.layers.shape[0]

    @property
    def n_frames(self):
        return self.layers.shape[1]

    @property
    def dim(self):
        return self.layers.shape[2]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax):
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(audio: Signal, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Log-mel energies, shape (floor(duration * 50), n_mels)."""
    fs = audio.sample_rate_hz
    hop = int(round(fs * cfg.hop_ms / 1000))
    win = int(round(fs * cfg.window_ms / 1000))
    x = audio.samples
    n_frames = len(x) // hop
    if n_frames == 0:
        return np.zeros((0, cfg.n_mels))
    # frame k is centred on the middle of hop interval k
    pad = win // 2
    padded = np.pad(x, (pad, pad + hop), mode="reflect" if len(x) > pad + hop else "constant")
    starts = np.arange(n_frames) * hop + hop // 2
    frames = padded[starts[:, None] + np.arange(win)[None, :]] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, fs, cfg.fmin_hz, cfg.fmax_hz)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


@lru_cache(maxsize=8)
def _mixing_matrices(n_layers, dim, seed):
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(n_layers):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        mats.append(q * np.sign(np.diag(r))[None, :])
    return np.stack(mats)


def extract_feature_stack(audio: Signal, cfg: FrontendConfig = FrontendConfig()) -> FeatureStack:
    """Build an (L, T, D) stack of pseudo-layers from 16 kHz mono audio."""
    if audio.sample_rate_hz != INPUT_RATE_HZ:
        raise RateMismatch(f"feature extraction expects {INPUT_RATE_HZ} Hz, got {audio.sample_rate_hz}")
    feats = log_mel(audio, cfg)
    t, d = feats.shape
    if t:
        feats = (feats - feats.mean(axis=0)) / np.maximum(feats.std(axis=0), 1e-3)
    mixes = _mixing_matrices(cfg.n_layers, d, cfg.seed)
    layers = np.empty((cfg.n_layers, t, d), dtype=np.float32)
    for l in range(cfg.n_layers):
        width = 1 + 2 * (l // cfg.context_step)
        ctx = uniform_filter1d(feats, size=width, axis=0, mode="nearest") if (t and width > 1) else feats
        layers[l] = ctx @ mixes[l]
    return FeatureStack(layers)


def export_feature_stack(path, stack: FeatureStack):
    """Little-endian ``NSTK1`` + u32 L, T, D + float32 data (layer, frame, dim)."""
    a = np.ascontiguousarray(stack.layers, dtype="<f4")
    L, T, D = a.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<III", L, T, D))
        fh.write(a.tobytes())


def import_feature_stack(path) -> FeatureStack:
    raw = Path(path).read_bytes()
    head = len(STACK_MAGIC) + 12
    if len(raw) < head or raw[: len(STACK_MAGIC)] != STACK_MAGIC:
        raise FormatError(f"{path}: not an NSTK1 feature stack")
    L, T, D = struct.unpack("<III", raw[len(STACK_MAGIC):head])
    body = raw[head:]
    if len(body) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    expected = L * T * D
    got = len(body) // 4
    if got != expected:
        raise ShapeError(f"{path}: header declares {L}x{T}x{D}={expected} values, found {got}")
    data = np.frombuffer(body, dtype="<f4").reshape(L, T, D).astype(np.float32)
    return FeatureStack(data)


def layer_weighted_sum(stack, weights) -> np.ndarray:
    """``out[..., t, d] = sum_l w[l] * stack[..., l, t, d]``.

    ``stack`` is (L, T, D) or batched (B, L, T, D).
    """
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != layers.shape[-3]:
        raise ShapeError(f"{w.shape[0] if w.ndim else 0} weights for {layers.shape[-3]} layers")
    return np.tensordot(w, layers, axes=([0], [-3])) if layers.ndim == 3 else np.einsum("l,bltd->btd", w, layers)


def layer_weighted_sum_grad(stack, weights, grad_out):
    """Gradients of :func:`layer_weighted_sum` w.r.t. weights and stack."""
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    g = np.asarray(grad_out, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if layers.ndim == 3:
        grad_w = np.einsum("ltd,td->l", layers, g)
        grad_stack = w[:, None, None] * g[None]
    else:
        grad_w = np.einsum("bltd,btd->l", layers, g)
        grad_stack = w[None, :, None, None] * g[:, None]
    return grad_w, grad_stack
