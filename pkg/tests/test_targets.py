import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import middle, tone
from nasalsi.dsp import Signal
from nasalsi.errors import ChannelMismatch, DegenerateRange, EmptyInput, MissingChannel
from nasalsi.targets import (
    TargetTraces,
    UtteranceRecord,
    combined_audio,
    compute_egg_envelope,
    compute_nasalance,
    normalize_dataset,
    prepare_targets,
    read_traces_csv,
    stats_from_dict,
    stats_to_dict,
    write_traces_csv,
)

FS = 16000


def speechlike(rng, seconds, fs=FS):
    n = int(seconds * fs)
    t = np.arange(n) / fs
    carrier = sum(np.sin(2 * np.pi * k * 130 * t) / k for k in range(1, 12))
    return carrier * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t)) + 0.05 * rng.standard_normal(n)


def moving_rms(x, w):
    # independent route: cumulative sums over a centred rectangular window, edges dropped
    c = np.concatenate([[0.0], np.cumsum(x * x)])
    half = w // 2
    idx = np.arange(half, len(x) - (w - half))
    return idx, np.sqrt((c[idx - half + w] - c[idx - half]) / w)


def record(oral, nasal=None, egg=None, profile="adult", fs=FS, uid="u0"):
    nasal = oral if nasal is None else nasal
    return UtteranceRecord(uid, "s0", profile, Signal(oral, fs), Signal(nasal, fs),
                           None if egg is None else Signal(egg, fs))


class TestNasalance:
    def test_nasal_zero(self, rng):
        x = speechlike(rng, 1.0)
        vp = compute_nasalance(Signal(x, FS), Signal(np.zeros_like(x), FS)).values
        assert np.max(np.abs(vp)) <= 0.02

    def test_identical_channels(self, rng):
        x = speechlike(rng, 1.0)
        vp = compute_nasalance(Signal(x, FS), Signal(x, FS)).values
        np.testing.assert_allclose(vp, 0.5, atol=0.02)

    def test_three_to_one(self, rng):
        x = speechlike(rng, 1.0)
        vp = compute_nasalance(Signal(x, FS), Signal(3 * x, FS)).values
        idx, e_oral = moving_rms(x, 400)
        _, e_nasal = moving_rms(3 * x, 400)
        brute = e_nasal / (e_nasal + e_oral)
        assert abs(np.median(brute) - 0.75) < 1e-9
        np.testing.assert_allclose(middle(vp), np.median(brute), atol=0.02)

    def test_length_mismatch(self):
        with pytest.raises(ChannelMismatch):
            compute_nasalance(Signal(np.ones(100), FS), Signal(np.ones(90), FS))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            compute_nasalance(Signal(np.zeros(0), FS), Signal(np.zeros(0), FS))

    def test_silence_flagged(self, rng):
        x = speechlike(rng, 1.0)
        x[6000:10000] = 0.0
        nas = compute_nasalance(Signal(x, FS), Signal(0.5 * x, FS))
        # the high-pass rings roughly 70 ms into the gap; its core must be flagged
        assert nas.silence[49:53].all()
        assert not np.any(nas.values[nas.silence])
        assert not nas.silence[:30].any()

    def test_child_cutoff_only_difference(self, rng):
        x, y = speechlike(rng, 1.0), speechlike(rng, 1.0)
        a = prepare_targets(record(x, y, profile="adult"))
        b = compute_nasalance(Signal(x, FS), Signal(y, FS), 20.0)
        np.testing.assert_array_equal(a.vp, b.values[: len(a.vp)])
        c = prepare_targets(record(x, y, profile="child"))
        d = compute_nasalance(Signal(x, FS), Signal(y, FS), 10.0)
        np.testing.assert_array_equal(c.vp, d.values[: len(c.vp)])

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.floats(0.01, 100))
    def test_range_swap_and_scale(self, seed, k):
        r = np.random.default_rng(seed)
        oral = speechlike(r, 0.3) * r.uniform(0.1, 2)
        nasal = speechlike(r, 0.3) * r.uniform(0.1, 2)
        n = compute_nasalance(Signal(oral, FS), Signal(nasal, FS))
        assert np.all((n.values >= 0) & (n.values <= 1))
        swapped = compute_nasalance(Signal(nasal, FS), Signal(oral, FS))
        live = ~n.silence
        np.testing.assert_allclose(swapped.values[live], 1 - n.values[live], atol=1e-6)
        scaled = compute_nasalance(Signal(k * oral, FS), Signal(k * nasal, FS))
        np.testing.assert_allclose(scaled.values, n.values, atol=1e-9)


class TestEggEnvelope:
    def test_unit_tone(self):
        y = compute_egg_envelope(tone(120, 2.0, FS)).values
        np.testing.assert_allclose(middle(y), 1.0, rtol=0.02)

    def test_ramp(self):
        t = np.arange(FS) / FS
        y = compute_egg_envelope(Signal(t * np.sin(2 * np.pi * 120 * t), FS)).values
        expected = np.arange(100) / 100
        np.testing.assert_allclose(middle(y), middle(expected), atol=0.03)

    def test_zeros(self):
        assert not np.any(compute_egg_envelope(Signal(np.zeros(3200), FS)).values)

    def test_missing(self):
        with pytest.raises(MissingChannel):
            compute_egg_envelope(None)


class TestPrepare:
    def test_adult_with_egg(self, rng):
        x = speechlike(rng, 2.0)
        tr = prepare_targets(record(x, 0.3 * x, egg=x))
        assert tr.kinds() == ("vp", "egg_env", "per", "aper", "f0")
        assert len(tr) == 200
        assert all(len(v) == 200 for v in tr.as_dict().values())

    def test_child_without_egg(self, rng):
        x = speechlike(rng, 2.0)
        tr = prepare_targets(record(x, 0.3 * x, profile="child"))
        assert tr.kinds() == ("vp", "per", "aper", "f0")

    def test_child_ignores_egg(self, rng):
        x = speechlike(rng, 1.0)
        assert prepare_targets(record(x, x, egg=x, profile="child")).egg_env is None

    def test_51k2_input(self, rng):
        x = speechlike(rng, 1.5, fs=51200)
        tr = prepare_targets(record(x, x, fs=51200))
        assert len(tr) == 150

    def test_record_validation(self):
        with pytest.raises(ChannelMismatch):
            UtteranceRecord("u", "s", "adult", Signal(np.zeros(10), FS), Signal(np.zeros(10), 8000))
        with pytest.raises(ChannelMismatch):
            UtteranceRecord("u", "s", "adult", Signal(np.zeros(1600), FS), Signal(np.zeros(1600), FS),
                            Signal(np.zeros(2000), FS))
        with pytest.raises(ValueError):
            UtteranceRecord("u", "s", "teen", Signal(np.zeros(10), FS), Signal(np.zeros(10), FS))


def traces(vp, f0, egg=True):
    n = len(vp)
    return TargetTraces(vp=np.asarray(vp, float), per=np.linspace(0, 1, n), aper=np.linspace(1, 0, n),
                        f0=np.asarray(f0, float), egg_env=np.linspace(0, 2, n) if egg else None)


class TestNormalize:
    def test_spans_unit_interval(self):
        out, stats = normalize_dataset([traces([0, 0.5], [100, 120]), traces([1.0, 0.25], [110, 150])])
        allvp = np.concatenate([t.vp for t in out])
        assert allvp.min() == -1 and allvp.max() == 1
        assert stats["vp"].min == 0 and stats["f0"].max == 150

    def test_datasets_have_own_stats(self):
        _, a = normalize_dataset([traces([0, 1], [100, 200])])
        _, b = normalize_dataset([traces([0.2, 0.4], [100, 200], egg=False)])
        assert a["vp"] != b["vp"] and "egg_env" not in b

    def test_constant_f0_only(self):
        with pytest.raises(DegenerateRange) as exc:
            normalize_dataset([traces([0, 1, 0.5], [120, 120, 120])])
        assert exc.value.kind == "f0"

    def test_apply_existing_stats(self):
        _, stats = normalize_dataset([traces([0, 1], [100, 200])])
        out, same = normalize_dataset([traces([0.5, 0.5], [150, 150])], stats)
        assert same is stats and out[0].vp.tolist() == [0.0, 0.0]

    def test_stats_roundtrip(self):
        _, stats = normalize_dataset([traces([0, 1], [100, 200])])
        assert stats_from_dict(stats_to_dict(stats)) == stats


def test_csv_roundtrip(tmp_path, rng):
    x = speechlike(rng, 1.0)
    tr = prepare_targets(record(x, 0.5 * x, egg=x))
    write_traces_csv(tmp_path / "a.csv", tr)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "t_s,vp,egg_env,per,aper,f0,silence_flag"
    back = read_traces_csv(tmp_path / "a.csv")
    for k in tr.kinds():
        np.testing.assert_array_equal(getattr(back, k), getattr(tr, k))
    child = prepare_targets(record(x, 0.5 * x, profile="child"))
    write_traces_csv(tmp_path / "b.csv", child)
    assert "egg_env" not in (tmp_path / "b.csv").read_text().splitlines()[0]
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 101


def test_combined_audio_peak_and_rate(rng):
    x = speechlike(rng, 1.0, fs=51200)
    c = combined_audio(Signal(x, 51200), Signal(0.2 * x, 51200))
    assert c.sample_rate_hz == 16000 and len(c) == 16000
    assert abs(np.max(np.abs(c.samples)) - 0.9) < 0.05
