import csv

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nasalsi.errors import DivisionByZero, EmptyInput, InsufficientSpeakers, ZeroVariance
from nasalsi.evaluation import (
    ABLATION_CONFIGS,
    AblationRow,
    AblationTable,
    FoldSpec,
    SplitManifest,
    aggregate,
    echo_predictor,
    evaluate,
    make_folds,
    ppmc,
    relative_improvement,
    split_items,
)
from nasalsi.model import HEADS_FULL
from nasalsi.trainer import TrainItem

SPEAKERS = [f"spk{i:02d}" for i in range(14)]
series = arrays(np.float64, st.integers(3, 60), elements=st.floats(-100, 100, allow_nan=False))


def _centered_pearson(a, b):
    a = np.asarray(a, float) - np.mean(a)
    b = np.asarray(b, float) - np.mean(b)
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


class TestPpmc:
    def test_hand_triple(self):
        # cov = 1.5, var_a = 1, var_b = 7/3 (sample form) -> 1.5 / sqrt(7/3)
        assert ppmc([1, 2, 3], [1, 2, 4]) == pytest.approx(1.5 / np.sqrt(7 / 3), abs=1e-12)
        assert round(ppmc([1, 2, 3], [1, 2, 4]), 4) == 0.9820

    def test_self_and_anti(self):
        x = np.sin(np.arange(40) * 0.3)
        assert ppmc(x, x) == pytest.approx(1.0, abs=1e-12)
        assert ppmc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_raises(self):
        with pytest.raises(ZeroVariance):
            ppmc([1, 1, 1], [1, 2, 3])

    @given(series, st.data())
    def test_symmetry_and_affine(self, a, data):
        b = data.draw(arrays(np.float64, len(a), elements=st.floats(-100, 100, allow_nan=False)))
        assume(np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3)
        r = ppmc(a, b)
        assert r == pytest.approx(ppmc(b, a), abs=1e-12)
        assert r == pytest.approx(_centered_pearson(a, b), abs=1e-9)
        scale = data.draw(st.floats(0.1, 10))
        shift = data.draw(st.floats(-10, 10))
        assert ppmc(scale * a + shift, b) == pytest.approx(r, abs=1e-12)
        assert ppmc(-a, b) == pytest.approx(-r, abs=1e-12)


class TestFolds:
    def test_rotation_counts(self):
        spec = make_folds(SPEAKERS, seed=0)
        assert len(spec) == 5
        for f in spec.folds:
            assert (len(f.train), len(f.dev), len(f.test)) == (8, 3, 3)
            assert not (f.train & f.dev or f.dev & f.test or f.train & f.test)
        counts = spec.test_counts
        assert all(c >= 1 for c in counts.values())
        assert len(spec.repeated_test_speakers) == 1
        assert sum(counts.values()) == 15

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_seed_determinism(self, seed):
        assert make_folds(SPEAKERS, seed=seed) == make_folds(SPEAKERS, seed=seed)

    def test_seed_changes_order(self):
        assert make_folds(SPEAKERS, seed=0).order != make_folds(SPEAKERS, seed=1).order

    def test_round_trip(self):
        spec = make_folds(SPEAKERS, seed=3)
        assert FoldSpec.from_dict(spec.to_dict()) == spec

    def test_too_few_speakers(self):
        with pytest.raises(InsufficientSpeakers):
            make_folds(SPEAKERS[:10])

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SplitManifest(frozenset({"a"}), frozenset({"a"}), frozenset())

    def test_split_items(self):
        items = [TrainItem(f"u{i}", SPEAKERS[i % 14], np.zeros((1, 2, 1)), {"vp": np.zeros(4)}) for i in range(28)]
        fold = make_folds(SPEAKERS)[0]
        corpus, test = split_items(items, fold)
        assert len(corpus.train) == 16 and len(corpus.dev) == 6 and len(test) == 6
        assert {it.speaker_id for it in test} == fold.test


def _items(n, rng):
    out = []
    for i in range(n):
        tg = {h: rng.standard_normal(40) for h in HEADS_FULL}
        out.append(TrainItem(f"u{i}", "s", np.zeros((1, 20, 1)), tg))
    return out


class TestEvaluate:
    def test_echo_is_perfect(self, rng):
        scores = evaluate(echo_predictor, _items(5, rng))
        assert all(scores.ppmc[h] == pytest.approx(1.0, abs=1e-12) for h in HEADS_FULL)
        assert scores.n_utterances == 5 and not scores.excluded

    def test_constant_prediction_excluded(self, rng):
        items = _items(4, rng)

        def flat_vp(batch):
            preds = echo_predictor(batch)
            preds[0]["vp"] = np.zeros(40)
            return preds

        scores = evaluate(flat_vp, items)
        assert scores.excluded == {"vp": 1}
        assert scores.ppmc["vp"] == pytest.approx(1.0)

    def test_utterance_mean_not_pooled(self, rng):
        items = _items(2, rng)

        def offset(batch):
            preds = echo_predictor(batch)
            preds[1] = {h: v + 50.0 for h, v in preds[1].items()}
            return preds

        scores = evaluate(offset, items)
        assert scores.ppmc["vp"] == pytest.approx(1.0)
        assert scores.pooled["vp"] < 0.5

    def test_empty(self):
        with pytest.raises(EmptyInput):
            evaluate(echo_predictor, [])


class TestAggregate:
    def test_two_folds(self):
        rep = aggregate([{"vp": 0.6}, {"vp": 0.7}])
        assert rep.mean["vp"] == pytest.approx(0.65)
        assert rep.std["vp"] == pytest.approx(0.05)
        assert rep.formatted("vp") == "0.6500 (0.05)"

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=8))
    def test_mean_within_range(self, vals):
        rep = aggregate([{"vp": v} for v in vals])
        assert min(vals) - 1e-12 <= rep.mean["vp"] <= max(vals) + 1e-12
        assert rep.std["vp"] >= 0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate([])

    def test_csv(self, tmp_path):
        rep = aggregate([{"vp": 0.5, "f0": 0.1}, {"vp": 0.7, "f0": 0.3}])
        rep.write_aggregate_csv(tmp_path / "a.csv")
        rep.write_folds_csv(tmp_path / "f.csv")
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == ["target", "mean", "std"] and [r[0] for r in rows[1:]] == ["vp", "f0"]
        assert len(list(csv.reader(open(tmp_path / "f.csv")))) == 5


class TestRelativeImprovement:
    @pytest.mark.parametrize("new, old, expected", [
        (0.9488, 0.8115, 16.92),
        (0.9488, 0.8904, 6.56),
        (0.6859, 0.6357, 7.90),
        (0.6859, 0.6388, 7.37),
    ])
    def test_known_operand_pairs(self, new, old, expected):
        assert relative_improvement(new, old) == pytest.approx(expected, abs=0.01)

    @given(st.floats(-10, 10).filter(lambda x: x != 0))
    def test_identity(self, x):
        assert relative_improvement(x, x) == 0

    def test_zero_base(self):
        with pytest.raises(DivisionByZero):
            relative_improvement(0.5, 0.0)


class TestAblationTable:
    def test_dash_for_absent_heads(self, tmp_path):
        rows = [AblationRow(label, heads, {h: 0.5 for h in heads}) for label, heads in ABLATION_CONFIGS]
        table = AblationTable(rows)
        header, body = table.as_table()
        assert header == ["Excluded Param", "VP", "EGG-env", "Per", "Aper", "F0"]
        assert body[0] == ["EGG-env, 3 SFs", "0.5000", "-", "-", "-", "-"]
        assert body[3][0] == "-" and "-" not in body[3][1:]
        table.write_csv(tmp_path / "t.csv")
        assert list(csv.reader(open(tmp_path / "t.csv")))[1] == body[0]
        assert table.vp("-") == 0.5
