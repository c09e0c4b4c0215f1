"""PPMC scoring, speaker-independent folds, aggregation and ablations."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DivisionByZero, EmptyInput, InsufficientSpeakers, ZeroVariance
from .losses import pearson
from .model import HEADS_FULL, ModelConfig, ModelParameters
from .trainer import TrainingConfig, TrainingCorpus, predict, train

log = logging.getLogger(__name__)

TARGET_LABELS = {"vp": "VP", "egg_env": "EGG-env", "per": "Per", "aper": "Aper", "f0": "F0"}


def ppmc(a, b) -> float:
    """Pearson product-moment correlation; :class:`ZeroVariance` on constant input."""
    return pearson(a, b)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    train: frozenset
    dev: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.dev or self.dev & self.test or self.train & self.test:
            raise ValueError("train/dev/test speaker sets must be disjoint")

    def to_dict(self):
        return {k: sorted(getattr(self, k)) for k in ("train", "dev", "test")}

    @classmethod
    def from_dict(cls, d):
        return cls(frozenset(d["train"]), frozenset(d["dev"]), frozenset(d["test"]))


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple
    seed: int
    order: tuple

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, i):
        return self.folds[i]

    @property
    def test_counts(self):
        counts = {s: 0 for s in self.order}
        for f in self.folds:
            for s in f.test:
                counts[s] += 1
        return counts

    @property
    def repeated_test_speakers(self):
        return sorted(s for s, c in self.test_counts.items() if c > 1)

    def to_dict(self):
        return {
            "seed": self.seed,
            "speaker_order": list(self.order),
            "repeated_test_speakers": self.repeated_test_speakers,
            "folds": [f.to_dict() for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(SplitManifest.from_dict(f) for f in d["folds"]), d["seed"], tuple(d["speaker_order"]))


def make_folds(speakers: Sequence[str], seed: int = 0, n_folds: int = 5, n_train: int = 8,
               n_dev: int = 3, n_test: int = 3) -> FoldSpec:
    """Rotation folds over a seeded speaker permutation.

    Fold ``k`` tests on positions ``k*n_test ...`` (wrapping), develops on the
    next ``n_dev`` and trains on the following ``n_train``. With 14 speakers
    and 5 x 3 test slots exactly one speaker (the first in the permuted
    order) is tested twice.
    """
    speakers = sorted(set(speakers))
    n = len(speakers)
    if n < n_train + n_dev + n_test:
        raise InsufficientSpeakers(f"{n} speakers, need at least {n_train + n_dev + n_test}")
    rng = np.random.default_rng(seed)
    order = tuple(speakers[i] for i in rng.permutation(n))
    folds = []
    for k in range(n_folds):
        base = k * n_test
        pick = lambda off, cnt: frozenset(order[(base + off + j) % n] for j in range(cnt))  # noqa: E731
        test = pick(0, n_test)
        dev = pick(n_test, n_dev)
        train_ = pick(n_test + n_dev, n_train)
        folds.append(SplitManifest(train_, dev, test))
    spec = FoldSpec(tuple(folds), seed, order)
    uncovered = [s for s, c in spec.test_counts.items() if c == 0]
    if uncovered:
        log.warning("speakers never tested: %s", uncovered)
    return spec


def split_items(items, split: SplitManifest):
    """Partition prepared items by speaker into (TrainingCorpus, test items)."""
    pick = lambda ids: [it for it in items if it.speaker_id in ids]  # noqa: E731
    return TrainingCorpus(pick(split.train), pick(split.dev)), pick(split.test)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass
class TestScores:
    """Utterance-mean PPMC per target, with the pooled-frame alternative."""

    ppmc: dict
    pooled: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    n_utterances: int = 0


Predictor = Union[ModelParameters, Callable]


def evaluate(model: Predictor, test_items) -> TestScores:
    """Per-utterance PPMC per target, averaged over utterances.

    ``model`` is either trained parameters or a callable mapping a list of
    items to a list of ``{head: prediction}`` dicts. Utterances where either
    side is constant are excluded for that target and counted in
    ``excluded``.
    """
    if not test_items:
        raise EmptyInput("empty test set")
    preds = predict(model, test_items) if isinstance(model, ModelParameters) else model(test_items)
    per_target = {}
    excluded = {}
    pooled_p, pooled_t = {}, {}
    for item, pred in zip(test_items, preds):
        for h, p in pred.items():
            if h not in item.targets:
                continue
            t = np.asarray(item.targets[h])
            n = min(len(p), len(t))
            pooled_p.setdefault(h, []).append(np.asarray(p[:n]))
            pooled_t.setdefault(h, []).append(t[:n])
            try:
                per_target.setdefault(h, []).append(ppmc(p[:n], t[:n]))
            except ZeroVariance:
                excluded[h] = excluded.get(h, 0) + 1
    scores = {h: float(np.mean(v)) for h, v in per_target.items() if v}
    pooled = {}
    for h in pooled_p:
        try:
            pooled[h] = ppmc(np.concatenate(pooled_p[h]), np.concatenate(pooled_t[h]))
        except ZeroVariance:
            pass
    for h, c in excluded.items():
        log.info("%s: %d utterance(s) excluded for zero variance", h, c)
    return TestScores(scores, pooled, excluded, len(test_items))


def echo_predictor(items):
    """Stub model that returns the ground truth."""
    return [dict(it.targets) for it in items]


@dataclass
class EvaluationReport:
    fold_scores: list
    mean: dict
    std: dict

    def formatted(self, target):
        return f"{self.mean[target]:.4f} ({self.std[target]:.2f})"

    def write_folds_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "target", "ppmc"])
            for k, sc in enumerate(self.fold_scores):
                for h in HEADS_FULL:
                    if h in sc:
                        w.writerow([k, h, repr(float(sc[h]))])

    def write_aggregate_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "mean", "std"])
            for h in HEADS_FULL:
                if h in self.mean:
                    w.writerow([h, repr(self.mean[h]), repr(self.std[h])])


def aggregate(fold_reports) -> EvaluationReport:
    """Mean and population standard deviation per target across folds."""
    scores = [r.ppmc if isinstance(r, TestScores) else dict(r) for r in fold_reports]
    if not scores:
        raise EmptyInput("no folds to aggregate")
    targets = [h for h in HEADS_FULL if any(h in s for s in scores)]
    mean, std = {}, {}
    for h in targets:
        vals = np.array([s[h] for s in scores if h in s])
        mean[h] = float(vals.mean())
        std[h] = float(vals.std(ddof=0))
    return EvaluationReport(scores, mean, std)


def relative_improvement(new: float, old: float) -> float:
    """Percentage change of ``new`` over ``old``."""
    if old == 0:
        raise DivisionByZero("relative improvement over zero is undefined")
    return 100.0 * (new - old) / old


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = (
    ("EGG-env, 3 SFs", ("vp",)),
    ("EGG-env", ("vp", "per", "aper", "f0")),
    ("3 SFs", ("vp", "egg_env")),
    ("-", HEADS_FULL),
)


@dataclass
class AblationRow:
    excluded: str
    heads: tuple
    scores: dict


@dataclass
class AblationTable:
    rows: list

    def as_table(self):
        header = ["Excluded Param"] + [TARGET_LABELS[h] for h in HEADS_FULL]
        body = []
        for r in self.rows:
            body.append([r.excluded] + [f"{r.scores[h]:.4f}" if h in r.scores else "-" for h in HEADS_FULL])
        return header, body

    def write_csv(self, path):
        header, body = self.as_table()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(body)

    def vp(self, excluded):
        return next(r.scores["vp"] for r in self.rows if r.excluded == excluded)


def ablation_matrix(corpus: TrainingCorpus, test_items, model_cfg: ModelConfig, train_cfg: TrainingConfig,
                    configs=ABLATION_CONFIGS) -> AblationTable:
    """Train and score one model per head subset with identical seeds and splits."""
    rows = []
    for label, heads in configs:
        cfg = replace(model_cfg, heads=heads)
        params, _ = train(cfg, train_cfg, corpus)
        scores = evaluate(params, test_items).ppmc
        rows.append(AblationRow(label, cfg.heads, {h: scores[h] for h in cfg.heads if h in scores}))
        log.info("ablation %-16s vp %.4f", label, scores.get("vp", float("nan")))
    return AblationTable(rows)
