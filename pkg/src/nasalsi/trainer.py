"""Optimization: ADAM, plateau scheduling, segment sampling, training and fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EmptyBatch, EmptyInput, InvalidArgument, NumericError, ShapeError, ZeroVariance
from .losses import pearson, total_loss_and_grads
from .model import (
    HEADS_NO_EGG,
    ModelConfig,
    ModelParameters,
    backward,
    collate,
    forward_stack,
    init_params,
    update_running_stats,
)

log = logging.getLogger(__name__)

FEATURE_HOP_S = 0.02


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.5
    patience: int = 2
    min_lr: float = 1e-6
    threshold: float = 1e-5


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = 0.2
    lr: float = 5e-4
    batch_size: int = 8
    seg_min_s: float = 2.0
    seg_max_s: float = 5.0
    plateau: PlateauConfig = PlateauConfig()
    early_stop_patience: int = 5
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.seg_min_s <= self.seg_max_s:
            raise InvalidArgument("need 0 < seg_min_s <= seg_max_s")
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.alpha < 0:
            raise InvalidArgument("alpha must be non-negative")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors):
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One bias-corrected ADAM update, applied in place.

    Raises :class:`NumericError` before touching anything if a gradient is
    not finite.
    """
    for k, g in grads.items():
        if k not in params:
            raise ShapeError(f"gradient for unknown tensor {k!r}")
        if np.shape(g) != params[k].shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored metric
    has gone ``patience`` epochs without improving by more than
    ``threshold``; never drop below ``min_lr``."""

    def __init__(self, lr, cfg: PlateauConfig = PlateauConfig()):
        self.lr = lr
        self.cfg = cfg
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if not math.isfinite(metric):
            raise NumericError(f"scheduler metric is not finite: {metric}")
        if metric < self.best - self.cfg.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.cfg.patience:
                self.lr = min(self.lr, max(self.lr * self.cfg.factor, self.cfg.min_lr))
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One prepared utterance: a (L, T, D) stack and (2T,) normalized targets."""

    utterance_id: str
    speaker_id: str
    stack: np.ndarray
    targets: dict

    @property
    def n_frames(self):
        return self.stack.shape[1]


@dataclass
class TrainingCorpus:
    train: list
    dev: list


@dataclass(frozen=True)
class Segment:
    """A span on the 20 ms frame grid of one utterance."""

    frame_start: int
    n_frames: int
    audio_rate_hz: int = 16000

    @property
    def duration_s(self):
        return self.n_frames * FEATURE_HOP_S

    @property
    def audio_span(self):
        hop = int(self.audio_rate_hz * FEATURE_HOP_S)
        return self.frame_start * hop, (self.frame_start + self.n_frames) * hop

    @property
    def target_span(self):
        return 2 * self.frame_start, 2 * (self.frame_start + self.n_frames)


def sample_segment(item: TrainItem, rng, cfg: TrainingConfig) -> Segment:
    """Uniformly long segment in [seg_min_s, seg_max_s] at a random start.

    Utterances shorter than ``seg_min_s`` are returned whole; a drawn length
    longer than the utterance is capped at the utterance.
    """
    total = item.n_frames
    if total == 0:
        raise EmptyInput(f"{item.utterance_id}: utterance has no frames")
    min_frames = int(round(cfg.seg_min_s / FEATURE_HOP_S))
    if total < min_frames:
        return Segment(0, total)
    duration = rng.uniform(cfg.seg_min_s, cfg.seg_max_s)
    n = min(int(round(duration / FEATURE_HOP_S)), total)
    start = int(rng.integers(0, total - n + 1))
    return Segment(start, n)


def cut(item: TrainItem, seg: Segment):
    s0, s1 = seg.target_span
    stack = item.stack[:, seg.frame_start: seg.frame_start + seg.n_frames]
    return stack, {h: v[s0:s1] for h, v in item.targets.items()}


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i: i + size]


# ---------------------------------------------------------------------------
# Evaluation helpers used during training
# ---------------------------------------------------------------------------

def predict(params: ModelParameters, items, batch_size=8):
    """Eval-mode predictions for whole utterances, one dict per item."""
    order = sorted(range(len(items)), key=lambda i: items[i].n_frames)
    preds = [None] * len(items)
    for idx in _batches(order, batch_size):
        batch = collate([items[i].stack for i in idx], [items[i].targets for i in idx], [])
        out, _ = forward_stack(params, batch.stacks, batch.lengths, mode="eval")
        for j, i in enumerate(idx):
            n = 2 * items[i].n_frames
            preds[i] = {h: out[h][j, :n] for h in out}
    return preds


def dataset_loss(params: ModelParameters, items, alpha, batch_size=8):
    """Mean total loss over whole utterances (eval mode) and mean vp PPMC."""
    heads = params.config.heads
    order = sorted(range(len(items)), key=lambda i: items[i].n_frames)
    loss_sum, count = 0.0, 0
    pcs = []
    for idx in _batches(order, batch_size):
        batch = collate([items[i].stack for i in idx], [items[i].targets for i in idx],
                        [h for h in heads if h in items[idx[0]].targets])
        out, _ = forward_stack(params, batch.stacks, batch.lengths, mode="eval")
        try:
            res = total_loss_and_grads(out, batch.targets, batch.lengths, alpha)
        except EmptyBatch:
            continue
        loss_sum += res.total * res.n_segments
        count += res.n_segments
        for j, i in enumerate(idx):
            n = 2 * items[i].n_frames
            try:
                pcs.append(pearson(out["vp"][j, :n], batch.targets["vp"][j, :n]))
            except (ZeroVariance, ValueError):
                pass
    if count == 0:
        raise EmptyBatch("no evaluable utterance in dev set")
    return loss_sum / count, (float(np.mean(pcs)) if pcs else float("nan"))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float
    seconds: float
    dev_vp_ppmc: float = float("nan")


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def rows(self):
        return [(r.epoch, r.train_loss, r.dev_loss, r.lr, r.seconds) for r in self.epochs]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,dev_loss,lr,seconds\n")
            for r in self.epochs:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.dev_loss!r},{r.lr!r},{r.seconds:.3f}\n")


def _check_items(items, config: ModelConfig):
    for it in items:
        L, _, D = it.stack.shape
        if L != config.n_layers or D != config.input_dim:
            raise ShapeError(
                f"{it.utterance_id}: stack is {L} layers x {D} dims, model expects "
                f"{config.n_layers} x {config.input_dim}"
            )


def train(model_cfg: ModelConfig, train_cfg: TrainingConfig, corpus: TrainingCorpus,
          init: Optional[ModelParameters] = None, checkpoint_fn=None):
    """Train on random segments, early-stopping on dev loss.

    Returns the parameters of the best dev epoch and the training history.
    Epoch 0 in the history is the evaluation before any update.
    ``checkpoint_fn(params, epoch)`` is called whenever the dev loss improves.
    """
    if not corpus.train or not corpus.dev:
        raise EmptyInput("training needs non-empty train and dev sets")
    params = init.copy() if init is not None else init_params(model_cfg)
    model_cfg = params.config
    _check_items(corpus.train + corpus.dev, model_cfg)
    heads = model_cfg.heads
    rng = np.random.default_rng(train_cfg.seed)
    state = OptimizerState.zeros_like(params.tensors)
    sched = PlateauScheduler(train_cfg.lr, train_cfg.plateau)
    history = History()

    t0 = time.perf_counter()
    dev_loss, dev_pc = dataset_loss(params, corpus.dev, train_cfg.alpha)
    history.epochs.append(EpochRecord(0, float("nan"), dev_loss, sched.lr, time.perf_counter() - t0, dev_pc))
    best_loss, best = dev_loss, params.copy()
    if checkpoint_fn is not None:
        checkpoint_fn(best, 0)
    bad = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(corpus.train))
        losses = []
        for idx in _batches(order, train_cfg.batch_size):
            pieces = [cut(corpus.train[i], sample_segment(corpus.train[i], rng, train_cfg)) for i in idx]
            batch = collate([p[0] for p in pieces], [p[1] for p in pieces],
                            [h for h in heads if h in pieces[0][1]])
            out, tape = forward_stack(params, batch.stacks, batch.lengths, mode="train", rng=rng)
            try:
                res = total_loss_and_grads(out, batch.targets, batch.lengths, train_cfg.alpha)
            except EmptyBatch:
                log.warning("epoch %d: skipped batch without valid loss terms", epoch)
                continue
            grads = backward(params, tape, res.grads)
            adam_step(params.tensors, grads, state, sched.lr)
            update_running_stats(params, tape)
            losses.append(res.total)
        dev_loss, dev_pc = dataset_loss(params, corpus.dev, train_cfg.alpha)
        lr_used = sched.lr
        sched.step(dev_loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.epochs.append(EpochRecord(epoch, train_loss, dev_loss, lr_used, time.perf_counter() - t0, dev_pc))
        log.info("epoch %d train %.4f dev %.4f vp-ppmc %.4f lr %.2e", epoch, train_loss, dev_loss, dev_pc, lr_used)
        if dev_loss < best_loss - train_cfg.plateau.threshold:
            best_loss, best, bad = dev_loss, params.copy(), 0
            history.best_epoch = epoch
            if checkpoint_fn is not None:
                checkpoint_fn(best, epoch)
        else:
            bad += 1
            if bad >= train_cfg.early_stop_patience:
                history.stopped_early = True
                log.info("early stop after epoch %d (best %d)", epoch, history.best_epoch)
                break
    return best, history


def finetune(pretrained: ModelParameters, child_corpus: TrainingCorpus, train_cfg: TrainingConfig,
             checkpoint_fn=None):
    """Warm-start training on child data with the EGG head removed."""
    params = pretrained
    if "egg_env" in params.config.heads:
        log.info("dropping egg_env head from the pretrained model before fine-tuning")
        params = params.drop_head("egg_env")
    if set(params.config.heads) != set(HEADS_NO_EGG) and not set(params.config.heads) <= set(HEADS_NO_EGG):
        raise ShapeError(f"unexpected head set {params.config.heads}")
    _check_items(child_corpus.train + child_corpus.dev, params.config)
    strip = lambda its: [replace(it, targets={h: v for h, v in it.targets.items() if h != "egg_env"})  # noqa: E731
                         for it in its]
    corpus = TrainingCorpus(strip(child_corpus.train), strip(child_corpus.dev))
    return train(params.config, train_cfg, corpus, init=params, checkpoint_fn=checkpoint_fn)
