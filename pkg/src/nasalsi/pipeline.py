"""Glue from utterance records to model-ready training items."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .features import FrontendConfig, extract_feature_stack
from .model import ModelParameters
from .targets import combined_audio, normalize_dataset, prepare_targets
from .trainer import TrainItem, predict

log = logging.getLogger(__name__)


@dataclass
class PreparedDataset:
    items: list
    stats: dict
    raw_traces: list


def map_items(fn, xs, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, xs))
    return [fn(x) for x in xs]


def align(stack, traces: dict):
    """Truncate features and targets so that targets are exactly 2x frames."""
    n = min(stack.shape[1], min(len(v) for v in traces.values()) // 2)
    return stack[:, :n], {k: np.asarray(v[: 2 * n], dtype=np.float64) for k, v in traces.items()}


def prepare_dataset(records, frontend: FrontendConfig = FrontendConfig(), stats=None, workers=1) -> PreparedDataset:
    """Targets (normalized within this dataset) plus feature stacks per record."""
    raw = map_items(prepare_targets, records, workers)
    normed, stats = normalize_dataset(raw, stats)
    stacks = map_items(lambda r: extract_feature_stack(combined_audio(r.oral, r.nasal), frontend).layers, records, workers)
    items = []
    for rec, tr, st in zip(records, normed, stacks):
        st, tg = align(st, tr.as_dict())
        items.append(TrainItem(rec.id, rec.speaker_id, st, tg))
    return PreparedDataset(items, stats, raw)


def teacher_items(items, teacher: ModelParameters):
    """Replace targets with a frozen teacher's eval-mode outputs, rescaled to [-1, 1] per head."""
    preds = predict(teacher, items)
    heads = teacher.config.heads
    lo = {h: min(p[h].min() for p in preds) for h in heads}
    hi = {h: max(p[h].max() for p in preds) for h in heads}
    out = []
    for it, p in zip(items, preds):
        tg = {h: 2 * (p[h] - lo[h]) / (hi[h] - lo[h]) - 1 for h in heads}
        out.append(TrainItem(it.utterance_id, it.speaker_id, it.stack, tg))
    return out
