"""Correlation + RMSE regression loss and its gradient.

Each task term is ``(1 - PC) + alpha * RMSE``. Task 1 is the nasalance
head; task 2 averages the same term over whichever auxiliary heads exist.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, ZeroVariance

log = logging.getLogger(__name__)

PRIMARY_HEAD = "vp"
VARIANCE_FLOOR = 1e-12


def _centered(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean()


def pearson(a, b) -> float:
    """Pearson product-moment correlation of two equal-length sequences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson needs equal-length 1-D inputs, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("pearson needs at least two samples")
    ac, bc = _centered(a), _centered(b)
    na, nb = np.sqrt(ac @ ac), np.sqrt(bc @ bc)
    if na * na <= VARIANCE_FLOOR * a.shape[0] or nb * nb <= VARIANCE_FLOOR * b.shape[0]:
        raise ZeroVariance("pearson is undefined for a constant sequence")
    return float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0))


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def task_loss(pred, target, alpha: float = 0.2) -> float:
    return task_loss_and_grad(pred, target, alpha)[0]


def task_loss_and_grad(pred, target, alpha: float = 0.2):
    """Returns ``(loss, d loss / d pred, pc, rmse)``.

    Raises :class:`ZeroVariance` when the target is constant. A constant
    prediction gets PC = 0 and no PC gradient.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = p.shape[0]
    if n < 2 or t.shape != p.shape:
        raise ValueError(f"task loss needs equal lengths >= 2, got {p.shape} and {t.shape}")
    tc = t - t.mean()
    tt = tc @ tc
    if tt <= VARIANCE_FLOOR * n:
        raise ZeroVariance("target has zero variance")
    pc_ = p - p.mean()
    pp = pc_ @ pc_
    diff = p - t
    err = float(np.sqrt(diff @ diff / n))
    grad = np.zeros(n)
    if pp > 0:
        norm_p, norm_t = np.sqrt(pp), np.sqrt(tt)
        pc = float((pc_ @ tc) / (norm_p * norm_t))
        grad -= tc / (norm_p * norm_t) - pc * pc_ / pp
    else:
        pc = 0.0
    if err > 0:
        grad += alpha * diff / (n * err)
    return (1.0 - pc) + alpha * err, grad, pc, err


@dataclass
class LossResult:
    total: float
    grads: dict
    # per-head mean PC and RMSE over contributing segments, for logging
    pc: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    skipped: int = 0
    n_segments: int = 0


def total_loss_and_grads(preds, targets, lengths=None, alpha: float = 0.2) -> LossResult:
    """Batch loss: per segment, the vp term plus the mean auxiliary term;
    then the mean over segments.

    ``preds`` and ``targets`` map head name to (B, 2T) arrays (or 1-D for a
    single segment). Only the first ``2 * lengths[b]`` frames of segment
    ``b`` count. Heads missing from ``targets`` are ignored; a head whose
    target is constant within a segment is skipped for that segment.
    """
    heads = [h for h in preds if h in targets]
    single = np.asarray(preds[heads[0]]).ndim == 1 if heads else False
    P = {h: np.atleast_2d(np.asarray(preds[h], dtype=np.float64)) for h in heads}
    Tg = {h: np.atleast_2d(np.asarray(targets[h], dtype=np.float64)) for h in heads}
    if not heads:
        raise EmptyBatch("no overlapping heads between predictions and targets")
    B, T2 = P[heads[0]].shape
    if lengths is None:
        valid = np.full(B, T2)
    else:
        valid = 2 * np.asarray(lengths, dtype=np.int64)
    grads = {h: np.zeros((B, T2)) for h in heads}
    aux = [h for h in heads if h != PRIMARY_HEAD]
    pcs = {h: [] for h in heads}
    errs = {h: [] for h in heads}
    seg_losses = []
    seg_grads = []
    skipped = 0
    for b in range(B):
        n = int(valid[b])
        if n < 2:
            continue
        seg_loss = 0.0
        contrib = {}
        terms = 0
        if PRIMARY_HEAD in heads:
            try:
                l, g, pc, e = task_loss_and_grad(P[PRIMARY_HEAD][b, :n], Tg[PRIMARY_HEAD][b, :n], alpha)
                seg_loss += l
                contrib[PRIMARY_HEAD] = g
                pcs[PRIMARY_HEAD].append(pc)
                errs[PRIMARY_HEAD].append(e)
                terms += 1
            except ZeroVariance:
                skipped += 1
        aux_terms = {}
        for h in aux:
            try:
                l, g, pc, e = task_loss_and_grad(P[h][b, :n], Tg[h][b, :n], alpha)
            except ZeroVariance:
                skipped += 1
                continue
            aux_terms[h] = (l, g)
            pcs[h].append(pc)
            errs[h].append(e)
        if aux_terms:
            k = len(aux_terms)
            seg_loss += sum(l for l, _ in aux_terms.values()) / k
            for h, (_, g) in aux_terms.items():
                contrib[h] = g / k
            terms += 1
        if terms:
            seg_losses.append(seg_loss)
            seg_grads.append((b, n, contrib))
    if skipped:
        log.debug("skipped %d zero-variance head terms", skipped)
    if not seg_losses:
        raise EmptyBatch("no segment in the batch has a valid loss term")
    m = len(seg_losses)
    for b, n, contrib in seg_grads:
        for h, g in contrib.items():
            grads[h][b, :n] = g / m
    if single:
        grads = {h: g[0] for h, g in grads.items()}
    return LossResult(
        total=float(np.mean(seg_losses)),
        grads=grads,
        pc={h: float(np.mean(v)) for h, v in pcs.items() if v},
        rmse={h: float(np.mean(v)) for h, v in errs.items() if v},
        skipped=skipped,
        n_segments=m,
    )


def total_loss(preds, targets, lengths=None, alpha: float = 0.2) -> float:
    return total_loss_and_grads(preds, targets, lengths, alpha).total
