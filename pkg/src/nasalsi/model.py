"""Multi-task sequence regressor with hand-written reverse-mode gradients.

Graph (per batch, frames at 50 Hz unless noted)::

    stack (B, L, T, D) --layer weights--> fused (B, T, D)
    -> biGRU -> dropout -> biGRU -> dropout -> dense + tanh
    -> linear 2x upsample (100 Hz) -> batch norm -> dropout
    -> one linear head per target

Sequences of different length share a batch by right-padding; ``lengths``
holds the valid frame counts and every stage masks the padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidArgument, NumericError, ShapeError, StateError
from .features import layer_weighted_sum, layer_weighted_sum_grad

HEADS_FULL = ("vp", "egg_env", "per", "aper", "f0")
HEADS_NO_EGG = ("vp", "per", "aper", "f0")
GRU_BLOCKS = ("gru1_fwd", "gru1_bwd", "gru2_fwd", "gru2_bwd")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 25
    input_dim: int = 40
    hidden: int = 32
    dense: int = 32
    dropout_p: float = 0.3
    heads: tuple = HEADS_FULL
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidArgument(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        heads = tuple(self.heads)
        unknown = set(heads) - set(HEADS_FULL)
        if unknown or "vp" not in heads:
            raise InvalidArgument(f"heads must include 'vp' and be drawn from {HEADS_FULL}, got {heads}")
        # canonical order keeps parameter iteration deterministic
        object.__setattr__(self, "heads", tuple(h for h in HEADS_FULL if h in heads))
        for name in ("n_layers", "input_dim", "hidden", "dense"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")


@dataclass
class ModelParameters:
    """Trainable ``tensors`` plus batch-norm running statistics in ``buffers``."""

    config: ModelConfig
    tensors: dict
    buffers: dict

    def copy(self):
        return ModelParameters(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def n_params(self):
        return int(sum(v.size for v in self.tensors.values()))

    def drop_head(self, head):
        """Remove one output head (used when adapting to EGG-free data)."""
        heads = tuple(h for h in self.config.heads if h != head)
        tensors = {k: v for k, v in self.tensors.items() if not k.startswith(f"head.{head}.")}
        return ModelParameters(replace(self.config, heads=heads), tensors, dict(self.buffers))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig) -> ModelParameters:
    """Fan-in scaled uniform initialization, deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    H, K, D, L = config.hidden, config.dense, config.input_dim, config.n_layers
    t = {"layer_weights": np.full(L, 1.0 / L)}
    for block in GRU_BLOCKS:
        d_in = D if block.startswith("gru1") else 2 * H
        t[f"{block}.W"] = _uniform(rng, (d_in, 3 * H), H)
        t[f"{block}.U"] = _uniform(rng, (H, 3 * H), H)
        t[f"{block}.b"] = _uniform(rng, (3 * H,), H)
    t["dense.W"] = _uniform(rng, (2 * H, K), 2 * H)
    t["dense.b"] = _uniform(rng, (K,), 2 * H)
    t["bn.gamma"] = np.ones(K)
    t["bn.beta"] = np.zeros(K)
    for h in config.heads:
        t[f"head.{h}.W"] = _uniform(rng, (K, 1), K)
        t[f"head.{h}.b"] = np.zeros(1)
    buffers = {"bn.running_mean": np.zeros(K), "bn.running_var": np.ones(K)}
    return ModelParameters(config, t, buffers)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def gru_scan(x, mask, W, U, b):
    """Run one GRU direction left to right over (B, T, D_in) inputs.

    ``h_t = (1 - z) * h_{t-1} + z * tanh(a_n + (r * h_{t-1}) U_n)``; on
    padded steps (mask 0) the state is carried unchanged.
    """
    B, T, _ = x.shape
    H = U.shape[0]
    a = x @ W + b
    Uzr, Un = U[:, : 2 * H], U[:, 2 * H :]
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    hprev = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    for t in range(T):
        at = a[:, t]
        zr = _sigmoid(at[:, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(at[:, 2 * H :] + (r * h) @ Un)
        hprev[:, t] = h
        zs[:, t], rs[:, t], ns[:, t] = z, r, n
        h = h + mask[:, t, None] * z * (n - h)
        hs[:, t] = h
    cache = (x, mask, hprev, zs, rs, ns)
    return hs, cache


def gru_scan_backward(dhs, cache, W, U):
    x, mask, hprev, zs, rs, ns = cache
    B, T, H = dhs.shape
    Uzr, Un = U[:, : 2 * H], U[:, 2 * H :]
    da = np.empty((B, T, 3 * H))
    dUzr = np.zeros_like(Uzr)
    dUn = np.zeros_like(Un)
    dh = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        m = mask[:, t, None]
        hp, z, r, n = hprev[:, t], zs[:, t], rs[:, t], ns[:, t]
        dhn = m * dh
        dh_prev = dh - dhn * z
        dpn = dhn * z * (1.0 - n * n)
        drh = dpn @ Un.T
        dUn += (r * hp).T @ dpn
        dh_prev += drh * r
        dzr = np.concatenate([dhn * (n - hp) * z * (1.0 - z), drh * hp * r * (1.0 - r)], axis=1)
        dUzr += hp.T @ dzr
        dh_prev += dzr @ Uzr.T
        da[:, t, : 2 * H] = dzr
        da[:, t, 2 * H :] = dpn
        dh = dh_prev
    dW = np.einsum("bti,btj->ij", x, da)
    db = da.sum(axis=(0, 1))
    dx = da @ W.T
    return dx, dW, np.concatenate([dUzr, dUn], axis=1), db


def bigru(x, mask, tensors, fwd, bwd):
    """Bidirectional layer: forward and time-reversed passes, concatenated."""
    hf, cf = gru_scan(x, mask, tensors[f"{fwd}.W"], tensors[f"{fwd}.U"], tensors[f"{fwd}.b"])
    hb, cb = gru_scan(x[:, ::-1], mask[:, ::-1], tensors[f"{bwd}.W"], tensors[f"{bwd}.U"], tensors[f"{bwd}.b"])
    return np.concatenate([hf, hb[:, ::-1]], axis=2), (cf, cb)


def bigru_backward(dout, cache, tensors, fwd, bwd, grads):
    cf, cb = cache
    H = dout.shape[2] // 2
    dxf, dWf, dUf, dbf = gru_scan_backward(dout[:, :, :H], cf, tensors[f"{fwd}.W"], tensors[f"{fwd}.U"])
    dxb, dWb, dUb, dbb = gru_scan_backward(
        np.ascontiguousarray(dout[:, ::-1, H:]), cb, tensors[f"{bwd}.W"], tensors[f"{bwd}.U"]
    )
    grads[f"{fwd}.W"], grads[f"{fwd}.U"], grads[f"{fwd}.b"] = dWf, dUf, dbf
    grads[f"{bwd}.W"], grads[f"{bwd}.U"], grads[f"{bwd}.b"] = dWb, dUb, dbb
    return dxf + dxb[:, ::-1]


# ---------------------------------------------------------------------------
# Upsampling and batch norm
# ---------------------------------------------------------------------------

def _next_index(lengths, T):
    t = np.arange(T)[None, :]
    last = np.maximum(np.asarray(lengths)[:, None] - 1, 0)
    return np.where(t < last, t + 1, np.minimum(t, last))


def upsample_batch(y, lengths):
    """Per-sequence 2x linear upsampling; each sequence repeats its own last frame."""
    B, T, K = y.shape
    nxt = _next_index(lengths, T)
    bidx = np.arange(B)[:, None]
    out = np.empty((B, 2 * T, K))
    out[:, 0::2] = y
    out[:, 1::2] = 0.5 * (y + y[bidx, nxt])
    return out, nxt


def upsample_batch_backward(dout, nxt):
    B = dout.shape[0]
    half = 0.5 * dout[:, 1::2]
    dy = dout[:, 0::2] + half
    bidx = np.broadcast_to(np.arange(B)[:, None], nxt.shape)
    np.add.at(dy, (bidx, nxt), half)
    return dy


def batch_norm_apply(x, mean, var, gamma, beta, eps):
    """Normalize features with given statistics; returns (out, xhat, 1/std)."""
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, xhat, inv_std


def _dropout(shape, p, rng):
    if p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Intermediate values recorded by :func:`forward` for :func:`backward`."""

    lengths: np.ndarray
    stack: Optional[np.ndarray]
    fused: np.ndarray
    mask: np.ndarray
    mask2: np.ndarray
    g1: tuple
    g2: tuple
    h1: np.ndarray
    h2: np.ndarray
    drop1: Optional[np.ndarray]
    drop2: Optional[np.ndarray]
    drop3: Optional[np.ndarray]
    dense_out: np.ndarray
    nxt: np.ndarray
    bn_xhat: np.ndarray
    bn_inv_std: np.ndarray
    bn_batch_stats: bool
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_count: int
    head_in: np.ndarray
    squeeze: bool
    consumed: bool = False


def forward_stack(params: ModelParameters, stack, lengths=None, mode="eval", rng=None, bn_running=None):
    """Forward pass from a feature stack (L, T, D) or batch (B, L, T, D)."""
    s = np.asarray(stack, dtype=np.float64)
    squeeze = s.ndim == 3
    if squeeze:
        s = s[None]
    if s.ndim != 4 or s.shape[1] != params.config.n_layers:
        raise ShapeError(f"expected (B, {params.config.n_layers}, T, D) stack, got {np.shape(stack)}")
    fused = layer_weighted_sum(s, params.tensors["layer_weights"])
    outputs, tape = _forward_fused(params, fused, lengths, mode, rng, bn_running, squeeze)
    tape.stack = s
    return outputs, tape


def forward(params: ModelParameters, fused, lengths=None, mode="eval", rng=None, bn_running=None):
    """Forward pass from already fused features (T, D) or (B, T, D).

    Returns ``(outputs, tape)`` where ``outputs`` maps each head to a
    sequence of twice the input length. ``mode="train"`` enables dropout and
    batch statistics; ``bn_running=True`` forces running statistics even in
    train mode.
    """
    x = np.asarray(fused, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    return _forward_fused(params, x, lengths, mode, rng, bn_running, squeeze)


def _forward_fused(params, x, lengths, mode, rng, bn_running, squeeze):
    if mode not in ("train", "eval"):
        raise InvalidArgument(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    tz = params.tensors
    B, T, D = x.shape
    if T < 1:
        raise ShapeError("need at least one frame")
    if D != cfg.input_dim:
        raise ShapeError(f"input dim {D} does not match model input_dim {cfg.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in model input")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ShapeError(f"lengths {lengths} incompatible with batch of {B} x {T}")
    train = mode == "train"
    use_batch_stats = train and not bn_running
    p = cfg.dropout_p if train else 0.0
    if train and p > 0 and rng is None:
        raise InvalidArgument("train mode with dropout needs an rng")

    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    mask2 = (np.arange(2 * T)[None, :] < 2 * lengths[:, None]).astype(np.float64)

    h1, g1 = bigru(x, mask, tz, "gru1_fwd", "gru1_bwd")
    drop1 = _dropout(h1.shape, p, rng)
    h1d = h1 * drop1 if drop1 is not None else h1
    h2, g2 = bigru(h1d, mask, tz, "gru2_fwd", "gru2_bwd")
    drop2 = _dropout(h2.shape, p, rng)
    h2d = h2 * drop2 if drop2 is not None else h2
    dense_out = np.tanh(h2d @ tz["dense.W"] + tz["dense.b"])
    up, nxt = upsample_batch(dense_out, lengths)

    m2 = mask2[:, :, None]
    if use_batch_stats:
        count = int(mask2.sum())
        mean = (up * m2).sum(axis=(0, 1)) / count
        var = (((up - mean) ** 2) * m2).sum(axis=(0, 1)) / count
    else:
        count = 0
        mean = params.buffers["bn.running_mean"]
        var = params.buffers["bn.running_var"]
    bn_out, xhat, inv_std = batch_norm_apply(up, mean, var, tz["bn.gamma"], tz["bn.beta"], cfg.bn_eps)
    drop3 = _dropout(bn_out.shape, p, rng)
    head_in = bn_out * drop3 if drop3 is not None else bn_out

    outputs = {}
    for h in cfg.heads:
        y = (head_in @ tz[f"head.{h}.W"])[..., 0] + tz[f"head.{h}.b"][0]
        outputs[h] = y[0] if squeeze else y
    tape = Tape(
        lengths=lengths, stack=None, fused=x, mask=mask, mask2=mask2, g1=g1, g2=g2, h1=h1, h2=h2,
        drop1=drop1, drop2=drop2, drop3=drop3, dense_out=dense_out, nxt=nxt, bn_xhat=xhat,
        bn_inv_std=inv_std, bn_batch_stats=use_batch_stats, bn_mean=mean, bn_var=var,
        bn_count=count, head_in=head_in, squeeze=squeeze,
    )
    return outputs, tape


def update_running_stats(params: ModelParameters, tape: Tape):
    """Fold the batch statistics recorded on ``tape`` into the running averages."""
    if not tape.bn_batch_stats:
        return
    mom = params.config.bn_momentum
    n = tape.bn_count
    unbiased = tape.bn_var * n / max(n - 1, 1)
    buf = params.buffers
    buf["bn.running_mean"] = (1 - mom) * buf["bn.running_mean"] + mom * tape.bn_mean
    buf["bn.running_var"] = (1 - mom) * buf["bn.running_var"] + mom * unbiased


def backward(params: ModelParameters, tape: Optional[Tape], loss_grads: dict, input_grad=False):
    """Gradients of the loss w.r.t. every trainable tensor.

    ``loss_grads`` maps head name to d loss / d output with the same shape
    as the forward outputs. With ``input_grad=True`` the gradient w.r.t. the
    model input is returned as a second value.
    """
    if tape is None:
        raise StateError("backward called without a forward tape")
    cfg = params.config
    tz = params.tensors
    grads = {}
    B = tape.fused.shape[0]
    T = tape.fused.shape[1]
    K = cfg.dense
    m2 = tape.mask2[:, :, None]

    d_head_in = np.zeros((B, 2 * T, K))
    for h in cfg.heads:
        g = loss_grads.get(h)
        if g is None:
            g = np.zeros((B, 2 * T))
        else:
            g = np.asarray(g, dtype=np.float64)
            if tape.squeeze:
                g = g[None]
        g = g * tape.mask2
        grads[f"head.{h}.W"] = np.einsum("btk,bt->k", tape.head_in, g)[:, None]
        grads[f"head.{h}.b"] = np.array([g.sum()])
        d_head_in += g[:, :, None] * tz[f"head.{h}.W"][:, 0][None, None, :]

    d_bn = d_head_in * tape.drop3 if tape.drop3 is not None else d_head_in
    d_bn = d_bn * m2
    xhat = tape.bn_xhat
    grads["bn.gamma"] = (d_bn * xhat).sum(axis=(0, 1))
    grads["bn.beta"] = d_bn.sum(axis=(0, 1))
    dxhat = d_bn * tz["bn.gamma"]
    if tape.bn_batch_stats:
        n = tape.bn_count
        s1 = dxhat.sum(axis=(0, 1))
        s2 = (dxhat * xhat * m2).sum(axis=(0, 1))
        d_up = tape.bn_inv_std / n * (n * dxhat - s1 - xhat * s2) * m2
    else:
        d_up = dxhat * tape.bn_inv_std

    d_dense = upsample_batch_backward(d_up, tape.nxt)
    d_pre = d_dense * (1.0 - tape.dense_out**2)
    h2d = tape.h2 * tape.drop2 if tape.drop2 is not None else tape.h2
    grads["dense.W"] = np.einsum("bti,btk->ik", h2d, d_pre)
    grads["dense.b"] = d_pre.sum(axis=(0, 1))
    d_h2d = d_pre @ tz["dense.W"].T
    d_h2 = d_h2d * tape.drop2 if tape.drop2 is not None else d_h2d
    d_h1d = bigru_backward(d_h2, tape.g2, tz, "gru2_fwd", "gru2_bwd", grads)
    d_h1 = d_h1d * tape.drop1 if tape.drop1 is not None else d_h1d
    d_x = bigru_backward(d_h1, tape.g1, tz, "gru1_fwd", "gru1_bwd", grads)

    if tape.stack is not None:
        gw, gs = layer_weighted_sum_grad(tape.stack, tz["layer_weights"], d_x)
        grads["layer_weights"] = gw
        d_in = gs
    else:
        grads["layer_weights"] = np.zeros_like(tz["layer_weights"])
        d_in = d_x
    if tape.squeeze:
        d_in = d_in[0]
    ordered = {k: grads[k] for k in tz}
    return (ordered, d_in) if input_grad else ordered


# ---------------------------------------------------------------------------
# Batches and gradient checking
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded training batch: stacks (B, L, T, D), targets (B, 2T) per head."""

    stacks: np.ndarray
    lengths: np.ndarray
    targets: dict = field(default_factory=dict)


def collate(stacks, targets_list, heads):
    """Right-pad variable-length items into one :class:`Batch`."""
    lengths = np.array([s.shape[1] for s in stacks], dtype=np.int64)
    B, T = len(stacks), int(lengths.max())
    L, D = stacks[0].shape[0], stacks[0].shape[2]
    S = np.zeros((B, L, T, D))
    for i, s in enumerate(stacks):
        S[i, :, : s.shape[1]] = s
    targets = {}
    for h in heads:
        arr = np.zeros((B, 2 * T))
        for i, tg in enumerate(targets_list):
            v = tg[h]
            arr[i, : len(v)] = v
        targets[h] = arr
    return Batch(S, lengths, targets)


def loss_and_grads(params, batch: Batch, alpha=0.2, mode="train", seed=0):
    """Loss and parameter gradients on one batch with a fixed dropout draw."""
    from .losses import total_loss_and_grads

    rng = np.random.default_rng(seed)
    out, tape = forward_stack(params, batch.stacks, batch.lengths, mode, rng)
    res = total_loss_and_grads(out, batch.targets, batch.lengths, alpha)
    return res.total, backward(params, tape, res.grads)


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(params: ModelParameters, batch: Batch, epsilon=1e-4, alpha=0.2, mode="train",
                   seed=0, loss_fn=None, floor=1e-8):
    """Worst relative error between analytic and central-difference gradients.

    Every scalar of every trainable tensor is perturbed by ``+-epsilon``.
    ``loss_fn(params) -> (loss, grads)`` overrides the model loss; by default
    the full batch loss is used with the dropout draw fixed by ``seed``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    if loss_fn is None:
        def loss_fn(p):
            return loss_and_grads(p, batch, alpha, mode, seed)

    work = params.copy()
    _, analytic = loss_fn(work)
    worst = 0.0
    for name, tensor in work.tensors.items():
        flat = tensor.reshape(-1)
        g = np.asarray(analytic[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(work)
            flat[i] = orig - epsilon
            lm, _ = loss_fn(work)
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            worst = max(worst, float(relative_error(g[i], num, floor)))
    return worst
