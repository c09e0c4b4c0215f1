import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nasalsi.errors import InvalidArgument, NumericError, ShapeError, StateError
from nasalsi.model import (
    HEADS_FULL,
    HEADS_NO_EGG,
    Batch,
    ModelConfig,
    backward,
    batch_norm_apply,
    bigru,
    collate,
    forward,
    forward_stack,
    gradient_check,
    init_params,
    loss_and_grads,
    update_running_stats,
)

TINY = ModelConfig(n_layers=3, input_dim=6, hidden=8, dense=8, dropout_p=0.3, seed=5)
MICRO = ModelConfig(n_layers=2, input_dim=3, hidden=3, dense=3, dropout_p=0.3, seed=2)


def make_batch(cfg, lengths, seed=0, heads=None):
    r = np.random.default_rng(seed)
    heads = cfg.heads if heads is None else heads
    stacks = [r.standard_normal((cfg.n_layers, n, cfg.input_dim)) for n in lengths]
    targets = [{h: np.sin(np.arange(2 * n) * (0.3 + 0.1 * k) + r.uniform(0, 3)) for k, h in enumerate(heads)}
               for n in lengths]
    return collate(stacks, targets, heads)


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_params(TINY), init_params(TINY)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_different_seed_differs(self):
        a = init_params(TINY)
        b = init_params(ModelConfig(n_layers=3, input_dim=6, hidden=8, dense=8, seed=6))
        assert any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_egg_free_heads(self):
        p = init_params(ModelConfig(heads=HEADS_NO_EGG, hidden=4, dense=4))
        assert not any(k.startswith("head.egg_env") for k in p.tensors)
        assert p.config.heads == HEADS_NO_EGG

    def test_shapes(self):
        p = init_params(TINY)
        assert p.tensors["layer_weights"].shape == (3,)
        assert p.tensors["gru1_fwd.W"].shape == (6, 24)
        assert p.tensors["gru2_fwd.W"].shape == (16, 24)
        assert p.tensors["dense.W"].shape == (16, 8)
        assert p.tensors["head.vp.W"].shape == (8, 1)

    def test_config_validation(self):
        with pytest.raises(InvalidArgument):
            ModelConfig(dropout_p=1.0)
        with pytest.raises(InvalidArgument):
            ModelConfig(heads=("per",))
        assert ModelConfig(heads=("f0", "vp")).heads == ("vp", "f0")

    def test_drop_head(self):
        p = init_params(TINY).drop_head("egg_env")
        assert p.config.heads == HEADS_NO_EGG
        assert "head.egg_env.W" not in p.tensors


class TestForward:
    @pytest.mark.parametrize("T", [1, 13, 50, 100, 250])
    def test_output_length(self, T):
        p = init_params(TINY)
        out, _ = forward(p, np.random.default_rng(T).standard_normal((T, 6)))
        assert set(out) == set(HEADS_FULL)
        assert all(v.shape == (2 * T,) for v in out.values())

    @settings(max_examples=15, deadline=None)
    @given(T=st.integers(1, 500))
    def test_output_length_property(self, T):
        p = init_params(MICRO)
        out, _ = forward(p, np.zeros((T, 3)))
        assert all(len(v) == 2 * T for v in out.values())

    def test_eval_deterministic(self):
        p = init_params(TINY)
        x = np.random.default_rng(0).standard_normal((20, 6))
        a, _ = forward(p, x)
        b, _ = forward(p, x)
        assert all(np.array_equal(a[h], b[h]) for h in a)

    def test_train_without_dropout_matches_eval(self):
        cfg = ModelConfig(n_layers=3, input_dim=6, hidden=8, dense=8, dropout_p=0.0)
        p = init_params(cfg)
        x = np.random.default_rng(0).standard_normal((20, 6))
        a, _ = forward(p, x, mode="eval")
        b, _ = forward(p, x, mode="train", bn_running=True)
        assert all(np.max(np.abs(a[h] - b[h])) < 1e-6 for h in a)

    def test_nan_input(self):
        x = np.zeros((5, 6))
        x[2, 1] = np.nan
        with pytest.raises(NumericError):
            forward(init_params(TINY), x)

    def test_dropout_needs_rng(self):
        with pytest.raises(InvalidArgument):
            forward(init_params(TINY), np.zeros((5, 6)), mode="train")

    def test_wrong_dims(self):
        with pytest.raises(ShapeError):
            forward(init_params(TINY), np.zeros((5, 7)))
        with pytest.raises(ShapeError):
            forward_stack(init_params(TINY), np.zeros((4, 5, 6)))

    def test_padding_does_not_change_outputs(self):
        p = init_params(TINY)
        b = make_batch(TINY, [9, 5])
        out, _ = forward_stack(p, b.stacks, b.lengths)
        alone, _ = forward_stack(p, b.stacks[1, :, :5])
        for h in out:
            np.testing.assert_allclose(out[h][1, :10], alone[h], atol=1e-12)

    def test_bigru_time_reversal(self):
        p = init_params(TINY)
        x = np.random.default_rng(1).standard_normal((2, 11, 6))
        mask = np.ones((2, 11))
        out, _ = bigru(x, mask, p.tensors, "gru1_fwd", "gru1_bwd")
        rev, _ = bigru(x[:, ::-1], mask, p.tensors, "gru1_bwd", "gru1_fwd")
        rev = rev[:, ::-1]
        H = TINY.hidden
        swapped = np.concatenate([rev[:, :, H:], rev[:, :, :H]], axis=2)
        np.testing.assert_allclose(swapped, out, atol=1e-9)

    def test_batch_norm_eval_is_affine(self):
        r = np.random.default_rng(4)
        mean, var = r.standard_normal(5), r.uniform(0.5, 2, 5)
        gamma, beta = r.standard_normal(5), r.standard_normal(5)
        u1, u2 = r.standard_normal((7, 5)), r.standard_normal((7, 5))
        lam = 0.3
        f = lambda u: batch_norm_apply(u, mean, var, gamma, beta, 1e-5)[0]  # noqa: E731
        np.testing.assert_allclose(f(lam * u1 + (1 - lam) * u2), lam * f(u1) + (1 - lam) * f(u2), atol=1e-12)

    def test_running_stats_update(self):
        p = init_params(TINY)
        b = make_batch(TINY, [8, 8])
        _, tape = forward_stack(p, b.stacks, b.lengths, mode="train", rng=np.random.default_rng(0))
        before = p.buffers["bn.running_mean"].copy()
        update_running_stats(p, tape)
        np.testing.assert_allclose(p.buffers["bn.running_mean"], 0.9 * before + 0.1 * tape.bn_mean)

    def test_bounded_inputs_stay_finite(self):
        p = init_params(MICRO)
        r = np.random.default_rng(0)
        for trial in range(1000):
            T = int(r.integers(1, 8))
            x = r.uniform(-10, 10, (2, MICRO.n_layers, T, MICRO.input_dim))
            b = Batch(x, np.array([T, max(1, T - 1)]),
                      {h: r.uniform(-1, 1, (2, 2 * T)) for h in MICRO.heads})
            out, tape = forward_stack(p, b.stacks, b.lengths, mode="train", rng=r)
            assert all(np.all(np.isfinite(v)) for v in out.values())
            grads = backward(p, tape, {h: r.standard_normal((2, 2 * T)) for h in MICRO.heads})
            assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestBackward:
    def test_missing_tape(self):
        with pytest.raises(StateError):
            backward(init_params(TINY), None, {})

    def test_zero_upstream(self):
        p = init_params(TINY)
        b = make_batch(TINY, [6])
        _, tape = forward_stack(p, b.stacks, b.lengths, mode="train", rng=np.random.default_rng(0))
        grads = backward(p, tape, {h: np.zeros((1, 12)) for h in TINY.heads})
        assert set(grads) == set(p.tensors)
        assert all(not np.any(g) for g in grads.values())
        assert all(grads[k].shape == p.tensors[k].shape for k in grads)

    def test_duplicate_item_doubles_gradient(self):
        p = init_params(TINY)
        b = make_batch(TINY, [7])
        up = {h: np.random.default_rng(9).standard_normal((1, 14)) for h in TINY.heads}
        _, t1 = forward_stack(p, b.stacks, b.lengths)
        g1 = backward(p, t1, up)
        _, t2 = forward_stack(p, np.concatenate([b.stacks, b.stacks]), np.array([7, 7]))
        g2 = backward(p, t2, {h: np.concatenate([v, v]) for h, v in up.items()})
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-9, atol=1e-12)

    def test_input_gradient(self):
        p = init_params(MICRO)
        x = np.random.default_rng(0).standard_normal((4, 3))
        w = np.random.default_rng(1).standard_normal(8)
        _, tape = forward(p, x)
        _, dx = backward(p, tape, {"vp": w}, input_grad=True)
        eps = 1e-6
        e = np.zeros_like(x)
        e[2, 1] = eps
        num = (forward(p, x + e)[0]["vp"] @ w - forward(p, x - e)[0]["vp"] @ w) / (2 * eps)
        assert abs(num - dx[2, 1]) < 1e-7


class TestGradientCheck:
    def test_micro_model_train_mode(self):
        p = init_params(MICRO)
        b = make_batch(MICRO, [5, 4], seed=3)
        assert gradient_check(p, b, epsilon=1e-4) < 1e-4

    def test_linear_loss_is_exact(self):
        p = init_params(MICRO)
        coeffs = {k: np.random.default_rng(len(k)).standard_normal(v.shape) for k, v in p.tensors.items()}

        def linear(q):
            return sum(float(np.sum(coeffs[k] * q.tensors[k])) for k in coeffs), coeffs

        assert gradient_check(p, None, epsilon=1e-3, loss_fn=linear) < 1e-8

    def test_zero_epsilon(self):
        with pytest.raises(InvalidArgument):
            gradient_check(init_params(MICRO), make_batch(MICRO, [3]), epsilon=0)

    def test_loss_and_grads_reproducible(self):
        p = init_params(MICRO)
        b = make_batch(MICRO, [5, 3])
        l1, g1 = loss_and_grads(p, b, seed=4)
        l2, g2 = loss_and_grads(p, b, seed=4)
        assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)
