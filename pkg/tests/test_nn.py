"""Gradient checks and unit behavior of the autodiff core."""

import math

import numpy as np
import pytest

from asrlab.nn import (
    BlstmLayer,
    LrSchedule,
    MultiHeadAttention,
    Nadam,
    Tensor,
    conv1d,
    contrastive_loss,
    cross_entropy,
    diversity_loss,
    dropout,
    finite_difference_check,
    focal_loss,
    layer_norm,
    linear,
    lstm_cell,
    parameter,
    scaled_dot_attention,
    schedule_rate,
)
from asrlab.nn.layers import init_lstm_params, lstm_run
from asrlab.nn.optim import Phase, apply_gradient_noise
from asrlab.nn.tensor import gelu, log_softmax, relu, softmax, tsum

GRAD_TOL = 1e-4
H = 1e-4


def check(fn, params):
    assert finite_difference_check(fn, params, h=H) < GRAD_TOL


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = linear(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_case(self):
        # 1x1 input: y = 2*3 + 1 = 7
        out = linear(Tensor([[3.0]]), [[2.0]], [1.0])
        assert out.data[0, 0] == 7.0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        n, din, dout = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
        x = parameter(rng.normal(size=(n, din)))
        w = parameter(rng.normal(size=(din, dout)))
        b = parameter(rng.normal(size=dout))
        check(lambda ps: tsum(linear(ps[0], ps[1], ps[2])), [x, w, b])


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_gelu_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = parameter(rng.normal(size=(3, 4)))
        check(lambda ps: tsum(gelu(ps[0])), [x])
        x2 = parameter(rng.normal(size=(3, 4)) + 0.1)  # keep away from relu kink
        check(lambda ps: tsum(relu(ps[0])), [x2])


class TestLayerNorm:
    def test_constant_vector_zeros(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_normalized_passthrough(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=8)
        v = (v - v.mean()) / v.std()
        out = layer_norm(Tensor(v[None, :]))
        np.testing.assert_allclose(out.data[0], v, atol=1e-4)

    def test_moments(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 16)))
        out = layer_norm(x).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(200 + seed)
        d = int(rng.integers(2, 6))
        x = parameter(rng.normal(size=(2, d)))
        g = parameter(rng.normal(size=d))
        b = parameter(rng.normal(size=d))
        check(lambda ps: tsum(layer_norm(ps[0], ps[1], ps[2])), [x, g, b])


class TestConv1d:
    def test_length_formula(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(16, 1)))
        k = Tensor(rng.normal(size=(4, 1, 2)))
        assert conv1d(x, k, stride=3).shape == ((16 - 4) // 3 + 1, 2)

    def test_identity_kernel(self):
        x = Tensor(np.arange(5.0)[:, None])
        k = Tensor(np.ones((1, 1, 1)))
        np.testing.assert_array_equal(conv1d(x, k).data, x.data)

    def test_averaging_kernel_on_ramp(self):
        # ramp 0..5, width-3 mean filter: outputs are the window centers
        x = Tensor(np.arange(6.0)[:, None])
        k = Tensor(np.full((3, 1, 1), 1.0 / 3.0))
        np.testing.assert_allclose(conv1d(x, k).data[:, 0], [1.0, 2.0, 3.0, 4.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(300 + seed)
        t, cin, cout, kk = 7, int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        x = parameter(rng.normal(size=(t, cin)))
        k = parameter(rng.normal(size=(kk, cin, cout)))
        check(lambda ps: tsum(conv1d(ps[0], ps[1], stride=stride)), [x, k])

    def test_grouped_same_padding_gradcheck(self):
        rng = np.random.default_rng(33)
        x = parameter(rng.normal(size=(6, 4)))
        k = parameter(rng.normal(size=(3, 2, 4)))
        check(lambda ps: tsum(conv1d(ps[0], ps[1], stride=1, pad_same=True, groups=2)), [x, k])


class TestAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 5)))
        out = scaled_dot_attention(q, k, v).data
        for row in out:
            np.testing.assert_allclose(row, v.data[0], atol=1e-12)

    def test_onehot_selection(self):
        scale = 50.0
        q = Tensor(np.eye(3) * scale)
        k = Tensor(np.eye(3))
        v = Tensor(np.diag([1.0, 2.0, 3.0]))
        out = scaled_dot_attention(q, k, v).data
        np.testing.assert_allclose(out, v.data, atol=1e-6)

    def test_softmax_rows_sum_one(self):
        rng = np.random.default_rng(4)
        s = softmax(Tensor(rng.normal(size=(10, 7))), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(400 + seed)
        tq, tk, dk, dv = 2, 3, int(rng.integers(1, 4)), int(rng.integers(1, 4))
        q = parameter(rng.normal(size=(tq, dk)))
        k = parameter(rng.normal(size=(tk, dk)))
        v = parameter(rng.normal(size=(tk, dv)))
        check(lambda ps: tsum(scaled_dot_attention(ps[0], ps[1], ps[2])), [q, k, v])


class TestMultiHead:
    def test_single_head_equals_composed(self):
        rng = np.random.default_rng(5)
        mha = MultiHeadAttention(4, 1, rng)
        x = Tensor(rng.normal(size=(3, 4)))
        got = mha(x).data
        q = x.data @ mha.wq.data
        k = x.data @ mha.wk.data
        v = x.data @ mha.wv.data
        want = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data @ mha.wo.data + mha.bo.data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_head_permutation_invariance(self):
        rng = np.random.default_rng(6)
        mha = MultiHeadAttention(6, 2, rng)
        x = Tensor(rng.normal(size=(4, 6)))
        base = mha(x).data
        # swap the two heads in all projections and the matching W^O rows
        dh = 3
        for w in (mha.wq, mha.wk, mha.wv):
            w.data[:, :] = np.concatenate([w.data[:, dh:], w.data[:, :dh]], axis=1)
        mha.wo.data[:, :] = np.concatenate([mha.wo.data[dh:], mha.wo.data[:dh]], axis=0)
        np.testing.assert_allclose(mha(x).data, base, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(500 + seed)
        mha = MultiHeadAttention(4, 2, rng)
        x = parameter(rng.normal(size=(3, 4)))
        check(lambda ps: tsum(mha(ps[0])), [x] + mha.parameters())


class TestLstm:
    def test_zero_params_zero_state(self):
        rng = np.random.default_rng(7)
        params = init_lstm_params(3, 2, rng)
        for p in params.values():
            p.data[...] = 0.0
        h, c = lstm_cell(Tensor(rng.normal(size=(1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), params)
        np.testing.assert_allclose(c.data, 0.0)
        np.testing.assert_allclose(h.data, 0.0)

    def test_forget_carry(self):
        rng = np.random.default_rng(8)
        params = init_lstm_params(3, 2, rng)
        for p in params.values():
            p.data[...] = 0.0
        params["b_f"].data[...] = 100.0   # forget gate ~ 1
        params["b_i"].data[...] = -100.0  # input gate ~ 0
        c_prev = Tensor(np.array([[0.3, -0.7]]))
        _, c = lstm_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))), c_prev, params)
        np.testing.assert_allclose(c.data, c_prev.data, atol=1e-12)

    def test_blstm_output_dim(self):
        rng = np.random.default_rng(9)
        layer = BlstmLayer(3, 4, rng)
        out = layer(Tensor(rng.normal(size=(5, 3))))
        assert out.shape == (5, 8)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck_three_steps(self, seed):
        rng = np.random.default_rng(600 + seed)
        params = init_lstm_params(2, 2, rng)
        xs = parameter(rng.normal(size=(3, 2)))
        plist = [xs] + list(params.values())
        check(lambda ps: tsum(lstm_run(ps[0], params, 2)), plist)


class TestLosses:
    def test_focal_gamma0_equals_ce(self):
        rng = np.random.default_rng(10)
        logits = Tensor(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, size=6)
        assert focal_loss(logits, labels, 0.0).item() == cross_entropy(logits, labels).item()

    def test_saturated_loss_near_zero(self):
        logits = np.full((1, 3), -100.0)
        logits[0, 1] = 100.0
        assert focal_loss(Tensor(logits), [1], 2.0).item() < 1e-12

    def test_focal_half_prob(self):
        # p = 0.5, gamma = 2 -> 0.25 * ln 2
        logits = Tensor([[0.0, 0.0]])
        got = focal_loss(logits, [0], 2.0).item()
        np.testing.assert_allclose(got, 0.25 * math.log(2.0), rtol=1e-12)

    def test_focal_leq_ce(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            logits = Tensor(rng.normal(size=(5, 6)))
            labels = rng.integers(0, 6, size=5)
            assert focal_loss(logits, labels, 2.0).item() <= cross_entropy(logits, labels).item() + 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_ce_gradcheck(self, seed):
        rng = np.random.default_rng(700 + seed)
        logits = parameter(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, size=4)
        check(lambda ps: cross_entropy(ps[0], labels), [logits])

    @pytest.mark.parametrize("seed", range(5))
    def test_focal_gradcheck(self, seed):
        rng = np.random.default_rng(800 + seed)
        logits = parameter(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, size=4)
        check(lambda ps: focal_loss(ps[0], labels, 2.0), [logits])


class TestContrastive:
    def test_perfect_positive(self):
        c = np.ones(4)
        distractors = np.eye(4)[:2] - np.eye(4)[2:]  # orthogonal to all-ones
        loss = contrastive_loss(Tensor(c), Tensor(c.copy()), Tensor(distractors), temperature=0.1)
        assert loss.item() < 0.01

    def test_uniform_candidates(self):
        c = np.ones(3)
        k = 4
        distractors = np.tile(c, (k, 1))
        loss = contrastive_loss(Tensor(c), Tensor(c.copy()), Tensor(distractors))
        np.testing.assert_allclose(loss.item(), math.log(k + 1), rtol=1e-10)

    def test_monotone_in_positive_similarity(self):
        rng = np.random.default_rng(12)
        c = np.array([1.0, 0.0, 0.0, 0.0])
        distractors = rng.normal(size=(3, 4))
        prev = np.inf
        for a in np.linspace(-0.9, 0.9, 9):
            pos = np.array([a, np.sqrt(1 - a * a), 0.0, 0.0])
            loss = contrastive_loss(Tensor(c), Tensor(pos), Tensor(distractors)).item()
            assert loss < prev
            prev = loss

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(900 + seed)
        c = parameter(rng.normal(size=4))
        pos = parameter(rng.normal(size=4))
        dis = parameter(rng.normal(size=(3, 4)))
        check(lambda ps: contrastive_loss(ps[0], ps[1], ps[2], temperature=0.5), [c, pos, dis])


class TestDiversity:
    def test_uniform_usage_is_zero(self):
        g, v = 2, 4
        probs = Tensor(np.full((10, g, v), 1.0 / v))
        np.testing.assert_allclose(diversity_loss(probs).item(), 0.0, atol=1e-9)

    def test_collapsed_usage(self):
        g, v = 2, 4
        probs = np.zeros((5, g, v))
        probs[:, :, 0] = 1.0
        got = diversity_loss(Tensor(probs)).item()
        np.testing.assert_allclose(got, (g * v - g) / (g * v), atol=1e-6)

    def test_bounds(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            p = rng.dirichlet(np.ones(5), size=(6, 3))
            val = diversity_loss(Tensor(p)).item()
            assert 0.0 - 1e-9 <= val < 1.0


class TestNadam:
    def test_zero_grad_no_update(self):
        p = parameter(np.array([1.0, 2.0]))
        opt = Nadam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_quadratic_convergence(self):
        p = parameter(np.array([3.0]))
        opt = Nadam([p], lr=0.05)
        for _ in range(200):
            p.grad = 2.0 * p.data
            opt.step()
        assert abs(p.data[0]) < 1e-3

    def test_identical_grads_identical_updates(self):
        a = parameter(np.array([1.0]))
        b = parameter(np.array([1.0]))
        opt = Nadam([a, b], lr=0.01)
        for _ in range(5):
            a.grad = np.array([0.5])
            b.grad = np.array([0.5])
            opt.step()
        np.testing.assert_array_equal(a.data, b.data)


class TestSchedule:
    def test_warmup_endpoints(self):
        sched = LrSchedule([Phase("linear_warmup", steps=10, start=1e-5, end=1e-4)])
        assert schedule_rate(sched, 0) == 1e-5
        np.testing.assert_allclose(schedule_rate(sched, 10), 1e-4)

    def test_decay_floor(self):
        sched = LrSchedule([Phase("exp_decay", start=1e-4, factor=0.9, floor=1e-7)])
        assert schedule_rate(sched, 10_000) == 1e-7

    def test_full_shape(self):
        sched = LrSchedule.warmup_hold_decay(1e-5, 1e-4, 10, 5, 0.9, 1e-7)
        rates = [schedule_rate(sched, s) for s in range(40)]
        assert rates[0] == 1e-5
        assert max(rates) <= 1e-4 + 1e-15
        assert rates[-1] < rates[16]


class TestGradientNoise:
    def test_zero_fraction_identity(self):
        p = parameter(np.ones(3))
        p.grad = np.array([1.0, 2.0, 3.0])
        apply_gradient_noise([p], 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(p.grad, [1.0, 2.0, 3.0])

    def test_noise_scale(self):
        rng = np.random.default_rng(14)
        p = parameter(np.ones(100_000))
        p.grad = np.full(100_000, 2.0)
        apply_gradient_noise([p], 0.1, rng)
        np.testing.assert_allclose((p.grad - 2.0).std(), 0.2, rtol=0.05)


class TestDropout:
    def test_eval_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.5, np.random.default_rng(0), train=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inverted_scaling(self):
        rng = np.random.default_rng(15)
        x = Tensor(np.ones((200, 200)))
        out = dropout(x, 0.25, rng, train=True)
        np.testing.assert_allclose(out.data.mean(), 1.0, atol=0.01)


class TestDeterminism:
    def test_fixed_seed_reproduces_trajectory(self):
        def run():
            rng = np.random.default_rng(42)
            w = parameter(rng.normal(size=(3, 2)), "w")
            opt = Nadam([w], lr=0.01)
            x = Tensor(rng.normal(size=(5, 3)))
            labels = rng.integers(0, 2, size=5)
            for _ in range(10):
                opt.zero_grad()
                cross_entropy(linear(x, w), labels).backward()
                opt.step()
            return w.data.copy()

        np.testing.assert_array_equal(run(), run())
