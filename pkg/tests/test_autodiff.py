import numpy as np
import pytest

from scaletext import autodiff as ad
from scaletext.autodiff import ContractError, DimensionError, StatisticsError, Tape
from scaletext.gradcheck import check_gradients


def conv2d_loop(x, k, stride=1, pad=0):
    """Direct summation over every window, straight from the definition."""
    n, c, h, w = x.shape
    ko, ci, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ko, ho, wo))
    for b in range(n):
        for o in range(ko):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, cc, i * stride + di, j * stride + dj] * k[o, cc, di, dj]
                    out[b, o, i, j] = acc
    return out


class TestConv2d:
    def test_all_ones_3x3_pad1(self):
        x = ad.constant(np.ones((1, 1, 3, 3)))
        k = ad.parameter(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1, pad=1).data[0, 0]
        expected = conv2d_loop(x.data, k.data, 1, 1)[0, 0]
        assert np.allclose(out, expected)
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = ad.constant(rng.normal(size=(2, 1, 4, 5)))
        k = ad.parameter(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, k)
        assert np.array_equal(out.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.normal(size=(2, 3, 5, 6))
            k = rng.normal(size=(4, 3, 3, 3))
            got = ad.conv2d(ad.constant(x), ad.parameter(k), stride=1, pad=1).data
            want = conv2d_loop(x, k, 1, 1)
            assert np.allclose(got, want, rtol=1e-5, atol=1e-8)

    def test_channel_mismatch_raises(self):
        x = ad.constant(np.zeros((1, 2, 4, 4)))
        k = ad.parameter(np.zeros((1, 3, 3, 3)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, k, pad=1)

    def test_non_integer_output_raises(self):
        x = ad.constant(np.zeros((1, 1, 5, 5)))
        k = ad.parameter(np.zeros((1, 1, 2, 2)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, k, stride=2)


class TestMaxpool:
    def test_window_max(self):
        x = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert ad.maxpool2x2(x).data[0, 0, 0, 0] == 4.0

    def test_constant_image(self):
        x = ad.constant(np.full((1, 2, 6, 8), 0.7))
        out = ad.maxpool2x2(x)
        assert out.data.shape == (1, 2, 3, 4)
        assert np.all(out.data == 0.7)

    def test_odd_extent_raises(self):
        with pytest.raises(DimensionError):
            ad.maxpool2x2(ad.constant(np.zeros((1, 1, 3, 4))))

    def test_tie_routes_to_first_row_major(self):
        x = ad.parameter(np.array([[2.0, 2.0], [2.0, 2.0]]).reshape(1, 1, 2, 2))
        with Tape() as tape:
            out = ad.maxpool2x2(x)
            ad.backward(tape, ad.reduce_sum(out))
        assert np.array_equal(x.grad.reshape(4), [1.0, 0.0, 0.0, 0.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = ad.parameter(rng.permutation(16).astype(np.float64).reshape(1, 1, 4, 4) * 0.3)
        w = rng.normal(size=(1, 1, 2, 2))
        err, _, _ = check_gradients(
            lambda: ad.reduce_sum(ad.mul_const(ad.maxpool2x2(x), w)), [x])
        assert err <= 1e-4


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(3)
        x = ad.constant(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
        gamma = ad.parameter(np.ones(3))
        beta = ad.parameter(np.zeros(3))
        out = ad.batch_norm(x, gamma, beta, ad.RunningStats(3, np.float64), "train").data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)

    def test_eval_mode_identity_stats(self):
        rng = np.random.default_rng(4)
        x = ad.constant(rng.normal(size=(2, 3, 4, 4)))
        gamma = ad.parameter(np.ones(3))
        beta = ad.parameter(np.zeros(3))
        out = ad.batch_norm(x, gamma, beta, ad.RunningStats(3, np.float64), "eval").data
        assert np.allclose(out, x.data, atol=1e-4)  # eps-only deviation

    def test_too_few_values_raises(self):
        x = ad.constant(np.zeros((1, 3, 1, 1)))
        with pytest.raises(StatisticsError):
            ad.batch_norm(x, ad.parameter(np.ones(3)), ad.parameter(np.zeros(3)),
                          ad.RunningStats(3), "train")

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = ad.parameter(rng.normal(size=(2, 3, 4, 4)))
        gamma = ad.parameter(rng.uniform(0.5, 1.5, size=3))
        beta = ad.parameter(rng.normal(size=3))
        stats = ad.RunningStats(3, np.float64)
        w = rng.normal(size=(2, 3, 4, 4))
        err, _, _ = check_gradients(
            lambda: ad.reduce_sum(ad.mul_const(ad.batch_norm(x, gamma, beta, stats, "train"), w)),
            [x, gamma, beta])
        assert err <= 1e-4

    def test_running_stats_update(self):
        rng = np.random.default_rng(6)
        x = ad.constant(rng.normal(1.0, 2.0, size=(8, 2, 6, 6)))
        stats = ad.RunningStats(2, np.float64)
        ad.batch_norm(x, ad.parameter(np.ones(2)), ad.parameter(np.zeros(2)), stats, "train")
        expected_mean = 0.9 * 0.0 + 0.1 * x.data.mean(axis=(0, 2, 3))
        assert np.allclose(stats.mean, expected_mean)


class TestLinear:
    def test_identity_weight(self):
        x = ad.constant(np.arange(12.0).reshape(3, 4))
        w = ad.parameter(np.eye(4))
        assert np.array_equal(ad.linear(x, w).data, x.data)

    def test_zero_weight_zero_output_and_grad(self):
        x = ad.parameter(np.ones((2, 4)))
        w = ad.parameter(np.zeros((3, 4)))
        with Tape() as tape:
            out = ad.linear(x, w)
            ad.backward(tape, ad.reduce_sum(out))
        assert np.all(out.data == 0)
        assert np.all(x.grad == 0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        want = np.array([sum(w[e, d] * x[d] for d in range(5)) for e in range(3)])
        got = ad.linear(ad.constant(x.reshape(1, 5)), ad.parameter(w)).data[0]
        assert np.allclose(got, want, rtol=1e-6)

    def test_extent_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.linear(ad.constant(np.zeros((2, 4))), ad.parameter(np.zeros((3, 5))))


class TestActivationsSoftmax:
    def test_softmax_constant_rows(self):
        x = ad.constant(np.full((1, 4), 0.37))
        assert np.allclose(ad.softmax(x, axis=1).data, 0.25)

    def test_softmax_forced_quarters(self):
        x = ad.constant(np.array([[0.0, np.log(3.0)]]))
        assert np.allclose(ad.softmax(x, axis=1).data, [[0.25, 0.75]], atol=1e-12)

    def test_softmax_simplex_property(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = ad.constant(rng.normal(scale=10.0, size=(3, 7)))
            out = ad.softmax(x, axis=1).data
            assert np.all(out > 0)
            assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-6)

    def test_softmax_extreme_scores_stable(self):
        x = ad.constant(np.array([[1000.0, -1000.0, 0.0]]))
        out = ad.softmax(x, axis=1).data
        assert np.isfinite(out).all() and abs(out.sum() - 1) < 1e-6

    def test_relu_gradient_away_from_zero(self):
        x = ad.parameter(np.array([1.5, -2.0, 0.7, -0.3]))
        w = np.array([1.0, 2.0, -1.0, 0.5])
        err, _, _ = check_gradients(
            lambda: ad.reduce_sum(ad.mul_const(ad.relu(x), w)), [x])
        assert err <= 1e-4

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError):
            ad.activation(ad.constant(np.zeros(2)), "swish")


class TestBilinearResize:
    def test_identity_size_exact(self):
        rng = np.random.default_rng(9)
        x = ad.constant(rng.normal(size=(1, 2, 6, 8)))
        out = ad.bilinear_resize(x, 6, 8)
        assert np.array_equal(out.data, x.data)

    def test_constant_preserved(self):
        x = ad.constant(np.full((1, 1, 5, 7), 0.42))
        for hw in ((3, 4), (10, 14), (1, 1)):
            assert np.allclose(ad.bilinear_resize(x, *hw).data, 0.42)

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 1, 6, 8))
        out = ad.bilinear_resize(ad.constant(x), 8, 24).data[0, 0]

        def sample(img, i, j, oh, ow):
            sy = min(max((i + 0.5) * img.shape[0] / oh - 0.5, 0), img.shape[0] - 1)
            sx = min(max((j + 0.5) * img.shape[1] / ow - 0.5, 0), img.shape[1] - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, img.shape[0] - 1), min(x0 + 1, img.shape[1] - 1)
            fy, fx = sy - y0, sx - x0
            return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                    + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])

        want = np.array([[sample(x[0, 0], i, j, 8, 24) for j in range(24)] for i in range(8)])
        assert np.allclose(out, want, rtol=1e-6, atol=1e-12)


class TestLstmStep:
    def _zero_params(self):
        rng = np.random.default_rng(0)
        p = ad.LstmParams(3, 4, rng, dtype=np.float64)
        for g in p.GATES:
            p.weights[g].data[:] = 0.0
        return p

    def test_all_zero_collapse(self):
        p = self._zero_params()
        x = ad.constant(np.zeros((1, 3)))
        h0 = ad.constant(np.zeros((1, 4)))
        c0 = ad.constant(np.zeros((1, 4)))
        h, c = ad.lstm_step(x, h0, c0, p)
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_saturated_gates_keep_cell(self):
        p = self._zero_params()
        # drive forget-gate preactivation strongly positive, input strongly negative
        p.weights["forget"].data[:, 0] = 50.0
        p.weights["input"].data[:, 0] = -50.0
        x = ad.constant(np.array([[1.0, 0.0, 0.0]]))
        h0 = ad.constant(np.zeros((1, 4)))
        c0 = ad.constant(np.array([[0.3, -0.2, 1.1, 0.0]]))
        _, c = ad.lstm_step(x, h0, c0, p)
        assert np.allclose(c.data, c0.data, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        p = ad.LstmParams(3, 4, rng, dtype=np.float64)
        x = ad.parameter(rng.normal(size=(2, 3)))
        h0 = ad.parameter(rng.normal(size=(2, 4)))
        c0 = ad.parameter(rng.normal(size=(2, 4)))
        w = rng.normal(size=(2, 4))

        def loss():
            h, _ = ad.lstm_step(x, h0, c0, p)
            return ad.reduce_sum(ad.mul_const(h, w))

        err, _, _ = check_gradients(loss, [x, h0, c0] + list(p.weights.values()))
        assert err <= 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            ad.backward(tape, ad.reduce_sum(x))
        # reduce_sum over a leaf: gradient lands on the leaf itself
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_unused_parameter_gets_no_gradient(self):
        x = ad.parameter(np.ones(3))
        unused = ad.parameter(np.ones(3))
        with Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
            ad.backward(tape, loss)
        assert unused.grad is None  # read as zero
        assert x.grad is not None

    def test_accumulation_across_reuse(self):
        x = ad.parameter(np.array([2.0]))
        with Tape() as tape:
            loss = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # x^2 + x
            ad.backward(tape, loss)
        assert np.allclose(x.grad, [5.0])  # 2x + 1

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.ones(3))
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                ad.backward(tape, y)

    def test_backward_deterministic_bitwise(self):
        rng = np.random.default_rng(12)
        data = rng.normal(size=(4, 4)).astype(np.float32)
        grads = []
        for _ in range(2):
            x = ad.parameter(data.copy())
            w = ad.parameter(np.ones((4, 4), dtype=np.float32))
            with Tape() as tape:
                loss = ad.reduce_sum(ad.softmax(ad.linear(x, w), axis=1))
                ad.backward(tape, loss)
            grads.append((x.grad.copy(), w.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0])
        assert np.array_equal(grads[0][1], grads[1][1])

    def test_forward_outputs_finite_on_finite_inputs(self):
        rng = np.random.default_rng(13)
        x = ad.parameter(rng.normal(scale=50.0, size=(2, 3, 4, 4)))
        with Tape() as tape:
            y = ad.batch_norm(x, ad.parameter(np.ones(3)), ad.parameter(np.zeros(3)),
                              ad.RunningStats(3, np.float64), "train")
            y = ad.softmax(ad.reshape(ad.relu(y), (2, 48)), axis=1)
            loss = ad.reduce_sum(y)
            ad.backward(tape, loss)
        assert np.isfinite(y.data).all() and np.isfinite(x.grad).all()
