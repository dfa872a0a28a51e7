import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_conv2d
from lrnnet.errors import ConfigurationError, DimensionError, TapeError
from lrnnet.gradcheck import away_from_kinks, grad_check
from lrnnet.tensor import (ConvParams, NormParams, Tape, Tensor, add, backward, batch_norm,
                           channel_shuffle, channel_split, concat, conv2d, matmul, max_pool2d,
                           relu, reshape, swap_last, tensor_sum, upsample_bilinear)


def conv(w, b=None, **kw):
    return ConvParams(Tensor(w), None if b is None else Tensor(b), **kw)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        y = conv2d(Tensor(x), conv(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(y.data, x)

    def test_dilated_row(self):
        x = np.arange(1.0, 6.0).reshape(1, 1, 1, 5)
        w = np.ones((1, 1, 1, 3))
        y = conv2d(Tensor(x), conv(w, dilation=(1, 2)), padding=(0, 2))
        expected = naive_conv2d(x, w, dilation=(1, 2), padding=(0, 2))
        np.testing.assert_array_equal(expected.ravel(), [4, 6, 9, 6, 8])
        np.testing.assert_array_equal(y.data, expected)
        assert y.data[0, 0, 0, 2] == 1 + 3 + 5

    def test_depthwise_scales_each_channel(self, rng):
        x = rng.standard_normal((1, 2, 2, 2))
        w = np.array([2.0, 3.0]).reshape(2, 1, 1, 1)
        y = conv2d(Tensor(x), conv(w, groups=2)).data
        np.testing.assert_array_equal(y[0, 0], 2 * x[0, 0])
        np.testing.assert_array_equal(y[0, 1], 3 * x[0, 1])

    @pytest.mark.parametrize("kernel,groups,stride,dilation", [
        ((3, 3), 1, (1, 1), (1, 1)),
        ((3, 1), 1, (1, 1), (1, 1)),
        ((1, 3), 2, (1, 1), (1, 1)),
        ((3, 3), 4, (1, 1), (2, 3)),
        ((3, 3), 1, (2, 2), (1, 1)),
        ((2, 2), 2, (2, 1), (1, 1)),
    ])
    def test_matches_naive(self, rng, kernel, groups, stride, dilation):
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal((4, 4 // groups) + kernel)
        b = rng.standard_normal(4)
        pad = (dilation[0] * (kernel[0] - 1) // 2, dilation[1] * (kernel[1] - 1) // 2)
        y = conv2d(Tensor(x), conv(w, b, stride=stride, dilation=dilation, groups=groups), padding=pad)
        ref = naive_conv2d(x, w, b, stride, dilation, groups, pad)
        assert y.shape == ref.shape
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_output_shape_formula(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 11, 9)))
        y = conv2d(x, conv(rng.standard_normal((5, 3, 3, 3)), stride=2, dilation=2), padding=(1, 2))
        assert y.shape == (1, 5, (11 + 2 - 4 - 1) // 2 + 1, (9 + 4 - 4 - 1) // 2 + 1)

    def test_groups_equal_independent_slices(self, rng):
        x = rng.standard_normal((2, 6, 5, 5))
        w = rng.standard_normal((9, 2, 3, 3))
        y = conv2d(Tensor(x), conv(w, groups=3, dilation=2), padding=(2, 2)).data
        parts = [conv2d(Tensor(x[:, 2 * g:2 * g + 2]), conv(w[3 * g:3 * g + 3], dilation=2),
                        padding=(2, 2)).data for g in range(3)]
        np.testing.assert_allclose(y, np.concatenate(parts, axis=1), rtol=0, atol=1e-12)

    def test_linear(self, rng):
        w = rng.standard_normal((3, 2, 3, 1))
        p = conv(w)
        a, b = rng.standard_normal((2, 1, 2, 6, 6))
        lhs = conv2d(Tensor(2.5 * a - 0.75 * b), p, (1, 0)).data
        rhs = 2.5 * conv2d(Tensor(a), p, (1, 0)).data - 0.75 * conv2d(Tensor(b), p, (1, 0)).data
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_errors(self, rng):
        with pytest.raises(ConfigurationError):
            conv(rng.standard_normal((3, 1, 1, 1)), groups=2)
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.standard_normal((1, 3, 4, 4))), conv(rng.standard_normal((2, 2, 1, 1))))
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(rng.standard_normal((1, 3, 4, 4))),
                   conv(rng.standard_normal((4, 1, 1, 1)), groups=4))


class TestChannelOps:
    def test_split_halves(self):
        x = Tensor(np.arange(6.0).reshape(1, 6, 1, 1))
        a, b = channel_split(x)
        assert a.data.ravel().tolist() == [0, 1, 2]
        assert b.data.ravel().tolist() == [3, 4, 5]

    def test_split_odd_rejected(self):
        with pytest.raises(ConfigurationError):
            channel_split(Tensor(np.zeros((1, 5, 2, 2))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_split_concat_roundtrip(self, half, hw, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2 * half, hw, hw + 1))
        np.testing.assert_array_equal(concat(channel_split(Tensor(x))).data, x)
        a, b = r.standard_normal((2, 2, half, hw, hw))
        pa, pb = channel_split(concat([Tensor(a), Tensor(b)]))
        np.testing.assert_array_equal(pa.data, a)
        np.testing.assert_array_equal(pb.data, b)

    def test_shuffle_order(self):
        x = Tensor(np.arange(6.0).reshape(1, 6, 1, 1))
        assert channel_shuffle(x, 2).data.ravel().tolist() == [0, 3, 1, 4, 2, 5]
        np.testing.assert_array_equal(channel_shuffle(x, 1).data, x.data)

    def test_shuffle_involution_c4_g2(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 3, 3)))
        np.testing.assert_array_equal(channel_shuffle(channel_shuffle(x, 2), 2).data, x.data)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([(2, 6), (3, 6), (4, 8), (2, 10), (5, 15), (1, 3)]), st.integers(0, 1000))
    def test_shuffle_is_permutation(self, gc, seed):
        g, c = gc
        x = np.random.default_rng(seed).standard_normal((1, c, 2, 2))
        y = channel_shuffle(Tensor(x), g).data
        for i in range(c):
            np.testing.assert_array_equal(y[0, i], x[0, (i % g) * (c // g) + i // g])
        assert sorted(map(bytes, (y[0, i].tobytes() for i in range(c)))) == \
            sorted(map(bytes, (x[0, i].tobytes() for i in range(c))))

    def test_shuffle_bad_groups(self):
        with pytest.raises(ConfigurationError):
            channel_shuffle(Tensor(np.zeros((1, 6, 1, 1))), 4)


class TestBatchNorm:
    def test_training_standardizes(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
        y = batch_norm(x, NormParams.identity(3), training=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_constant_channel_gives_beta(self):
        p = NormParams.identity(2)
        p.beta.data[:] = [0.5, -1.0]
        y = batch_norm(Tensor(np.full((2, 2, 3, 3), 7.0)), p, training=True).data
        np.testing.assert_allclose(y[:, 0], 0.5)
        np.testing.assert_allclose(y[:, 1], -1.0)

    def test_inference_formula(self):
        p = NormParams.identity(1)
        p.gamma.data[:] = 2.0
        p.beta.data[:] = 1.0
        y = batch_norm(Tensor(np.full((1, 1, 1, 1), 0.5)), p, training=False).data
        assert y.item() == pytest.approx(1 + 2 * 0.5 / np.sqrt(1 + 1e-5), rel=1e-15)
        assert y.item() == pytest.approx(2.0, abs=1e-5)

    def test_running_stats_update(self, rng):
        p = NormParams.identity(2)
        x = rng.standard_normal((3, 2, 4, 4)) + 5
        batch_norm(Tensor(x), p, training=True)
        m = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(p.running_mean, 0.1 * m)
        np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            batch_norm(Tensor(np.zeros((1, 3, 2, 2))), NormParams.identity(2), True)

    def test_param_validation(self):
        with pytest.raises(ConfigurationError):
            NormParams(Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), epsilon=0)
        with pytest.raises(ConfigurationError):
            NormParams(Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), -np.ones(1))


class TestPointwiseAndResampling:
    def test_relu(self, rng):
        assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0, 0, 2]
        x = np.abs(rng.standard_normal(10))
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)
        z = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(relu(relu(Tensor(z))).data, relu(Tensor(z)).data)

    def test_max_pool(self):
        assert max_pool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]]))).data.tolist() == [[[[4.0]]]]
        c = max_pool2d(Tensor(np.full((1, 2, 6, 4), 3.0))).data
        assert c.shape == (1, 2, 3, 2) and np.all(c == 3.0)

    def test_max_pool_odd_ramp(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        expected = np.full((2, 2), -np.inf)
        for r in range(2):
            for s in range(2):
                for i in range(2):
                    for j in range(2):
                        if 2 * r + i < 3 and 2 * s + j < 3:
                            expected[r, s] = max(expected[r, s], x[0, 0, 2 * r + i, 2 * s + j])
        out = max_pool2d(Tensor(x)).data[0, 0]
        np.testing.assert_array_equal(out, expected)
        assert out.tolist() == [[4, 5], [7, 8]]

    def test_upsample(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        np.testing.assert_array_equal(upsample_bilinear(Tensor(x), 1).data, x)
        c = upsample_bilinear(Tensor(np.full((1, 1, 3, 5), 2.5)), 4).data
        np.testing.assert_allclose(c, 2.5, rtol=1e-15)
        r = upsample_bilinear(Tensor(np.array([[[[0.0, 1.0]]]])), 2).data
        # sample positions (k + 0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
        np.testing.assert_allclose(r[0, 0, 0], [0, 0.25, 0.75, 1.0], atol=1e-15)
        assert upsample_bilinear(Tensor(x), 8).shape == (1, 2, 24, 32)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        with Tape() as tape:
            tensor_sum(x)
        g = backward(tape, 1.0)
        np.testing.assert_array_equal(g[x], np.ones(x.shape))

    def test_relu_grad(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            tensor_sum(relu(x))
        assert backward(tape, 1.0)[x].tolist() == [0.0, 1.0]

    def test_fan_out_accumulates(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = add(x, add(x, x))
        np.testing.assert_array_equal(backward(tape, np.ones(y.shape))[x], 3 * np.ones(x.shape))

    def test_missing_node(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with Tape() as tape:
            relu(x)
        with pytest.raises(TapeError):
            backward(tape, np.ones(3), output=Tensor(np.ones(3)))
        with pytest.raises(TapeError):
            backward(Tape(), np.ones(3))

    def test_seed_shape_checked(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(DimensionError):
            backward(tape, np.ones(4), output=y)

    def test_out_of_order_tape(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
            relu(y)
        tape.records.reverse()
        with pytest.raises(TapeError):
            backward(tape, np.ones(3))

    def test_no_tape_records_nothing(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        assert not relu(x).requires_grad

    def test_forward_deterministic(self, rng):
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((4, 1, 3, 3))
        a = conv2d(Tensor(x), conv(w, groups=4, dilation=2), (2, 2)).data
        b = conv2d(Tensor(x.copy()), conv(w.copy(), groups=4, dilation=2), (2, 2)).data
        assert a.tobytes() == b.tobytes()


STEP = 1e-4
SEEDS = range(5)


def _p(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestGradients:
    def test_linear_op_roundoff(self, rng):
        w = _p(rng, 3, 2, 1, 1)
        err = grad_check(lambda x: conv2d(x, ConvParams(w)), [_p(rng, 1, 2, 4, 4)], STEP, params=[w])
        assert err < 1e-7

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_1x2x5x5(self, seed):
        r = np.random.default_rng(seed)
        w, b = _p(r, 3, 2, 3, 3), _p(r, 3)
        p = ConvParams(w, b, dilation=2)
        err = grad_check(lambda x: conv2d(x, p, (2, 2)), [_p(r, 1, 2, 5, 5)], STEP, params=[w, b])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("case", ["depthwise", "grouped_1d", "strided", "asym"])
    def test_conv_variants(self, seed, case):
        r = np.random.default_rng(seed)
        if case == "depthwise":
            w, pad, kw = _p(r, 4, 1, 3, 3), (3, 3), dict(groups=4, dilation=3)
        elif case == "grouped_1d":
            w, pad, kw = _p(r, 4, 2, 3, 1), (1, 0), dict(groups=2)
        elif case == "strided":
            w, pad, kw = _p(r, 2, 4, 3, 3), (1, 1), dict(stride=2)
        else:
            w, pad, kw = _p(r, 4, 4, 1, 3), (0, 1), dict()
        p = ConvParams(w, **kw)
        assert grad_check(lambda x: conv2d(x, p, pad), [_p(r, 2, 4, 6, 6)], STEP, params=[w]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, seed, training):
        r = np.random.default_rng(seed)
        p = NormParams.identity(3)
        p.gamma.data[:] = r.uniform(0.5, 2, 3)
        p.beta.data[:] = r.standard_normal(3)
        p.running_mean[:] = r.standard_normal(3)
        p.running_var[:] = r.uniform(0.5, 2, 3)
        # freeze running stats so repeated closure calls see the same function
        rm, rv = p.running_mean.copy(), p.running_var.copy()

        def f(x):
            p.running_mean[:], p.running_var[:] = rm, rv
            return batch_norm(x, p, training)

        assert grad_check(f, [_p(r, 2, 3, 3, 3)], STEP, params=[p.gamma, p.beta]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        r = np.random.default_rng(seed)
        x = Tensor(away_from_kinks(r, (2, 3, 4, 4), STEP), requires_grad=True)
        assert grad_check(relu, [x], STEP) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_pool(self, seed):
        r = np.random.default_rng(seed)
        # distinct values spaced >> step apart keep every window's argmax stable
        x = r.permutation(120).reshape(2, 2, 5, 6) * 0.01 + r.uniform(0, 1e-3, (2, 2, 5, 6))
        assert grad_check(max_pool2d, [Tensor(x, requires_grad=True)], STEP) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample(self, seed):
        r = np.random.default_rng(seed)
        assert grad_check(lambda x: upsample_bilinear(x, 3), [_p(r, 1, 2, 3, 4)], STEP) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_channel_ops(self, seed):
        r = np.random.default_rng(seed)

        def f(x, y):
            a, b = channel_split(x)
            return channel_shuffle(add(concat([b, a]), y), 3)

        assert grad_check(f, [_p(r, 2, 6, 3, 3), _p(r, 2, 6, 3, 3)], STEP) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matrix_ops(self, seed):
        r = np.random.default_rng(seed)

        def f(a, b):
            return reshape(matmul(swap_last(a), b), (2, 1, 5, 3))

        assert grad_check(f, [_p(r, 2, 4, 5), _p(r, 2, 4, 3)], STEP) < 1e-4
