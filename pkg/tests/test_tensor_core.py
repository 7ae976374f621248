import numpy as np
import pytest

from menet.errors import (
    DegenerateBatch,
    InvalidRate,
    NonPositiveOutput,
    ShapeMismatch,
)
from menet.tensor_core import (
    BatchNormState,
    ConvSpec,
    activation,
    batch_norm,
    concat_channels,
    conv3d,
    conv_output_extent,
    conv_transpose3d,
    deconv_output_extent,
    dropout,
    relu,
    sigmoid,
    softmax_channels,
)

from oracles import conv3d_sixloop, conv_transpose3d_scatter, count_window_placements


def spec_for(w, stride=(1, 1, 1), padding=(0, 0, 0)):
    return ConvSpec(w.shape[:3], stride, padding, w.shape[3], w.shape[4])


class TestShapeFormulas:
    def test_stride2_halving(self):
        assert conv_output_extent(128, 3, 2, 1) == 64

    def test_identity(self):
        assert conv_output_extent(1, 1, 1, 0) == 1

    def test_no_padding_stride2(self):
        # valid window origins for i=7, k=3, s=2: 0, 2, 4
        assert conv_output_extent(7, 3, 2, 0) == 3

    def test_kernel_does_not_fit(self):
        with pytest.raises(NonPositiveOutput):
            conv_output_extent(2, 5, 1, 1)

    def test_matches_window_enumeration(self):
        for i in range(1, 33):
            for k in (1, 2, 3, 5):
                for s in (1, 2):
                    for p in (0, 1, 2):
                        if i + 2 * p < k:
                            continue
                        assert conv_output_extent(i, k, s, p) == \
                            count_window_placements(i, k, s, p)

    def test_deconv_doubling(self):
        assert deconv_output_extent(64, 2, 2, 0) == 128

    def test_deconv_identity(self):
        assert deconv_output_extent(1, 1, 1, 0) == 1

    def test_deconv_scatter_count(self):
        # each of 5 voxels lands on a stride-2 grid; kernel 2 fills the gaps
        assert deconv_output_extent(5, 2, 2, 0) == 10

    def test_deconv_nonpositive(self):
        with pytest.raises(NonPositiveOutput):
            deconv_output_extent(1, 1, 1, 1)


class TestConv3d:
    def test_zero_input_gives_zero_output(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 3, 3, 2, 5))
        x = np.zeros((1, 4, 4, 4, 2))
        y = conv3d(x, w, np.zeros(5), spec_for(w, padding=(1, 1, 1)))
        assert np.all(y == 0.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 5, 3))
        w = np.eye(3).reshape(1, 1, 1, 3, 3)
        y = conv3d(x, w, np.zeros(3), spec_for(w))
        np.testing.assert_array_equal(y, x)

    def test_matches_sixloop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 4, 4, 1))
        w = rng.normal(size=(3, 3, 3, 1, 2))
        b = rng.normal(size=2)
        got = conv3d(x, w, b, spec_for(w, stride=(2, 2, 2), padding=(1, 1, 1)))
        want = conv3d_sixloop(x, w, b, (2, 2, 2), (1, 1, 1))
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_geometries_vs_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        kd, kh, kw = rng.integers(1, 4, size=3)
        stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
        padding = tuple(int(v) for v in rng.integers(0, 2, size=3))
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d, h, w_ = (int(v) for v in rng.integers(3, 7, size=3))
        x = rng.normal(size=(2, d, h, w_, ci))
        w = rng.normal(size=(int(kd), int(kh), int(kw), ci, co))
        b = rng.normal(size=co)
        spec = spec_for(w, stride, padding)
        got = conv3d(x, w, b, spec)
        want = conv3d_sixloop(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_fast_path_matches_naive_path(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.normal(size=(1, 5, 6, 4, 3))
        w = rng.normal(size=(3, 2, 3, 3, 4))
        b = rng.normal(size=4)
        spec = spec_for(w, stride=(2, 1, 2), padding=(1, 0, 1))
        fast = conv3d(x, w, b, spec, method="fast")
        naive = conv3d(x, w, b, spec, method="naive")
        np.testing.assert_allclose(fast, naive, atol=1e-10)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4, 4, 4, 2))
        y = rng.normal(size=(1, 4, 4, 4, 2))
        w = rng.normal(size=(3, 3, 3, 2, 3))
        spec = spec_for(w, padding=(1, 1, 1))
        a, b = 1.7, -0.4
        lhs = conv3d(a * x + b * y, w, None, spec)
        rhs = a * conv3d(x, w, None, spec) + b * conv3d(y, w, None, spec)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_output_extents_match_formula_grid(self):
        rng = np.random.default_rng(4)
        for i in range(1, 33):
            for k in (1, 2, 3, 5):
                for s in (1, 2):
                    for p in (0, 1, 2):
                        if i + 2 * p < k:
                            continue
                        x = rng.normal(size=(1, i, 1, 1, 1))
                        w = rng.normal(size=(k, 1, 1, 1, 1))
                        spec = ConvSpec((k, 1, 1), (s, 1, 1), (p, 0, 0), 1, 1)
                        got = conv3d(x, w, None, spec)
                        assert got.shape[1] == conv_output_extent(i, k, s, p)

    def test_channel_mismatch_raises(self):
        w = np.zeros((1, 1, 1, 2, 2))
        x = np.zeros((1, 2, 2, 2, 3))
        with pytest.raises(ShapeMismatch):
            conv3d(x, w, None, spec_for(w))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 4, 4, 4, 2))
        w = rng.normal(size=(3, 3, 3, 2, 2))
        spec = spec_for(w, padding=(1, 1, 1))
        a = conv3d(x, w, None, spec)
        b = conv3d(x, w, None, spec)
        assert np.array_equal(a, b)


def inner(a, b):
    return float(np.sum(a * b))


class TestConvTranspose3d:
    def test_zero_input(self):
        w = np.ones((2, 2, 2, 3, 2))
        y = conv_transpose3d(np.zeros((1, 3, 3, 3, 2)), w, None,
                             spec_for(w, stride=(2, 2, 2)))
        assert y.shape == (1, 6, 6, 6, 3)
        assert np.all(y == 0.0)

    def test_adjoint_identity_spec_case(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 3, 3, 3, 2))
        w = rng.normal(size=(2, 2, 2, 2, 4))
        spec = spec_for(w, stride=(2, 2, 2))
        y = rng.normal(size=conv3d(x, w, None, spec).shape)
        lhs = inner(conv3d(x, w, None, spec), y)
        rhs = inner(x, conv_transpose3d(y, w, None, spec, output_extents=(3, 3, 3)))
        assert abs(lhs - rhs) <= 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_identity_random(self, seed):
        rng = np.random.default_rng(300 + seed)
        stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
        padding = tuple(int(v) for v in rng.integers(0, 2, size=3))
        k = tuple(int(v) for v in rng.integers(1, 4, size=3))
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ext = tuple(int(v) for v in rng.integers(3, 7, size=3))
        if any(e + 2 * p < kk for e, p, kk in zip(ext, padding, k)):
            return
        x = rng.normal(size=(1, *ext, ci))
        w = rng.normal(size=(*k, ci, co))
        spec = spec_for(w, stride, padding)
        y = rng.normal(size=conv3d(x, w, None, spec).shape)
        lhs = inner(conv3d(x, w, None, spec), y)
        rhs = inner(x, conv_transpose3d(y, w, None, spec, output_extents=ext))
        assert abs(lhs - rhs) <= 1e-10

    def test_impulse_stamps_kernel(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(2, 2, 2, 1, 1))
        x = np.zeros((1, 3, 3, 3, 1))
        x[0, 1, 2, 0, 0] = 1.0
        spec = spec_for(w, stride=(2, 2, 2))
        got = conv_transpose3d(x, w, None, spec)
        want = np.zeros((1, 6, 6, 6, 1))
        want[0, 2:4, 4:6, 0:2, 0] = w[..., 0, 0]
        np.testing.assert_allclose(got, want, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scatter_oracle(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = rng.normal(size=(1, 3, 4, 2, 3))
        w = rng.normal(size=(2, 3, 2, 2, 3))
        b = rng.normal(size=2)
        spec = spec_for(w, stride=(2, 1, 2), padding=(0, 1, 0))
        got = conv_transpose3d(x, w, b, spec)
        want = conv_transpose3d_scatter(x, w, b, (2, 1, 2), (0, 1, 0), got.shape[1:4])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_fast_matches_naive(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 3, 3, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3, 4))
        spec = spec_for(w, stride=(2, 2, 1), padding=(0, 0, 1))
        np.testing.assert_allclose(
            conv_transpose3d(x, w, None, spec, method="fast"),
            conv_transpose3d(x, w, None, spec, method="naive"),
            atol=1e-10,
        )


class TestBatchNorm:
    def test_constant_channel_returns_beta(self):
        x = np.full((2, 3, 3, 3, 2), 7.5)
        gamma = np.array([2.0, 3.0])
        beta = np.array([-1.0, 0.5])
        y, _ = batch_norm(x, gamma, beta, BatchNormState.initial(2), "train")
        np.testing.assert_allclose(y, np.broadcast_to(beta, y.shape), atol=1e-9)

    def test_train_normalizes_per_channel(self):
        rng = np.random.default_rng(20)
        x = rng.normal(3.0, 2.0, size=(2, 4, 4, 4, 3))
        y, _ = batch_norm(x, np.ones(3), np.zeros(3), BatchNormState.initial(3), "train")
        means = y.mean(axis=(0, 1, 2, 3))
        variances = y.var(axis=(0, 1, 2, 3))
        assert np.abs(means).max() <= 1e-6
        assert np.abs(variances - 1.0).max() <= 1e-4

    def test_infer_closed_form(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(1, 2, 2, 2, 2))
        gamma = np.array([1.5, 0.5])
        beta = np.array([0.2, -0.3])
        state = BatchNormState(np.array([0.4, -1.0]), np.array([2.0, 0.5]))
        y, state_out = batch_norm(x, gamma, beta, state, "infer")
        want = (x - state.mean) / np.sqrt(state.var + 1e-5) * gamma + beta
        np.testing.assert_allclose(y, want, rtol=1e-12)
        assert state_out is state

    def test_running_stats_ema(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(1, 4, 4, 4, 1))
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        _, new = batch_norm(x, np.ones(1), np.zeros(1), state, "train")
        np.testing.assert_allclose(new.mean, 0.9 * 1.0 + 0.1 * x.mean())
        np.testing.assert_allclose(new.var, 0.9 * 4.0 + 0.1 * x.var())

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            batch_norm(np.ones((1, 1, 1, 1, 3)), np.ones(3), np.zeros(3),
                       BatchNormState.initial(3), "train")


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        y = sigmoid(np.array([-1e4, 1e4]))
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.0, 1.0], atol=1e-12)

    def test_softmax_equal_logits(self):
        y = softmax_channels(np.full((2, 1, 1, 1, 4), 3.3))
        np.testing.assert_allclose(y, 0.25, atol=1e-15)

    def test_softmax_sums_and_range(self):
        rng = np.random.default_rng(30)
        y = softmax_channels(rng.normal(size=(2, 3, 3, 3, 4)) * 10)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_activation_dispatch(self):
        x = np.array([-2.0, 0.0])
        np.testing.assert_array_equal(activation(x, "relu"), relu(x))
        with pytest.raises(ValueError):
            activation(x, "tanh")


class TestConcat:
    def test_single_tensor_passthrough(self):
        x = np.ones((1, 2, 2, 2, 3))
        assert concat_channels([x]) is x

    def test_four_single_channel_parts(self):
        rng = np.random.default_rng(40)
        parts = [rng.normal(size=(1, 2, 2, 2, 1)) for _ in range(4)]
        y = concat_channels(parts)
        assert y.shape[-1] == 4
        for i, p in enumerate(parts):
            np.testing.assert_array_equal(y[..., i:i + 1], p)

    def test_slice_back_roundtrip(self):
        rng = np.random.default_rng(41)
        widths = [2, 3, 1]
        parts = [rng.normal(size=(1, 3, 2, 2, w)) for w in widths]
        y = concat_channels(parts)
        offset = 0
        for p, w in zip(parts, widths):
            np.testing.assert_array_equal(y[..., offset:offset + w], p)
            offset += w

    def test_mismatch_raises(self):
        with pytest.raises(ShapeMismatch):
            concat_channels([np.ones((1, 2, 2, 2, 1)), np.ones((1, 2, 2, 3, 1))])


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2, 1)
        y, mask = dropout(x, 0.0, np.random.default_rng(0), "train")
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(mask, np.ones_like(x))

    def test_infer_identity(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2, 1)
        y, mask = dropout(x, 0.5, None, "infer")
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(mask, np.ones_like(x))

    def test_survivor_statistics(self):
        rng = np.random.default_rng(1234)
        x = np.ones((1, 50, 50, 40, 1))  # 1e5 elements
        y, mask = dropout(x, 0.5, rng, "train")
        survivors = y != 0.0
        frac = survivors.mean()
        assert abs(frac - 0.5) <= 0.01
        assert abs(y[survivors].mean() - 2.0) <= 0.05
        np.testing.assert_array_equal(y, x * mask)

    def test_invalid_rate(self):
        x = np.ones((1, 1, 1, 2, 1))
        with pytest.raises(InvalidRate):
            dropout(x, 1.0, np.random.default_rng(0), "train")
        with pytest.raises(InvalidRate):
            dropout(x, -0.1, np.random.default_rng(0), "train")

    def test_seeded_determinism(self):
        x = np.ones((1, 4, 4, 4, 2))
        y1, m1 = dropout(x, 0.3, np.random.default_rng(99), "train")
        y2, m2 = dropout(x, 0.3, np.random.default_rng(99), "train")
        assert np.array_equal(y1, y2) and np.array_equal(m1, m2)
