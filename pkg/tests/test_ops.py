"""Layer-op contracts, checked against independent brute-force oracles."""

import numpy as np
import pytest
from oracles import conv2d_oracle, conv3d_oracle

import seqvessel.tensor as tc
from seqvessel import ops


@pytest.fixture(autouse=True)
def finite_guard():
    old = tc.DEBUG_FINITE
    tc.DEBUG_FINITE = True
    yield
    tc.DEBUG_FINITE = old


class TestConv2d:
    def test_identity_1x1(self):
        x = np.arange(18, dtype=np.float32).reshape(1, 1, 3, 6) / 10
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        y, _ = ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))
        assert np.array_equal(y, x)

    def test_all_ones_3x3(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        y, _ = ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_spec_configuration_vs_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        y, _ = ops.conv2d_forward(x, w, b, stride=(2, 2), padding=(1, 1))
        assert np.max(np.abs(y - conv2d_oracle(x, w, b, (2, 2), (1, 1)))) < 1e-6

    def test_random_configurations_vs_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            cin, cout = rng.integers(1, 4, size=2)
            k = int(rng.integers(1, 4))
            s = (int(rng.integers(1, 3)),) * 2
            p = (int(rng.integers(0, 2)),) * 2
            h, w_ = (int(max(rng.integers(2, 7), k)) for _ in range(2))
            x = rng.standard_normal((int(rng.integers(1, 3)), cin, h, w_))
            w = rng.standard_normal((cout, cin, k, k))
            b = rng.standard_normal(cout)
            y, _ = ops.conv2d_forward(x, w, b, s, p)
            assert np.max(np.abs(y - conv2d_oracle(x, w, b, s, p))) < 1e-6, f"trial {trial}"

    def test_zero_weights_give_constant_bias(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = np.zeros((2, 3, 3, 3), dtype=np.float32)
        b = np.array([0.5, -1.25], dtype=np.float32)
        y, _ = ops.conv2d_forward(x, w, b, (1, 1), (1, 1))
        assert np.array_equal(y[:, 0], np.full_like(y[:, 0], 0.5))
        assert np.array_equal(y[:, 1], np.full_like(y[:, 1], -1.25))

    def test_channel_mismatch_error(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((1, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="channel"):
            ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))

    def test_empty_output_error_names_axis(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="axis"):
            ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))


class TestConv3d:
    def test_identity_1x1x1(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 2, 2)
        w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        y, _ = ops.conv3d_forward(x, w, np.zeros(1, dtype=np.float32))
        assert np.array_equal(y, x)

    def test_temporal_collapse_geometry(self):
        # a (4,1,1) kernel over T=4 leaves a single temporal slice
        x = np.zeros((1, 2, 4, 5, 5), dtype=np.float32)
        w = np.zeros((2, 2, 4, 1, 1), dtype=np.float32)
        y, _ = ops.conv3d_forward(x, w, np.zeros(2, dtype=np.float32))
        assert y.shape == (1, 2, 1, 5, 5)

    def test_random_vs_oracle_spec_case(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 4, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        y, _ = ops.conv3d_forward(x, w, b, (1, 1, 1), (1, 1, 1))
        assert np.max(np.abs(y - conv3d_oracle(x, w, b, (1, 1, 1), (1, 1, 1)))) < 1e-6

    def test_random_configurations_vs_oracle(self):
        rng = np.random.default_rng(13)
        for trial in range(20):
            cin, cout = rng.integers(1, 3, size=2)
            k = int(rng.integers(1, 4))
            s = tuple(int(v) for v in rng.integers(1, 3, size=3))
            p = tuple(int(v) for v in rng.integers(0, 2, size=3))
            dims = tuple(int(max(rng.integers(2, 6), k)) for _ in range(3))
            x = rng.standard_normal((1, cin) + dims)
            w = rng.standard_normal((cout, cin, k, k, k))
            b = rng.standard_normal(cout)
            y, _ = ops.conv3d_forward(x, w, b, s, p)
            assert np.max(np.abs(y - conv3d_oracle(x, w, b, s, p))) < 1e-6, f"trial {trial}"


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32) * 3 + 1
        y, _, _ = ops.batch_norm_forward(x, np.ones(3, np.float32), np.zeros(3, np.float32), "train")
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-2)

    def test_constant_channel_collapses_to_beta(self):
        x = np.full((2, 1, 4, 4), 7.0, dtype=np.float32)
        beta = np.array([0.25], dtype=np.float32)
        y, _, _ = ops.batch_norm_forward(x, np.ones(1, np.float32), beta, "train")
        assert np.allclose(y, 0.25, atol=1e-6)

    def test_affine_on_prenormalized_input(self):
        # channel values {-1, +1}: exact zero mean, unit variance
        x = np.array([-1.0, 1.0] * 8, dtype=np.float32).reshape(1, 1, 4, 4)
        gamma = np.array([2.0], dtype=np.float32)
        beta = np.array([3.0], dtype=np.float32)
        y, _, _ = ops.batch_norm_forward(x, gamma, beta, "train")
        expected = 2.0 * x / np.sqrt(1.0 + ops.BN_EPSILON) + 3.0
        assert np.max(np.abs(y - expected)) < 1e-6

    def test_running_stats_update_rule(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        _, _, (nm, nv) = ops.batch_norm_forward(x, np.ones(2), np.zeros(2), "train", (rm, rv))
        assert np.allclose(nm, 0.9 * rm + 0.1 * x.mean(axis=(0, 2, 3)))
        assert np.allclose(nv, 0.9 * rv + 0.1 * x.var(axis=(0, 2, 3)))

    def test_infer_uses_running_and_requires_them(self):
        x = np.ones((1, 1, 2, 2))
        y, _, _ = ops.batch_norm_forward(x, np.ones(1), np.zeros(1), "infer",
                                         (np.array([1.0]), np.array([4.0])))
        assert np.allclose(y, 0.0, atol=1e-3)
        with pytest.raises(ValueError, match="running statistics"):
            ops.batch_norm_forward(x, np.ones(1), np.zeros(1), "infer")

    def test_rank5_statistics_axes(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 4, 3, 3)).astype(np.float32)
        y, _, _ = ops.batch_norm_forward(x, np.ones(2, np.float32), np.zeros(2, np.float32), "train")
        assert np.allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-5)


class TestActivations:
    def test_sigmoid_hand_values(self):
        y, _ = ops.sigmoid_forward(np.array([0.0]))
        assert y[0] == 0.5

    def test_relu_hand_values(self):
        y, _ = ops.relu_forward(np.array([-1.0, 0.0, 2.0]))
        assert y.tolist() == [0.0, 0.0, 2.0]

    def test_sigmoid_saturation_no_overflow(self):
        y, _ = ops.sigmoid_forward(np.array([30.0, -30.0, 500.0, -500.0]))
        assert abs(y[0] - 1.0) < 1e-7 and abs(y[1]) < 1e-7
        assert np.all(np.isfinite(y))
        # double-precision reference for the stable formula
        assert abs(y[0] - 1.0 / (1.0 + np.exp(-30.0))) < 1e-12

    def test_relu_subgradient_at_zero_is_zero(self):
        _, mask = ops.relu_forward(np.array([0.0, 1.0]))
        assert mask.tolist() == [False, True]


class TestGlobalAvgPool:
    def test_constant(self):
        y, _ = ops.global_avg_pool_forward(np.full((1, 2, 3, 3), 5.0))
        assert np.array_equal(y, np.full((1, 2, 1, 1), 5.0))

    def test_hand_case(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
        y, _ = ops.global_avg_pool_forward(x)
        assert y[0, 0, 0, 0] == 2.5

    def test_random_vs_loop_mean(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 5, 7))
        y, _ = ops.global_avg_pool_forward(x)
        for c in range(3):
            acc = 0.0
            for i in range(5):
                for j in range(7):
                    acc += x[0, c, i, j]
            assert abs(y[0, c, 0, 0] - acc / 35) < 1e-6


class TestBilinearUpsample:
    def test_constant_preserved_exactly(self):
        x = np.full((1, 1, 3, 3), 3.25, dtype=np.float32)  # dyadic value: exact arithmetic
        y, _ = ops.bilinear_upsample2x_forward(x)
        assert np.array_equal(y, np.full((1, 1, 6, 6), 3.25, dtype=np.float32))

    def test_1x1_replicates(self):
        y, _ = ops.bilinear_upsample2x_forward(np.full((1, 1, 1, 1), 0.7, dtype=np.float32))
        assert np.allclose(y, 0.7)
        assert y.shape == (1, 1, 2, 2)

    def test_hand_row(self):
        x = np.array([[[[0.0, 4.0]]]])
        y, _ = ops.bilinear_upsample2x_forward(x)
        assert y.reshape(2, 4)[0].tolist() == [0.0, 1.0, 3.0, 4.0]

    def test_mean_preserved_on_constant_and_ramp(self):
        const = np.full((1, 1, 4, 6), 1.5)
        y, _ = ops.bilinear_upsample2x_forward(const)
        assert abs(y.mean() - 1.5) < 1e-12
        ramp = np.arange(8.0).reshape(1, 1, 1, 8).repeat(4, axis=2)
        y, _ = ops.bilinear_upsample2x_forward(ramp)
        assert abs(y.mean() - ramp.mean()) < 1e-12


class TestSpatialDropout:
    def test_infer_is_bit_identical(self):
        x = np.random.default_rng(0).random((2, 4, 3, 3), dtype=np.float32)
        y, cache = ops.spatial_dropout_forward(x, 0.5, "infer")
        assert y is x and cache is None

    def test_rate_zero_identity(self):
        x = np.ones((1, 2, 2, 2), dtype=np.float32)
        rng = np.random.default_rng(0)
        y, _ = ops.spatial_dropout_forward(x, 0.0, "train", rng)
        assert np.array_equal(y, x)

    def test_dropped_fraction(self):
        rng = np.random.default_rng(99)
        x = np.ones((1, 10000, 1, 1), dtype=np.float32)
        y, _ = ops.spatial_dropout_forward(x, 0.5, "train", rng)
        dropped = np.count_nonzero(y == 0) / 10000
        assert abs(dropped - 0.5) < 0.02

    def test_whole_channels_and_scaling(self):
        rng = np.random.default_rng(1)
        x = np.ones((2, 8, 4, 4), dtype=np.float32)
        y, _ = ops.spatial_dropout_forward(x, 0.25, "train", rng)
        per_channel = y.reshape(2, 8, -1)
        for n in range(2):
            for c in range(8):
                vals = set(per_channel[n, c].tolist())
                assert vals in ({0.0}, {np.float32(1 / 0.75)})

    def test_expectation_preserved(self):
        total = 0.0
        x = np.ones((1, 10, 2, 2), dtype=np.float32)
        for s in range(1000):
            rng = np.random.default_rng(s)
            y, _ = ops.spatial_dropout_forward(x, 0.5, "train", rng)
            total += float(y.mean())
        assert abs(total / 1000 - 1.0) < 0.02

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            ops.spatial_dropout_forward(np.ones((1, 1, 1, 1)), 1.0, "train",
                                        np.random.default_rng(0))


class TestConcat:
    def test_order_and_round_trip(self):
        rng = np.random.default_rng(0)
        a = rng.random((1, 1, 3, 3), dtype=np.float32)
        b = rng.random((1, 1, 3, 3), dtype=np.float32)
        y, cache = ops.concat_channels_forward(a, b)
        assert y.shape == (1, 2, 3, 3)
        assert np.array_equal(y[:, 0:1], a)
        ga, gb = ops.concat_channels_backward(cache, y)
        assert np.array_equal(ga, a) and np.array_equal(gb, b)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ops.concat_channels_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_zero_channel_operand_rejected(self):
        with pytest.raises(ValueError, match="at least one channel"):
            ops.concat_channels_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 0, 2, 2)))
