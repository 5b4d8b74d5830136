import numpy as np
import pytest

from rrnet import tensor_ops as T
from rrnet.autograd import Tape
from rrnet.blocks import (
    SpatialResidualBlock,
    TemporalConnection,
    TemporalResidualBlock,
    downsample_skip,
)

import oracles


def zero_block_weights(block):
    for p in block.parameters():
        if p.name.endswith(".weight"):
            p.value[...] = 0


def make_spatial(channels=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return SpatialResidualBlock("blk", channels, channels, rng, np.dtype(dtype))


def make_temporal(connection, channels=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return TemporalResidualBlock("blk", channels, connection, rng, np.dtype(dtype))


class TestSpatialBlock:
    def test_zero_weights_identity(self):
        block = make_spatial()
        zero_block_weights(block)
        x = np.random.default_rng(1).standard_normal((2, 3, 6, 6))
        assert np.array_equal(block.apply(x), x)

    def test_zero_input_zero_shifts(self):
        block = make_spatial(seed=2)
        for p in block.parameters():
            if p.name.endswith(".beta"):
                p.value[...] = 0
        out = block.apply(np.zeros((1, 3, 4, 4)))
        assert not out.any()

    def test_matches_layer_by_layer_composition(self):
        block = make_spatial(seed=3)
        x = np.random.default_rng(4).standard_normal((2, 3, 5, 5))

        def layer(l, v):
            h = T.conv2d(v, l.weight.value, None, l.spec)
            h = oracles.batchnorm_train_direct(h, l.gamma.value, l.beta.value, l.bn.epsilon)
            return np.maximum(h, 0)

        expected = layer(block.layer2, layer(block.layer1, x)) + x
        assert np.abs(block.apply(x) - expected).max() <= 1e-6

    def test_projection_block_shapes(self):
        rng = np.random.default_rng(5)
        block = SpatialResidualBlock("down", 4, 8, rng, np.float64, stride=2)
        out = block.apply(rng.standard_normal((2, 4, 8, 8)))
        assert out.shape == (2, 8, 4, 4)

    def test_projection_block_rejects_odd_extents(self):
        rng = np.random.default_rng(6)
        block = SpatialResidualBlock("down", 2, 4, rng, np.float64, stride=2)
        with pytest.raises(T.ShapeError, match="even"):
            block.apply(rng.standard_normal((1, 2, 5, 6)))


class TestTemporalBlock:
    @pytest.mark.parametrize("connection", list(TemporalConnection))
    def test_zero_boundary_reduces_to_spatial(self, connection):
        block = make_temporal(connection, seed=7)
        x = np.random.default_rng(8).standard_normal((1, 3, 4, 4))
        spatial_out = block.base.apply(x)
        with_zero_prev = block.apply(x, np.zeros_like(x))
        without_prev = block.apply(x, None)
        assert np.array_equal(with_zero_prev, spatial_out)
        assert np.array_equal(without_prev, spatial_out)

    def test_identity_hand_computed_on_tiny_tensors(self):
        # 1 channel, 2x2 frame, integer data; every step written out by hand
        block = make_temporal(TemporalConnection.IDENTITY, channels=1, seed=9)
        w1 = np.zeros((1, 1, 3, 3)); w1[0, 0, 1, 1] = 2.0  # center tap: conv == 2x
        w2 = np.zeros((1, 1, 3, 3)); w2[0, 0, 1, 1] = 1.0
        block.base.layer1.weight.value[...] = w1
        block.base.layer1.beta.value[...] = 0.5
        block.base.layer2.weight.value[...] = w2
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        x_prev = np.array([[[[10.0, 20.0], [30.0, 40.0]]]])

        def bn_by_hand(v):
            flat = [v[0, 0, 0, 0], v[0, 0, 0, 1], v[0, 0, 1, 0], v[0, 0, 1, 1]]
            m = sum(flat) / 4.0
            var = sum((f - m) ** 2 for f in flat) / 4.0
            return (v - m) / np.sqrt(var + 1e-5)

        h1 = np.maximum(bn_by_hand(2.0 * x) + 0.5, 0.0)   # conv1: 2x, bn shift 0.5, relu
        h2 = np.maximum(bn_by_hand(1.0 * h1), 0.0)        # conv2 center tap 1
        expected = h2 + x + x_prev
        assert np.abs(block.apply(x, x_prev) - expected).max() <= 1e-12

    def test_conv_linear_zero_temporal_weights(self):
        block = make_temporal(TemporalConnection.CONV_LINEAR, seed=10)
        block.temporal_weight.value[...] = 0
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 3, 4, 4))
        x_prev = rng.standard_normal((1, 3, 4, 4))
        assert np.array_equal(block.apply(x, x_prev), block.base.apply(x))

    def test_identity_additivity_probe(self):
        # the temporal term enters linearly: y(x, a+b) - y(x, a) == b.
        # On integer-valued tensors every float add is exact (no rounding), so
        # any nonlinearity on the temporal path would break bitwise equality.
        block = make_temporal(TemporalConnection.IDENTITY, seed=12)
        zero_block_weights(block)
        rng = np.random.default_rng(13)
        x = rng.integers(-8, 8, size=(1, 3, 4, 4)).astype(np.float64)
        a = rng.integers(-8, 8, size=(1, 3, 4, 4)).astype(np.float64)
        b = rng.integers(-8, 8, size=(1, 3, 4, 4)).astype(np.float64)
        assert np.array_equal(block.apply(x, a + b) - block.apply(x, a), b)
        # general weights: equality up to float rounding of the final adds
        block2 = make_temporal(TemporalConnection.IDENTITY, seed=12)
        xr = rng.standard_normal((1, 3, 4, 4))
        ar = rng.standard_normal((1, 3, 4, 4))
        br = rng.standard_normal((1, 3, 4, 4))
        diff = block2.apply(xr, ar + br) - block2.apply(xr, ar)
        assert np.abs(diff - br).max() <= 1e-12

    def test_identity_adds_no_parameters(self):
        spatial = make_spatial(channels=5)
        identity = make_temporal(TemporalConnection.IDENTITY, channels=5)
        linear = make_temporal(TemporalConnection.CONV_LINEAR, channels=5)
        nonlinear = make_temporal(TemporalConnection.CONV_NONLINEAR, channels=5)
        count = lambda blk: sum(p.value.size for p in blk.parameters())
        assert count(identity) == count(spatial)
        assert count(linear) == count(spatial) + 5 * 5
        assert count(nonlinear) == count(spatial) + 5 * 5

    def test_temporal_shape_mismatch_rejected(self):
        block = make_temporal(TemporalConnection.IDENTITY)
        x = np.zeros((1, 3, 4, 4))
        with pytest.raises(T.ShapeError, match="temporal input"):
            block.apply(x, np.zeros((1, 3, 2, 2)))

    def test_temporal_weights_shared_across_steps(self):
        # the same W_s parameter node serves every time step on one tape
        block = make_temporal(TemporalConnection.CONV_LINEAR, seed=14)
        rng = np.random.default_rng(15)
        tape = Tape()
        x1 = tape.leaf(rng.standard_normal((1, 3, 4, 4)))
        x2 = tape.leaf(rng.standard_normal((1, 3, 4, 4)))
        y1 = block.forward(tape, x1, None)
        block.forward(tape, x2, y1)
        conv_weight_nodes = {rec.inputs[1] for rec in tape.records if rec.op == "conv2d"}
        ws_node = tape._param_nodes[id(block.temporal_weight)]
        assert ws_node in conv_weight_nodes


class TestDownsampleSkip:
    def test_block_diagonal_copy_is_strided_subsample(self):
        c = 3
        w = np.zeros((2 * c, c, 1, 1))
        for k in range(2 * c):
            w[k, k % c, 0, 0] = 1.0
        x = np.random.default_rng(16).standard_normal((2, c, 8, 8))
        out = downsample_skip(x, w)
        sub = x[:, :, ::2, ::2]
        assert np.array_equal(out, np.concatenate([sub, sub], axis=1))

    def test_zero_weight(self):
        x = np.ones((1, 2, 4, 4))
        assert not downsample_skip(x, np.zeros((4, 2, 1, 1))).any()

    def test_spatial_contract_8_to_4(self):
        x = np.zeros((1, 2, 8, 8))
        assert downsample_skip(x, np.zeros((4, 2, 1, 1))).shape == (1, 4, 4, 4)

    def test_odd_extents_rejected(self):
        with pytest.raises(T.ShapeError, match="even"):
            downsample_skip(np.zeros((1, 2, 7, 8)), np.zeros((4, 2, 1, 1)))

    def test_width_contract_enforced(self):
        with pytest.raises(T.ShapeError, match="double"):
            downsample_skip(np.zeros((1, 2, 8, 8)), np.zeros((3, 2, 1, 1)))
