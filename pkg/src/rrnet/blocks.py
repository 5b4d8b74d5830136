"""Residual building blocks.

A spatial block computes ``f(x) + skip(x)`` where the residual branch f is a
stack of conv-bn-relu layers and the skip path is the identity (or a strided
1x1 projection when the block changes resolution or width).  A temporal block
additionally receives the same layer's input from the previous time column
and adds it through one of three connection types:

* identity        y = f(x) + x + x_prev
* conv_linear     y = f(x) + x + conv1x1(x_prev)
* conv_nonlinear  y = f(x) + x + relu(conv1x1(x_prev))

The 1x1 temporal weights carry no bias, so a zero ``x_prev`` (the boundary at
the first time step) reduces every connection type to the spatial block
exactly.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor_ops as T
from .autograd import Parameter, Tape


class TemporalConnection(Enum):
    IDENTITY = "identity"
    CONV_LINEAR = "conv_linear"
    CONV_NONLINEAR = "conv_nonlinear"

    @property
    def has_weights(self) -> bool:
        return self is not TemporalConnection.IDENTITY


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvBnRelu:
    """One conv -> batchnorm -> relu layer; the unit the residual branch stacks.

    The convolution carries no bias: batch normalization would cancel any
    per-channel shift anyway (its gradient is identically zero), which also
    breaks finite-difference verification.  ``shift_init`` seeds the bn shift
    (beta) instead; positive values keep relu inputs away from the kink in
    verification runs.
    """

    def __init__(self, name, in_ch, out_ch, rng, dtype, kernel=3, stride=1,
                 padding=1, shift_init=0.0):
        self.name = name
        self.spec = T.ConvSpec(kernel_h=kernel, kernel_w=kernel, stride=stride, padding=padding)
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                                f"{name}.weight")
        self.gamma = Parameter(np.ones(out_ch, dtype=dtype), f"{name}.bn.gamma")
        self.beta = Parameter(np.full(out_ch, shift_init, dtype=dtype), f"{name}.bn.beta")
        self.bn = T.BatchNormState(
            gamma=self.gamma.value,
            beta=self.beta.value,
            running_mean=np.zeros(out_ch, dtype=dtype),
            running_var=np.ones(out_ch, dtype=dtype),
        )

    def forward(self, tape: Tape, x: int) -> int:
        h = tape.conv2d(x, tape.param(self.weight), None, self.spec)
        h = tape.batchnorm2d(h, self.gamma, self.beta, self.bn)
        return tape.relu(h)

    def parameters(self):
        return [self.weight, self.gamma, self.beta]

    def bn_states(self):
        return [(f"{self.name}.bn", self.bn)]


class SpatialResidualBlock:
    """Residual unit: two stacked conv-bn-relu layers plus a skip path.

    The skip is the identity when shapes are preserved, otherwise a strided
    1x1 projection (the downsampling path doubles the width and halves each
    spatial extent).
    """

    def __init__(self, name, in_ch, out_ch, rng, dtype, stride=1, shift_init=0.0):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.layer1 = ConvBnRelu(f"{name}.conv1", in_ch, out_ch, rng, dtype,
                                 stride=stride, shift_init=shift_init)
        self.layer2 = ConvBnRelu(f"{name}.conv2", out_ch, out_ch, rng, dtype,
                                 shift_init=shift_init)
        if stride != 1 or in_ch != out_ch:
            self.skip_weight = Parameter(
                he_normal(rng, (out_ch, in_ch, 1, 1), in_ch, dtype),
                f"{name}.skip.weight")
            self.skip_spec = T.ConvSpec(kernel_h=1, kernel_w=1, stride=stride, padding=0)
        else:
            self.skip_weight = None
            self.skip_spec = None

    @property
    def downsamples(self) -> bool:
        return self.skip_weight is not None

    def forward(self, tape: Tape, x: int) -> int:
        branch = self.layer2.forward(tape, self.layer1.forward(tape, x))
        if self.skip_weight is None:
            skip = x
        else:
            vx = tape.value(x)
            if self.stride == 2:
                check_downsample_input(vx.shape)
            skip = tape.conv2d(x, tape.param(self.skip_weight), None, self.skip_spec)
        try:
            return tape.add(branch, skip)
        except T.ShapeError as e:
            raise T.ShapeError(f"{self.name}: residual branch vs skip: {e}") from e

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward on a throwaway tape (no gradients kept)."""
        tape = Tape()
        return tape.value(self.forward(tape, tape.leaf(x)))

    def parameters(self):
        out = self.layer1.parameters() + self.layer2.parameters()
        if self.skip_weight is not None:
            out.append(self.skip_weight)
        return out

    def bn_states(self):
        return self.layer1.bn_states() + self.layer2.bn_states()


class TemporalResidualBlock:
    """Spatial residual unit with an additive edge from the previous time column.

    ``x_prev`` is the input this same block saw one time step earlier, so its
    shape always matches ``x_t``; the block must preserve shape for the sum to
    exist, hence stride 1 and equal channel counts.
    """

    def __init__(self, name, channels, connection: TemporalConnection, rng, dtype,
                 shift_init=0.0):
        self.name = name
        self.connection = connection
        self.base = SpatialResidualBlock(name, channels, channels, rng, dtype,
                                         shift_init=shift_init)
        if connection.has_weights:
            # 1x1 kernel, shared across all time steps, no bias
            self.temporal_weight = Parameter(
                (rng.standard_normal((channels, channels, 1, 1))
                 * np.sqrt(1.0 / channels)).astype(dtype),
                f"{name}.temporal.weight")
            self.temporal_spec = T.ConvSpec(kernel_h=1, kernel_w=1)
        else:
            self.temporal_weight = None
            self.temporal_spec = None

    def forward(self, tape: Tape, x_t: int, x_prev: int | None) -> int:
        y = self.base.forward(tape, x_t)
        if x_prev is None:
            return y
        if tape.value(x_prev).shape != tape.value(x_t).shape:
            raise T.ShapeError(
                f"{self.name}: temporal input shape {tape.value(x_prev).shape} "
                f"!= current input shape {tape.value(x_t).shape}")
        if self.connection is TemporalConnection.IDENTITY:
            term = x_prev
        else:
            term = tape.conv2d(x_prev, tape.param(self.temporal_weight), None,
                               self.temporal_spec)
            if self.connection is TemporalConnection.CONV_NONLINEAR:
                term = tape.relu(term)
        return tape.add(y, term)

    def apply(self, x_t: np.ndarray, x_prev: np.ndarray | None) -> np.ndarray:
        tape = Tape()
        prev = tape.leaf(x_prev) if x_prev is not None else None
        return tape.value(self.forward(tape, tape.leaf(x_t), prev))

    def parameters(self):
        out = self.base.parameters()
        if self.temporal_weight is not None:
            out.append(self.temporal_weight)
        return out

    def bn_states(self):
        return self.base.bn_states()


def check_downsample_input(shape) -> None:
    h, w = shape[2], shape[3]
    if h % 2 or w % 2:
        raise T.ShapeError(
            f"downsample: spatial extents must be even, got H={h} (axis 2), W={w} (axis 3)")


def downsample_skip(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Width-doubling, resolution-halving 1x1 strided projection.

    ``x``: [N,C,H,W] with even H and W; ``weight``: [2C,C,1,1].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise T.ShapeError("downsample_skip: expected x [N,C,H,W] and weight [2C,C,1,1]")
    c = x.shape[1]
    if weight.shape != (2 * c, c, 1, 1):
        raise T.ShapeError(
            f"downsample_skip: weight shape {weight.shape} != {(2 * c, c, 1, 1)} "
            f"(axis 0 must double the {c} input channels)")
    check_downsample_input(x.shape)
    return T.conv2d(x, weight, None, T.ConvSpec(kernel_h=1, kernel_w=1, stride=2, padding=0))
