"""Dense tensor kernels shared by every model in the package.

Tensors are plain numpy arrays, row-major, float32 by default.  Verification
code (gradient checks, unrolling oracles) runs the same kernels in float64.
Every kernel is deterministic: identical inputs give bitwise-identical
outputs within one build.

Forward-only entry points (``conv2d``, ``relu``, ...) are the public surface;
the ``*_forward``/``*_backward`` pairs additionally expose the caches needed
by the differentiation tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64

_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Dimension mismatch between operands; the message names the axis."""


class UninitializedStatsError(RuntimeError):
    """Eval-mode batch norm requested before any running statistics exist."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on kernel outputs (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


def assert_finite(x: np.ndarray, context: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{context}: non-finite values detected")


def _checked(out: np.ndarray, context: str) -> np.ndarray:
    if _DEBUG_CHECKS:
        assert_finite(out, context)
    return out


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation (no kernel flip, zero padding)."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be positive")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def out_extent(self, in_extent: int, kernel: int) -> int:
        out = (in_extent + 2 * self.padding - kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"conv2d: spec {self} yields non-positive output extent "
                f"for input extent {in_extent}"
            )
        return out

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.out_extent(h, self.kernel_h), self.out_extent(w, self.kernel_w)


def _conv_check(x: np.ndarray, weight: np.ndarray, bias, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [N,C,H,W], got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d [K,C,kh,kw], got rank {weight.ndim}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: channel axis (axis 1) mismatch: input has {x.shape[1]}, "
            f"weight expects {weight.shape[1]}"
        )
    if (weight.shape[2], weight.shape[3]) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"conv2d: weight spatial axes (2,3) are {weight.shape[2:]}, "
            f"spec says {(spec.kernel_h, spec.kernel_w)}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d: bias axis 0 has {bias.shape}, expected ({weight.shape[0]},)"
        )


def _im2col(xp: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    # xp is the already-padded input [N,C,Hp,Wp]; returns [N*out_h*out_w, C*kh*kw]
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, out_h, out_w, spec.kernel_h, spec.kernel_w),
        strides=(s0, s1, s2 * spec.stride, s3 * spec.stride, s2, s3),
        writeable=False,
    )
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation returning (output, im2col matrix) for reuse in backward."""
    _conv_check(x, weight, bias, spec)
    n, _, h, w = x.shape
    k = weight.shape[0]
    out_h, out_w = spec.out_hw(h, w)
    if spec.padding:
        p = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x
    cols = _im2col(xp, spec, out_h, out_w)
    out = cols @ weight.reshape(k, -1).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, k).transpose(0, 3, 1, 2))
    return _checked(out, "conv2d"), cols


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    spec: ConvSpec | None = None,
) -> np.ndarray:
    if spec is None:
        spec = ConvSpec(kernel_h=weight.shape[2], kernel_w=weight.shape[3])
    out, _ = conv2d_forward(x, weight, bias, spec)
    return out


def _col2im(
    dcols: np.ndarray,
    x_shape: tuple[int, ...],
    spec: ConvSpec,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    n, c, h, w = x_shape
    p, s = spec.padding, spec.stride
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    d6 = dcols.reshape(n, out_h, out_w, c, spec.kernel_h, spec.kernel_w)
    d6 = d6.transpose(0, 3, 4, 5, 1, 2)  # [N,C,kh,kw,oh,ow]
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += d6[:, :, i, j]
    if p:
        return dxp[:, :, p : p + h, p : p + w]
    return dxp


def conv2d_backward(
    grad_out: np.ndarray,
    cols: np.ndarray,
    x_shape: tuple[int, ...],
    weight: np.ndarray,
    spec: ConvSpec,
    with_bias: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    n = x_shape[0]
    k = weight.shape[0]
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, k)
    dw = (g2.T @ cols).reshape(weight.shape)
    db = g2.sum(axis=0) if with_bias else None
    dcols = g2 @ weight.reshape(k, -1)
    dx = _col2im(dcols, x_shape, spec, out_h, out_w)
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return _checked(np.maximum(x, 0), "relu")


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return grad_out * (x > 0)


@dataclass
class BatchNormState:
    """Per-channel affine batch normalization with running statistics.

    ``gamma``/``beta`` are the trainable scale/shift (owners may alias them to
    Parameter buffers).  Running statistics stay uninitialized until the first
    train-mode pass; eval mode before that is an error.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"
    initialized: bool = False

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("momentum must be in (0,1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"batchnorm: {name} length != gamma length {n}")

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, **kwargs) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )


def batchnorm2d_forward(x: np.ndarray, state: BatchNormState) -> tuple[np.ndarray, tuple]:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-d [N,C,H,W], got rank {x.ndim}")
    c = x.shape[1]
    if c != len(state.gamma):
        raise ShapeError(
            f"batchnorm2d: channel axis (axis 1) has {c} channels, state has {len(state.gamma)}"
        )
    gamma = state.gamma.reshape(1, c, 1, 1)
    beta = state.beta.reshape(1, c, 1, 1)
    if state.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if state.initialized:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
        else:
            state.running_mean[...] = mean
            state.running_var[...] = var
            state.initialized = True
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gamma * xhat + beta
        cache = (True, xhat, inv, state.gamma)
    elif state.mode == "eval":
        if not state.initialized:
            raise UninitializedStatsError(
                "batchnorm2d: eval mode requested but running statistics were never updated"
            )
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gamma * xhat + beta
        cache = (False, xhat, inv, state.gamma)
    else:
        raise ValueError(f"batchnorm2d: unknown mode {state.mode!r}")
    return _checked(out, "batchnorm2d"), cache


def batchnorm2d(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    out, _ = batchnorm2d_forward(x, state)
    return out


def batchnorm2d_backward(grad_out: np.ndarray, cache: tuple):
    train, xhat, inv, gamma = cache
    c = xhat.shape[1]
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dbeta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    if not train:
        dx = dxhat * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta
    # train mode: the batch statistics depend on x as well
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-d [N,C,H,W], got rank {x.ndim}")
    return _checked(x.mean(axis=(2, 3)), "global_avg_pool")


def global_avg_pool_backward(grad_out: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out.reshape(n, c, 1, 1) / (h * w), x_shape)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear: expected x [N,D] and weight [K,D]")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: feature axis (axis 1) mismatch: x has {x.shape[1]}, weight has {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return _checked(out, "linear")


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, with_bias: bool):
    dx = grad_out @ weight
    dw = grad_out.T @ x
    db = grad_out.sum(axis=0) if with_bias else None
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-subtracted softmax for [N,K] logits."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax: logits must be [N,K], got rank {logits.ndim}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean negative log-likelihood with a max-subtracted softmax.

    Returns (scalar loss, probabilities [N,K]); probability rows sum to 1.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N,K], got rank {logits.ndim}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels axis 0 has shape {labels.shape}, "
            f"expected ({logits.shape[0]},)"
        )
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"softmax_cross_entropy: label out of range [0,{k}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    total = exps.sum(axis=1, keepdims=True)
    probs = exps / total
    logp = shifted - np.log(total)
    loss = -logp[np.arange(logits.shape[0]), labels].mean()
    return _checked(np.asarray(loss), "softmax_cross_entropy"), probs


def softmax_cross_entropy_backward(
    grad_loss: np.ndarray, probs: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    return dlogits * (grad_loss / n)


def znorm_stats(
    features: np.ndarray, variance_floor: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and floored standard deviation over axis 0."""
    if features.ndim != 2:
        raise ShapeError(f"znorm: features must be [N,D], got rank {features.ndim}")
    mean = features.mean(axis=0)
    var = features.var(axis=0)
    std = np.sqrt(np.maximum(var, variance_floor))
    return mean, std


def znorm(features: np.ndarray, variance_floor: float = 1e-12) -> np.ndarray:
    """Standardize each dimension to zero mean, unit variance over axis 0."""
    mean, std = znorm_stats(features, variance_floor)
    return _checked((features - mean) / std, "znorm")
