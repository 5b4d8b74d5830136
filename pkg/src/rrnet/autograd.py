"""Reverse-mode differentiation over a per-run tape.

A :class:`Tape` is rebuilt for every forward pass (chunk lengths vary between
configurations, so there is nothing to gain from a static graph).  Each op
method computes its output eagerly with the kernels in :mod:`rrnet.tensor_ops`
and appends one record holding the input/output node ids plus a closure for
the backward rule.  Records are appended in forward order, so their inputs
always precede their outputs and one reverse sweep visits every record once.

Parameters are identified by object: using the same :class:`Parameter` at
several time steps maps to a single tape node, and its gradient is the sum of
the per-use gradients.  ``backward`` accumulates into ``Parameter.grad``;
callers zero the gradients between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor_ops as T


class Parameter:
    """A named trainable array with a persistent gradient buffer.

    ``value`` is mutated in place by optimizers and checkpoint loading so that
    aliases (for example batch-norm scale/shift inside a BatchNormState) stay
    in sync.
    """

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def shape(self):
        return self.value.shape

    def astype(self, dtype) -> "Parameter":
        return Parameter(self.value.astype(dtype), self.name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    def __init__(self):
        self._values: list[np.ndarray] = []
        self.records: list[TapeRecord] = []
        self._param_nodes: dict[int, int] = {}  # id(Parameter) -> node id
        self._params_by_node: dict[int, Parameter] = {}
        self._grads: list[np.ndarray | None] | None = None

    # ---- nodes -----------------------------------------------------------

    def leaf(self, value: np.ndarray) -> int:
        self._values.append(np.asarray(value))
        return len(self._values) - 1

    def param(self, p: Parameter) -> int:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self.leaf(p.value)
            self._param_nodes[id(p)] = node
            self._params_by_node[node] = p
        return node

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def record(
        self,
        op: str,
        inputs: tuple[int, ...],
        output_value: np.ndarray,
        backward_fn: Callable[[np.ndarray], tuple],
    ) -> int:
        for i in inputs:
            if not 0 <= i < len(self._values):
                raise IndexError(f"{op}: input node {i} is not on this tape")
        out = self.leaf(output_value)
        self.records.append(TapeRecord(op, inputs, out, backward_fn))
        return out

    # ---- primitive ops ----------------------------------------------------

    def _binary_check(self, op: str, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        va, vb = self._values[a], self._values[b]
        if va.shape != vb.shape:
            raise T.ShapeError(f"{op}: operand shapes {va.shape} and {vb.shape} differ")
        return va, vb

    def add(self, a: int, b: int) -> int:
        va, vb = self._binary_check("add", a, b)
        return self.record("add", (a, b), va + vb, lambda g: (g, g))

    def sub(self, a: int, b: int) -> int:
        va, vb = self._binary_check("sub", a, b)
        return self.record("sub", (a, b), va - vb, lambda g: (g, -g))

    def mul(self, a: int, b: int) -> int:
        va, vb = self._binary_check("mul", a, b)
        return self.record("mul", (a, b), va * vb, lambda g: (g * vb, g * va))

    def scale(self, a: int, factor: float) -> int:
        va = self._values[a]
        return self.record("scale", (a,), va * factor, lambda g: (g * factor,))

    def total_sum(self, a: int) -> int:
        va = self._values[a]
        return self.record(
            "sum", (a,), np.asarray(va.sum()), lambda g: (g * np.ones_like(va),)
        )

    def relu(self, a: int) -> int:
        va = self._values[a]
        return self.record(
            "relu", (a,), T.relu(va), lambda g: (T.relu_backward(g, va),)
        )

    def sigmoid(self, a: int) -> int:
        va = self._values[a]
        out = 1.0 / (1.0 + np.exp(-va))
        return self.record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))

    def tanh(self, a: int) -> int:
        va = self._values[a]
        out = np.tanh(va)
        return self.record("tanh", (a,), out, lambda g: (g * (1 - out * out),))

    def linear(self, x: int, weight: int, bias: int | None) -> int:
        vx, vw = self._values[x], self._values[weight]
        vb = self._values[bias] if bias is not None else None
        out = T.linear(vx, vw, vb)
        inputs = (x, weight) if bias is None else (x, weight, bias)

        def bw(g):
            dx, dw, db = T.linear_backward(g, vx, vw, with_bias=vb is not None)
            return (dx, dw) if vb is None else (dx, dw, db)

        return self.record("linear", inputs, out, bw)

    def conv2d(self, x: int, weight: int, bias: int | None, spec: T.ConvSpec) -> int:
        vx, vw = self._values[x], self._values[weight]
        vb = self._values[bias] if bias is not None else None
        out, cols = T.conv2d_forward(vx, vw, vb, spec)
        inputs = (x, weight) if bias is None else (x, weight, bias)

        def bw(g):
            dx, dw, db = T.conv2d_backward(g, cols, vx.shape, vw, spec, with_bias=vb is not None)
            return (dx, dw) if vb is None else (dx, dw, db)

        return self.record("conv2d", inputs, out, bw)

    def batchnorm2d(self, x: int, gamma: Parameter, beta: Parameter, state: T.BatchNormState) -> int:
        if state.gamma is not gamma.value or state.beta is not beta.value:
            raise ValueError("batchnorm2d: state scale/shift must alias the given parameters")
        gid, bid = self.param(gamma), self.param(beta)
        out, cache = T.batchnorm2d_forward(self._values[x], state)

        def bw(g):
            return T.batchnorm2d_backward(g, cache)

        return self.record("batchnorm2d", (x, gid, bid), out, bw)

    def global_avg_pool(self, x: int) -> int:
        vx = self._values[x]
        out = T.global_avg_pool(vx)
        return self.record(
            "global_avg_pool", (x,), out,
            lambda g: (T.global_avg_pool_backward(g, vx.shape),),
        )

    def softmax_cross_entropy(self, logits: int, labels: np.ndarray) -> tuple[int, np.ndarray]:
        """Returns (loss node, probabilities).  Gradients flow through the loss."""
        vl = self._values[logits]
        loss, probs = T.softmax_cross_entropy(vl, labels)
        node = self.record(
            "softmax_cross_entropy", (logits,), loss,
            lambda g: (T.softmax_cross_entropy_backward(g, probs, labels),),
        )
        return node, probs

    # ---- reverse sweep ----------------------------------------------------

    def backward(self, loss: int) -> None:
        loss_value = self._values[loss]
        if loss_value.size != 1:
            raise ValueError(
                f"backward: loss must be a scalar, got shape {loss_value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss] = np.ones_like(loss_value)
        for rec in reversed(self.records):
            g = grads[rec.output]
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for node, ig in zip(rec.inputs, input_grads):
                if ig is None:
                    continue
                grads[node] = ig if grads[node] is None else grads[node] + ig
        self._grads = grads
        for node, p in self._params_by_node.items():
            if grads[node] is not None:
                p.grad += grads[node]

    def grad_of(self, node: int) -> np.ndarray:
        """Gradient of the last backward's loss w.r.t. any node (zeros if unreached)."""
        if self._grads is None:
            raise RuntimeError("grad_of: call backward first")
        g = self._grads[node]
        return np.zeros_like(self._values[node]) if g is None else g

    def relu_input_min_abs(self) -> float:
        """Smallest |preactivation| seen by any relu on this tape (inf if none)."""
        margin = np.inf
        for rec in self.records:
            if rec.op == "relu":
                v = self._values[rec.inputs[0]]
                if v.size:
                    margin = min(margin, float(np.abs(v).min()))
        return margin


# ---- finite-difference verification ---------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    threshold: float = 1e-6
    relu_margin: float = np.inf

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def format(self) -> str:
        lines = [f"{'parameter':40s} {'max rel err':>12s} {'elements':>8s}"]
        for e in self.entries:
            lines.append(f"{e.name:40s} {e.max_rel_err:12.3e} {e.checked:8d}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: max relative error {self.max_rel_err:.3e} "
            f"(threshold {self.threshold:.1e}, min |relu input| {self.relu_margin:.3e})"
        )
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], float],
    backward_fn: Callable[[], None],
    parameters: list[Parameter],
    eps: float = 1e-5,
    threshold: float = 1e-6,
    max_elements_per_param: int = 8,
    seed: int = 0,
    rel_floor: float = 1e-10,
) -> GradCheckReport:
    """Compare analytic gradients against 64-bit central differences.

    ``loss_fn`` evaluates the loss without touching gradients; ``backward_fn``
    must run a fresh tape and populate ``Parameter.grad``.  Central
    differences probe at most ``max_elements_per_param`` elements of each
    parameter (chosen by a seeded generator, so large tensors stay
    affordable); every parameter still appears in the report.
    """
    for p in parameters:
        if p.value.dtype != np.float64:
            raise ValueError(
                f"grad_check: parameter {p.name} must be float64, got {p.value.dtype}"
            )
        p.zero_grad()
    backward_fn()
    analytic = {p.name: p.grad.copy() for p in parameters}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(threshold=threshold)
    for p in parameters:
        flat = p.value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_elements_per_param else np.sort(
            rng.choice(n, size=max_elements_per_param, replace=False)
        )
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            loss_plus = float(loss_fn())
            flat[i] = keep - eps
            loss_minus = float(loss_fn())
            flat[i] = keep
            fd = (loss_plus - loss_minus) / (2 * eps)
            an = float(analytic[p.name].reshape(-1)[i])
            denom = max(abs(an), abs(fd))
            if denom > rel_floor:
                worst = max(worst, abs(an - fd) / denom)
        report.entries.append(GradCheckEntry(name=p.name, max_rel_err=worst, checked=len(idx)))
    return report
