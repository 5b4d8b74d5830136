"""Comparison models over per-frame features.

Both baselines consume feature vectors produced by a frozen spatial network
(one trained on single frames, then truncated after a chosen stage and
pooled).  The average-pooling model is order-invariant by construction, which
is exactly why it cannot solve order-sensitive tasks; the gated recurrent
model consumes the frames in sequence and can.
"""

from __future__ import annotations

import numpy as np

from . import tensor_ops as T
from .autograd import Parameter, Tape
from .model import RecurrentResidualNet
from .training import AdamState, adam_step


class FrameFeatureExtractor:
    """Per-frame D-vectors from a frozen spatial network.

    ``stage`` picks where the network is truncated (deeper stages give wider
    features).  Extraction is order-independent across frames: each frame is
    processed by the same eval-mode column.
    """

    def __init__(self, net: RecurrentResidualNet, stage: int | None = None):
        self.net = net
        self.stage = len(net.stages) - 1 if stage is None else stage
        if not 0 <= self.stage < len(net.stages):
            raise ValueError(f"feature stage {stage} out of range")
        net.eval_mode()

    @property
    def dim(self) -> int:
        return self.net.config.stages[self.stage][0]

    def extract(self, frames: np.ndarray) -> np.ndarray:
        return self.net.features(frames, through_stage=self.stage)


def sorted_mean(features: np.ndarray) -> np.ndarray:
    """Mean over axis 0 that is exactly permutation invariant.

    Sorting each dimension first makes the summation order a function of the
    value multiset only, so any reordering of the rows (e.g. playing a video
    backwards) yields a bitwise-identical result.
    """
    if len(features) == 0:
        raise ValueError("sorted_mean: need at least one row")
    ordered = np.sort(features, axis=0)
    total = ordered.astype(np.float64).sum(axis=0)
    return (total / len(features)).astype(features.dtype)


class AvgPoolClassifier:
    """Mean of per-frame features, optional z-normalization, linear softmax."""

    def __init__(self, dim: int, classes: int, znormalize: bool = False,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.weight = Parameter(
            (rng.standard_normal((classes, dim)) * np.sqrt(1.0 / dim)).astype(self.dtype),
            "avgpool.fc.weight")
        self.bias = Parameter(np.zeros(classes, dtype=self.dtype), "avgpool.fc.bias")
        self.znormalize = znormalize
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None

    def parameters(self):
        return [self.weight, self.bias]

    def fit_normalizer(self, frame_features: np.ndarray) -> None:
        """Freeze standardization statistics from a stack of training frames."""
        self.norm_mean, self.norm_std = T.znorm_stats(frame_features)

    def _normalize(self, features: np.ndarray) -> np.ndarray:
        if not self.znormalize:
            return features
        if self.norm_mean is None:
            raise RuntimeError("z-normalization requested but fit_normalizer was never called")
        return (features - self.norm_mean) / self.norm_std

    def pool(self, features: np.ndarray) -> np.ndarray:
        if len(features) == 0:
            raise ValueError("cannot classify a video with zero frames")
        return sorted_mean(self._normalize(features))

    def logits(self, features: np.ndarray) -> np.ndarray:
        pooled = self.pool(features)
        return T.linear(pooled[None].astype(self.dtype), self.weight.value, self.bias.value)[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Class probabilities for one video's frame features [F,D]."""
        return T.softmax(self.logits(features)[None])[0]

    def fit(self, pooled: np.ndarray, labels: np.ndarray, epochs: int = 200,
            lr: float = 1e-2) -> list[float]:
        """Full-batch training on pre-pooled video features [N,D]."""
        adam = AdamState(lr=lr)
        params = self.parameters()
        losses = []
        x = pooled.astype(self.dtype)
        y = np.asarray(labels)
        for _ in range(epochs):
            tape = Tape()
            logits = tape.linear(tape.leaf(x), tape.param(self.weight), tape.param(self.bias))
            loss_id, _ = tape.softmax_cross_entropy(logits, y)
            for p in params:
                p.zero_grad()
            tape.backward(loss_id)
            adam_step(adam, params)
            losses.append(float(tape.value(loss_id)))
        return losses


class GruCell:
    """Gated recurrent cell.

    The write gate z blends the tanh candidate into the carried state,
    h' = z*cand + (1-z)*h, so a gate forced to zero leaves the state
    untouched.  The reset gate r multiplies the hidden contribution inside
    the candidate.  All gates use sigmoid activations.
    """

    def __init__(self, input_dim: int, hidden: int = 32, seed: int = 0,
                 dtype=T.DEFAULT_DTYPE):
        self.input_dim = input_dim
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        scale = np.sqrt(1.0 / hidden)

        def mat(rows, cols, name):
            return Parameter((rng.uniform(-scale, scale, (rows, cols))).astype(self.dtype),
                             f"gru.{name}")

        def vec(n, name):
            return Parameter(np.zeros(n, dtype=self.dtype), f"gru.{name}")

        self.w_write, self.u_write = mat(hidden, input_dim, "write.w"), mat(hidden, hidden, "write.u")
        self.b_write = vec(hidden, "write.b")
        self.w_reset, self.u_reset = mat(hidden, input_dim, "reset.w"), mat(hidden, hidden, "reset.u")
        self.b_reset = vec(hidden, "reset.b")
        self.w_cand, self.u_cand = mat(hidden, input_dim, "cand.w"), mat(hidden, hidden, "cand.u")
        self.b_cand = vec(hidden, "cand.b")

    def parameters(self):
        return [self.w_write, self.u_write, self.b_write,
                self.w_reset, self.u_reset, self.b_reset,
                self.w_cand, self.u_cand, self.b_cand]

    def step(self, tape: Tape, x: int, h: int, ones: int) -> int:
        z = tape.sigmoid(tape.add(
            tape.linear(x, tape.param(self.w_write), tape.param(self.b_write)),
            tape.linear(h, tape.param(self.u_write), None)))
        r = tape.sigmoid(tape.add(
            tape.linear(x, tape.param(self.w_reset), tape.param(self.b_reset)),
            tape.linear(h, tape.param(self.u_reset), None)))
        cand = tape.tanh(tape.add(
            tape.linear(x, tape.param(self.w_cand), tape.param(self.b_cand)),
            tape.mul(r, tape.linear(h, tape.param(self.u_cand), None))))
        return tape.add(tape.mul(z, cand), tape.mul(tape.sub(ones, z), h))

    def forward(self, tape: Tape, features: np.ndarray) -> int:
        """Run the cell over [F,D] features from a zero state; returns the final hidden node."""
        if len(features) < 1:
            raise ValueError("gru: need at least one frame")
        h = tape.leaf(np.zeros((1, self.hidden), dtype=self.dtype))
        ones = tape.leaf(np.ones((1, self.hidden), dtype=self.dtype))
        for t in range(len(features)):
            x = tape.leaf(features[t : t + 1].astype(self.dtype, copy=False))
            h = self.step(tape, x, h, ones)
        return h

    def run(self, features: np.ndarray) -> np.ndarray:
        """Final hidden state as a plain [hidden] vector."""
        tape = Tape()
        return tape.value(self.forward(tape, features))[0]


class GruClassifier:
    """GRU over the frame features, linear softmax on the final hidden state."""

    def __init__(self, input_dim: int, classes: int, hidden: int = 32,
                 seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.cell = GruCell(input_dim, hidden, seed=seed, dtype=dtype)
        rng = np.random.default_rng((seed, 1))
        self.weight = Parameter(
            (rng.standard_normal((classes, hidden)) * np.sqrt(1.0 / hidden)).astype(dtype),
            "gru.fc.weight")
        self.bias = Parameter(np.zeros(classes, dtype=dtype), "gru.fc.bias")

    def parameters(self):
        return self.cell.parameters() + [self.weight, self.bias]

    def tape_logits(self, tape: Tape, features: np.ndarray) -> int:
        h = self.cell.forward(tape, features)
        return tape.linear(h, tape.param(self.weight), tape.param(self.bias))

    def predict(self, features: np.ndarray) -> np.ndarray:
        tape = Tape()
        logits = tape.value(self.tape_logits(tape, features))
        return T.softmax(logits)[0]

    def fit(self, feature_seqs: list, labels: np.ndarray, epochs: int = 50,
            lr: float = 1e-2) -> list[float]:
        """Full-batch epochs: gradients of the mean per-video loss, one step each."""
        adam = AdamState(lr=lr)
        params = self.parameters()
        n = len(feature_seqs)
        losses = []
        for _ in range(epochs):
            for p in params:
                p.zero_grad()
            total = 0.0
            for feats, label in zip(feature_seqs, labels):
                tape = Tape()
                logits = self.tape_logits(tape, feats)
                loss_id, _ = tape.softmax_cross_entropy(logits, np.array([label]))
                scaled = tape.scale(loss_id, 1.0 / n)
                tape.backward(scaled)
                total += float(tape.value(loss_id))
            adam_step(adam, params)
            losses.append(total / n)
        return losses
