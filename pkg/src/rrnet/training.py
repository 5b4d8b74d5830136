"""Adam optimization, the accumulate-then-update cadence, and evaluation.

One parameter update happens after the model observes ``update_fraction`` of
the training chunks (default 1%): those chunks form a group, the mean of
their chunk losses is differentiated in a single tape, and one Adam step is
taken.  Shuffling derives a fresh generator from (seed, epoch), so a run
resumed at an epoch boundary replays exactly the schedule of an
uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import inference
from .autograd import Parameter, Tape
from .data import SyntheticVideo, chunk, sample_frames
from .model import ChunkSpec, RecurrentResidualNet, save_checkpoint, read_checkpoint


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list) -> None:
    """One update from the gradients currently stored in the parameters."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.value[...] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    update_fraction: float = 0.01
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("schedule: epochs must be positive")
        if not (0.0 < self.update_fraction <= 1.0):
            raise ValueError("schedule: update_fraction must be in (0,1]")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_error: float  # nan when no eval split was given


def build_chunks(videos: list, spec: ChunkSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample and window every video; chunks inherit their video's label."""
    pieces, labels = [], []
    for v in videos:
        sampled = sample_frames(v.frames, spec.frame_stride)
        for c in chunk(sampled, spec.frames_per_chunk):
            pieces.append(c)
            labels.append(v.label)
    return np.stack(pieces), np.array(labels, dtype=np.int64)


def train(
    model: RecurrentResidualNet,
    train_videos: list,
    chunk_spec: ChunkSpec,
    schedule: TrainSchedule,
    adam: AdamState | None = None,
    eval_videos: list | None = None,
    start_epoch: int = 0,
    stop_at_error: float | None = None,
    on_epoch=None,
) -> list:
    """Epoch loop; returns the history of (epoch, train loss, eval error).

    Deterministic for a fixed schedule seed.  ``stop_at_error`` ends training
    early once the eval error reaches the target.
    """
    if not train_videos:
        raise ValueError("train: empty dataset")
    chunks, labels = build_chunks(train_videos, chunk_spec)
    n = len(chunks)
    group = math.ceil(schedule.update_fraction * n)
    params = model.parameters()
    if adam is None:
        adam = AdamState()
    history = []
    for epoch in range(start_epoch, schedule.epochs):
        model.train_mode()
        rng = np.random.default_rng((schedule.shuffle_seed, epoch))
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, group):
            idx = perm[i : i + group]
            tape = Tape()
            loss_id, _, _ = model.tape_chunk_loss(tape, chunks[idx], labels[idx])
            model.zero_grad()
            tape.backward(loss_id)
            adam_step(adam, params)
            total += float(tape.value(loss_id)) * len(idx)
        eval_error = float("nan")
        if eval_videos is not None:
            eval_error = evaluate(model, eval_videos, chunk_spec)
        record = EpochRecord(epoch=epoch, train_loss=total / n, eval_error=eval_error)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stop_at_error is not None and eval_error <= stop_at_error:
            break
    return history


def evaluate(model: RecurrentResidualNet, videos: list, chunk_spec: ChunkSpec) -> float:
    """Video-level error rate: 1 - accuracy of the averaged-probability argmax."""
    _, error = inference.classify_split(model, videos, chunk_spec)
    return error


# ---- resumable checkpoints ----------------------------------------------------


def save_training_checkpoint(model: RecurrentResidualNet, adam: AdamState,
                             next_epoch: int, path) -> None:
    extras = [("opt/adam.t", np.array([adam.t])),
              ("train/next_epoch", np.array([next_epoch]))]
    for p in model.parameters():
        m = adam.m.get(p.name)
        if m is not None:
            extras.append((f"opt/adam.m/{p.name}", m))
            extras.append((f"opt/adam.v/{p.name}", adam.v[p.name]))
    save_checkpoint(model, path, extra_records=extras)


def load_training_checkpoint(path, lr: float = 1e-3, beta1: float = 0.9,
                             beta2: float = 0.999, epsilon: float = 1e-8):
    """Returns (model, adam state, next epoch index)."""
    model, extras = read_checkpoint(path)
    adam = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    adam.t = int(extras.get("opt/adam.t", np.zeros(1))[0])
    next_epoch = int(extras.get("train/next_epoch", np.zeros(1))[0])
    for p in model.parameters():
        m = extras.get(f"opt/adam.m/{p.name}")
        if m is not None:
            adam.m[p.name] = m.astype(p.value.dtype).reshape(p.value.shape).copy()
            adam.v[p.name] = (extras[f"opt/adam.v/{p.name}"]
                              .astype(p.value.dtype).reshape(p.value.shape).copy())
    return model, adam, next_epoch
