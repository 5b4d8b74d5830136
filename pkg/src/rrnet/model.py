"""Full network assembly and its unrolling over a chunk of frames.

One "column" of the network (stem, staged residual blocks, pooled linear
classifier) processes one frame.  Unrolling replicates the column once per
time step with every weight shared; at each configured temporal position the
column receives the previous column's activation at that layer.  The first
column has no predecessor, so its temporal inputs are the zero boundary,
which the blocks realize by simply omitting the temporal term.

Chunk classification reads the final column by default (``readout="last"``);
``readout="mean"`` averages the per-column logits instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .autograd import Parameter, Tape
from .blocks import (
    ConvBnRelu,
    SpatialResidualBlock,
    TemporalConnection,
    TemporalResidualBlock,
)

CHECKPOINT_MAGIC = b"RRNCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture plus the temporal wiring axes.

    ``stages`` lists (width, residual unit count) per stage; stage widths must
    double stage to stage so the transition blocks can use the width-doubling
    strided projection.  ``temporal_positions`` are (stage, unit) pairs naming
    the residual units that receive an edge from the previous time column.
    """

    stages: tuple = ((8, 1), (16, 1), (32, 1), (64, 1))
    temporal_positions: tuple = ()
    connection: TemporalConnection = TemporalConnection.IDENTITY
    classes: int = 4
    input_shape: tuple = (1, 32, 32)
    readout: str = "last"

    def __post_init__(self):
        stages = tuple((int(c), int(n)) for c, n in self.stages)
        object.__setattr__(self, "stages", stages)
        positions = tuple((int(s), int(b)) for s, b in self.temporal_positions)
        object.__setattr__(self, "temporal_positions", positions)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not stages:
            raise ValueError("config: at least one stage required")
        for ch, n in stages:
            if ch < 1 or n < 0:
                raise ValueError(f"config: bad stage ({ch},{n})")
        for i in range(1, len(stages)):
            if stages[i][0] != 2 * stages[i - 1][0]:
                raise ValueError(
                    f"config: stage {i} width {stages[i][0]} must double the previous "
                    f"width {stages[i - 1][0]} (downsampling projection contract)")
        if self.classes < 2:
            raise ValueError("config: need at least 2 classes")
        if len(self.input_shape) != 3:
            raise ValueError("config: input_shape must be (C,H,W)")
        c, h, w = self.input_shape
        factor = 2 ** (len(stages) - 1)
        if h % factor or w % factor:
            raise ValueError(
                f"config: input {h}x{w} not divisible by the total downsampling {factor}")
        if len(set(positions)) != len(positions):
            raise ValueError("config: temporal positions must be distinct")
        for s, b in positions:
            if not (0 <= s < len(stages)) or not (0 <= b < stages[s][1]):
                raise ValueError(f"config: temporal position ({s},{b}) out of range")
        if self.readout not in ("last", "mean"):
            raise ValueError(f"config: unknown readout {self.readout!r}")

    @property
    def connection_count(self) -> int:
        return len(self.temporal_positions)


@dataclass(frozen=True)
class ChunkSpec:
    """Frames per chunk (the temporal context T) and the frame sampling stride."""

    frames_per_chunk: int
    frame_stride: int = 1

    def __post_init__(self):
        if self.frames_per_chunk < 1:
            raise ValueError("chunk spec: frames_per_chunk must be positive")
        if self.frame_stride < 1:
            raise ValueError("chunk spec: frame_stride must be positive")

    def effective_range(self) -> int:
        """Original-video frame span covered by one chunk: (T-1)*stride."""
        return (self.frames_per_chunk - 1) * self.frame_stride


@dataclass
class ChunkPrediction:
    probs: np.ndarray
    logits: np.ndarray


class RecurrentResidualNet:
    def __init__(self, config: NetworkConfig, seed: int = 0,
                 dtype=T.DEFAULT_DTYPE, shift_init: float = 0.0):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c_in, _, _ = config.input_shape
        ch0 = config.stages[0][0]
        self.stem = ConvBnRelu("stem", c_in, ch0, rng, self.dtype, shift_init=shift_init)
        self.transitions: list = [None]
        self.stages: list = []
        temporal = set(config.temporal_positions)
        prev_ch = ch0
        for si, (ch, count) in enumerate(config.stages):
            if si > 0:
                self.transitions.append(SpatialResidualBlock(
                    f"stage{si}.downsample", prev_ch, ch, rng, self.dtype,
                    stride=2, shift_init=shift_init))
            units = []
            for bi in range(count):
                name = f"stage{si}.block{bi}"
                if (si, bi) in temporal:
                    units.append(TemporalResidualBlock(
                        name, ch, config.connection, rng, self.dtype, shift_init=shift_init))
                else:
                    units.append(SpatialResidualBlock(
                        name, ch, ch, rng, self.dtype, shift_init=shift_init))
            self.stages.append(units)
            prev_ch = ch
        self.fc_weight = Parameter(
            (rng.standard_normal((config.classes, prev_ch))
             * np.sqrt(1.0 / prev_ch)).astype(self.dtype), "fc.weight")
        self.fc_bias = Parameter(np.zeros(config.classes, dtype=self.dtype), "fc.bias")

    # ---- parameter and state iteration (deterministic order) --------------

    def parameters(self) -> list:
        out = list(self.stem.parameters())
        for si in range(len(self.stages)):
            if si > 0:
                out.extend(self.transitions[si].parameters())
            for block in self.stages[si]:
                out.extend(block.parameters())
        out.extend([self.fc_weight, self.fc_bias])
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def bn_states(self) -> list:
        out = list(self.stem.bn_states())
        for si in range(len(self.stages)):
            if si > 0:
                out.extend(self.transitions[si].bn_states())
            for block in self.stages[si]:
                out.extend(block.bn_states())
        return out

    def train_mode(self) -> None:
        for _, st in self.bn_states():
            st.mode = "train"

    def eval_mode(self) -> None:
        for _, st in self.bn_states():
            st.mode = "eval"

    # ---- forward ------------------------------------------------------------

    def _forward_columns(self, tape: Tape, chunks: np.ndarray):
        """Unroll over the time axis of ``chunks`` [B,T,C,H,W].

        Returns (logits node, per-time-step frame leaf ids).
        """
        if chunks.ndim != 5:
            raise T.ShapeError(
                f"unroll: expected chunks [B,T,C,H,W], got rank {chunks.ndim}")
        t_len = chunks.shape[1]
        if t_len < 1:
            raise ValueError("unroll: chunk must contain at least one frame (T >= 1)")
        if tuple(chunks.shape[2:]) != self.config.input_shape:
            raise T.ShapeError(
                f"unroll: frame shape {tuple(chunks.shape[2:])} != configured "
                f"input shape {self.config.input_shape} (axes 2..4)")
        chunks = np.ascontiguousarray(chunks, dtype=self.dtype)
        prev_inputs: dict = {}
        frame_ids = []
        column_logits = []
        for t in range(t_len):
            x = tape.leaf(chunks[:, t])
            frame_ids.append(x)
            h = self.stem.forward(tape, x)
            cur_inputs: dict = {}
            for si, units in enumerate(self.stages):
                if si > 0:
                    h = self.transitions[si].forward(tape, h)
                for bi, block in enumerate(units):
                    if isinstance(block, TemporalResidualBlock):
                        cur_inputs[(si, bi)] = h
                        h = block.forward(tape, h, prev_inputs.get((si, bi)))
                    else:
                        h = block.forward(tape, h)
            prev_inputs = cur_inputs
            if self.config.readout == "mean" or t == t_len - 1:
                pooled = tape.global_avg_pool(h)
                column_logits.append(tape.linear(
                    pooled, tape.param(self.fc_weight), tape.param(self.fc_bias)))
        if len(column_logits) == 1:
            return column_logits[0], frame_ids
        acc = column_logits[0]
        for lg in column_logits[1:]:
            acc = tape.add(acc, lg)
        return tape.scale(acc, 1.0 / len(column_logits)), frame_ids

    def unroll_forward(self, chunk: np.ndarray) -> ChunkPrediction:
        """Class distribution for a single chunk [T,C,H,W]."""
        chunk = np.asarray(chunk)
        if chunk.ndim != 4:
            raise T.ShapeError(f"unroll: expected chunk [T,C,H,W], got rank {chunk.ndim}")
        tape = Tape()
        logits_id, _ = self._forward_columns(tape, chunk[None])
        logits = tape.value(logits_id)[0]
        return ChunkPrediction(probs=T.softmax(logits[None])[0], logits=logits)

    def tape_chunk_loss(self, tape: Tape, chunks: np.ndarray, labels: np.ndarray):
        """Cross-entropy of a chunk batch against its video labels.

        Returns (loss node, probabilities, frame leaf ids).
        """
        logits_id, frame_ids = self._forward_columns(tape, np.asarray(chunks))
        loss_id, probs = tape.softmax_cross_entropy(logits_id, np.asarray(labels))
        return loss_id, probs, frame_ids

    def chunk_loss(self, chunk: np.ndarray, label: int) -> float:
        tape = Tape()
        loss_id, _, _ = self.tape_chunk_loss(
            tape, np.asarray(chunk)[None], np.array([label]))
        return float(tape.value(loss_id))

    def features(self, frames: np.ndarray, through_stage: int | None = None) -> np.ndarray:
        """Pooled activations after the given stage for a batch of frames."""
        if through_stage is None:
            through_stage = len(self.stages) - 1
        if not 0 <= through_stage < len(self.stages):
            raise ValueError(f"features: stage {through_stage} out of range")
        tape = Tape()
        h = self.stem.forward(tape, tape.leaf(
            np.ascontiguousarray(frames, dtype=self.dtype)))
        for si in range(through_stage + 1):
            if si > 0:
                h = self.transitions[si].forward(tape, h)
            for block in self.stages[si]:
                if isinstance(block, TemporalResidualBlock):
                    h = block.forward(tape, h, None)
                else:
                    h = block.forward(tape, h)
        return tape.value(tape.global_avg_pool(h))

    def astype(self, dtype) -> "RecurrentResidualNet":
        """Copy of this network with every parameter and statistic cast."""
        other = RecurrentResidualNet(self.config, seed=0, dtype=dtype)
        for src, dst in zip(self.parameters(), other.parameters()):
            if src.name != dst.name:
                raise RuntimeError("astype: parameter order mismatch")
            dst.value[...] = src.value.astype(dtype)
        for (_, s_src), (_, s_dst) in zip(self.bn_states(), other.bn_states()):
            s_dst.running_mean[...] = s_src.running_mean.astype(dtype)
            s_dst.running_var[...] = s_src.running_var.astype(dtype)
            s_dst.initialized = s_src.initialized
            s_dst.mode = s_src.mode
        return other


def frame_gradient_norms(model: RecurrentResidualNet, chunk: np.ndarray,
                         label: int = 0) -> np.ndarray:
    """L2 norm of d(chunk loss)/d(frame t) for each frame of one chunk."""
    tape = Tape()
    loss_id, _, frame_ids = model.tape_chunk_loss(
        tape, np.asarray(chunk)[None], np.array([label]))
    tape.backward(loss_id)
    return np.array([float(np.linalg.norm(tape.grad_of(f))) for f in frame_ids])


def temporal_reachability(config: NetworkConfig, t_len: int) -> np.ndarray:
    """R[t,k] = True iff the column-t output structurally depends on frame t-k.

    Computed by forward traversal of the unrolled block graph: within a column
    every slot feeds the next, and each temporal position adds an edge from
    its input boundary in column t-1 to its output boundary in column t.
    """
    if t_len < 1:
        raise ValueError("reachability: need t_len >= 1")
    slot_of: dict = {}
    n_slots = 1  # stem occupies slot 0
    for si, (_, count) in enumerate(config.stages):
        if si > 0:
            n_slots += 1  # downsampling transition
        for bi in range(count):
            slot_of[(si, bi)] = n_slots
            n_slots += 1
    temporal_slots = sorted(slot_of[p] for p in config.temporal_positions)
    reach = np.zeros((t_len, t_len), dtype=bool)
    for t0 in range(t_len):
        seen = {(t0, 0)}
        frontier = [(t0, 0)]
        while frontier:
            t, b = frontier.pop()
            nxt = []
            if b < n_slots:
                nxt.append((t, b + 1))
            if t + 1 < t_len and b in temporal_slots:
                nxt.append((t + 1, b + 1))
            for node in nxt:
                if node not in seen:
                    seen.add(node)
                    frontier.append(node)
        for t in range(t0, t_len):
            if (t, n_slots) in seen:
                reach[t, t - t0] = True
    return reach


# ---- checkpoint persistence --------------------------------------------------
#
# Layout: magic (8 bytes) + version (u32 LE) + record count (u32 LE), then one
# record per array: name length (u32 LE), name (utf-8), rank (u32 LE), extents
# (rank x u32 LE), data (product-of-extents float32 LE scalars).  Architecture
# metadata travels as small "meta/" records so a checkpoint alone rebuilds the
# model; batch-norm running statratistics appear under "state/" only once they
# are initialized.

_CONNECTION_CODES = {c: i for i, c in enumerate(TemporalConnection)}
_READOUT_CODES = {"last": 0, "mean": 1}


def _write_record(f, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def write_records(path, records) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(f, name, arr)


def read_records(path):
    records = []
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(shape)
            records.append((name, data))
        if f.read(1):
            raise CheckpointError("trailing bytes after last checkpoint record")
    return records


def _model_records(model: RecurrentResidualNet):
    cfg = model.config
    records = [
        ("meta/stages", np.array([v for st in cfg.stages for v in st])),
        ("meta/temporal_positions",
         np.array([v for p in cfg.temporal_positions for v in p])),
        ("meta/connection", np.array([_CONNECTION_CODES[cfg.connection]])),
        ("meta/classes", np.array([cfg.classes])),
        ("meta/input_shape", np.array(cfg.input_shape)),
        ("meta/readout", np.array([_READOUT_CODES[cfg.readout]])),
    ]
    for p in model.parameters():
        records.append((f"param/{p.name}", p.value))
    for name, st in model.bn_states():
        if st.initialized:
            records.append((f"state/{name}.running_mean", st.running_mean))
            records.append((f"state/{name}.running_var", st.running_var))
    return records


def save_checkpoint(model: RecurrentResidualNet, path, extra_records=None) -> None:
    records = _model_records(model)
    if extra_records:
        records.extend(extra_records)
    write_records(path, records)


def read_checkpoint(path):
    """Rebuild (model, leftover records) from a checkpoint file."""
    records = read_records(path)
    by_name = dict(records)
    if len(by_name) != len(records):
        raise CheckpointError("duplicate record names in checkpoint")
    try:
        stages_flat = by_name.pop("meta/stages").astype(int)
        pos_flat = by_name.pop("meta/temporal_positions").astype(int)
        connection = list(TemporalConnection)[int(by_name.pop("meta/connection")[0])]
        classes = int(by_name.pop("meta/classes")[0])
        input_shape = tuple(by_name.pop("meta/input_shape").astype(int))
        readout = {v: k for k, v in _READOUT_CODES.items()}[int(by_name.pop("meta/readout")[0])]
    except (KeyError, IndexError) as e:
        raise CheckpointError(f"missing or malformed architecture metadata: {e}") from e
    config = NetworkConfig(
        stages=tuple(zip(stages_flat[0::2], stages_flat[1::2])),
        temporal_positions=tuple(zip(pos_flat[0::2], pos_flat[1::2])),
        connection=connection,
        classes=classes,
        input_shape=input_shape,
        readout=readout,
    )
    model = RecurrentResidualNet(config, seed=0, dtype=np.float32)
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in by_name:
            raise CheckpointError(f"checkpoint is missing parameter record {key}")
        arr = by_name.pop(key)
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"record {key} has shape {arr.shape}, model expects {p.value.shape}")
        p.value[...] = arr
    for name, st in model.bn_states():
        mkey, vkey = f"state/{name}.running_mean", f"state/{name}.running_var"
        if mkey in by_name:
            st.running_mean[...] = by_name.pop(mkey)
            st.running_var[...] = by_name.pop(vkey)
            st.initialized = True
    return model, by_name


def load_checkpoint(path) -> RecurrentResidualNet:
    model, _ = read_checkpoint(path)
    return model
