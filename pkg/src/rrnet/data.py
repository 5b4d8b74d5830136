"""Synthetic video generation, frame sampling, and chunking.

Two tasks, both deliberately unsolvable from a single frame:

* direction: a Gaussian blob drifts across a toroidal canvas in one of K
  directions.  Start positions are uniform, so the marginal distribution of
  any single frame is identical for every class.
* reversal: videos come in pairs that share the exact same frame sequence;
  class 0 plays it forward, class 1 plays it backward.  The unordered frame
  multiset is therefore identical across classes and only ordering carries
  the label.

Trajectories wrap around the canvas edges (the blob is rendered with
toroidal distances), which keeps motion statistics stationary and avoids
leaking direction cues into single frames near the borders.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

DIRECTION_TASK = "direction"
REVERSAL_TASK = "reversal"

DATASET_MAGIC = b"RRNVID01"
DATASET_VERSION = 1


class DatasetFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    task: str = DIRECTION_TASK
    classes: int = 4
    videos_per_class: int = 50
    frames: int = 20
    image_size: int = 32
    noise: float = 0.0
    blob_radius: float = 3.0
    speed: float = 2.0

    def __post_init__(self):
        if self.task not in (DIRECTION_TASK, REVERSAL_TASK):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == REVERSAL_TASK and self.classes != 2:
            raise ValueError("reversal task has exactly 2 classes")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.videos_per_class < 1 or self.frames < 1 or self.image_size < 4:
            raise ValueError("bad dataset dimensions")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # [F,1,H,W] float32 in [0,1]
    label: int
    seed: int


def _video_seed(seed: int, index: int) -> int:
    # stable per-video seed mixing the dataset seed with the video index
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _render_trajectory(spec: DatasetSpec, start: np.ndarray, velocity: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    sigma = spec.blob_radius / 2.0
    coords = np.arange(size, dtype=np.float64)
    frames = np.empty((spec.frames, 1, size, size), dtype=np.float32)
    for t in range(spec.frames):
        cy, cx = (start + t * velocity) % size
        dy = np.abs(coords - cy)
        dy = np.minimum(dy, size - dy)
        dx = np.abs(coords - cx)
        dx = np.minimum(dx, size - dx)
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        frames[t, 0] = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
    if spec.noise > 0:
        frames += rng.normal(0.0, spec.noise, size=frames.shape).astype(np.float32)
        np.clip(frames, 0.0, 1.0, out=frames)
    return frames


def _direction_videos(spec: DatasetSpec, seed: int) -> list[SyntheticVideo]:
    angles = 2.0 * np.pi * np.arange(spec.classes) / spec.classes
    videos = []
    index = 0
    for label in range(spec.classes):
        v = spec.speed * np.array([np.sin(angles[label]), np.cos(angles[label])])
        for _ in range(spec.videos_per_class):
            vseed = _video_seed(seed, index)
            rng = np.random.default_rng(vseed)
            start = rng.uniform(0.0, spec.image_size, size=2)
            frames = _render_trajectory(spec, start, v, rng)
            videos.append(SyntheticVideo(frames=frames, label=label, seed=vseed))
            index += 1
    return videos


def _reversal_videos(spec: DatasetSpec, seed: int) -> list[SyntheticVideo]:
    # the shared base trajectory drifts rightward; pairs differ only in play order
    velocity = np.array([0.0, spec.speed])
    videos = []
    for pair in range(spec.videos_per_class):
        vseed = _video_seed(seed, pair)
        rng = np.random.default_rng(vseed)
        start = rng.uniform(0.0, spec.image_size, size=2)
        frames = _render_trajectory(spec, start, velocity, rng)
        videos.append(SyntheticVideo(frames=frames, label=0, seed=vseed))
        videos.append(SyntheticVideo(
            frames=np.ascontiguousarray(frames[::-1]), label=1, seed=vseed))
    return videos


def generate(spec: DatasetSpec, seed: int) -> list[SyntheticVideo]:
    """Deterministic dataset: a pure function of (spec, seed)."""
    if spec.task == DIRECTION_TASK:
        return _direction_videos(spec, seed)
    return _reversal_videos(spec, seed)


def sample_frames(frames: np.ndarray, stride: int) -> np.ndarray:
    """Every stride-th frame, starting at index 0."""
    if stride < 1:
        raise ValueError("stride must be positive")
    return frames[::stride]


def chunk(frames: np.ndarray, frames_per_chunk: int) -> list[np.ndarray]:
    """Consecutive non-overlapping windows; an incomplete tail is dropped."""
    t = frames_per_chunk
    if t < 1:
        raise ValueError("frames_per_chunk must be positive")
    n = len(frames)
    if n < t:
        raise ValueError(
            f"cannot chunk {n} frames into windows of {t}: need at least one full chunk")
    m = n // t
    return [frames[i * t : (i + 1) * t] for i in range(m)]


# ---- split serialization ----------------------------------------------------
#
# One file per split: magic + version, a JSON header echoing the generating
# spec plus counts and the per-video frame shape, then per video the label
# (u32 LE), the per-video seed (u64 LE), and the raw float32 LE frames.


def save_dataset(path, spec: DatasetSpec, videos: list[SyntheticVideo],
                 seed: int) -> None:
    header = {
        "spec": asdict(spec),
        "seed": seed,
        "count": len(videos),
        "video_shape": list(videos[0].frames.shape) if videos else [0, 1, 0, 0],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for v in videos:
            f.write(struct.pack("<I", v.label))
            f.write(struct.pack("<Q", v.seed))
            f.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file: wanted {n} bytes, got {len(buf)}")
    return buf


def load_dataset(path) -> tuple[DatasetSpec, int, list[SyntheticVideo]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad dataset magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, hlen).decode("utf-8"))
        spec = DatasetSpec(**header["spec"])
        shape = tuple(header["video_shape"])
        nbytes = 4 * int(np.prod(shape))
        videos = []
        for _ in range(header["count"]):
            (label,) = struct.unpack("<I", _read_exact(f, 4))
            (vseed,) = struct.unpack("<Q", _read_exact(f, 8))
            frames = np.frombuffer(_read_exact(f, nbytes), dtype="<f4").reshape(shape)
            videos.append(SyntheticVideo(frames=frames.copy(), label=int(label),
                                         seed=int(vseed)))
        if f.read(1):
            raise DatasetFormatError("trailing bytes after last video")
    return spec, int(header["seed"]), videos
