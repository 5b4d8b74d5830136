"""Video-level classification by averaging per-chunk class probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SyntheticVideo, chunk, sample_frames
from .model import ChunkSpec, RecurrentResidualNet


@dataclass
class VideoPrediction:
    video_id: int
    label: int
    predicted: int
    probs: np.ndarray  # float64 [K]


def average_chunk_probs(prob_rows: list) -> np.ndarray:
    """Arithmetic mean of probability vectors, accumulated in float64.

    Accumulating float32 probabilities in float64 is exact, so the result is
    independent of chunk processing order.
    """
    if not prob_rows:
        raise ValueError("cannot average zero chunk predictions")
    total = np.zeros(len(prob_rows[0]), dtype=np.float64)
    for p in prob_rows:
        total += p
    return total / len(prob_rows)


def classify_video(model: RecurrentResidualNet, frames: np.ndarray,
                   spec: ChunkSpec) -> tuple[np.ndarray, int]:
    """(averaged probabilities, argmax class) for one video's frames [F,C,H,W].

    Chunks are evaluated one at a time against the eval-mode model; ties in
    the argmax resolve to the lowest class index.
    """
    model.eval_mode()
    sampled = sample_frames(np.asarray(frames), spec.frame_stride)
    pieces = chunk(sampled, spec.frames_per_chunk)
    probs = average_chunk_probs([model.unroll_forward(c).probs for c in pieces])
    return probs, int(np.argmax(probs))


def classify_split(model: RecurrentResidualNet, videos: list,
                   spec: ChunkSpec) -> tuple[list, float]:
    """Per-video predictions (ordered by video id) plus the split error rate."""
    if not videos:
        raise ValueError("cannot classify an empty split")
    records = []
    correct = 0
    for vid, video in enumerate(videos):
        frames = video.frames if isinstance(video, SyntheticVideo) else video
        label = video.label if isinstance(video, SyntheticVideo) else -1
        probs, predicted = classify_video(model, frames, spec)
        records.append(VideoPrediction(video_id=vid, label=label,
                                       predicted=predicted, probs=probs))
        if predicted == label:
            correct += 1
    return records, 1.0 - correct / len(videos)


def dump_predictions(records: list, stream) -> None:
    """One line per video: id, label, argmax, then the K probabilities."""
    for r in records:
        probs = " ".join(f"{p:.17g}" for p in r.probs)
        stream.write(f"{r.video_id}\t{r.label}\t{r.predicted}\t{probs}\n")
