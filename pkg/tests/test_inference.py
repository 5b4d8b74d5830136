import io

import numpy as np
import pytest

from rrnet.autograd import Tape
from rrnet.data import DatasetSpec, SyntheticVideo, generate
from rrnet.inference import (
    average_chunk_probs,
    classify_split,
    classify_video,
    dump_predictions,
)
from rrnet.model import ChunkSpec, NetworkConfig, RecurrentResidualNet
from rrnet.training import evaluate

MICRO_CFG = dict(stages=((2, 1), (4, 1)), classes=3, input_shape=(1, 8, 8))


def warm_model(seed=0, **cfg_kwargs):
    net = RecurrentResidualNet(NetworkConfig(**{**MICRO_CFG, **cfg_kwargs}), seed=seed)
    warm = np.random.default_rng(seed).uniform(0, 1, (1, 2, 1, 8, 8)).astype(np.float32)
    tape = Tape()
    net.tape_chunk_loss(tape, warm, np.array([0]))
    return net


class TestAveraging:
    def test_hand_computed_mean_probe(self):
        probs = average_chunk_probs([np.array([0.8, 0.2]), np.array([0.4, 0.6])])
        expected = (np.array([0.8, 0.2]) + np.array([0.4, 0.6])) / 2.0
        assert np.array_equal(probs, expected)
        assert np.abs(probs - [0.6, 0.4]).max() <= 1e-12
        assert int(np.argmax(probs)) == 0

    def test_mean_of_identical_vectors_is_exact(self):
        p = np.array([0.3, 0.5, 0.2], dtype=np.float32)
        avg = average_chunk_probs([p] * 7)
        assert np.array_equal(avg, p.astype(np.float64))

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        rows = [r / r.sum() for r in rng.uniform(0.1, 1, (9, 4)).astype(np.float32)]
        base = average_chunk_probs(rows)
        for _ in range(4):
            perm = rng.permutation(len(rows))
            shuffled = average_chunk_probs([rows[i] for i in perm])
            assert np.abs(shuffled - base).max() <= 1e-12

    def test_simplex_preserved(self):
        rng = np.random.default_rng(1)
        rows = [r / r.sum() for r in rng.uniform(0.1, 1, (5, 6)).astype(np.float32)]
        assert abs(average_chunk_probs(rows).sum() - 1.0) <= 1e-6

    def test_zero_chunks_rejected(self):
        with pytest.raises(ValueError, match="zero chunk"):
            average_chunk_probs([])


class TestClassifyVideo:
    def test_one_chunk_video_equals_chunk_prediction(self):
        net = warm_model(seed=2)
        frames = np.random.default_rng(3).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
        spec = ChunkSpec(frames_per_chunk=2, frame_stride=1)
        probs, pred = classify_video(net, frames, spec)
        net.eval_mode()
        single = net.unroll_forward(frames).probs
        assert np.array_equal(probs, single.astype(np.float64))
        assert pred == int(np.argmax(single))

    def test_identical_chunks_collapse_to_one(self):
        net = warm_model(seed=4)
        frame = np.random.default_rng(5).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
        frames = np.repeat(frame, 6, axis=0)  # constant video: 3 identical chunks
        spec = ChunkSpec(frames_per_chunk=2, frame_stride=1)
        probs, _ = classify_video(net, frames, spec)
        net.eval_mode()
        one = net.unroll_forward(frames[:2]).probs
        assert np.array_equal(probs, one.astype(np.float64))

    def test_video_shorter_than_chunk_rejected(self):
        net = warm_model(seed=6)
        frames = np.zeros((3, 1, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError, match="full chunk"):
            classify_video(net, frames, ChunkSpec(frames_per_chunk=4, frame_stride=1))

    def test_uniform_probabilities_tie_break_to_lowest_index(self):
        net = warm_model(seed=7)
        net.fc_weight.value[...] = 0
        net.fc_bias.value[...] = 0
        frames = np.random.default_rng(8).uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
        _, pred = classify_video(net, frames, ChunkSpec(2, 1))
        assert pred == 0


class TestClassifySplit:
    def _videos(self, n=6, seed=9):
        spec = DatasetSpec(task="direction", classes=3, videos_per_class=n // 3 or 1,
                           frames=8, image_size=8, blob_radius=2.0)
        return generate(spec, seed)

    def test_empty_split_rejected(self):
        net = warm_model(seed=10)
        with pytest.raises(ValueError, match="empty"):
            classify_split(net, [], ChunkSpec(2, 1))

    def test_single_correct_video_scores_zero(self):
        net = warm_model(seed=11)
        net.fc_weight.value[...] = 0
        net.fc_bias.value[...] = 0
        video = self._videos()[0]
        assert video.label == 0  # uniform probs tie-break to 0 = correct
        _, error = classify_split(net, [video], ChunkSpec(2, 2))
        assert error == 0.0

    def test_matches_training_evaluate(self):
        net = warm_model(seed=12)
        videos = self._videos()
        spec = ChunkSpec(2, 2)
        _, error = classify_split(net, videos, spec)
        assert error == evaluate(net, videos, spec)

    def test_records_ordered_by_video_id(self):
        net = warm_model(seed=13)
        videos = self._videos()
        records, _ = classify_split(net, videos, ChunkSpec(2, 2))
        assert [r.video_id for r in records] == list(range(len(videos)))
        assert all(r.label == v.label for r, v in zip(records, videos))

    def test_prediction_dump_format(self):
        net = warm_model(seed=14)
        records, _ = classify_split(net, self._videos(), ChunkSpec(2, 2))
        buf = io.StringIO()
        dump_predictions(records, buf)
        lines = buf.getvalue().strip().split("\n")
        assert len(lines) == len(records)
        first = lines[0].split("\t")
        assert first[0] == "0" and len(first) == 4
        assert len(first[3].split()) == 3  # K probabilities
