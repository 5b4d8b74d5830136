import numpy as np
import pytest

from rrnet.autograd import Parameter, Tape
from rrnet.data import DatasetSpec, generate
from rrnet.model import ChunkSpec, NetworkConfig, RecurrentResidualNet
from rrnet.training import (
    AdamState,
    TrainSchedule,
    adam_step,
    build_chunks,
    evaluate,
    load_training_checkpoint,
    save_training_checkpoint,
    train,
)

MICRO_CFG = dict(stages=((2, 1), (4, 1)), classes=4, input_shape=(1, 8, 8))


def micro_dataset(videos_per_class=2, frames=8, image_size=8, seed=0, classes=4):
    spec = DatasetSpec(task="direction", classes=classes,
                       videos_per_class=videos_per_class, frames=frames,
                       image_size=image_size, noise=0.0, blob_radius=2.0)
    return generate(spec, seed)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]), "p")
        state = AdamState()
        adam_step(state, [p])
        assert np.array_equal(p.value, [1.0, -2.0, 3.0])

    def test_first_step_scalar_probe(self):
        # hand evaluation with defaults and g = 1:
        #   m = 0.1, v = 0.001, bias-corrected m^ = v^ = 1,
        #   delta = -lr / (1 + eps)
        p = Parameter(np.array([0.0]), "p")
        p.grad[...] = 1.0
        state = AdamState(lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8)
        adam_step(state, [p])
        assert abs(state.m["p"][0] - 0.1) <= 1e-12
        assert abs(state.v["p"][0] - 0.001) <= 1e-12
        expected_delta = -1e-3 / (1.0 + 1e-8)
        assert abs(expected_delta - (-9.99999990e-4)) <= 1e-12
        assert abs(p.value[0] - expected_delta) <= 1e-12
        assert state.t == 1

    def test_constant_gradient_step_size_approaches_lr(self):
        p = Parameter(np.array([0.0]), "p")
        state = AdamState(lr=1e-3)
        prev = p.value[0]
        for _ in range(1000):
            p.grad[...] = 3.7  # any constant
            prev = p.value[0]
            adam_step(state, [p])
        delta = abs(p.value[0] - prev)
        assert abs(delta - state.lr) <= 0.01 * state.lr

    def test_moment_state_tracks_parameters_only(self):
        params = [Parameter(np.zeros(3), "a"), Parameter(np.zeros((2, 2)), "b")]
        state = AdamState()
        for p in params:
            p.grad[...] = 1.0
        for _ in range(3):
            adam_step(state, params)
        assert set(state.m) == {"a", "b"} and state.t == 3


class TestTrainLoop:
    def test_two_runs_same_seed_are_bitwise_identical(self):
        videos = micro_dataset()
        spec = ChunkSpec(frames_per_chunk=2, frame_stride=2)
        sched = TrainSchedule(epochs=2, update_fraction=0.5, shuffle_seed=3)
        histories = []
        for _ in range(2):
            net = RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=1)
            histories.append(train(net, videos, spec, sched, eval_videos=videos))
        for a, b in zip(*histories):
            assert a.train_loss == b.train_loss
            assert a.eval_error == b.eval_error

    def test_update_fraction_one_gives_one_update_per_epoch(self):
        videos = micro_dataset()
        net = RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=2)
        adam = AdamState()
        sched = TrainSchedule(epochs=3, update_fraction=1.0, shuffle_seed=0)
        train(net, videos, ChunkSpec(2, 2), sched, adam=adam)
        assert adam.t == 3

    def test_overfit_ten_chunks_with_default_config(self):
        # memorization bound: ten chunks reach loss < 0.01 within 200 updates
        videos = micro_dataset(videos_per_class=1, frames=20, image_size=32)
        chunks, labels = build_chunks(videos, ChunkSpec(2, 2))
        chunks, labels = chunks[:10], labels[:10]
        net = RecurrentResidualNet(NetworkConfig(), seed=0)  # desk-scale default
        adam = AdamState()
        loss = np.inf
        for step in range(200):
            tape = Tape()
            loss_id, _, _ = net.tape_chunk_loss(tape, chunks, labels)
            net.zero_grad()
            tape.backward(loss_id)
            adam_step(adam, net.parameters())
            loss = float(tape.value(loss_id))
            if loss < 0.01:
                break
        assert loss < 0.01, f"stuck at {loss} after {step + 1} updates"

    def test_empty_dataset_rejected(self):
        net = RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(net, [], ChunkSpec(2, 1), TrainSchedule(epochs=1))

    def test_state_size_does_not_grow_across_epochs(self):
        videos = micro_dataset()
        net = RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=3)
        adam = AdamState()
        n_params = len(net.parameters())
        count = net.parameter_count()
        train(net, videos, ChunkSpec(2, 2), TrainSchedule(epochs=3, update_fraction=0.5),
              adam=adam)
        assert len(adam.m) == len(adam.v) == n_params
        assert net.parameter_count() == count


class TestEvaluate:
    def _warm(self, net, image=8):
        tape = Tape()
        warm = np.random.default_rng(0).uniform(0, 1, (1, 2, 1, image, image))
        net.tape_chunk_loss(tape, warm.astype(np.float32), np.array([0]))
        return net

    def test_constant_predictor_error_rates(self):
        videos = micro_dataset(videos_per_class=3)
        net = self._warm(RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=4))
        net.fc_weight.value[...] = 0
        net.fc_bias.value[...] = [10.0, 0.0, 0.0, 0.0]  # always predicts class 0
        spec = ChunkSpec(2, 2)
        class0 = [v for v in videos if v.label == 0]
        assert evaluate(net, class0, spec) == 0.0
        others = [v for v in videos if v.label != 0]
        assert evaluate(net, others, spec) == 1.0
        assert evaluate(net, videos[:1], spec) in (0.0, 1.0)

    def test_uniform_predictor_is_chance_with_tie_break(self):
        videos = micro_dataset(videos_per_class=5)
        net = self._warm(RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=5))
        net.fc_weight.value[...] = 0
        net.fc_bias.value[...] = 0  # uniform probabilities, argmax ties to class 0
        error = evaluate(net, videos, ChunkSpec(2, 2))
        assert error == 0.75


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, tmp_path):
        videos = micro_dataset(videos_per_class=2)
        spec = ChunkSpec(2, 2)
        probe = np.random.default_rng(9).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)

        def fresh():
            net = RecurrentResidualNet(NetworkConfig(**MICRO_CFG), seed=6)
            return net, AdamState(lr=1e-3)

        straight, adam = fresh()
        sched4 = TrainSchedule(epochs=4, update_fraction=0.5, shuffle_seed=7)
        hist_straight = train(straight, videos, spec, sched4, adam=adam,
                              eval_videos=videos)

        resumed, adam2 = fresh()
        sched2 = TrainSchedule(epochs=2, update_fraction=0.5, shuffle_seed=7)
        hist_a = train(resumed, videos, spec, sched2, adam=adam2, eval_videos=videos)
        ckpt = tmp_path / "mid.ckpt"
        save_training_checkpoint(resumed, adam2, next_epoch=2, path=ckpt)
        loaded, adam3, next_epoch = load_training_checkpoint(ckpt, lr=1e-3)
        assert next_epoch == 2
        hist_b = train(loaded, videos, spec, sched4, adam=adam3,
                       eval_videos=videos, start_epoch=next_epoch)

        for a, b in zip(hist_straight, hist_a + hist_b):
            assert a.epoch == b.epoch
            assert a.train_loss == b.train_loss
            assert a.eval_error == b.eval_error
        straight.eval_mode()
        loaded.eval_mode()
        a = straight.unroll_forward(probe).logits
        b = loaded.unroll_forward(probe).logits
        assert np.abs(a - b).max() <= 1e-12
