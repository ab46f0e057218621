"""Transition buffers, splits, normalization, mixing, and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romilab.buffers import (MixedSampler, NormStats, Transition,
                             TransitionBuffer, compute_norm_stats, export_csv,
                             exact_model_count, load_buffer, priority_weights,
                             save_buffer, split_holdout)

from helpers import continuous_buffer, grid_buffer, random_grid_buffer


def two_episode_buffer():
    return grid_buffer([
        [((1, 1), 3, 0.0, (1, 2)), ((1, 2), 3, 1.0, (1, 3), True)],
        [((1, 1), 1, 0.5, (2, 1))],
    ])


class TestBufferBasics:
    def test_kind_validation(self):
        with pytest.raises(ValueError, match="kind"):
            TransitionBuffer("hex")

    def test_stacked_arrays_and_episode_returns(self):
        buf = two_episode_buffer()
        assert len(buf) == 3
        assert buf.states().shape == (3, 2)
        assert buf.actions().shape == (3, 1)
        assert np.array_equal(buf.rewards(), [0.0, 1.0, 0.5])
        assert np.array_equal(buf.dones(), [False, True, False])
        assert np.array_equal(buf.episode_returns(), [1.0, 0.5])

    def test_open_tail_episode_is_counted(self):
        buf = TransitionBuffer("grid")
        buf.append(Transition(s=(1, 1), a=0, r=2.0, s_next=(1, 1)))
        # no end_episode() call: the open tail still shows up
        assert np.array_equal(buf.episode_returns(), [2.0])
        assert priority_weights(buf, "return_weighted")[0] == 1.0

    def test_state_key_set_covers_both_endpoints(self):
        buf = two_episode_buffer()
        assert buf.state_key_set() == {(1, 1), (1, 2), (1, 3), (2, 1)}
        with pytest.raises(ValueError):
            TransitionBuffer("continuous").state_key_set()

    def test_subset_and_extend(self):
        buf = two_episode_buffer()
        sub = buf.subset([2, 0])
        assert [t.r for t in sub] == [0.5, 0.0]
        assert len(sub.episode_bounds) == 2
        merged = two_episode_buffer()
        merged.extend(sub)
        assert len(merged) == 5
        assert len(merged.episode_bounds) == 4
        with pytest.raises(ValueError):
            merged.extend(TransitionBuffer("continuous"))


class TestSplitHoldout:
    def test_sizes_and_disjoint_cover(self):
        rng = np.random.default_rng(0)
        buf = random_grid_buffer(rng, max_transitions=50)
        buf2 = buf.subset(range(len(buf)))
        train, hold = split_holdout(buf2, 5, np.random.default_rng(1))
        assert len(train) == len(buf2) - 5 and len(hold) == 5
        key = lambda t: (tuple(t.s), t.a, t.r, tuple(t.s_next))
        combined = sorted(map(key, list(train) + list(hold)))
        assert combined == sorted(map(key, buf2))

    def test_ratio_example(self):
        buf = grid_buffer([[((0, 0), 0, 0.0, (0, 1))]] * 5000)
        train, hold = split_holdout(buf, 1000, np.random.default_rng(0))
        assert (len(train), len(hold)) == (4000, 1000)

    def test_zero_holdout_full_copy(self):
        buf = two_episode_buffer()
        train, hold = split_holdout(buf, 0, np.random.default_rng(0))
        assert len(train) == len(buf) and len(hold) == 0

    def test_out_of_range_rejected(self):
        buf = two_episode_buffer()
        for bad in (-1, len(buf), len(buf) + 1):
            with pytest.raises(ValueError):
                split_holdout(buf, bad, np.random.default_rng(0))


class TestNormStats:
    def test_hand_example_population_std(self):
        buf = grid_buffer([[((0, 0), 0, 0.0, (0, 0)),
                            ((2, 2), 0, 1.0, (2, 2))]])
        stats = compute_norm_stats(buf)
        assert np.allclose(stats.state_mean, [1.0, 1.0])
        assert np.allclose(stats.state_std, [1.0, 1.0])

    def test_constant_dim_floored(self):
        buf = grid_buffer([[((1, 0), 0, 0.5, (1, 0)),
                            ((1, 2), 0, 0.5, (1, 2))]])
        stats = compute_norm_stats(buf)
        assert stats.state_std[0] == 1e-6
        assert stats.reward_std == 1e-6

    def test_normalized_data_is_standard(self):
        rng = np.random.default_rng(4)
        buf = continuous_buffer(rng, n=200)
        stats = compute_norm_stats(buf)
        z = stats.norm_states(buf.states())
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-9)

    def test_too_small_rejected(self):
        buf = grid_buffer([[((0, 0), 0, 0.0, (0, 0))]])
        with pytest.raises(ValueError):
            compute_norm_stats(buf)

    def test_round_trip_dict(self):
        rng = np.random.default_rng(5)
        stats = compute_norm_stats(continuous_buffer(rng, n=50))
        back = NormStats.from_dict(stats.to_dict())
        assert np.allclose(back.state_mean, stats.state_mean)
        assert back.reward_std == stats.reward_std


class TestMixedBatches:
    def test_exact_counts_examples(self):
        assert exact_model_count(0.1, 64) == 6
        assert exact_model_count(0.5, 100) == 50
        assert exact_model_count(0.0, 64) == 0
        assert exact_model_count(1.0, 64) == 64
        with pytest.raises(ValueError):
            exact_model_count(1.5, 64)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(1, 512))
    def test_count_is_arithmetic_rounding(self, eta, batch):
        n = exact_model_count(eta, batch)
        assert n == int(np.floor(eta * batch + 0.5))
        assert 0 <= n <= batch

    def test_batch_composition_is_exact(self):
        env = grid_buffer([[((0, 0), 0, 0.0, (0, 1))] * 30])
        model = grid_buffer([[((5, 5), 1, 9.0, (5, 6))] * 30])
        for t in model:
            t.origin = "model"
        sampler = MixedSampler(env, model, 0.1, 64, np.random.default_rng(0))
        for _ in range(10):
            batch = sampler.sample()
            assert len(batch) == 64
            n_model = sum(t.origin == "model" for t in batch)
            assert n_model == 6

    def test_empty_buffer_errors(self):
        env = grid_buffer([[((0, 0), 0, 0.0, (0, 1))]])
        with pytest.raises(ValueError, match="model buffer is empty"):
            MixedSampler(env, None, 0.5, 10, np.random.default_rng(0))
        with pytest.raises(ValueError, match="env buffer is empty"):
            MixedSampler(TransitionBuffer("grid"), env, 0.5, 10,
                         np.random.default_rng(0))
        # eta = 1 never touches the env buffer, so an empty one is fine
        MixedSampler(TransitionBuffer("grid"), env, 1.0, 10,
                     np.random.default_rng(0))


class TestPriorityWeights:
    def test_two_episode_softmax_example(self):
        buf = grid_buffer([
            [((0, 0), 0, 1.0, (0, 1))],
            [((0, 0), 0, 0.0, (0, 1))],
        ])
        w = priority_weights(buf, "return_weighted")
        e = np.e
        assert w[0] == pytest.approx(e / (e + 1.0))
        assert w[1] == pytest.approx(1.0 / (e + 1.0))

    def test_uniform_and_errors(self):
        buf = two_episode_buffer()
        assert np.allclose(priority_weights(buf), 1.0 / 3.0)
        with pytest.raises(ValueError):
            priority_weights(TransitionBuffer("grid"))
        with pytest.raises(ValueError, match="unknown priority mode"):
            priority_weights(buf, "rank")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1),
           st.sampled_from(["uniform", "return_weighted"]))
    def test_weights_normalized_property(self, seed, mode):
        buf = random_grid_buffer(np.random.default_rng(seed))
        w = priority_weights(buf, mode)
        assert len(w) == len(buf)
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) < 1e-12


class TestSerialization:
    def test_grid_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        buf = random_grid_buffer(rng)
        path = tmp_path / "buf.bin"
        save_buffer(buf, path)
        back = load_buffer(path)
        assert back.kind == buf.kind and back.layout_id == buf.layout_id
        assert len(back) == len(buf)
        assert back.episode_bounds == buf._closed()
        for t0, t1 in zip(buf, back):
            assert (tuple(t1.s), t1.a, tuple(t1.s_next)) == \
                (tuple(t0.s), t0.a, tuple(t0.s_next))
            assert t1.r == t0.r  # rewards were float32-exact by construction
            assert (t1.done, t1.collided, t1.origin) == \
                (t0.done, t0.collided, t0.origin)

    def test_continuous_round_trip_float32(self, tmp_path):
        rng = np.random.default_rng(10)
        buf = continuous_buffer(rng, n=40)
        path = tmp_path / "buf.bin"
        save_buffer(buf, path)
        back = load_buffer(path)
        assert np.allclose(back.states(), buf.states(), atol=1e-6)
        assert np.allclose(back.actions(), buf.actions(), atol=1e-7)
        assert back.states().dtype == float

    def test_empty_buffer_round_trip(self, tmp_path):
        buf = TransitionBuffer("grid", layout_id="empty")
        path = tmp_path / "empty.bin"
        save_buffer(buf, path)
        assert len(load_buffer(path)) == 0

    def test_wrong_format_rejected(self, tmp_path):
        from romilab.blobio import write_blob
        path = tmp_path / "other.bin"
        write_blob(path, {"format": "other-v1"}, [np.zeros(1)] * 7)
        with pytest.raises(ValueError, match="romilab-buffer-v1"):
            load_buffer(path)

    def test_export_csv_schema(self, tmp_path):
        buf = two_episode_buffer()
        path = tmp_path / "buf.csv"
        export_csv(buf, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "s_0,s_1,a_0,r,sn_0,sn_1,done,collided,origin,episode"
        assert len(lines) == 1 + len(buf)
        assert lines[2].endswith("1,0,env,0")  # done row of episode 0
