"""Tabular and ensemble dynamics models, both directions."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romilab.buffers import Transition, TransitionBuffer, split_holdout
from romilab.models import (EnsembleConfig, GaussianEnsemble, NoDataError,
                            evaluate_model_error, fit_gaussian_ensemble,
                            fit_tabular, fit_tabular_reverse, load_model,
                            model_error_comparison, save_model, select_elites,
                            time_reversed)

from helpers import continuous_buffer, grid_buffer, random_grid_buffer

A = 3  # an arbitrary action index used by the hand-built datasets


def two_predecessor_buffer():
    """(2, 2) and (4, 4) both step to (3, 3) under action A, 2:1 ratio."""
    return grid_buffer([[
        ((2, 2), A, 0.25, (3, 3)),
        ((2, 2), A, 0.25, (3, 3)),
        ((4, 4), A, 1.0, (3, 3)),
    ]])


class TestTabularFit:
    def test_direction_and_kind_validation(self):
        with pytest.raises(ValueError, match="direction"):
            fit_tabular(two_predecessor_buffer(), "sideways")
        with pytest.raises(ValueError, match="grid"):
            fit_tabular(continuous_buffer(np.random.default_rng(0), n=4))

    def test_two_one_count_ratio(self):
        model = fit_tabular_reverse(two_predecessor_buffer())
        dist = model.distribution((3, 3), A)
        assert dist == {(2, 2): pytest.approx(2 / 3), (4, 4): pytest.approx(1 / 3)}

    def test_single_predecessor_probability_one(self, chain_buffer):
        model = fit_tabular_reverse(chain_buffer)
        assert model.distribution((1, 2), A) == {(1, 1): 1.0}

    def test_unseen_pair_raises_without_smoothing(self, chain_buffer):
        model = fit_tabular_reverse(chain_buffer)
        with pytest.raises(NoDataError):
            model.distribution((1, 1), A)  # nothing enters the chain start
        with pytest.raises(NoDataError):
            model.distribution((1, 2), 0)  # wrong action

    def test_smoothing_gives_uniform_over_support_when_unseen(self):
        model = fit_tabular_reverse(two_predecessor_buffer(), eps_lap=0.5)
        dist = model.distribution((9, 9), A)
        support = {(2, 2), (4, 4), (3, 3)}
        assert set(dist) == support
        for p in dist.values():
            assert p == pytest.approx(1.0 / len(support))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.1, 1.0]))
    def test_distributions_sum_to_one(self, seed, eps):
        rng = np.random.default_rng(seed)
        buf = random_grid_buffer(rng)
        model = fit_tabular_reverse(buf, eps_lap=eps)
        for (cond, a) in model.counts:
            assert abs(sum(model.distribution(cond, a).values()) - 1.0) < 1e-12

    def test_forward_equals_reverse_of_time_reversed(self):
        rng = np.random.default_rng(11)
        buf = random_grid_buffer(rng, max_transitions=40)
        fwd = fit_tabular(buf, "forward")
        rev = fit_tabular_reverse(time_reversed(buf))
        assert fwd.counts == rev.counts
        for (cond, a) in fwd.counts:
            assert fwd.distribution(cond, a) == rev.distribution(cond, a)


class TestTabularQueries:
    def test_sampling_frequencies_match_probabilities(self):
        model = fit_tabular_reverse(two_predecessor_buffer())
        rng = np.random.default_rng(0)
        n = 100_000
        hits = sum(model.predict((3, 3), A, rng)[0] == (2, 2)
                   for _ in range(n))
        p = 2.0 / 3.0
        assert abs(hits - n * p) <= 3.0 * np.sqrt(n * p * (1 - p))

    def test_reverse_reward_keyed_on_predicted_pair(self):
        model = fit_tabular_reverse(two_predecessor_buffer())
        rng = np.random.default_rng(1)
        for _ in range(50):
            out, r = model.predict((3, 3), A, rng)
            assert r == {(2, 2): 0.25, (4, 4): 1.0}[out]

    def test_forward_reward_keyed_on_conditioning_pair(self):
        model = fit_tabular(two_predecessor_buffer(), "forward")
        out, r = model.predict((2, 2), A, np.random.default_rng(0))
        assert out == (3, 3) and r == 0.25

    def test_reward_fallback_is_dataset_mean(self):
        model = fit_tabular_reverse(two_predecessor_buffer())
        assert model.reward_estimate((7, 7), 2) == pytest.approx(0.5)

    def test_predict_batch_valid_flags(self, chain_buffer):
        model = fit_tabular_reverse(chain_buffer)
        cond = np.array([[1.0, 2.0], [1.0, 1.0]])
        outs, rewards, valid = model.predict_batch(
            cond, np.array([A, A]), np.random.default_rng(0))
        assert valid.tolist() == [True, False]
        assert tuple(outs[0]) == (1.0, 1.0)

    def test_mean_predict_weighted_mean_and_identity_fallback(self):
        model = fit_tabular_reverse(two_predecessor_buffer())
        cond = np.array([[3.0, 3.0], [8.0, 8.0]])
        outs, rewards, covered = model.mean_predict(cond, np.array([A, A]))
        assert np.allclose(outs[0], [2 + 2 / 3, 2 + 2 / 3])
        assert rewards[0] == pytest.approx((2 / 3) * 0.25 + (1 / 3) * 1.0)
        assert covered.tolist() == [True, False]
        assert np.allclose(outs[1], cond[1])

    def test_perfect_model_zero_error_both_directions(self, chain_buffer):
        for direction in ("reverse", "forward"):
            model = fit_tabular(chain_buffer, direction)
            err = evaluate_model_error(model, chain_buffer)
            assert err["mse_state"] == 0.0
            assert err["mse_reward"] == 0.0
            assert err["coverage"] == 1.0
            assert err["n_holdout"] == len(chain_buffer)

    def test_save_load_round_trip(self, tmp_path):
        buf = random_grid_buffer(np.random.default_rng(12))
        model = fit_tabular_reverse(buf)
        path = tmp_path / "model.bin"
        save_model(model, path)
        back = load_model(path)
        assert back.direction == "reverse"
        assert back.support == model.support
        for key in model.counts:
            assert back.distribution(*key) == model.distribution(*key)
        for (s, a) in model.reward_sums:
            assert back.reward_estimate(s, a) == \
                pytest.approx(model.reward_estimate(s, a))


class TestEliteSelection:
    def test_injected_nll_example(self):
        assert select_elites([3, 1, 2, 5, 4, 0, 6], 5) == [5, 1, 2, 0, 4]

    def test_ties_break_by_position(self):
        assert select_elites([1.0, 1.0, 0.5], 2) == [2, 0]

    def test_all_members_when_k_large(self):
        assert select_elites([2.0, 1.0], 5) == [1, 0]


def linear_dynamics_buffer(rng, n=600):
    """Continuous transitions with an exactly linear delta rule."""
    M = np.array([[0.0, 0.1, 0.05, 0.0],
                  [0.1, 0.0, 0.0, 0.05],
                  [0.0, 0.0, -0.1, 0.0],
                  [0.0, 0.0, 0.0, -0.1]])
    buf = TransitionBuffer("continuous", layout_id="linear")
    for _ in range(n):
        s = rng.uniform(-1.0, 1.0, size=4)
        a = rng.uniform(-1.0, 1.0, size=2)
        sn = s + s @ M + 0.05 * np.concatenate([a, a])
        buf.append(Transition(s=s, a=a, r=float(s[0]), s_next=sn))
        buf.end_episode()
    return buf


def small_cfg(**kw):
    base = dict(direction="reverse", n_members=3, n_elites=2, hidden=(32, 32),
                max_epochs=30, patience=10, batch_size=64)
    base.update(kw)
    return EnsembleConfig(**base)


class TestGaussianEnsemble:
    def test_learns_linear_dynamics_to_tolerance(self):
        rng = np.random.default_rng(20)
        buf = linear_dynamics_buffer(rng)
        train, hold = split_holdout(buf, 100, np.random.default_rng(0))
        model = fit_gaussian_ensemble(train, hold, small_cfg(),
                                      np.random.default_rng(1))
        err = evaluate_model_error(model, hold)
        assert err["mse_state"] < 1e-3, err
        assert err["coverage"] == 1.0

    def test_elites_are_best_holdout_members(self):
        rng = np.random.default_rng(21)
        buf = continuous_buffer(rng, n=120)
        train, hold = split_holdout(buf, 20, np.random.default_rng(0))
        model = fit_gaussian_ensemble(train, hold,
                                      small_cfg(max_epochs=3, n_members=4),
                                      np.random.default_rng(2))
        assert model.elites == select_elites(model.holdout_nll, 2)
        assert len(model.members) == 4

    def test_forward_equals_reverse_of_time_reversed(self):
        rng = np.random.default_rng(22)
        buf = continuous_buffer(rng, n=100)
        train, hold = split_holdout(buf, 20, np.random.default_rng(0))
        fwd = fit_gaussian_ensemble(train, hold,
                                    small_cfg(direction="forward", max_epochs=4),
                                    np.random.default_rng(3))
        rev = fit_gaussian_ensemble(time_reversed(train), time_reversed(hold),
                                    small_cfg(max_epochs=4),
                                    np.random.default_rng(3))
        q = train.states()[:10]
        a = train.actions()[:10]
        assert np.allclose(fwd.mean_predict(q, a)[0], rev.mean_predict(q, a)[0])

    def test_discrete_mode_rounds_and_overrides_rewards(self, chain_buffer):
        cfg = small_cfg(discrete_states=True, max_epochs=3)
        train, hold = split_holdout(chain_buffer, 4, np.random.default_rng(0))
        model = fit_gaussian_ensemble(train, hold, cfg, np.random.default_rng(4))
        cond = np.array([[1.0, 2.0], [1.0, 3.0]])
        outs, rewards, valid = model.predict_batch(
            cond, np.array([A, A]), np.random.default_rng(5))
        assert np.array_equal(outs, np.rint(outs))
        assert valid.all()
        # predicted predecessors that land on dataset (s, a) pairs take the
        # empirical mean reward for that pair
        for out, r in zip(outs, rewards):
            key = ((int(out[0]), int(out[1])), A)
            if key in model.reward_table:
                assert r == model.reward_table[key]
        assert model.reward_table[((1, 1), A)] == 0.0
        assert model.reward_table[((1, 2), A)] == 1.0

    def test_divergence_raises_named_member_error(self):
        rng = np.random.default_rng(23)
        buf = continuous_buffer(rng, n=60)
        train, hold = split_holdout(buf, 10, np.random.default_rng(0))
        cfg = small_cfg(lr=1e150, max_epochs=3, n_members=1, n_elites=1)
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError,
                                                      match="member 0 diverged"):
            fit_gaussian_ensemble(train, hold, cfg, np.random.default_rng(6))

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(24)
        buf = continuous_buffer(rng, n=80)
        train, hold = split_holdout(buf, 10, np.random.default_rng(0))
        model = fit_gaussian_ensemble(train, hold, small_cfg(max_epochs=3),
                                      np.random.default_rng(7))
        path = tmp_path / "ens.bin"
        save_model(model, path)
        back = load_model(path)
        assert back.elites == model.elites
        q, a = hold.next_states(), hold.actions()
        assert np.allclose(back.mean_predict(q, a)[0],
                           model.mean_predict(q, a)[0], atol=1e-4)
        r1 = model.predict_batch(q, a, np.random.default_rng(8))
        r2 = back.predict_batch(q, a, np.random.default_rng(8))
        assert np.allclose(r1[0], r2[0], atol=1e-3)

    def test_wrong_format_rejected(self, tmp_path):
        from romilab.blobio import write_blob
        path = tmp_path / "bad.bin"
        write_blob(path, {"format": "romilab-buffer-v1"}, [np.zeros(1)])
        with pytest.raises(ValueError, match="model checkpoint"):
            load_model(path)


class TestModelErrorComparison:
    def test_both_directions_present_and_finite(self):
        rng = np.random.default_rng(25)
        buf = continuous_buffer(rng, n=90)
        train, hold = split_holdout(buf, 15, np.random.default_rng(0))
        out = model_error_comparison(train, hold,
                                     small_cfg(max_epochs=3),
                                     np.random.default_rng(9))
        assert set(out) == {"forward", "reverse"}
        for direction, err in out.items():
            assert err["direction"] == direction
            assert err["model"] == "ensemble"
            assert np.isfinite(err["mse_state"])
            assert np.isfinite(err["mse_reward"])
            assert err["n_holdout"] == 15
            assert len(err["per_dim"]) == 4
