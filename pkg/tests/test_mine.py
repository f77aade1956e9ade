import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mi_probe.errors import DegenerateInputError, DimensionError, UsageError
from mi_probe.mine import (
    AveragedCurve,
    FeatureSequence,
    MIEstimate,
    MineConfig,
    average_mi,
    derangement,
    dv_objective,
    estimate_mi_sample,
    log_transform,
    mine_gradient,
    shuffle_marginal,
)
from mi_probe.nn import MlpParams, init_mlp, mlp_forward, zeros_like_mlp

scores = st.lists(st.floats(-20, 20), min_size=1, max_size=30)


def _reference_derangement(n, seed):
    """Plain-Python Fisher-Yates plus the documented fixed-point repair."""
    rng = np.random.default_rng(seed)
    u = rng.random(n - 1).tolist()
    perm = list(range(n))
    k = 0
    i = n - 1
    while i > 0:
        j = math.floor(u[k] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
        k += 1
        i -= 1
    fixed = [p for p in range(n) if perm[p] == p]
    if len(fixed) > 1:
        for pos in range(len(fixed)):
            perm[fixed[pos]] = fixed[(pos + 1) % len(fixed)]
    elif len(fixed) == 1:
        f = fixed[0]
        perm[f], perm[(f + 1) % n] = perm[(f + 1) % n], perm[f]
    return perm


class TestShuffleMarginal:
    def test_two_frames_are_swapped(self):
        x = FeatureSequence(np.array([[0.0], [1.0]]))
        t = FeatureSequence(np.array([[10.0], [20.0]]))
        for seed in range(5):
            _, t_shuf, perm = shuffle_marginal(x, t, np.random.default_rng(seed))
            np.testing.assert_array_equal(t_shuf, [[20.0], [10.0]])
            np.testing.assert_array_equal(perm, [1, 0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 10_000))
    def test_preserves_multiset_and_deranges(self, n, seed):
        rng = np.random.default_rng(seed)
        x = FeatureSequence(rng.standard_normal((n, 2)))
        t = FeatureSequence(rng.standard_normal((n, 3)))
        x_out, t_out, perm = shuffle_marginal(x, t, np.random.default_rng(seed))
        np.testing.assert_array_equal(x_out, x.values)
        np.testing.assert_array_equal(np.sort(t_out, axis=0), np.sort(t.values, axis=0))
        assert np.count_nonzero(perm != np.arange(n)) >= n - 1

    def test_matches_reference_fisher_yates(self):
        perm = derangement(5, np.random.default_rng(7))
        assert perm.tolist() == _reference_derangement(5, 7)

    @pytest.mark.parametrize("n", [3, 8, 33])
    def test_reference_agreement_other_sizes(self, n):
        for seed in range(10):
            assert derangement(n, np.random.default_rng(seed)).tolist() == _reference_derangement(n, seed)

    def test_degenerate_length(self):
        with pytest.raises(DegenerateInputError):
            derangement(1, np.random.default_rng(0))
        with pytest.raises(DegenerateInputError):
            FeatureSequence(np.zeros((1, 3)))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            shuffle_marginal(FeatureSequence(np.zeros((3, 1))), FeatureSequence(np.zeros((4, 1))),
                             np.random.default_rng(0))


class TestDvObjective:
    def test_symmetric_zero(self):
        assert dv_objective([0, 0, 0], [0, 0, 0]) == 0.0

    def test_log_mean_exp_of_zeros(self):
        assert dv_objective([1, 1], [0, 0]) == 1.0

    def test_direct_evaluation(self):
        assert dv_objective([2, 0], [math.log(2), math.log(2)]) == pytest.approx(1.0 - math.log(2), abs=1e-12)
        assert 1.0 - math.log(2) == pytest.approx(0.30685, abs=1e-5)

    def test_empty(self):
        with pytest.raises(UsageError):
            dv_objective([], [1.0])

    def test_no_overflow_at_clamp(self):
        assert np.isfinite(dv_objective([50.0], [50.0, -50.0]))

    @settings(max_examples=60, deadline=None)
    @given(scores, scores, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, j, m, rnd):
        j2, m2 = list(j), list(m)
        rnd.shuffle(j2)
        rnd.shuffle(m2)
        assert dv_objective(j, m) == pytest.approx(dv_objective(j2, m2), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(scores)
    def test_jensen_gap(self, s):
        value = dv_objective(s, s)
        assert value <= 1e-12
        if max(s) - min(s) > 1e-6:
            assert value < 0


class TestMineGradient:
    def _batches(self, seed=0, n=8, dim=3):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n, dim)), rng.standard_normal((n, dim))

    def test_zero_network(self):
        net = zeros_like_mlp(init_mlp((3, 4, 1), np.random.default_rng(0)))
        joint, marginal = self._batches()
        grads, ema, _ = mine_gradient(joint, marginal, net, None, 0.99)
        assert ema == 1.0
        # psi == 0: hidden units are 0 and uniform exp weights cancel the bias term
        for g in grads.to_dict().values():
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_one_parameter_hand_evaluation(self):
        w = 0.7
        net = MlpParams((1, 1), (np.array([[w]]),), (np.array([0.0]),))
        joint = np.array([[0.5], [-1.0]])
        marginal = np.array([[2.0], [0.25]])
        grads, ema, _ = mine_gradient(joint, marginal, net, None, 0.9)
        e = [math.exp(w * 2.0), math.exp(w * 0.25)]
        denom = (e[0] + e[1]) / 2
        expected_w = (0.5 - 1.0) / 2 - (2.0 * e[0] + 0.25 * e[1]) / (2 * denom)
        expected_b = 1.0 - 1.0
        assert grads.weights[0][0, 0] == pytest.approx(expected_w, abs=1e-12)
        assert grads.biases[0][0] == pytest.approx(expected_b, abs=1e-12)
        assert ema == pytest.approx(denom, abs=1e-12)

    def test_ema_update_rule(self):
        net = init_mlp((3, 4, 1), np.random.default_rng(1))
        joint, marginal = self._batches(1)
        _, ema, info = mine_gradient(joint, marginal, net, 2.0, 0.9)
        assert ema == pytest.approx(0.9 * 2.0 + 0.1 * info.batch_mean_exp, abs=1e-15)

    def test_rejects_non_positive_ema(self):
        net = init_mlp((3, 1), np.random.default_rng(0))
        joint, marginal = self._batches()
        with pytest.raises(UsageError):
            mine_gradient(joint, marginal, net, 0.0, 0.9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences_of_dv(self, seed):
        rng = np.random.default_rng(seed)
        net = init_mlp((4, 6, 5, 1), rng, "elu")
        joint, marginal = rng.standard_normal((10, 4)), rng.standard_normal((12, 4))
        grads, _, _ = mine_gradient(joint, marginal, net, None, 0.0)
        arrays = net.to_dict()

        def objective(a):
            p = net.replace_arrays(a)
            return dv_objective(mlp_forward(p, joint), mlp_forward(p, marginal))

        h = 1e-5
        for name, g in grads.to_dict().items():
            for idx in np.ndindex(g.shape):
                plus = {k: v.copy() for k, v in arrays.items()}
                minus = {k: v.copy() for k, v in arrays.items()}
                plus[name][idx] += h
                minus[name][idx] -= h
                fd = (objective(plus) - objective(minus)) / (2 * h)
                assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9), (name, idx)

    def test_clamped_scores_carry_no_gradient(self):
        net = MlpParams((1, 1), (np.array([[100.0]]),), (np.array([0.0]),))
        joint = np.array([[1.0], [0.001]])
        marginal = np.array([[-1.0], [0.002]])
        grads, _, info = mine_gradient(joint, marginal, net, None, 0.0)
        assert info.clamp_events == 2
        assert np.isfinite(grads.weights[0]).all()


def _small_cfg(**kw):
    base = dict(batch_size=64, train_steps=150, eval_batches=4, hidden=(16, 16), seed=3)
    base.update(kw)
    return MineConfig(**base)


class TestEstimateSample:
    def _pair(self, n=256, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, 2))
        return FeatureSequence(x), FeatureSequence(x + 0.3 * rng.standard_normal((n, 2)))

    def test_deterministic_for_fixed_seed(self):
        x, t = self._pair()
        a = estimate_mi_sample(x, t, _small_cfg())
        b = estimate_mi_sample(x, t, _small_cfg())
        assert a.value_nats == b.value_nats
        assert a.final_loss_curve == b.final_loss_curve

    def test_records_metadata(self):
        x, t = self._pair()
        est = estimate_mi_sample(x, t, _small_cfg(), sample_id="s1", layer_index=3, side="target_side")
        assert (est.sample_id, est.layer_index, est.side) == ("s1", 3, "target_side")
        assert np.isfinite(est.value_nats)
        assert len(est.final_loss_curve) > 1

    def test_dependent_beats_independent(self):
        x, t = self._pair()
        rng = np.random.default_rng(9)
        indep = FeatureSequence(rng.standard_normal((256, 2)))
        dep = estimate_mi_sample(x, t, _small_cfg()).value_nats
        ind = estimate_mi_sample(x, indep, _small_cfg()).value_nats
        assert dep > ind + 0.3

    def test_batch_larger_than_sequence(self):
        x, t = self._pair(n=32)
        with pytest.raises(UsageError):
            estimate_mi_sample(x, t, _small_cfg(batch_size=64))

    def test_bad_side_and_layer(self):
        x, t = self._pair()
        with pytest.raises(UsageError):
            estimate_mi_sample(x, t, _small_cfg(), side="sideways")
        with pytest.raises(UsageError):
            estimate_mi_sample(x, t, _small_cfg(), layer_index=-1)

    def test_config_validation(self):
        with pytest.raises(UsageError):
            MineConfig(ema_decay=1.0)
        with pytest.raises(UsageError):
            MineConfig(batch_size=1)
        assert MineConfig(ema_decay=0.0).ema_decay == 0.0


class TestAveraging:
    def _est(self, value, layer, sample="0"):
        return MIEstimate(value, layer, "input_side", sample)

    def test_single_sample_identity(self):
        curve = average_mi({0: [self._est(0.3, 0)], 1: [self._est(0.1, 1)]})
        assert curve.per_layer_mean == [0.3, 0.1]
        assert curve.n_samples == 1

    def test_mean_of_three(self):
        assert average_mi({0: [1.0, 2.0, 3.0]}).per_layer_mean == [2.0]

    def test_matches_streaming_mean(self):
        rng = np.random.default_rng(0)
        groups = {k: list(rng.standard_normal(50)) for k in range(4)}
        curve = average_mi(groups)
        for k, mean in zip(curve.layers, curve.per_layer_mean):
            running = 0.0
            for i, v in enumerate(groups[k], start=1):
                running += (v - running) / i
            assert mean == pytest.approx(running, abs=1e-12)

    def test_ragged_groups(self):
        with pytest.raises(UsageError):
            average_mi({0: [1.0, 2.0], 1: [1.0]})

    def test_log_transform(self):
        curve = log_transform(AveragedCurve([0, 1, 2], [1.0, math.e, -0.001], 3))
        assert curve.log_values[0] == 0.0
        assert curve.log_values[1] == pytest.approx(1.0, abs=1e-15)
        assert curve.log_values[2] == pytest.approx(math.log(1e-6), abs=1e-12)
        assert curve.log_values[2] == pytest.approx(-13.8155, abs=1e-4)
        assert curve.clamped == [False, False, True]

    def test_json_round_trip(self):
        curve = log_transform(AveragedCurve([0, 1], [0.5, 0.25], 2))
        assert AveragedCurve.from_json(curve.to_json()) == curve
        est = MIEstimate(0.5, 2, "target_side", "x", [0.1, 0.2], 4)
        assert MIEstimate.from_json(est.to_json()) == est
