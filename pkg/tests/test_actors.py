import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from rlmesh.actors import (
    ActorConfig,
    DdqnActor,
    OnPolicyActor,
    SacActor,
    create_factory,
    params_fingerprint,
)
from rlmesh.environments import ActionSpace
from rlmesh.errors import ConfigurationError, ContractViolationError
from rlmesh.funcapprox import polyak_update

DISCRETE4 = ActionSpace("discrete", n=4)
BOX1 = ActionSpace("continuous", dim=1, low=(-2.0,), high=(2.0,))
BOX2 = ActionSpace("continuous", dim=2, low=(-1.0, -1.0), high=(1.0, 1.0))


def onpolicy_config(space=DISCRETE4, obs_dim=5):
    return ActorConfig("on_policy", obs_dim, space, hidden_layers=(8,))


def _build_fingerprint(factory):
    return params_fingerprint(factory.build().params)


class TestFactories:
    def test_bit_identical_builds(self):
        factory = create_factory(onpolicy_config(), seed=42)
        a = factory.build()
        b = factory.build()
        assert np.array_equal(a.params.values, b.params.values)

    def test_different_seeds_differ(self):
        a = create_factory(onpolicy_config(), seed=1).build()
        b = create_factory(onpolicy_config(), seed=2).build()
        assert not np.array_equal(a.params.values, b.params.values)

    def test_factory_shipped_to_processes(self):
        factory = create_factory(onpolicy_config(), seed=7)
        local = params_fingerprint(factory.build().params)
        with ProcessPoolExecutor(max_workers=4) as pool:
            remote = list(pool.map(_build_fingerprint, [factory] * 4))
        assert remote == [local] * 4

    def test_family_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            ActorConfig("sac", 4, DISCRETE4)
        with pytest.raises(ConfigurationError):
            ActorConfig("ddqn", 4, BOX1)


class TestCategoricalHead:
    def make_uniform_actor(self):
        actor = create_factory(onpolicy_config(), seed=3).build()
        values = actor.params.values.copy()
        values[actor.policy_slice] = 0.0  # zero weights: uniform logits
        actor.set_params(actor.params.with_values(values))
        return actor

    def test_uniform_logprob(self):
        actor = self.make_uniform_actor()
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((6, 5))
        record = actor.act(obs, rng)
        assert np.allclose(record.log_prob, -math.log(4.0), atol=1e-12)

    def test_uniform_entropy(self):
        actor = self.make_uniform_actor()
        obs = np.zeros((3, 5))
        _, entropies, _ = actor.evaluate_actions(obs, np.array([0, 1, 2]))
        assert np.allclose(entropies, math.log(4.0), atol=1e-12)

    def test_sampling_frequencies(self):
        actor = create_factory(onpolicy_config(ActionSpace("discrete", n=3)), seed=5).build()
        # fixed logits via zero weights + bias = (ln1, ln2, ln3)
        values = actor.params.values.copy()
        values[actor.policy_slice] = 0.0
        bias_offset = actor.policy_slice.start + actor.policy_spec.param_count() - 3
        values[bias_offset : bias_offset + 3] = np.log([1.0, 2.0, 3.0])
        actor.set_params(actor.params.with_values(values))
        rng = np.random.default_rng(11)
        n = 100_000
        obs = np.zeros((n, 5))
        record = actor.act(obs, rng)
        counts = np.bincount(record.action.astype(int), minlength=3)
        probs = np.array([1, 2, 3]) / 6.0
        for k in range(3):
            sigma = math.sqrt(probs[k] * (1 - probs[k]) / n)
            assert abs(counts[k] / n - probs[k]) <= 3 * sigma

    def test_act_evaluate_consistency(self):
        actor = create_factory(onpolicy_config(), seed=8).build()
        rng = np.random.default_rng(2)
        obs = rng.standard_normal((10, 5))
        record = actor.act(obs, rng)
        log_probs, _, values = actor.evaluate_actions(obs, record.action)
        assert np.max(np.abs(log_probs - record.log_prob)) <= 1e-12
        assert np.array_equal(values, record.value_estimate)

    def test_argmax_shift_invariance(self):
        actor = create_factory(onpolicy_config(), seed=9).build()
        rng = np.random.default_rng(3)
        obs = rng.standard_normal((4, 5))
        base = actor.act(obs, rng, deterministic=True).action
        values = actor.params.values.copy()
        bias_offset = actor.policy_slice.start + actor.policy_spec.param_count() - 4
        values[bias_offset : bias_offset + 4] += 3.7  # constant logits shift
        actor.set_params(actor.params.with_values(values))
        shifted = actor.act(obs, rng, deterministic=True).action
        assert np.array_equal(base, shifted)

    def test_probabilities_normalize(self):
        actor = create_factory(onpolicy_config(), seed=10).build()
        rng = np.random.default_rng(4)
        obs = rng.standard_normal((6, 5))
        heads = actor.policy_heads(obs)
        from rlmesh.actors import log_softmax

        total = np.exp(log_softmax(heads)).sum(axis=1)
        assert np.max(np.abs(total - 1.0)) <= 1e-12

    def test_action_outside_space(self):
        actor = create_factory(onpolicy_config(), seed=1).build()
        with pytest.raises(ContractViolationError):
            actor.evaluate_actions(np.zeros((1, 5)), np.array([4]))


class TestGaussianHead:
    def test_logprob_at_mean(self):
        cfg = ActorConfig("on_policy", 3, BOX2, hidden_layers=(6,), log_std_init=-0.4)
        actor = create_factory(cfg, seed=6).build()
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((5, 3))
        record = actor.act(obs, rng, deterministic=True)
        expected = -np.sum(actor.log_std()) - (2 / 2) * math.log(2 * math.pi)
        assert np.allclose(record.log_prob, expected, atol=1e-12)

    def test_entropy_matches_quadrature(self):
        cfg = ActorConfig("on_policy", 3, BOX1, hidden_layers=(6,), log_std_init=-0.2)
        actor = create_factory(cfg, seed=7).build()
        obs = np.zeros((1, 3))
        _, entropies, _ = actor.evaluate_actions(obs, np.zeros((1, 1)))
        mean = float(actor.policy_heads(obs)[0, 0])
        sigma = float(np.exp(actor.log_std()[0]))
        # numeric -integral p ln p over a wide grid
        grid = np.linspace(mean - 12 * sigma, mean + 12 * sigma, 400_001)
        p = np.exp(-0.5 * ((grid - mean) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
        numeric = -np.trapezoid(p * np.log(p), grid)
        assert abs(entropies[0] - numeric) <= 1e-6


class TestSquashedGaussian:
    def make_actor(self, seed=12):
        cfg = ActorConfig("sac", 3, BOX1, hidden_layers=(8,))
        return create_factory(cfg, seed=seed).build()

    def test_deterministic_is_tanh_mean(self):
        actor = self.make_actor()
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((4, 3))
        mean, _, _ = actor.policy_heads(obs)
        action, _ = actor.sample_squashed(obs, deterministic=True)
        assert np.array_equal(action, np.tanh(mean))

    def test_actions_strictly_inside(self):
        actor = self.make_actor()
        rng = np.random.default_rng(1)
        obs = rng.standard_normal((256, 3))
        action, _ = actor.sample_squashed(obs, rng=rng)
        assert np.all(action > -1.0) and np.all(action < 1.0)

    def test_density_integrates_to_one(self):
        actor = self.make_actor()
        obs = np.array([[0.3, -0.2, 0.5]])
        mean, log_std, _ = actor.policy_heads(obs)
        mu, sigma = float(mean[0, 0]), float(np.exp(log_std[0, 0]))
        us = np.linspace(mu - 10 * sigma, mu + 10 * sigma, 200_001)
        densities = np.empty_like(us)
        for i, u in enumerate(us):
            xi = np.array([[(u - mu) / sigma]])
            a, logp = actor.sample_squashed(obs, noise=xi)
            # integrate p(a) da with the substitution a = tanh(u)
            densities[i] = math.exp(logp[0]) * (1.0 - math.tanh(u) ** 2)
        total = np.trapezoid(densities, us)
        assert abs(total - 1.0) <= 1e-6

    def test_scale_action(self):
        actor = self.make_actor()
        assert np.allclose(actor.scale_action(np.array([-1.0])), [-2.0])
        assert np.allclose(actor.scale_action(np.array([1.0])), [2.0])
        assert np.allclose(actor.scale_action(np.array([0.0])), [0.0])


class TestCritics:
    def test_zero_weight_critics_return_bias(self):
        cfg = ActorConfig("sac", 3, BOX1, hidden_layers=(6,))
        actor = create_factory(cfg, seed=4).build()
        values = actor.params.values.copy()
        values[actor.q1_slice] = 0.0
        q1_bias_pos = actor.q1_slice.stop - 1
        values[q1_bias_pos] = 0.77
        actor.set_params(actor.params.with_values(values))
        rng = np.random.default_rng(0)
        q1, _ = actor.q_values(rng.standard_normal((5, 3)), rng.uniform(-1, 1, (5, 1)))
        assert np.allclose(q1, 0.77, atol=1e-12)

    def test_targets_equal_online_at_init(self):
        cfg = ActorConfig("sac", 3, BOX1, hidden_layers=(6,))
        actor = create_factory(cfg, seed=4).build()
        v = actor.params.values
        assert np.array_equal(v[actor.q1_slice], v[actor.q1_target_slice])
        assert np.array_equal(v[actor.q2_slice], v[actor.q2_target_slice])
        ddqn = create_factory(ActorConfig("ddqn", 4, DISCRETE4, hidden_layers=(6,)), seed=3).build()
        v = ddqn.params.values
        assert np.array_equal(v[ddqn.q_slice], v[ddqn.q_target_slice])

    def test_polyak_spot_check(self):
        cfg = ActorConfig("sac", 3, BOX1, hidden_layers=(6,))
        actor = create_factory(cfg, seed=4).build()
        values = actor.params.values.copy()
        rng = np.random.default_rng(9)
        values[actor.q1_slice] += rng.standard_normal(values[actor.q1_slice].shape)
        old_target = values[actor.q1_target_slice].copy()
        online = values[actor.q1_slice].copy()
        blended = polyak_update(old_target, online, 0.995)
        assert np.allclose(blended, 0.995 * old_target + 0.005 * online, atol=1e-15)

    def test_mode_api_errors(self):
        sac = create_factory(ActorConfig("sac", 3, BOX1, hidden_layers=(6,)), seed=1).build()
        with pytest.raises(ContractViolationError):
            sac.q_all(np.zeros((1, 3)))
        ddqn = create_factory(ActorConfig("ddqn", 4, DISCRETE4, hidden_layers=(6,)), seed=1).build()
        with pytest.raises(ContractViolationError):
            ddqn.q_values(np.zeros((1, 4)), np.zeros((1, 1)))

    def test_ddqn_epsilon_greedy(self):
        ddqn = create_factory(ActorConfig("ddqn", 4, DISCRETE4, hidden_layers=(6,)), seed=2).build()
        rng = np.random.default_rng(5)
        obs = rng.standard_normal((2000, 4))
        greedy = ddqn.act(obs, rng, epsilon=0.0)
        assert np.array_equal(greedy, ddqn.q_all(obs).argmax(axis=1))
        explored = ddqn.act(obs, rng, epsilon=1.0)
        counts = np.bincount(explored, minlength=4)
        assert counts.min() > 0
