"""Shared builders for runtime/learner/acceptance tests, including the
sequential reference loop that the scheme must reproduce bit-exactly."""

from __future__ import annotations

import numpy as np

from rlmesh.actors import ActorConfig, create_factory
from rlmesh.algos import AlgoConfig, UpdateRule, a2c_step, decay_schedule, ppo_step
from rlmesh.environments import EnvSpec, env_make
from rlmesh.runtime import (
    _STREAM_ACT,
    _STREAM_MINIBATCH,
    AgentFactories,
    stream_rng,
    stream_seed,
)
from rlmesh.storage import (
    Rollout,
    StorageConfig,
    compute_gae,
    compute_returns_vanilla,
    minibatch_epochs,
)


def cartpole_ppo_factories(
    seed=0,
    num_envs=4,
    num_steps=16,
    hidden=(16,),
    num_epochs=2,
    num_mini_batch=2,
    lr=2.5e-4,
    lr_decay="none",
    clip_decay="none",
    storage_kind="gae",
):
    env_spec = EnvSpec("cartpole", seed=100 + seed)
    probe = env_make(env_spec)
    actor_cfg = ActorConfig(
        "on_policy", probe.observation_dim, probe.action_space, hidden_layers=hidden
    )
    algo = AlgoConfig(
        kind="ppo",
        lr=lr,
        num_epochs=num_epochs,
        num_mini_batch=num_mini_batch,
        lr_decay=lr_decay,
        clip_decay=clip_decay,
    )
    storage = StorageConfig(kind=storage_kind, num_steps=num_steps)
    return AgentFactories(
        env_spec=env_spec,
        num_envs=num_envs,
        actor_factory=create_factory(actor_cfg, seed=seed),
        storage=storage,
        algo=algo,
        seed=seed,
    )


def reference_sequential_loop(factories: AgentFactories, num_cycles: int, target_steps=None):
    """Plain collect -> post-process -> minibatch -> apply loop, no workers.

    Mirrors single-threaded scheme semantics: refresh before collecting,
    steps counted at collection, progress read once per cycle.
    """
    venv = factories.build_vecenv(0)
    actor = factories.build_actor()
    rule = UpdateRule(actor, factories.algo)
    params = actor.params
    algo = factories.algo
    storage = factories.storage
    env_steps = 0
    obs = venv.reset()

    for cycle in range(num_cycles):
        actor.set_params(params)
        rng = stream_rng(factories.seed, _STREAM_ACT, 0, cycle)
        T, N = storage.num_steps, factories.num_envs
        observations = np.zeros((T, N, venv.observation_dim))
        actions = np.zeros((T, N), dtype=np.int64)
        rewards = np.zeros((T, N))
        dones = np.zeros((T, N))
        values = np.zeros((T, N))
        log_probs = np.zeros((T, N))
        for t in range(T):
            record = actor.act(obs, rng)
            result = venv.step(record.action)
            observations[t] = obs
            actions[t] = record.action
            rewards[t] = result.rewards
            dones[t] = result.dones
            values[t] = record.value_estimate
            log_probs[t] = record.log_prob
            obs = result.observations
        rollout = Rollout(
            observations, actions, rewards, dones, values, log_probs,
            actor.values_of(obs),
        )
        env_steps += T * N

        if storage.kind == "gae":
            compute_gae(rollout, algo.gamma, storage.gae_lambda)
        else:
            compute_returns_vanilla(rollout, algo.gamma)
        progress = min(1.0, env_steps / target_steps) if target_steps else 0.0
        batches = minibatch_epochs(
            rollout.flat_batch(),
            algo.num_epochs,
            algo.num_mini_batch,
            seed=stream_seed(factories.seed, _STREAM_MINIBATCH, 0, cycle),
        )
        for batch in batches:
            actor.set_params(params)
            if algo.kind == "ppo":
                clip = decay_schedule(
                    algo.clip_param, progress, algo.clip_decay, algo.decay_milestones
                )
                grad, _ = ppo_step(batch, actor, algo, clip_param=clip)
            else:
                grad, _ = a2c_step(batch, actor, algo)
            params = rule.apply(params, grad.values, progress)
    return params, env_steps
