"""The Learner: drives a spawned topology to a target step count, logs
windowed metrics, evaluates policies, and manages checkpoints.

Log files are plain CSV, one record per logging window, with the metric
columns fixed and the loss columns chosen by the algorithm. Checkpoints use
the binary container from :mod:`rlmesh.container`; in deterministic mode
they capture the full runtime state (environments, buffers, counters, RNG
streams), so training resumed from a checkpoint continues the identical
trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .actors import DdqnActor, OnPolicyActor, SacActor
from .container import load_container, save_container
from .environments import EnvSpec, env_make
from .errors import ConfigurationError, ContractViolationError, WorkerFailureError
from .funcapprox import ParamVector
from .runtime import Topology

METRIC_COLUMNS = (
    "wall_time",
    "env_steps",
    "updates",
    "fps",
    "reward_mean",
    "reward_min",
    "reward_max",
    "policy_lag",
    "grad_async",
)

LOSS_COLUMNS = {
    "ppo": ("total_loss", "policy_loss", "value_loss", "entropy", "clip_fraction"),
    "a2c": ("total_loss", "policy_loss", "value_loss", "entropy"),
    "ddqn": ("q_loss",),
    "sac": ("q_loss", "policy_loss", "entropy", "alpha"),
}


@dataclass(frozen=True)
class LearnerConfig:
    target_steps: int
    log_dir: str | None = None
    log_interval_steps: int = 5_000
    checkpoint_interval_steps: int | None = None
    eval_episodes: int = 0
    poll_seconds: float = 0.02
    join_timeout: float = 60.0

    def __post_init__(self):
        if self.target_steps < 0:
            raise ConfigurationError("target_steps must be >= 0")
        if self.log_interval_steps < 1:
            raise ConfigurationError("log_interval_steps must be >= 1")
        if self.target_steps > 0 and self.log_interval_steps > self.target_steps:
            raise ConfigurationError("log_interval_steps must not exceed target_steps")
        if (
            self.checkpoint_interval_steps is not None
            and self.target_steps > 0
            and self.checkpoint_interval_steps > self.target_steps
        ):
            raise ConfigurationError("checkpoint_interval_steps must not exceed target_steps")


@dataclass
class TrainRecord:
    wall_time: float
    env_steps: int
    updates: int
    fps: float | None
    reward_mean: float | None
    reward_min: float | None
    reward_max: float | None
    policy_lag: float | None
    grad_async: float | None
    losses: dict = field(default_factory=dict)

    def as_row(self, loss_columns) -> list[str]:
        def fmt(value, spec="{:.6g}"):
            return "" if value is None else spec.format(value)

        row = [
            fmt(self.wall_time),
            str(self.env_steps),
            str(self.updates),
            fmt(self.fps),
            fmt(self.reward_mean),
            fmt(self.reward_min),
            fmt(self.reward_max),
            fmt(self.policy_lag),
            fmt(self.grad_async),
        ]
        row.extend(fmt(self.losses.get(c)) for c in loss_columns)
        return row


def measure_fps(steps_delta: int, seconds_delta: float) -> float | None:
    """Environment frames per wall-clock second; absent rather than infinite."""
    if seconds_delta <= 0.0 or steps_delta <= 0:
        return None
    return steps_delta / seconds_delta


def _window_stats(window) -> dict:
    rewards = window["episode_returns"]
    out = {
        "reward_mean": float(np.mean(rewards)) if rewards else None,
        "reward_min": float(np.min(rewards)) if rewards else None,
        "reward_max": float(np.max(rewards)) if rewards else None,
        "policy_lag": float(np.mean(window["policy_lag"])) if window["policy_lag"] else None,
        "grad_async": float(np.mean(window["grad_async"])) if window["grad_async"] else None,
    }
    losses = window["losses"]
    merged = {}
    if losses:
        keys = losses[0].as_dict().keys()
        for key in keys:
            merged[key] = float(np.mean([s.as_dict()[key] for s in losses]))
    out["losses"] = merged
    return out


class Learner:
    """Runs update cycles until the step target, emitting TrainRecords."""

    def __init__(self, topology: Topology, config: LearnerConfig):
        self.topology = topology
        self.config = config
        self.store = topology.store
        self.store.target_steps = config.target_steps
        self.records: list[TrainRecord] = []
        self._log_path = None
        self._loss_columns = LOSS_COLUMNS[topology.factories.algo.kind]
        if config.log_dir:
            import os

            os.makedirs(config.log_dir, exist_ok=True)
            self._log_path = os.path.join(config.log_dir, "train_log.csv")
            with open(self._log_path, "w") as fh:
                fh.write(",".join(METRIC_COLUMNS + self._loss_columns) + "\n")

    def done(self) -> bool:
        return self.store.env_steps >= self.config.target_steps

    # -- record plumbing ----------------------------------------------------
    def _emit(self, wall_time, fps):
        window = self.topology.metrics.drain_window()
        stats = _window_stats(window)
        record = TrainRecord(
            wall_time=wall_time,
            env_steps=self.store.env_steps,
            updates=self.store.update_count,
            fps=fps,
            reward_mean=stats["reward_mean"],
            reward_min=stats["reward_min"],
            reward_max=stats["reward_max"],
            policy_lag=stats["policy_lag"],
            grad_async=stats["grad_async"],
            losses=stats["losses"],
        )
        self.records.append(record)
        if self._log_path:
            with open(self._log_path, "a") as fh:
                fh.write(",".join(record.as_row(self._loss_columns)) + "\n")
        return record

    def _checkpoint_path(self, label) -> str | None:
        if not self.config.log_dir:
            return None
        import os

        return os.path.join(self.config.log_dir, f"checkpoint_{label}.ckpt")

    # -- main loop -------------------------------------------------------------
    def train(self) -> dict:
        cfg = self.config
        start = time.perf_counter()
        last_steps = 0
        last_time = start
        next_log = cfg.log_interval_steps
        next_ckpt = cfg.checkpoint_interval_steps

        def maybe_log_and_checkpoint():
            nonlocal last_steps, last_time, next_log, next_ckpt
            steps = self.store.env_steps
            now = time.perf_counter()
            if steps >= next_log:
                fps = measure_fps(steps - last_steps, now - last_time)
                self._emit(now - start, fps)
                last_steps, last_time = steps, now
                while next_log <= steps:
                    next_log += cfg.log_interval_steps
            if next_ckpt is not None and steps >= next_ckpt:
                path = self._checkpoint_path(f"step{steps}")
                if path:
                    checkpoint_save(path, self.topology, steps)
                while next_ckpt <= steps:
                    next_ckpt += cfg.checkpoint_interval_steps

        if cfg.target_steps == 0:
            summary = self._summarize(start)
            final = self._checkpoint_path("final")
            if final:
                checkpoint_save(final, self.topology, 0)
                summary["checkpoint"] = final
            return summary

        if self.topology.scheme.deterministic:
            while True:
                progressed = self.topology.run_cycle()
                if not progressed:
                    break
                maybe_log_and_checkpoint()
        else:
            self.topology.start()
            while not self.topology.finished():
                time.sleep(cfg.poll_seconds)
                maybe_log_and_checkpoint()
            self.topology.join(timeout=cfg.join_timeout)

        now = time.perf_counter()
        if self.store.env_steps > last_steps:
            self._emit(now - start, measure_fps(self.store.env_steps - last_steps, now - last_time))
        summary = self._summarize(start)
        final = self._checkpoint_path("final")
        if final:
            checkpoint_save(final, self.topology, self.store.env_steps)
            summary["checkpoint"] = final
        return summary

    def stop(self):
        self.topology.stop()

    def _summarize(self, start) -> dict:
        elapsed = time.perf_counter() - start
        summary = {
            "env_steps": self.store.env_steps,
            "updates": self.store.update_count,
            "version": self.store.version,
            "wall_time": elapsed,
            "fps_cumulative": measure_fps(self.store.env_steps, elapsed),
            "dropped_gradients": self.store.dropped_gradients,
            "records": len(self.records),
        }
        if self.config.eval_episodes > 0:
            summary["evaluation"] = evaluate(
                _actor_with_params(self.topology),
                self.topology.factories.env_spec,
                self.config.eval_episodes,
            )
        return summary


def _actor_with_params(topology: Topology):
    actor = topology.factories.build_actor()
    actor.set_params(topology.store.params)
    return actor


def greedy_action(actor, obs):
    """Deterministic action for evaluation, per actor family."""
    if isinstance(actor, OnPolicyActor):
        record = actor.act(obs[None, :], rng=None, deterministic=True)
        action = record.action[0]
        return int(action) if actor.dist_kind == "categorical" else action
    if isinstance(actor, SacActor):
        unit, _ = actor.sample_squashed(obs[None, :], deterministic=True)
        return actor.scale_action(unit[0])
    if isinstance(actor, DdqnActor):
        return int(actor.q_all(obs[None, :]).argmax(axis=1)[0])
    raise ContractViolationError(f"unknown actor type {type(actor)!r}")


def evaluate(
    actor,
    env_spec: EnvSpec,
    episodes: int,
    deterministic: bool = True,
    seed_offset: int = 10_000,
) -> dict:
    """Score the policy on held-out seeds; one fresh env per episode."""
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    rng = np.random.default_rng(0)
    scores = []
    lengths = []
    successes = 0
    for episode in range(episodes):
        env = env_make(env_spec.with_seed(env_spec.seed + seed_offset + episode))
        obs = env.reset()
        total = 0.0
        steps = 0
        reached = False
        while True:
            if deterministic:
                action = greedy_action(actor, obs)
            elif isinstance(actor, OnPolicyActor):
                record = actor.act(obs[None, :], rng)
                action = record.action[0]
                if actor.dist_kind == "categorical":
                    action = int(action)
            else:
                raise ConfigurationError("stochastic evaluation supports on-policy actors")
            result = env.step(action)
            total += result.reward
            steps += 1
            obs = result.observation
            if result.info.get("goal_reached") or result.info.get("is_success"):
                reached = True
            if result.done:
                break
        scores.append(total)
        lengths.append(steps)
        successes += int(reached)
    return {
        "mean": float(np.mean(scores)),
        "min": float(np.min(scores)),
        "max": float(np.max(scores)),
        "scores": scores,
        "mean_length": float(np.mean(lengths)),
        "success_rate": successes / episodes,
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _flatten_state(obj, prefix, arrays):
    if isinstance(obj, np.ndarray):
        key = prefix
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {k: _flatten_state(v, f"{prefix}/{k}", arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_flatten_state(v, f"{prefix}/{i}", arrays) for i, v in enumerate(obj)]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _restore_state(obj, arrays):
    if isinstance(obj, dict):
        if set(obj.keys()) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _restore_state(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_state(v, arrays) for v in obj]
    return obj


def checkpoint_save(path, topology: Topology, step: int) -> None:
    """Persist parameters, optimizer state, counters, and (in deterministic
    mode) the full runtime state needed for bit-exact resumption."""
    arrays = {"params": topology.store.params.values}
    meta = {
        "level": "full" if topology.scheme.deterministic else "params",
        "step": int(step),
        "env_steps": int(topology.store.env_steps),
        "version": int(topology.store.version),
        "update_count": int(topology.store.update_count),
        "params_version": int(topology.store.params.version),
        "algo": topology.factories.algo.kind,
        "env": {
            "name": topology.factories.env_spec.name,
            "seed": topology.factories.env_spec.seed,
            "extra": dict(topology.factories.env_spec.extra),
        },
        "obs_dim": topology.factories.actor_factory.config.obs_dim,
    }
    if topology.scheme.deterministic:
        runtime_state = topology.get_runtime_state()
        meta["runtime"] = _flatten_state(runtime_state, "runtime", arrays)
    else:
        meta["rule"] = _flatten_state(
            topology.update_worker.rule.get_state(), "rule", arrays
        )
    save_container(path, meta, arrays)


def checkpoint_load(path) -> tuple[dict, dict]:
    return load_container(path)


def checkpoint_restore(path, topology: Topology) -> dict:
    """Load a checkpoint into a freshly spawned, not-yet-started topology."""
    meta, arrays = load_container(path)
    params = ParamVector(arrays["params"], int(meta["params_version"]))
    if len(params) != len(topology.store.params):
        raise ContractViolationError(
            "checkpoint parameter count does not match the spawned topology"
        )
    topology.store.params = params
    if meta["level"] == "full":
        runtime_state = _restore_state(meta["runtime"], arrays)
        topology.set_runtime_state(runtime_state)
    else:
        topology.store.version = int(meta["version"])
        topology.store.update_count = int(meta["update_count"])
        topology.store.env_steps = int(meta["env_steps"])
        topology.store.granted_steps = int(meta["env_steps"])
        topology.update_worker.rule.set_state(_restore_state(meta["rule"], arrays))
    return meta


def load_actor_from_checkpoint(path, factories) -> tuple:
    """Rebuild an actor carrying a checkpoint's parameters (for evaluation)."""
    meta, arrays = load_container(path)
    actor = factories.build_actor()
    values = arrays["params"]
    if values.shape != actor.params.values.shape:
        raise ContractViolationError(
            f"checkpoint holds {values.shape[0]} parameters, "
            f"actor expects {actor.params.values.shape[0]}"
        )
    actor.set_params(ParamVector(values, int(meta["params_version"])))
    return actor, meta
