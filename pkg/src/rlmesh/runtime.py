"""Worker runtime for the scheme module.

Execution model: every worker is a passive object exposing task methods
(collect one rollout, compute one gradient round, apply one round). In
threaded mode each worker gets a thread that drives those methods through
bounded queues, barriers and the shared :class:`VersionStore`; in
deterministic mode a single-threaded runner steps the identical methods in a
fixed round-robin order, which is what the bit-exactness guarantees rest on.

Version accounting: the store's policy ``version`` ticks once per completed
update cycle (the gradient marked ``last_of_cycle``), while ``update_count``
ticks per optimizer round. Policy lag and gradient asynchrony are measured
in policy versions, so fully synchronous schemes report exactly zero even
for multi-epoch PPO cycles.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .actors import ActorFactory, SacActor
from .algos import (
    AlgoConfig,
    LossStats,
    UpdateRule,
    a2c_step,
    average_gradients,
    ddqn_step,
    decay_schedule,
    ppo_step,
    sac_step,
)
from .environments import BitFlipEnv, EnvSpec, vecenv_make
from .errors import ConfigurationError, ContractViolationError, WorkerFailureError
from .funcapprox import Gradient, ParamVector
from .scheme import SchemeConfig
from .storage import (
    ReplayBuffer,
    ReplayEntry,
    Rollout,
    StorageConfig,
    TransitionChunk,
    compute_gae,
    compute_returns_vanilla,
    compute_vtrace,
    her_relabel,
    minibatch_epochs,
)

_WAIT = 0.02  # polling interval for stop-aware blocking waits

# sub-stream identifiers for deterministic seed derivation
_STREAM_ACT = 1
_STREAM_MINIBATCH = 2
_STREAM_GRAD = 3
_STREAM_WORKLOAD = 4


def stream_rng(root_seed: int, stream: int, worker: int, cycle: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((int(root_seed), stream, int(worker), int(cycle)))
    )


def stream_seed(root_seed: int, stream: int, worker: int, cycle: int) -> int:
    seq = np.random.SeedSequence((int(root_seed), stream, int(worker), int(cycle)))
    return int(seq.generate_state(1)[0])


@dataclass(frozen=True)
class AgentFactories:
    """Deterministic constructors for every component a worker needs."""

    env_spec: EnvSpec
    num_envs: int
    actor_factory: ActorFactory
    storage: StorageConfig
    algo: AlgoConfig
    seed: int = 0

    def build_vecenv(self, worker_index: int):
        # one disjoint seed block per collection worker, continuing the
        # per-copy seed+i convention inside each vector
        base = self.env_spec.seed + worker_index * self.num_envs
        return vecenv_make(self.env_spec.with_seed(base), self.num_envs)

    def build_actor(self):
        return self.actor_factory.build()


@dataclass(frozen=True)
class WorkloadProfile:
    """Injected task durations for benchmarks and lag experiments."""

    collect_ms: float = 0.0
    collect_jitter: float = 0.0  # uniform +/- fraction of collect_ms
    grad_ms: float = 0.0
    straggler_index: int | None = None  # global collection-worker index
    straggler_factor: float = 1.0

    def collect_seconds(self, worker_index: int, rng) -> float:
        base = self.collect_ms
        if self.straggler_index is not None and worker_index == self.straggler_index:
            base *= self.straggler_factor
        if self.collect_jitter > 0.0:
            base *= 1.0 + self.collect_jitter * (2.0 * rng.random() - 1.0)
        return max(base, 0.0) / 1000.0

    @property
    def grad_seconds(self) -> float:
        return self.grad_ms / 1000.0


class VersionStore:
    """The single shared read point: canonical parameters plus counters.

    Readers always observe a complete (params, version) pair; writers hold
    the lock for the whole publish.
    """

    def __init__(self, params: ParamVector, target_steps: int | None = None):
        self._cond = threading.Condition()
        self.params = params
        self.version = 0
        self.update_count = 0
        self.env_steps = 0
        self.granted_steps = 0
        self.target_steps = target_steps
        self.dropped_gradients = 0

    def snapshot(self) -> tuple[ParamVector, int]:
        with self._cond:
            return self.params, self.version

    def publish(self, params: ParamVector, cycle_done: bool) -> int:
        with self._cond:
            self.params = params
            self.update_count += 1
            if cycle_done:
                self.version += 1
            self._cond.notify_all()
            return self.version

    def add_steps(self, n: int) -> None:
        with self._cond:
            self.env_steps += int(n)
            self._cond.notify_all()

    def reserve_steps(self, n: int) -> bool:
        """Grant a collection cycle while budget remains; serialized, so the
        total grant overshoots the target by less than one cycle."""
        with self._cond:
            if self.target_steps is not None and self.granted_steps >= self.target_steps:
                return False
            self.granted_steps += int(n)
            return True

    def progress(self) -> float:
        with self._cond:
            if not self.target_steps:
                return 0.0
            return min(1.0, self.env_steps / self.target_steps)

    def drop_gradient(self) -> None:
        with self._cond:
            self.dropped_gradients += 1

    def wait_update_count(self, at_least: int, stop_event) -> bool:
        with self._cond:
            while self.update_count < at_least:
                if stop_event.is_set():
                    return False
                self._cond.wait(timeout=_WAIT)
            return True


class MetricsSink:
    """Thread-safe accumulators the learner drains once per logging window."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset_window()
        self.total_episodes = 0
        self.preempted_rollouts = 0

    def reset_window(self):
        self._episode_returns = []
        self._policy_lag = []
        self._grad_async = []
        self._losses = []

    def record_episode(self, episode_return: float) -> None:
        with self._lock:
            self._episode_returns.append(float(episode_return))
            self.total_episodes += 1

    def record_lag(self, policy_lag: int, grad_async: int) -> None:
        with self._lock:
            self._policy_lag.append(int(policy_lag))
            self._grad_async.append(int(grad_async))

    def record_loss(self, stats: LossStats) -> None:
        with self._lock:
            self._losses.append(stats)

    def record_preemption(self) -> None:
        with self._lock:
            self.preempted_rollouts += 1

    def drain_window(self) -> dict:
        with self._lock:
            window = {
                "episode_returns": self._episode_returns,
                "policy_lag": self._policy_lag,
                "grad_async": self._grad_async,
                "losses": self._losses,
            }
            self.reset_window()
            return window


class CycleGate:
    """Per-group collection barrier carrying the parameter snapshot for the
    next cycle, so every sync rollout in a cycle uses the same version."""

    def __init__(self, snapshot):
        self._cond = threading.Condition()
        self._generation = 0
        self._snapshot = snapshot

    def open_next(self, snapshot) -> None:
        with self._cond:
            self._generation += 1
            self._snapshot = snapshot
            self._cond.notify_all()

    def reset_to(self, generation: int, snapshot) -> None:
        with self._cond:
            self._generation = int(generation)
            self._snapshot = snapshot
            self._cond.notify_all()

    def wait_for(self, generation: int, stop_event):
        with self._cond:
            while self._generation < generation:
                if stop_event.is_set():
                    return None
                self._cond.wait(timeout=_WAIT)
            return self._snapshot

    @property
    def generation(self) -> int:
        with self._cond:
            return self._generation


class PreemptionGate:
    """Counts finished collectors; past the threshold, stragglers stop early."""

    def __init__(self, num_workers: int, threshold: float | None):
        self.enabled = threshold is not None and num_workers >= 2
        self._needed = math.ceil(threshold * num_workers) if self.enabled else 0
        self._lock = threading.Lock()
        self._arrived = 0
        self._event = threading.Event()

    def arrive(self) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._arrived += 1
            if self._arrived >= self._needed:
                self._event.set()

    def should_stop(self) -> bool:
        return self.enabled and self._event.is_set()

    def reset(self) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._arrived = 0
            self._event.clear()


class GroupBudget:
    """One budget decision per group generation, shared by its collectors."""

    def __init__(self, store: VersionStore, group_steps: int):
        self._store = store
        self._group_steps = group_steps
        self._lock = threading.Lock()
        self._decisions: dict[int, bool] = {}

    def permit(self, generation: int) -> bool:
        with self._lock:
            if generation not in self._decisions:
                self._decisions[generation] = self._store.reserve_steps(self._group_steps)
                # keep the map small
                stale = [g for g in self._decisions if g < generation - 2]
                for g in stale:
                    del self._decisions[g]
            return self._decisions[generation]


class AllReduceBoard:
    """Synchronous gradient exchange for decentralized updates.

    Every gradient worker posts its round gradient; once all arrived each
    gets the identical ordered average back.
    """

    def __init__(self, num_workers: int):
        self._cond = threading.Condition()
        self._num = num_workers
        self._slots: dict[int, "TaggedGradient"] = {}
        self._result = None
        self._tags = None
        self._pending_readers = 0

    def exchange(self, worker_id: int, tagged, stop_event):
        with self._cond:
            while self._result is not None:  # previous round still being read
                if stop_event.is_set():
                    return None, None
                self._cond.wait(timeout=_WAIT)
            self._slots[worker_id] = tagged
            if len(self._slots) == self._num:
                ordered = [self._slots[wid] for wid in sorted(self._slots)]
                self._result = average_gradients([t.gradient for t in ordered])
                self._tags = ordered
                self._pending_readers = self._num
                self._slots = {}
                self._cond.notify_all()
            while self._result is None:
                if stop_event.is_set():
                    return None, None
                self._cond.wait(timeout=_WAIT)
            result, tags = self._result, self._tags
            self._pending_readers -= 1
            if self._pending_readers == 0:
                self._result = None
                self._tags = None
                self._cond.notify_all()
            return result, tags


@dataclass
class TaggedGradient:
    gradient: Gradient
    worker_id: int
    round_index: int
    last_of_cycle: bool
    stats: LossStats
    env_steps: int = 0


class _StopToken(Exception):
    """Internal: raised by blocking helpers when the stop event fires."""


def _queue_put(q, item, stop_event):
    while True:
        try:
            q.put(item, timeout=_WAIT)
            return
        except queue.Full:
            if stop_event.is_set():
                raise _StopToken()


def _queue_get(q, stop_event):
    while True:
        try:
            return q.get(timeout=_WAIT)
        except queue.Empty:
            if stop_event.is_set():
                raise _StopToken()


class CollectionWorker:
    """Steps a vectorized environment and ships version-tagged rollouts."""

    def __init__(
        self,
        worker_index: int,
        group_id: int,
        factories: AgentFactories,
        scheme: SchemeConfig,
        store: VersionStore,
        out_queue,
        metrics: MetricsSink,
        stop_event,
        cycle_gate: CycleGate | None,
        preempt_gate: PreemptionGate | None,
        budget: GroupBudget | None,
        workload: WorkloadProfile | None,
    ):
        self.wid = worker_index
        self.group_id = group_id
        self.factories = factories
        self.scheme = scheme
        self.store = store
        self.out_queue = out_queue
        self.metrics = metrics
        self.stop_event = stop_event
        self.cycle_gate = cycle_gate
        self.preempt_gate = preempt_gate
        self.budget = budget
        self.workload = workload
        self.sync = scheme.col_communication == "sync"

        self.vecenv = factories.build_vecenv(worker_index)
        self.actor = factories.build_actor()
        self.family = factories.algo.family
        self.cycle_index = 0
        self.obs = self.vecenv.reset()
        self.episode_returns = np.zeros(self.factories.num_envs)
        self.params, self.version = store.snapshot()
        self.pending_episodes = [[] for _ in range(self.factories.num_envs)]
        self.finished_episodes = []

    # -- sizing -----------------------------------------------------------
    @property
    def steps_per_cycle(self) -> int:
        if self.family == "on_policy":
            return self.factories.storage.num_steps * self.factories.num_envs
        return self.factories.algo.update_every * self.factories.num_envs

    # -- main task -----------------------------------------------------------
    def run_task(self) -> bool:
        """One collection cycle; returns False when the step budget is spent."""
        if self.budget is not None:
            if not self.budget.permit(self.cycle_index):
                return False
        elif not self.store.reserve_steps(self.steps_per_cycle):
            return False

        if self.sync:
            snapshot = (
                self.cycle_gate.wait_for(self.cycle_index, self.stop_event)
                if self.cycle_gate is not None
                else self.store.snapshot()
            )
            if snapshot is None:
                raise _StopToken()
            self.params, self.version = snapshot
            self.actor.set_params(self.params)

        payload, steps = self._collect()
        self.store.add_steps(steps)
        _queue_put(self.out_queue, ("data", self.wid, payload), self.stop_event)
        if self.preempt_gate is not None:
            self.preempt_gate.arrive()

        if not self.sync:
            self.params, self.version = self.store.snapshot()
            self.actor.set_params(self.params)
        self.cycle_index += 1
        return True

    def finish(self):
        try:
            _queue_put(self.out_queue, ("eof", self.wid, None), self.stop_event)
        except _StopToken:
            pass

    # -- collection ------------------------------------------------------------
    def _sleep_per_step(self, horizon: int, rng) -> float:
        if self.workload is None or self.workload.collect_ms <= 0.0:
            return 0.0
        return self.workload.collect_seconds(self.wid, rng) / horizon

    def _collect(self):
        if self.family == "on_policy":
            return self._collect_rollout()
        return self._collect_chunk()

    def _collect_rollout(self):
        T = self.factories.storage.num_steps
        N = self.factories.num_envs
        venv = self.vecenv
        rng = stream_rng(self.factories.seed, _STREAM_ACT, self.wid, self.cycle_index)
        wl_rng = stream_rng(self.factories.seed, _STREAM_WORKLOAD, self.wid, self.cycle_index)
        sleep = self._sleep_per_step(T, wl_rng)

        obs_dim = venv.observation_dim
        discrete = venv.action_space.kind == "discrete"
        observations = np.zeros((T, N, obs_dim))
        if discrete:
            actions = np.zeros((T, N), dtype=np.int64)
        else:
            actions = np.zeros((T, N, venv.action_space.dim))
        rewards = np.zeros((T, N))
        dones = np.zeros((T, N))
        values = np.zeros((T, N))
        log_probs = np.zeros((T, N))

        steps_done = 0
        preempted = False
        for t in range(T):
            if (
                self.preempt_gate is not None
                and t >= 1
                and self.preempt_gate.should_stop()
            ):
                preempted = True
                break
            record = self.actor.act(self.obs, rng)
            result = venv.step(record.action)
            observations[t] = self.obs
            actions[t] = record.action
            rewards[t] = result.rewards
            dones[t] = result.dones
            values[t] = record.value_estimate
            log_probs[t] = record.log_prob
            self.obs = result.observations
            self._track_episodes(result)
            steps_done = t + 1
            if sleep > 0.0:
                time.sleep(sleep)
            if self.stop_event.is_set():
                raise _StopToken()

        bootstrap = self.actor.values_of(self.obs)
        rollout = Rollout(
            observations[:steps_done],
            actions[:steps_done],
            rewards[:steps_done],
            dones[:steps_done],
            values[:steps_done],
            log_probs[:steps_done],
            bootstrap,
            collected_with_version=self.version,
        )
        if preempted:
            self.metrics.record_preemption()
        return rollout, steps_done * N

    def _collect_chunk(self):
        T = self.factories.algo.update_every
        N = self.factories.num_envs
        venv = self.vecenv
        algo = self.factories.algo
        rng = stream_rng(self.factories.seed, _STREAM_ACT, self.wid, self.cycle_index)
        wl_rng = stream_rng(self.factories.seed, _STREAM_WORKLOAD, self.wid, self.cycle_index)
        sleep = self._sleep_per_step(T, wl_rng)
        her = self.factories.storage.kind == "her"
        sac = isinstance(self.actor, SacActor)

        transitions = []
        warmup = False
        for t in range(T):
            warmup = self.store.env_steps < algo.start_steps
            if sac:
                if warmup:
                    unit_action = rng.uniform(-1.0, 1.0, size=(N, self.actor.action_dim))
                else:
                    unit_action, _ = self.actor.sample_squashed(self.obs, rng=rng)
                env_action = self.actor.scale_action(unit_action)
                stored_action = unit_action
            else:
                if warmup:
                    stored_action = rng.integers(0, self.actor.n_actions, size=N)
                else:
                    epsilon = algo.epsilon_at(self.store.progress())
                    stored_action = self.actor.act(self.obs, rng, epsilon=epsilon)
                env_action = stored_action
            result = venv.step(env_action)
            for i in range(N):
                info = result.infos[i]
                terminal_obs = info.get("terminal_observation")
                next_obs = terminal_obs if terminal_obs is not None else result.observations[i]
                # time-limit cutoffs are not true terminals: keep bootstrapping
                true_done = float(result.dones[i] and not info.get("time_limit", False))
                entry = ReplayEntry(
                    obs=self.obs[i].copy(),
                    action=stored_action[i].copy() if sac else int(stored_action[i]),
                    reward=float(result.rewards[i]),
                    next_obs=np.asarray(next_obs, dtype=np.float64).copy(),
                    done=true_done,
                    version=self.version,
                )
                if her:
                    n_bits = self.factories.env_spec.extra.get("n", 15)
                    entry.state = entry.obs[:n_bits].copy()
                    entry.goal = entry.obs[n_bits:].copy()
                    entry.achieved_goal = info["achieved_goal"].copy()
                    entry.next_state = entry.achieved_goal.copy()
                    self.pending_episodes[i].append(entry)
                    if result.dones[i]:
                        self.finished_episodes.append(self.pending_episodes[i])
                        self.pending_episodes[i] = []
                else:
                    transitions.append(entry)
            self.obs = result.observations
            self._track_episodes(result)
            if sleep > 0.0:
                time.sleep(sleep)
            if self.stop_event.is_set():
                raise _StopToken()

        episodes = []
        if her:
            episodes, self.finished_episodes = self.finished_episodes, []
        chunk = TransitionChunk(
            transitions=transitions,
            episodes=episodes,
            env_steps=T * N,
            collected_with_version=self.version,
        )
        return chunk, T * N

    def _track_episodes(self, result):
        self.episode_returns += result.rewards
        for i in range(self.factories.num_envs):
            if result.dones[i]:
                self.metrics.record_episode(self.episode_returns[i])
                self.episode_returns[i] = 0.0

    # -- state snapshot for deterministic checkpoints ---------------------------
    def get_state(self) -> dict:
        from .storage import entry_to_dict

        return {
            "cycle_index": self.cycle_index,
            "vecenv": self.vecenv.get_state(),
            "obs": self.obs.copy(),
            "episode_returns": self.episode_returns.copy(),
            "version": self.version,
            "pending_episodes": [
                [entry_to_dict(e) for e in episode] for episode in self.pending_episodes
            ],
        }

    def set_state(self, state: dict) -> None:
        from .storage import entry_from_dict

        self.cycle_index = int(state["cycle_index"])
        self.vecenv.set_state(state["vecenv"])
        self.obs = np.asarray(state["obs"]).copy()
        self.episode_returns = np.asarray(state["episode_returns"]).copy()
        self.version = int(state["version"])
        self.pending_episodes = [
            [entry_from_dict(d) for d in episode]
            for episode in state.get("pending_episodes", [])
        ] or [[] for _ in range(self.factories.num_envs)]
        self.params, _ = self.store.snapshot()
        self.actor.set_params(self.params)

    # -- thread body -----------------------------------------------------------
    def run_loop(self):
        try:
            while not self.stop_event.is_set():
                if not self.run_task():
                    break
            self.finish()
        except _StopToken:
            pass


class GradientWorker:
    """Turns collected data into version-tagged gradients, one round at a time."""

    def __init__(
        self,
        gid: int,
        factories: AgentFactories,
        scheme: SchemeConfig,
        store: VersionStore,
        in_queue,
        update_queue,
        board: AllReduceBoard | None,
        metrics: MetricsSink,
        stop_event,
        cycle_gate: CycleGate | None,
        preempt_gate: PreemptionGate | None,
        workload: WorkloadProfile | None,
    ):
        self.gid = gid
        self.factories = factories
        self.scheme = scheme
        self.store = store
        self.in_queue = in_queue
        self.update_queue = update_queue
        self.board = board
        self.metrics = metrics
        self.stop_event = stop_event
        self.cycle_gate = cycle_gate
        self.preempt_gate = preempt_gate
        self.workload = workload

        self.actor = factories.build_actor()
        self.algo = factories.algo
        self.storage_cfg = factories.storage
        self.sync_grad = scheme.grad_communication == "sync"
        self.decentralized = scheme.update_mode == "decentralized"
        self.cycle_index = 0
        self.params, self.version = store.snapshot()
        self.local_params = self.params  # decentralized replicas update this
        self.rule = UpdateRule(self.actor, self.algo) if self.decentralized else None
        self.replay = self._build_replay() if self.algo.family == "off_policy" else None
        self._eof_from = set()
        self._rounds = None
        self._round_index = 0
        self._num_rounds = 0
        self._cycle_steps = 0
        self._cycle_rng = None

    def _build_replay(self):
        env = self.factories.build_vecenv(0)
        obs_dim = env.envs[0].observation_dim
        action_dim = (
            env.action_space.dim if env.action_space.kind == "continuous" else None
        )
        return ReplayBuffer(
            self.storage_cfg.capacity,
            obs_dim,
            action_dim,
            seed=stream_seed(self.factories.seed, _STREAM_GRAD, self.gid, 0),
        )

    @property
    def exhausted(self) -> bool:
        return len(self._eof_from) >= self.scheme.num_col_workers_per_grad

    # -- cycle assembly -----------------------------------------------------
    def begin_cycle(self) -> bool:
        """Gather this cycle's data; False when the collection side is done."""
        gathered = {}
        need = self.scheme.num_col_workers_per_grad if self.scheme.col_communication == "sync" else 1
        while len(gathered) < need:
            kind, wid, payload = _queue_get(self.in_queue, self.stop_event)
            if kind == "eof":
                self._eof_from.add(wid)
                if self.exhausted:
                    return False
                continue
            gathered[wid] = payload
        items = [gathered[wid] for wid in sorted(gathered)]

        self._refresh_for_cycle()
        self._cycle_rng = stream_rng(
            self.factories.seed, _STREAM_GRAD, self.gid, self.cycle_index
        )
        if self.algo.family == "on_policy":
            self._begin_onpolicy(items)
        else:
            self._begin_offpolicy(items)
        self._round_index = 0
        return True

    def _refresh_for_cycle(self):
        if self.decentralized:
            self.params = self.local_params
            _, self.version = self.store.snapshot()
        else:
            self.params, self.version = self.store.snapshot()
        self.actor.set_params(self.params)

    def _begin_onpolicy(self, rollouts: list[Rollout]):
        kind = self.storage_cfg.kind
        flats = []
        self._cycle_steps = 0
        self._data_version = max(r.collected_with_version for r in rollouts)
        for rollout in rollouts:
            if kind == "vanilla":
                compute_returns_vanilla(rollout, self.algo.gamma)
            elif kind == "gae":
                compute_gae(rollout, self.algo.gamma, self.storage_cfg.gae_lambda)
            else:  # vtrace: correct off-policy returns under current params
                T, N = rollout.rewards.shape
                obs = rollout.observations.reshape(T * N, -1)
                acts = rollout.actions.reshape(T * N, *rollout.actions.shape[2:])
                target_logp, _, _ = self.actor.evaluate_actions(obs, acts)
                compute_vtrace(
                    rollout,
                    target_logp.reshape(T, N),
                    self.algo.gamma,
                    self.storage_cfg.rho_bar,
                    self.storage_cfg.c_bar,
                )
            flats.append(rollout.flat_batch())
            self._cycle_steps += rollout.num_steps
        batch = {k: np.concatenate([f[k] for f in flats]) for k in flats[0]}
        n = batch["advantages"].shape[0]
        self._num_rounds = self.algo.num_epochs * min(self.algo.num_mini_batch, n)
        self._rounds = minibatch_epochs(
            batch,
            self.algo.num_epochs,
            self.algo.num_mini_batch,
            seed=stream_seed(self.factories.seed, _STREAM_MINIBATCH, self.gid, self.cycle_index),
        )

    def _begin_offpolicy(self, chunks: list[TransitionChunk]):
        self._cycle_steps = 0
        versions = []
        for chunk in chunks:
            self._cycle_steps += chunk.env_steps
            versions.append(chunk.collected_with_version)
            for entry in chunk.transitions:
                self.replay.insert(entry)
            for episode in chunk.episodes:
                relabeled = her_relabel(
                    episode,
                    self.storage_cfg.her_k,
                    self.storage_cfg.her_strategy,
                    BitFlipEnv.compute_reward,
                    self._cycle_rng,
                    success_fn=BitFlipEnv.goal_reached,
                )
                self.replay.extend(relabeled)
        self._data_version = max(versions)
        warm = (
            self.store.env_steps >= self.algo.start_steps
            and self.replay.ready(self.algo.batch_size)
        )
        self._num_rounds = self.algo.num_updates if warm else 0
        self._rounds = None

    # -- per-round gradient ---------------------------------------------------
    def compute_round(self) -> TaggedGradient | None:
        if self._round_index >= self._num_rounds:
            return None
        progress = self.store.progress()
        if self.algo.family == "on_policy":
            batch = next(self._rounds)
            data_version = self._data_version
            if self.algo.kind == "ppo":
                clip = decay_schedule(
                    self.algo.clip_param, progress, self.algo.clip_decay,
                    self.algo.decay_milestones,
                )
                grad, stats = ppo_step(
                    batch, self.actor, self.algo, clip_param=clip,
                    computed_with_version=self.version, data_version=data_version,
                )
            else:
                grad, stats = a2c_step(
                    batch, self.actor, self.algo,
                    computed_with_version=self.version, data_version=data_version,
                )
        else:
            batch = self.replay.sample(self.algo.batch_size)
            data_version = int(batch["versions"].mean())
            sample = {
                "observations": batch["observations"],
                "actions": batch["actions"],
                "rewards": batch["rewards"],
                "next_observations": batch["next_observations"],
                "dones": batch["dones"],
            }
            if self.algo.kind == "sac":
                grad, stats = sac_step(
                    sample, self.actor, self.algo, rng=self._cycle_rng,
                    computed_with_version=self.version, data_version=data_version,
                )
            else:
                grad, stats = ddqn_step(
                    sample, self.actor, self.algo,
                    computed_with_version=self.version, data_version=data_version,
                )
        if self.workload is not None and self.workload.grad_seconds > 0.0:
            time.sleep(self.workload.grad_seconds)
        self._round_index += 1
        self.metrics.record_loss(stats)
        return TaggedGradient(
            gradient=grad,
            worker_id=self.gid,
            round_index=self._round_index - 1,
            last_of_cycle=self._round_index == self._num_rounds,
            stats=stats,
            env_steps=self._cycle_steps if self._round_index == 1 else 0,
        )

    def refresh(self):
        self.params, self.version = self.store.snapshot()
        self.actor.set_params(self.params)

    def apply_local(self, avg_values: np.ndarray, tags) -> None:
        """Decentralized mode: apply the all-reduced gradient locally; worker 0
        publishes the (identical) result and records the lag samples."""
        cycle_done = all(t.last_of_cycle for t in tags)
        progress = self.store.progress()
        self.local_params = self.rule.apply(self.local_params, avg_values, progress)
        if self.gid == min(t.worker_id for t in tags):
            _, version_now = self.store.snapshot()
            for t in tags:
                self.metrics.record_lag(
                    t.gradient.computed_with_version - t.gradient.data_collected_with_version,
                    version_now - t.gradient.computed_with_version,
                )
            self.store.publish(self.local_params, cycle_done)
        self.params = self.local_params
        self.actor.set_params(self.params)

    def end_cycle(self):
        self.cycle_index += 1
        if self.cycle_gate is not None:
            if self.preempt_gate is not None:
                self.preempt_gate.reset()
            self.cycle_gate.open_next(self.store.snapshot())

    # -- state for deterministic checkpoints -------------------------------------
    def get_state(self) -> dict:
        state = {"cycle_index": self.cycle_index}
        if self.replay is not None:
            state["replay"] = self.replay.get_state()
        if self.rule is not None:
            state["rule"] = self.rule.get_state()
            state["local_params"] = self.local_params.values.copy()
            state["local_version"] = self.local_params.version
        return state

    def set_state(self, state: dict) -> None:
        self.cycle_index = int(state["cycle_index"])
        if self.replay is not None and "replay" in state:
            self.replay.set_state(state["replay"])
        if self.rule is not None and "rule" in state:
            self.rule.set_state(state["rule"])
            self.local_params = ParamVector(
                state["local_params"], int(state["local_version"])
            )
        self.refresh()

    # -- thread body ---------------------------------------------------------------
    def run_loop(self):
        try:
            while not self.stop_event.is_set():
                if not self.begin_cycle():
                    break
                while True:
                    tagged = self.compute_round()
                    if tagged is None:
                        break
                    if self.decentralized:
                        avg, tags = self.board.exchange(self.gid, tagged, self.stop_event)
                        if avg is None:
                            raise _StopToken()
                        self.apply_local(avg, tags)
                    else:
                        expected = self.store.update_count + 1
                        _queue_put(
                            self.update_queue, ("grad", self.gid, tagged), self.stop_event
                        )
                        if self.sync_grad:
                            if not self.store.wait_update_count(expected, self.stop_event):
                                raise _StopToken()
                        self.refresh()
                self.end_cycle()
            # release any collectors parked at the gate before exiting
            if self.cycle_gate is not None:
                self.cycle_gate.open_next(self.store.snapshot())
            if self.update_queue is not None:
                _queue_put(self.update_queue, ("eof", self.gid, None), self.stop_event)
        except _StopToken:
            pass


class UpdateWorker:
    """Centralized mode: reduces gradients, steps the optimizer, publishes."""

    def __init__(
        self,
        store: VersionStore,
        rule: UpdateRule,
        in_queue,
        scheme: SchemeConfig,
        metrics: MetricsSink,
        stop_event,
    ):
        self.store = store
        self.rule = rule
        self.in_queue = in_queue
        self.scheme = scheme
        self.metrics = metrics
        self.stop_event = stop_event
        self._done_workers = set()

    @property
    def exhausted(self) -> bool:
        return len(self._done_workers) >= self.scheme.num_grad_workers

    def apply_round(self) -> bool:
        """Gather (sync) or take (async) gradients, apply, publish."""
        if self.scheme.grad_communication == "sync":
            pending = {}
            needed = self.scheme.num_grad_workers
            while len(pending) + len(self._done_workers) < needed:
                kind, gid, tagged = _queue_get(self.in_queue, self.stop_event)
                if kind == "eof":
                    self._done_workers.add(gid)
                    if self.exhausted and not pending:
                        return False
                    continue
                pending[gid] = tagged
            tags = [pending[gid] for gid in sorted(pending)]
        else:
            while True:
                kind, gid, tagged = _queue_get(self.in_queue, self.stop_event)
                if kind == "eof":
                    self._done_workers.add(gid)
                    if self.exhausted:
                        return False
                    continue
                break
            tags = [tagged]
        self.apply_gathered(tags)
        return True

    def apply_gathered(self, tags) -> None:
        _, version_now = self.store.snapshot()
        if self.scheme.max_grad_lag is not None and self.scheme.grad_communication == "async":
            fresh = []
            for t in tags:
                if version_now - t.gradient.computed_with_version > self.scheme.max_grad_lag:
                    self.store.drop_gradient()
                else:
                    fresh.append(t)
            tags = fresh
            if not tags:
                return
        for t in tags:
            self.metrics.record_lag(
                t.gradient.computed_with_version - t.gradient.data_collected_with_version,
                version_now - t.gradient.computed_with_version,
            )
        avg = average_gradients([t.gradient for t in tags])
        cycle_done = all(t.last_of_cycle for t in tags)
        new_params = self.rule.apply(self.store.params, avg, self.store.progress())
        self.store.publish(new_params, cycle_done)

    def run_loop(self):
        try:
            while not self.stop_event.is_set():
                if not self.apply_round():
                    break
        except _StopToken:
            pass


class Topology:
    """A spawned scheme: all workers, their channels, and the version store."""

    def __init__(self, scheme, factories, store, update_worker, grad_workers,
                 col_workers, metrics, board):
        self.scheme = scheme
        self.factories = factories
        self.store = store
        self.update_worker = update_worker
        self.grad_workers = grad_workers
        self.col_workers = col_workers  # list of lists, one per gradient worker
        self.metrics = metrics
        self.board = board
        self.stop_event = grad_workers[0].stop_event
        self._threads = []

    @property
    def all_col_workers(self):
        return [w for group in self.col_workers for w in group]

    @property
    def num_workers(self) -> int:
        # collection + gradient workers + the single update worker
        return len(self.all_col_workers) + len(self.grad_workers) + 1

    # -- threaded execution ------------------------------------------------
    def start(self):
        if self.scheme.deterministic:
            raise ContractViolationError("deterministic topologies are driven by run_cycle()")
        if self._threads:
            raise ContractViolationError("topology already started")
        for worker in self.all_col_workers:
            self._threads.append(threading.Thread(target=worker.run_loop, daemon=True))
        for worker in self.grad_workers:
            self._threads.append(threading.Thread(target=worker.run_loop, daemon=True))
        if self.scheme.update_mode == "centralized":
            self._threads.append(
                threading.Thread(target=self.update_worker.run_loop, daemon=True)
            )
        for thread in self._threads:
            thread.start()

    def stop(self):
        self.stop_event.set()

    def join(self, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        for thread in self._threads:
            remaining = max(0.0, deadline - time.monotonic())
            thread.join(timeout=remaining)
        alive = [t for t in self._threads if t.is_alive()]
        if alive:
            raise WorkerFailureError(
                f"{len(alive)} worker thread(s) failed to stop; "
                f"last consistent version {self.store.version}"
            )

    def finished(self) -> bool:
        return bool(self._threads) and all(not t.is_alive() for t in self._threads)

    # -- deterministic execution ------------------------------------------
    def run_cycle(self) -> bool:
        """Single-threaded round-robin step of one full update cycle."""
        if not self.scheme.deterministic:
            raise ContractViolationError("run_cycle() needs scheme.deterministic=True")
        produced = []
        for gid, group in enumerate(self.col_workers):
            # the group budget is one atomic decision, so either every
            # collector in the group runs or none does
            if all(worker.run_task() for worker in group):
                produced.append(gid)
        if not produced:
            return False
        live = [self.grad_workers[gid] for gid in produced]
        for worker in live:
            if not worker.begin_cycle():
                raise WorkerFailureError("gradient worker found no data in lockstep mode")
        rounds = {g._num_rounds for g in live}
        if len(rounds) != 1:
            raise WorkerFailureError(f"sync gradient workers disagree on rounds: {rounds}")
        for _ in range(rounds.pop()):
            tags = [g.compute_round() for g in live]
            if self.scheme.update_mode == "centralized":
                self.update_worker.apply_gathered(tags)
                for g in live:
                    g.refresh()
            else:
                avg = average_gradients([t.gradient for t in tags])
                for g in live:
                    g.apply_local(avg, tags)
        for g in live:
            g.end_cycle()
        return True

    # -- state snapshots (deterministic mode) --------------------------------
    def get_runtime_state(self) -> dict:
        return {
            "cols": [w.get_state() for w in self.all_col_workers],
            "grads": [g.get_state() for g in self.grad_workers],
            "rule": self.update_worker.rule.get_state(),
            "store": {
                "version": self.store.version,
                "update_count": self.store.update_count,
                "env_steps": self.store.env_steps,
                "granted_steps": self.store.granted_steps,
                "params": self.store.params.values.copy(),
                "params_version": self.store.params.version,
            },
        }

    def set_runtime_state(self, state: dict) -> None:
        s = state["store"]
        self.store.params = ParamVector(s["params"], int(s["params_version"]))
        self.store.version = int(s["version"])
        self.store.update_count = int(s["update_count"])
        self.store.env_steps = int(s["env_steps"])
        self.store.granted_steps = int(s["granted_steps"])
        self.update_worker.rule.set_state(state["rule"])
        for worker, ws in zip(self.all_col_workers, state["cols"]):
            worker.set_state(ws)
        for worker, gs in zip(self.grad_workers, state["grads"]):
            worker.set_state(gs)
        # fast-forward the collection gates to the restored cycle counters
        snapshot = self.store.snapshot()
        for grad, group in zip(self.grad_workers, self.col_workers):
            gate = group[0].cycle_gate
            if gate is not None:
                gate.reset_to(grad.cycle_index, snapshot)


def spawn(
    scheme: SchemeConfig,
    factories: AgentFactories,
    workload: WorkloadProfile | None = None,
    target_steps: int | None = None,
) -> Topology:
    """Instantiate the full worker topology for a scheme.

    Every worker builds its components from the same factories, so all actor
    replicas start bit-identical.
    """
    total_col = scheme.total_col_workers
    if scheme.col_slots is not None and total_col > scheme.col_slots:
        raise ConfigurationError(
            f"{total_col} collection workers exceed {scheme.col_slots} slots"
        )
    if scheme.grad_slots is not None and scheme.num_grad_workers > scheme.grad_slots:
        raise ConfigurationError(
            f"{scheme.num_grad_workers} gradient workers exceed {scheme.grad_slots} slots"
        )

    template = factories.build_actor()
    store = VersionStore(template.params, target_steps=target_steps)
    metrics = MetricsSink()
    stop_event = threading.Event()
    rule = UpdateRule(template, factories.algo)
    board = (
        AllReduceBoard(scheme.num_grad_workers)
        if scheme.update_mode == "decentralized"
        else None
    )
    update_queue = queue.Queue(maxsize=max(scheme.queue_depth, scheme.num_grad_workers) + 1)
    update_worker = UpdateWorker(store, rule, update_queue, scheme, metrics, stop_event)

    grad_workers = []
    col_workers = []
    for gid in range(scheme.num_grad_workers):
        in_queue = queue.Queue(
            maxsize=max(scheme.queue_depth, scheme.num_col_workers_per_grad) + 1
        )
        sync_col = scheme.col_communication == "sync"
        gate = CycleGate(store.snapshot()) if sync_col else None
        preempt = (
            PreemptionGate(scheme.num_col_workers_per_grad, scheme.preemption_threshold)
            if scheme.preemption_threshold is not None
            else None
        )
        group_steps = None
        group = []
        for j in range(scheme.num_col_workers_per_grad):
            wid = gid * scheme.num_col_workers_per_grad + j
            worker = CollectionWorker(
                wid, gid, factories, scheme, store,
                in_queue, metrics, stop_event,
                cycle_gate=gate, preempt_gate=preempt,
                budget=None, workload=workload,
            )
            group.append(worker)
        if sync_col:
            budget = GroupBudget(store, sum(w.steps_per_cycle for w in group))
            for worker in group:
                worker.budget = budget
        grad = GradientWorker(
            gid, factories, scheme, store,
            in_queue, update_queue, board, metrics, stop_event,
            cycle_gate=gate, preempt_gate=preempt, workload=workload,
        )
        grad_workers.append(grad)
        col_workers.append(group)

    return Topology(
        scheme, factories, store, update_worker, grad_workers, col_workers, metrics, board
    )
