"""Storage components: on-policy rollouts with return/advantage
post-processing (vanilla, GAE, V-Trace), uniform replay, and hindsight
relabeling.

Rollouts are time-major ``(T, N)`` arrays; the post-processing recursions run
in :mod:`rlmesh.kernels`. Episode boundaries inside a rollout are handled by
``(1 - done)`` masking rather than segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import BufferNotReadyError, ConfigurationError, ContractViolationError

ON_POLICY_STORAGE = ("vanilla", "gae", "vtrace")
OFF_POLICY_STORAGE = ("replay", "her")
STORAGE_KINDS = ON_POLICY_STORAGE + OFF_POLICY_STORAGE


@dataclass(frozen=True)
class StorageConfig:
    """Which buffer to run and its post-processing constants."""

    kind: str = "gae"
    num_steps: int = 128  # on-policy rollout horizon
    gae_lambda: float = 0.95
    rho_bar: float = 1.0
    c_bar: float = 1.0
    capacity: int = 100_000  # desk-scale replay default; configurable
    her_k: int = 4
    her_strategy: str = "future"

    def __post_init__(self):
        if self.kind not in STORAGE_KINDS:
            raise ConfigurationError(f"storage kind must be one of {STORAGE_KINDS}")
        if self.num_steps < 1:
            raise ConfigurationError("num_steps must be >= 1")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("gae_lambda must be in [0, 1]")
        if self.rho_bar <= 0 or self.c_bar <= 0:
            raise ConfigurationError("rho_bar and c_bar must be > 0")
        if self.her_k < 0:
            raise ConfigurationError("her_k must be >= 0")
        if self.her_strategy not in ("final", "future"):
            raise ConfigurationError("her_strategy must be 'final' or 'future'")

    @property
    def family(self) -> str:
        return "on_policy" if self.kind in ON_POLICY_STORAGE else "off_policy"


# ---------------------------------------------------------------------------
# on-policy rollouts
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    """Fixed-horizon batch of transitions tagged with its policy version."""

    observations: np.ndarray  # (T, N, obs_dim)
    actions: np.ndarray  # (T, N) int or (T, N, action_dim) float
    rewards: np.ndarray  # (T, N)
    dones: np.ndarray  # (T, N) float 0/1
    value_estimates: np.ndarray  # (T, N)
    behavior_log_probs: np.ndarray  # (T, N)
    bootstrap_values: np.ndarray  # (N,)
    collected_with_version: int = 0
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __post_init__(self):
        T, N = self.rewards.shape
        expected = {
            "observations": (T, N),
            "actions": (T, N),
            "dones": (T, N),
            "value_estimates": (T, N),
            "behavior_log_probs": (T, N),
        }
        for name, lead in expected.items():
            arr = getattr(self, name)
            if arr.shape[: len(lead)] != lead:
                raise ContractViolationError(
                    f"rollout field {name} has shape {arr.shape}, expected leading {lead}"
                )
        if self.bootstrap_values.shape != (N,):
            raise ContractViolationError("bootstrap_values must be one per environment")

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[1]

    @property
    def num_steps(self) -> int:
        return self.horizon * self.num_envs

    def truncated(self, horizon: int, bootstrap_values: np.ndarray) -> "Rollout":
        """Copy of the first ``horizon`` steps with a fresh bootstrap."""
        if not 1 <= horizon <= self.horizon:
            raise ContractViolationError(f"cannot truncate to horizon {horizon}")
        return Rollout(
            self.observations[:horizon].copy(),
            self.actions[:horizon].copy(),
            self.rewards[:horizon].copy(),
            self.dones[:horizon].copy(),
            self.value_estimates[:horizon].copy(),
            self.behavior_log_probs[:horizon].copy(),
            np.asarray(bootstrap_values, dtype=np.float64).copy(),
            self.collected_with_version,
        )

    def flat_batch(self) -> dict:
        """Flatten (T, N) leading dims to one sample axis; needs post-processing."""
        if self.returns is None or self.advantages is None:
            raise ContractViolationError("rollout not post-processed yet")
        T, N = self.rewards.shape

        def flat(arr):
            return arr.reshape(T * N, *arr.shape[2:])

        return {
            "observations": flat(self.observations),
            "actions": flat(self.actions),
            "returns": flat(self.returns),
            "advantages": flat(self.advantages),
            "behavior_log_probs": flat(self.behavior_log_probs),
            "value_estimates": flat(self.value_estimates),
        }


def _check_gamma(gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must be in [0, 1], got {gamma}")


def compute_returns_vanilla(rollout: Rollout, gamma: float) -> Rollout:
    """Discounted returns seeded by the bootstrap; advantage = R - V."""
    _check_gamma(gamma)
    returns = kernels.discounted_returns(
        rollout.rewards, rollout.dones, rollout.bootstrap_values, gamma
    )
    rollout.returns = returns
    rollout.advantages = returns - rollout.value_estimates
    return rollout

def compute_gae(rollout: Rollout, gamma: float, lam: float) -> Rollout:
    """Generalized advantage estimation; returns = advantages + values."""
    _check_gamma(gamma)
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    adv = kernels.gae_advantages(
        rollout.rewards,
        rollout.value_estimates,
        rollout.dones,
        rollout.bootstrap_values,
        gamma,
        lam,
    )
    rollout.advantages = adv
    rollout.returns = adv + rollout.value_estimates
    return rollout


def compute_vtrace(
    rollout: Rollout,
    target_log_probs: np.ndarray,
    gamma: float,
    rho_bar: float = 1.0,
    c_bar: float = 1.0,
) -> Rollout:
    """Truncated importance-weighted value targets and policy advantages."""
    _check_gamma(gamma)
    if rho_bar <= 0.0 or c_bar <= 0.0:
        raise ConfigurationError("rho_bar and c_bar must be > 0")
    target_log_probs = np.asarray(target_log_probs, dtype=np.float64)
    if target_log_probs.shape != rollout.behavior_log_probs.shape:
        raise ContractViolationError("target log-probs must match rollout shape")
    ratios = np.exp(target_log_probs - rollout.behavior_log_probs)
    rhos = np.minimum(rho_bar, ratios)
    cs = np.minimum(c_bar, ratios)
    vs, adv = kernels.vtrace_corrections(
        rollout.rewards,
        rollout.value_estimates,
        rollout.dones,
        rollout.bootstrap_values,
        rhos,
        cs,
        gamma,
    )
    rollout.returns = vs
    rollout.advantages = adv
    return rollout


def minibatch_epochs(
    batch: dict,
    num_epochs: int,
    num_mini_batch: int,
    seed: int,
    normalize_advantages: bool = True,
):
    """Yield shuffled minibatches, each epoch covering every sample once.

    Advantages are standardized per minibatch (mean 0, std 1). When the batch
    size does not divide evenly the leftover lands in the smaller final
    batches rather than being dropped.
    """
    if num_epochs < 1 or num_mini_batch < 1:
        raise ConfigurationError("num_epochs and num_mini_batch must be >= 1")
    n = batch["advantages"].shape[0]
    if n < 1:
        raise ContractViolationError("empty batch")
    rng = np.random.default_rng(seed)
    for _ in range(num_epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, num_mini_batch):
            if idx.size == 0:
                continue
            mini = {key: value[idx] for key, value in batch.items()}
            if normalize_advantages:
                adv = mini["advantages"]
                mini["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
            yield mini


def count_minibatches(n_samples: int, num_epochs: int, num_mini_batch: int) -> int:
    return num_epochs * min(num_mini_batch, n_samples)


# ---------------------------------------------------------------------------
# off-policy replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayEntry:
    """One transition; goal fields are set for goal-conditioned environments.

    ``state``/``next_state`` hold the goal-free part of the observation so a
    relabeled copy can rebuild the network input with a substituted goal.
    """

    obs: np.ndarray
    action: np.ndarray | int
    reward: float
    next_obs: np.ndarray
    done: float
    goal: np.ndarray | None = None
    achieved_goal: np.ndarray | None = None
    state: np.ndarray | None = None
    next_state: np.ndarray | None = None
    version: int = 0


def entry_to_dict(entry: "ReplayEntry") -> dict:
    return {
        "obs": entry.obs,
        "action": entry.action,
        "reward": entry.reward,
        "next_obs": entry.next_obs,
        "done": entry.done,
        "goal": entry.goal,
        "achieved_goal": entry.achieved_goal,
        "state": entry.state,
        "next_state": entry.next_state,
        "version": entry.version,
    }


def entry_from_dict(payload: dict) -> "ReplayEntry":
    return ReplayEntry(**payload)


@dataclass
class TransitionChunk:
    """Wire format from collection workers to an off-policy gradient worker."""

    transitions: list = field(default_factory=list)
    episodes: list = field(default_factory=list)  # complete episodes, for HER
    env_steps: int = 0
    collected_with_version: int = 0


class ReplayBuffer:
    """Uniform-with-replacement ring buffer over preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int | None, seed: int):
        if capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.action_dim = action_dim  # None => discrete scalar actions
        self.rng = np.random.default_rng(seed)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        if action_dim is None:
            self.actions = np.zeros(capacity, dtype=np.int64)
        else:
            self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.versions = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def insert(self, entry: ReplayEntry) -> None:
        i = self.pos
        self.obs[i] = entry.obs
        self.next_obs[i] = entry.next_obs
        self.actions[i] = entry.action
        self.rewards[i] = entry.reward
        self.dones[i] = entry.done
        self.versions[i] = entry.version
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, entries) -> None:
        for entry in entries:
            self.insert(entry)

    def ready(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def sample(self, batch_size: int) -> dict:
        if not self.ready(batch_size):
            raise BufferNotReadyError(
                f"buffer holds {self.size} entries, need {batch_size}"
            )
        idx = self.rng.integers(0, self.size, size=batch_size)
        return {
            "observations": self.obs[idx].copy(),
            "actions": self.actions[idx].copy(),
            "rewards": self.rewards[idx].copy(),
            "next_observations": self.next_obs[idx].copy(),
            "dones": self.dones[idx].copy(),
            "versions": self.versions[idx].copy(),
        }

    def get_state(self) -> dict:
        return {
            "obs": self.obs.copy(),
            "next_obs": self.next_obs.copy(),
            "actions": self.actions.copy(),
            "rewards": self.rewards.copy(),
            "dones": self.dones.copy(),
            "versions": self.versions.copy(),
            "size": self.size,
            "pos": self.pos,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.obs[:] = state["obs"]
        self.next_obs[:] = state["next_obs"]
        self.actions[:] = state["actions"]
        self.rewards[:] = state["rewards"]
        self.dones[:] = state["dones"]
        self.versions[:] = state["versions"]
        self.size = int(state["size"])
        self.pos = int(state["pos"])
        self.rng.bit_generator.state = state["rng"]


def her_relabel(
    episode: list,
    k: int,
    strategy: str,
    reward_fn,
    rng,
    success_fn=None,
) -> list:
    """Return the episode plus ``k`` goal-relabeled copies per transition.

    ``final`` substitutes the achieved goal of the episode's last state;
    ``future`` draws k (not necessarily distinct) achieved goals from the
    transition's own step onward. Rewards are recomputed with ``reward_fn``
    and the original entries are never mutated.
    """
    if k < 0:
        raise ConfigurationError("her k must be >= 0")
    if strategy not in ("final", "future"):
        raise ConfigurationError(f"unknown HER strategy {strategy!r}")
    for entry in episode:
        if entry.achieved_goal is None or entry.goal is None or entry.state is None:
            raise ContractViolationError("HER needs goal-conditioned replay entries")

    out = list(episode)
    if k == 0:
        return out
    T = len(episode)
    for t, entry in enumerate(episode):
        for _ in range(k):
            j = T - 1 if strategy == "final" else int(rng.integers(t, T))
            new_goal = episode[j].achieved_goal.copy()
            reward = float(reward_fn(entry.achieved_goal, new_goal))
            if success_fn is not None:
                done = float(success_fn(entry.achieved_goal, new_goal))
            else:
                done = entry.done
            out.append(
                replace(
                    entry,
                    obs=np.concatenate([entry.state, new_goal]),
                    next_obs=np.concatenate([entry.next_state, new_goal]),
                    reward=reward,
                    done=done,
                    goal=new_goal,
                )
            )
    return out
