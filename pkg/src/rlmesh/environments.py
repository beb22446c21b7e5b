"""Built-in desk-scale environments and the vectorized environment stack.

Four environments cover one agent family each: cart-pole (discrete control),
pendulum swing-up (continuous torque), a 5x5 grid world (value-based
learning) and n-bit flipping (goal-conditioned, sparse reward). Every
environment is fully determined by its seed and supports state snapshots so
training runs can be checkpointed and resumed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolationError

ENV_NAMES = ("cartpole", "pendulum", "gridworld", "bitflip")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ConfigurationError(
                f"unknown environment {self.name!r}; known: {ENV_NAMES}"
            )

    def with_seed(self, seed: int) -> "EnvSpec":
        return EnvSpec(self.name, seed, dict(self.extra))


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int = 0
    dim: int = 0
    low: tuple = ()
    high: tuple = ()

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n < 2:
                raise ConfigurationError("discrete action space needs n >= 2")
        elif self.kind == "continuous":
            if self.dim < 1 or len(self.low) != self.dim or len(self.high) != self.dim:
                raise ConfigurationError("continuous action space needs matching bounds")
            if not all(l < h for l, h in zip(self.low, self.high)):
                raise ConfigurationError("continuous bounds must satisfy low < high")
        else:
            raise ConfigurationError(f"unknown action space kind {self.kind!r}")

    def contains(self, action) -> bool:
        if self.kind == "discrete":
            a = int(action)
            return 0 <= a < self.n and float(action) == a
        arr = np.asarray(action, dtype=np.float64).reshape(-1)
        return arr.shape[0] == self.dim and bool(
            np.all(arr >= np.asarray(self.low) - 1e-9)
            and np.all(arr <= np.asarray(self.high) + 1e-9)
        )


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class Env:
    """Single environment: seeded, steppable, snapshotable."""

    observation_dim: int
    action_space: ActionSpace
    max_episode_steps: int

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self._elapsed = 0
        self._needs_reset = True

    # -- subclass hooks -------------------------------------------------
    def _reset_state(self):
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, action) -> tuple[float, bool, dict]:
        """Advance one tick; returns (reward, terminal, info)."""
        raise NotImplementedError

    def _snapshot_state(self):
        raise NotImplementedError

    def _restore_state(self, state):
        raise NotImplementedError

    # -- public API ------------------------------------------------------
    def reset(self) -> np.ndarray:
        self._reset_state()
        self._elapsed = 0
        self._needs_reset = False
        return self._observe()

    def step(self, action) -> StepResult:
        if self._needs_reset:
            raise ContractViolationError(
                f"{self.spec.name}: step() called on a terminal environment"
            )
        if not self.action_space.contains(action):
            raise ContractViolationError(
                f"{self.spec.name}: action {action!r} outside {self.action_space}"
            )
        reward, terminal, info = self._transition(action)
        self._elapsed += 1
        done = terminal or self._elapsed >= self.max_episode_steps
        if done:
            self._needs_reset = True
        obs = self._observe()
        if not np.all(np.isfinite(obs)):
            raise ContractViolationError(f"{self.spec.name}: non-finite observation")
        return StepResult(obs, float(reward), bool(done), info)

    def get_state(self):
        return {
            "env": self._snapshot_state(),
            "elapsed": self._elapsed,
            "needs_reset": self._needs_reset,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state):
        self._restore_state(state["env"])
        self._elapsed = state["elapsed"]
        self._needs_reset = state["needs_reset"]
        self.rng.bit_generator.state = state["rng"]


class CartPoleEnv(Env):
    """Pole balancing on a cart, standard parameterization, Euler integration."""

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE_MAG = 10.0
    TAU = 0.02
    X_LIMIT = 2.4
    THETA_LIMIT = 12.0 * 2.0 * math.pi / 360.0

    observation_dim = 4
    action_space = ActionSpace("discrete", n=2)
    max_episode_steps = 500

    def _reset_state(self):
        self.state = self.rng.uniform(-0.05, 0.05, size=4)

    def _observe(self):
        return self.state.copy()

    def _transition(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = self.FORCE_MAG if int(action) == 1 else -self.FORCE_MAG
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_mass_length = self.MASS_POLE * self.HALF_LENGTH
        cos_t = math.cos(theta)
        sin_t = math.sin(theta)
        temp = (force + pole_mass_length * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t**2 / total_mass)
        )
        x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass
        x = x + self.TAU * x_dot
        x_dot = x_dot + self.TAU * x_acc
        theta = theta + self.TAU * theta_dot
        theta_dot = theta_dot + self.TAU * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        terminal = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        return 1.0, terminal, {}

    def _snapshot_state(self):
        return self.state.copy()

    def _restore_state(self, state):
        self.state = np.array(state, dtype=np.float64)


class PendulumEnv(Env):
    """Torque-limited swing-up; observation is (cos th, sin th, th_dot)."""

    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0
    DT = 0.05
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    observation_dim = 3
    action_space = ActionSpace(
        "continuous", dim=1, low=(-MAX_TORQUE,), high=(MAX_TORQUE,)
    )
    max_episode_steps = 200

    def _reset_state(self):
        theta = self.rng.uniform(-math.pi, math.pi)
        theta_dot = self.rng.uniform(-1.0, 1.0)
        self.state = np.array([theta, theta_dot])

    def _observe(self):
        theta, theta_dot = self.state
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def _transition(self, action):
        theta, theta_dot = self.state
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.MAX_TORQUE, self.MAX_TORQUE))
        angle = ((theta + math.pi) % (2.0 * math.pi)) - math.pi
        reward = -(angle**2 + 0.1 * theta_dot**2 + 0.001 * u**2)
        theta_dot = theta_dot + self.DT * (
            3.0 * self.GRAVITY / (2.0 * self.LENGTH) * math.sin(theta)
            + 3.0 / (self.MASS * self.LENGTH**2) * u
        )
        theta_dot = float(np.clip(theta_dot, -self.MAX_SPEED, self.MAX_SPEED))
        theta = theta + self.DT * theta_dot
        self.state = np.array([theta, theta_dot])
        return reward, False, {}

    def _snapshot_state(self):
        return self.state.copy()

    def _restore_state(self, state):
        self.state = np.array(state, dtype=np.float64)


class GridWorldEnv(Env):
    """Square grid, random start, fixed goal corner, small step penalty."""

    max_episode_steps = 100
    _MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, spec: EnvSpec):
        self.size = int(spec.extra.get("size", 5))
        if self.size < 2:
            raise ConfigurationError("gridworld size must be >= 2")
        self.observation_dim = self.size * self.size
        self.action_space = ActionSpace("discrete", n=4)
        self.goal = (self.size - 1, self.size - 1)
        super().__init__(spec)

    def _reset_state(self):
        while True:
            pos = (int(self.rng.integers(self.size)), int(self.rng.integers(self.size)))
            if pos != self.goal:
                self.pos = pos
                return

    def _observe(self):
        obs = np.zeros(self.observation_dim)
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        return obs

    def _transition(self, action):
        dr, dc = self._MOVES[int(action)]
        r = min(max(self.pos[0] + dr, 0), self.size - 1)
        c = min(max(self.pos[1] + dc, 0), self.size - 1)
        self.pos = (r, c)
        if self.pos == self.goal:
            return 1.0, True, {"goal_reached": True}
        return -0.01, False, {"goal_reached": False}

    def _snapshot_state(self):
        return self.pos

    def _restore_state(self, state):
        self.pos = (int(state[0]), int(state[1]))


class BitFlipEnv(Env):
    """Flip bits to match a goal pattern; reward -1 until the goal, then 0.

    The observation stacks the current bits and the goal bits, and ``info``
    carries the achieved goal so hindsight relabeling can recompute rewards.
    """

    def __init__(self, spec: EnvSpec):
        self.n_bits = int(spec.extra.get("n", 15))
        if self.n_bits < 1:
            raise ConfigurationError("bitflip needs n >= 1")
        self.observation_dim = 2 * self.n_bits
        self.action_space = ActionSpace("discrete", n=max(2, self.n_bits))
        self.max_episode_steps = self.n_bits
        super().__init__(spec)

    @staticmethod
    def compute_reward(achieved_goal, goal) -> float:
        return 0.0 if np.array_equal(achieved_goal, goal) else -1.0

    @staticmethod
    def goal_reached(achieved_goal, goal) -> bool:
        return bool(np.array_equal(achieved_goal, goal))

    def _reset_state(self):
        self.bits = self.rng.integers(0, 2, size=self.n_bits).astype(np.float64)
        while True:
            self.goal = self.rng.integers(0, 2, size=self.n_bits).astype(np.float64)
            if not np.array_equal(self.bits, self.goal):
                return

    def _observe(self):
        return np.concatenate([self.bits, self.goal])

    def _transition(self, action):
        idx = int(action)
        if idx < self.n_bits:  # actions beyond n (padding) are no-ops
            self.bits[idx] = 1.0 - self.bits[idx]
        success = np.array_equal(self.bits, self.goal)
        info = {
            "achieved_goal": self.bits.copy(),
            "goal": self.goal.copy(),
            "is_success": success,
        }
        return self.compute_reward(self.bits, self.goal), success, info

    def _snapshot_state(self):
        return (self.bits.copy(), self.goal.copy())

    def _restore_state(self, state):
        self.bits = np.array(state[0], dtype=np.float64)
        self.goal = np.array(state[1], dtype=np.float64)


_REGISTRY = {
    "cartpole": CartPoleEnv,
    "pendulum": PendulumEnv,
    "gridworld": GridWorldEnv,
    "bitflip": BitFlipEnv,
}


def env_make(spec: EnvSpec) -> Env:
    """Build the named environment, already reset and ready to step."""
    env = _REGISTRY[spec.name](spec)
    env.reset()
    return env


@dataclass
class VecStepResult:
    observations: np.ndarray  # (N, obs_dim)
    rewards: np.ndarray  # (N,)
    dones: np.ndarray  # (N,) float 0/1
    infos: list


class VecEnv:
    """Fixed stack of independent environment copies, stepped sequentially.

    Sub-environments that finish an episode are reset automatically; the true
    terminal observation is kept in ``info["terminal_observation"]`` so an
    on-policy buffer can bootstrap correctly at episode boundaries.
    """

    def __init__(self, spec: EnvSpec, num_envs: int):
        if num_envs < 1:
            raise ConfigurationError("num_envs must be >= 1")
        self.spec = spec
        self.envs = [env_make(spec.with_seed(spec.seed + i)) for i in range(num_envs)]
        self.num_envs = num_envs
        self.observation_dim = self.envs[0].observation_dim
        self.action_space = self.envs[0].action_space

    def reset(self) -> np.ndarray:
        return np.stack([env.reset() for env in self.envs])

    def current_observations(self) -> np.ndarray:
        return np.stack([env._observe() for env in self.envs])

    def step(self, actions) -> VecStepResult:
        actions = np.asarray(actions)
        if actions.shape[0] != self.num_envs:
            raise ContractViolationError(
                f"expected {self.num_envs} actions, got {actions.shape[0]}"
            )
        observations = np.empty((self.num_envs, self.observation_dim))
        rewards = np.empty(self.num_envs)
        dones = np.zeros(self.num_envs)
        infos = []
        for i, env in enumerate(self.envs):
            result = env.step(actions[i])
            info = dict(result.info)
            if result.done:
                info["terminal_observation"] = result.observation
                observations[i] = env.reset()
                dones[i] = 1.0
            else:
                observations[i] = result.observation
            rewards[i] = result.reward
            infos.append(info)
        return VecStepResult(observations, rewards, dones, infos)

    def get_state(self):
        return [env.get_state() for env in self.envs]

    def set_state(self, state):
        for env, s in zip(self.envs, state):
            env.set_state(s)


def vecenv_make(spec: EnvSpec, num_envs: int) -> VecEnv:
    return VecEnv(spec, num_envs)
