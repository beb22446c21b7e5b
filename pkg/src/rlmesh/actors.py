"""Actor components: policy/value/Q bundles over one flat parameter vector.

An actor owns one or more MLPs packed into a single flat float64 vector so
the whole model can be shipped between workers as one versioned array. The
distribution heads (categorical, diagonal gaussian, tanh-squashed gaussian)
are implemented with analytic log-probabilities, entropies and gradients;
the loss modules chain those through :func:`rlmesh.funcapprox.mlp_backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .environments import ActionSpace
from .errors import ConfigurationError, ContractViolationError, NumericFaultError
from .funcapprox import (
    MLPSpec,
    ParamVector,
    init_params,
    mlp_backward,
    mlp_forward,
)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


def tanh_log_det(u):
    """log(1 - tanh(u)^2), computed in closed form so it never hits log(0).

    Uses 1 - tanh(u)^2 = sech(u)^2 = 4 / (e^u + e^-u)^2, i.e.
    2 * (log 2 - u - softplus(-2u)), which is exact and stable for any u.
    """
    return 2.0 * (_LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


# ---------------------------------------------------------------------------
# distribution heads
# ---------------------------------------------------------------------------

def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def categorical_logprob(logits, actions):
    logp = log_softmax(logits)
    return logp[np.arange(logits.shape[0]), actions]


def categorical_entropy(logits):
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=1)


def categorical_sample(logits, rng):
    probs = np.exp(log_softmax(logits))
    cum = np.cumsum(probs, axis=1)
    u = rng.random(logits.shape[0])
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


def categorical_logprob_grad(logits, actions):
    """d log p(a) / d logits, per sample."""
    probs = np.exp(log_softmax(logits))
    grad = -probs
    grad[np.arange(logits.shape[0]), actions] += 1.0
    return grad


def categorical_entropy_grad(logits):
    """d H / d logits, per sample."""
    logp = log_softmax(logits)
    probs = np.exp(logp)
    ent = -(probs * logp).sum(axis=1)
    return -probs * (logp + ent[:, None])


def gaussian_logprob(mean, log_std, actions):
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * mean.shape[1] * _LOG_2PI


def gaussian_entropy(log_std, dim):
    return float(log_std.sum() + 0.5 * dim * (1.0 + _LOG_2PI))


# ---------------------------------------------------------------------------
# configuration and factories
# ---------------------------------------------------------------------------

ACTOR_KINDS = ("on_policy", "sac", "ddqn")


@dataclass(frozen=True)
class ActorConfig:
    kind: str
    obs_dim: int
    action_space: ActionSpace
    hidden_layers: tuple = (64, 64)
    activation: str = "tanh"
    policy_output_gain: float = 0.01
    log_std_init: float = 0.0
    initial_alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        if self.kind not in ACTOR_KINDS:
            raise ConfigurationError(f"actor kind must be one of {ACTOR_KINDS}")
        if self.obs_dim < 1:
            raise ConfigurationError("obs_dim must be >= 1")
        if self.kind == "sac" and self.action_space.kind != "continuous":
            raise ConfigurationError("sac actors need a continuous action space")
        if self.kind == "ddqn" and self.action_space.kind != "discrete":
            raise ConfigurationError("ddqn actors need a discrete action space")
        if self.kind == "sac" and self.initial_alpha <= 0:
            raise ConfigurationError("initial_alpha must be > 0")


@dataclass(frozen=True)
class ActorFactory:
    """Pure constructor: every build() returns bit-identical initial parameters."""

    config: ActorConfig
    seed: int

    def build(self):
        if self.config.kind == "on_policy":
            return OnPolicyActor(self.config, self.seed)
        if self.config.kind == "sac":
            return SacActor(self.config, self.seed)
        return DdqnActor(self.config, self.seed)


def create_factory(config: ActorConfig, seed: int) -> ActorFactory:
    return ActorFactory(config, int(seed))


@dataclass
class ActionRecord:
    action: np.ndarray
    log_prob: np.ndarray
    value_estimate: np.ndarray | None
    entropy: np.ndarray


def _check_obs(obs, dim):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.shape[1] != dim:
        raise ContractViolationError(f"observation dim {obs.shape[1]} != {dim}")
    if not np.all(np.isfinite(obs)):
        raise NumericFaultError("non-finite observation passed to actor")
    return obs


def _child_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


class _FlatActor:
    """Shared plumbing for actors backed by one flat parameter vector."""

    params: ParamVector

    def set_params(self, params: ParamVector):
        if len(params) != len(self.params):
            raise ContractViolationError(
                f"parameter length {len(params)} != {len(self.params)}"
            )
        self.params = params

    def num_params(self) -> int:
        return len(self.params)

    def _seg(self, sl: slice) -> np.ndarray:
        return self.params.values[sl]


class OnPolicyActor(_FlatActor):
    """Separate policy and value networks plus a distribution head.

    Categorical head for discrete action spaces; diagonal gaussian with a
    state-independent learnable log-std for continuous ones.
    """

    def __init__(self, config: ActorConfig, seed: int):
        self.config = config
        space = config.action_space
        self.dist_kind = "categorical" if space.kind == "discrete" else "diag_gaussian"
        self.action_dim = space.n if space.kind == "discrete" else space.dim
        head_dim = space.n if space.kind == "discrete" else space.dim
        self.policy_spec = MLPSpec(
            config.obs_dim, config.hidden_layers, head_dim, config.activation
        )
        self.value_spec = MLPSpec(
            config.obs_dim, config.hidden_layers, 1, config.activation
        )
        s_pol, s_val = _child_seeds(seed, 2)
        pol = init_params(self.policy_spec, s_pol, output_gain=config.policy_output_gain)
        val = init_params(self.value_spec, s_val, output_gain=1.0)
        n_pol, n_val = len(pol), len(val)
        self.policy_slice = slice(0, n_pol)
        self.value_slice = slice(n_pol, n_pol + n_val)
        parts = [pol.values, val.values]
        if self.dist_kind == "diag_gaussian":
            self.log_std_slice = slice(n_pol + n_val, n_pol + n_val + space.dim)
            parts.append(np.full(space.dim, config.log_std_init))
        else:
            self.log_std_slice = None
        self.params = ParamVector(np.concatenate(parts), version=0)

    # -- forward ---------------------------------------------------------
    def policy_heads(self, obs) -> np.ndarray:
        return mlp_forward(self.policy_spec, self._seg(self.policy_slice), obs)

    def values_of(self, obs) -> np.ndarray:
        return mlp_forward(self.value_spec, self._seg(self.value_slice), obs)[:, 0]

    def log_std(self) -> np.ndarray:
        return self._seg(self.log_std_slice)

    def act(self, obs, rng, deterministic: bool = False) -> ActionRecord:
        obs = _check_obs(obs, self.config.obs_dim)
        heads = self.policy_heads(obs)
        values = self.values_of(obs)
        if self.dist_kind == "categorical":
            if deterministic:
                actions = heads.argmax(axis=1)
            else:
                actions = categorical_sample(heads, rng)
            log_probs = categorical_logprob(heads, actions)
            entropies = categorical_entropy(heads)
        else:
            log_std = self.log_std()
            if deterministic:
                actions = heads.copy()
            else:
                actions = heads + np.exp(log_std) * rng.standard_normal(heads.shape)
            log_probs = gaussian_logprob(heads, log_std, actions)
            entropies = np.full(obs.shape[0], gaussian_entropy(log_std, heads.shape[1]))
        return ActionRecord(actions, log_probs, values, entropies)

    def evaluate_actions(self, obs, actions):
        obs = _check_obs(obs, self.config.obs_dim)
        heads = self.policy_heads(obs)
        values = self.values_of(obs)
        if self.dist_kind == "categorical":
            actions = np.asarray(actions, dtype=np.int64)
            if actions.min() < 0 or actions.max() >= self.action_dim:
                raise ContractViolationError("action outside the discrete space")
            log_probs = categorical_logprob(heads, actions)
            entropies = categorical_entropy(heads)
        else:
            actions = np.asarray(actions, dtype=np.float64)
            log_std = self.log_std()
            log_probs = gaussian_logprob(heads, log_std, actions)
            entropies = np.full(obs.shape[0], gaussian_entropy(log_std, heads.shape[1]))
        return log_probs, entropies, values

    # -- gradient assembly -------------------------------------------------
    def policy_backward(self, obs, upstream) -> np.ndarray:
        grad = np.zeros(self.num_params())
        g = mlp_backward(self.policy_spec, self._seg(self.policy_slice), obs, upstream)
        grad[self.policy_slice] = g.values
        return grad

    def value_backward(self, obs, upstream) -> np.ndarray:
        grad = np.zeros(self.num_params())
        g = mlp_backward(self.value_spec, self._seg(self.value_slice), obs, upstream)
        grad[self.value_slice] = g.values
        return grad

    def param_groups(self):
        return [("all", slice(0, self.num_params()))]

    def target_pairs(self):
        return []


class SacActor(_FlatActor):
    """Squashed-gaussian policy, twin Q critics, their targets, and log-alpha."""

    def __init__(self, config: ActorConfig, seed: int):
        self.config = config
        space = config.action_space
        self.action_dim = space.dim
        self.action_low = np.asarray(space.low, dtype=np.float64)
        self.action_high = np.asarray(space.high, dtype=np.float64)
        self.policy_spec = MLPSpec(
            config.obs_dim, config.hidden_layers, 2 * space.dim, config.activation
        )
        self.q_spec = MLPSpec(
            config.obs_dim + space.dim, config.hidden_layers, 1, config.activation
        )
        s_pol, s_q1, s_q2 = _child_seeds(seed, 3)
        pol = init_params(self.policy_spec, s_pol, output_gain=config.policy_output_gain)
        q1 = init_params(self.q_spec, s_q1, output_gain=1.0)
        q2 = init_params(self.q_spec, s_q2, output_gain=1.0)
        n_pol, n_q = len(pol), len(q1)
        offset = 0
        self.policy_slice = slice(offset, offset + n_pol); offset += n_pol
        self.q1_slice = slice(offset, offset + n_q); offset += n_q
        self.q2_slice = slice(offset, offset + n_q); offset += n_q
        self.q1_target_slice = slice(offset, offset + n_q); offset += n_q
        self.q2_target_slice = slice(offset, offset + n_q); offset += n_q
        self.log_alpha_slice = slice(offset, offset + 1); offset += 1
        values = np.concatenate(
            [pol.values, q1.values, q2.values, q1.values, q2.values,
             [math.log(config.initial_alpha)]]
        )
        self.params = ParamVector(values, version=0)

    # -- policy ------------------------------------------------------------
    def policy_heads(self, obs):
        """Returns (mean, clamped log_std), each (B, action_dim)."""
        out = mlp_forward(self.policy_spec, self._seg(self.policy_slice), obs)
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], LOG_STD_MIN, LOG_STD_MAX)
        raw_log_std = out[:, self.action_dim :]
        return mean, log_std, raw_log_std

    def sample_squashed(self, obs, rng=None, deterministic=False, noise=None):
        """Sample a tanh-squashed action with its log-probability.

        ``noise`` fixes the reparameterization draw explicitly (the SAC loss
        uses this to keep gradients differentiable through the sample).
        """
        obs = _check_obs(obs, self.config.obs_dim)
        mean, log_std, _ = self.policy_heads(obs)
        if deterministic:
            xi = np.zeros_like(mean)
        elif noise is not None:
            xi = noise
        else:
            xi = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * xi
        action = np.tanh(u)
        log_prob = (
            -0.5 * (xi * xi).sum(axis=1)
            - log_std.sum(axis=1)
            - 0.5 * self.action_dim * _LOG_2PI
            - tanh_log_det(u).sum(axis=1)
        )
        return action, log_prob

    def scale_action(self, action):
        """Map a tanh-space action in [-1, 1] to the environment's bounds."""
        return self.action_low + (action + 1.0) * 0.5 * (self.action_high - self.action_low)

    # -- critics -------------------------------------------------------------
    def _q_forward(self, sl, obs, actions):
        x = np.concatenate([obs, actions], axis=1)
        return mlp_forward(self.q_spec, self._seg(sl), x)[:, 0]

    def q_values(self, obs, actions):
        obs = _check_obs(obs, self.config.obs_dim)
        actions = np.asarray(actions, dtype=np.float64)
        return self._q_forward(self.q1_slice, obs, actions), self._q_forward(
            self.q2_slice, obs, actions
        )

    def q_target_values(self, obs, actions):
        obs = _check_obs(obs, self.config.obs_dim)
        actions = np.asarray(actions, dtype=np.float64)
        return self._q_forward(self.q1_target_slice, obs, actions), self._q_forward(
            self.q2_target_slice, obs, actions
        )

    def q_all(self, obs):
        raise ContractViolationError("q_all is the DDQN-mode API; SAC critics take actions")

    def log_alpha(self) -> float:
        return float(self._seg(self.log_alpha_slice)[0])

    def alpha(self) -> float:
        return math.exp(self.log_alpha())

    # -- gradient assembly ----------------------------------------------------
    def policy_backward(self, obs, up_mean, up_log_std) -> np.ndarray:
        """Backward through the policy trunk given head gradients.

        The log-std head is clamped, so gradients are zeroed where the raw
        output sits outside [LOG_STD_MIN, LOG_STD_MAX].
        """
        _, __, raw = self.policy_heads(obs)
        mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
        upstream = np.concatenate([up_mean, up_log_std * mask], axis=1)
        grad = np.zeros(self.num_params())
        g = mlp_backward(self.policy_spec, self._seg(self.policy_slice), obs, upstream)
        grad[self.policy_slice] = g.values
        return grad

    def q_backward(self, which, obs, actions, upstream, return_action_grad=False):
        sl = self.q1_slice if which == 1 else self.q2_slice
        x = np.concatenate([obs, actions], axis=1)
        grad = np.zeros(self.num_params())
        if return_action_grad:
            g, xgrad = mlp_backward(
                self.q_spec, self._seg(sl), x, upstream, return_input_grad=True
            )
            grad[sl] = g.values
            return grad, xgrad[:, self.config.obs_dim :]
        g = mlp_backward(self.q_spec, self._seg(sl), x, upstream)
        grad[sl] = g.values
        return grad

    def q_action_grad(self, which, obs, actions, upstream):
        """Per-sample dQ/da without accumulating parameter gradients."""
        sl = self.q1_slice if which == 1 else self.q2_slice
        x = np.concatenate([obs, actions], axis=1)
        _, xgrad = mlp_backward(
            self.q_spec, self._seg(sl), x, upstream, return_input_grad=True
        )
        return xgrad[:, self.config.obs_dim :]

    def param_groups(self):
        return [
            ("policy", self.policy_slice),
            ("critics", slice(self.q1_slice.start, self.q2_slice.stop)),
            ("alpha", self.log_alpha_slice),
        ]

    def target_pairs(self):
        return [
            (self.q1_slice, self.q1_target_slice),
            (self.q2_slice, self.q2_target_slice),
        ]


class DdqnActor(_FlatActor):
    """Single Q network over discrete actions plus a target copy."""

    def __init__(self, config: ActorConfig, seed: int):
        self.config = config
        self.n_actions = config.action_space.n
        self.q_spec = MLPSpec(
            config.obs_dim, config.hidden_layers, self.n_actions, config.activation
        )
        (s_q,) = _child_seeds(seed, 1)
        q = init_params(self.q_spec, s_q, output_gain=1.0)
        n_q = len(q)
        self.q_slice = slice(0, n_q)
        self.q_target_slice = slice(n_q, 2 * n_q)
        self.params = ParamVector(np.concatenate([q.values, q.values]), version=0)

    def q_all(self, obs):
        obs = _check_obs(obs, self.config.obs_dim)
        return mlp_forward(self.q_spec, self._seg(self.q_slice), obs)

    def q_target_all(self, obs):
        obs = _check_obs(obs, self.config.obs_dim)
        return mlp_forward(self.q_spec, self._seg(self.q_target_slice), obs)

    def q_values(self, obs, actions):
        raise ContractViolationError(
            "q_values(obs, actions) is the twin-critic API; DDQN mode exposes q_all(obs)"
        )

    def act(self, obs, rng, epsilon: float = 0.0):
        """Epsilon-greedy action selection for collection."""
        obs = _check_obs(obs, self.config.obs_dim)
        greedy = self.q_all(obs).argmax(axis=1)
        if epsilon > 0.0:
            explore = rng.random(obs.shape[0]) < epsilon
            randoms = rng.integers(0, self.n_actions, size=obs.shape[0])
            return np.where(explore, randoms, greedy)
        return greedy

    def q_backward(self, obs, upstream) -> np.ndarray:
        grad = np.zeros(self.num_params())
        g = mlp_backward(self.q_spec, self._seg(self.q_slice), obs, upstream)
        grad[self.q_slice] = g.values
        return grad

    def param_groups(self):
        return [("q", self.q_slice)]

    def target_pairs(self):
        return [(self.q_slice, self.q_target_slice)]


def params_fingerprint(params: ParamVector) -> str:
    """Stable hash of a parameter vector, for factory-identity checks."""
    import hashlib

    return hashlib.sha256(params.values.tobytes()).hexdigest()
