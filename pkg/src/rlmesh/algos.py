"""Algo components: loss and gradient computation for A2C, PPO, DDQN and SAC.

Each ``*_step`` is a pure function (batch, actor parameters) -> flat gradient
plus loss statistics; nothing here mutates the actor. Applying gradients is
the job of :class:`UpdateRule`, which owns the per-group Adam states and the
target-network synchronization so that centralized and decentralized update
modes can run the identical arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .actors import (
    DdqnActor,
    OnPolicyActor,
    SacActor,
    categorical_entropy,
    categorical_entropy_grad,
    categorical_logprob,
    categorical_logprob_grad,
    gaussian_logprob,
    tanh_log_det,
)
from .errors import ConfigurationError, ContractViolationError, NumericFaultError
from .funcapprox import AdamState, Gradient, ParamVector, adam_step, clip_grad_norm

ON_POLICY_ALGOS = ("a2c", "ppo")
OFF_POLICY_ALGOS = ("ddqn", "sac")
ALGO_KINDS = ON_POLICY_ALGOS + OFF_POLICY_ALGOS
DECAY_KINDS = ("none", "linear_to_zero", "step_factors")


@dataclass(frozen=True)
class AlgoConfig:
    kind: str
    gamma: float = 0.99
    lr: float = 2.5e-4  # policy+value lr on-policy; Q-network lr off-policy
    max_grad_norm: float = 0.5
    # on-policy
    entropy_coef: float = 0.01
    value_loss_coef: float = 1.0
    num_epochs: int = 3
    num_mini_batch: int = 4
    clip_param: float = 0.15
    lr_decay: str = "none"
    clip_decay: str = "none"
    decay_milestones: tuple = ()  # ((progress, factor), ...) for step_factors
    # off-policy cadence
    batch_size: int = 256
    start_steps: int = 10_000
    update_every: int = 128
    num_updates: int = 32
    # ddqn
    epsilon_start: float = 1.0
    epsilon_final: float = 0.05
    epsilon_anneal_frac: float = 0.1
    target_sync_period: int = 0  # >0: periodic hard copy; 0: polyak each update
    # sac (and ddqn polyak)
    lr_policy: float = 1e-4
    lr_alpha: float = 1e-5
    polyak_tau: float = 0.995
    target_entropy: float | None = None  # default: -action_dim

    def __post_init__(self):
        if self.kind not in ALGO_KINDS:
            raise ConfigurationError(f"algo kind must be one of {ALGO_KINDS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.clip_param <= 0:
            raise ConfigurationError("clip_param must be > 0")
        if self.entropy_coef < 0 or self.value_loss_coef < 0:
            raise ConfigurationError("loss coefficients must be >= 0")
        if self.lr_decay not in DECAY_KINDS or self.clip_decay not in DECAY_KINDS:
            raise ConfigurationError(f"decay kinds must be one of {DECAY_KINDS}")
        if self.kind == "a2c" and (self.num_epochs != 1 or self.num_mini_batch != 1):
            raise ConfigurationError("a2c is single-pass: num_epochs=num_mini_batch=1")

    @property
    def family(self) -> str:
        return "on_policy" if self.kind in ON_POLICY_ALGOS else "off_policy"

    def epsilon_at(self, progress: float) -> float:
        """Linearly annealed exploration rate for DDQN collection."""
        frac = min(1.0, progress / max(self.epsilon_anneal_frac, 1e-12))
        return self.epsilon_start + frac * (self.epsilon_final - self.epsilon_start)


@dataclass(frozen=True)
class LossStats:
    total_loss: float = 0.0
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    q_loss: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not math.isfinite(value):
                raise NumericFaultError(f"non-finite loss statistic {name}={value}")

    def as_dict(self) -> dict:
        return {
            "total_loss": self.total_loss,
            "policy_loss": self.policy_loss,
            "value_loss": self.value_loss,
            "entropy": self.entropy,
            "clip_fraction": self.clip_fraction,
            "q_loss": self.q_loss,
            "alpha": self.alpha,
        }


def decay_schedule(initial: float, progress: float, kind: str, milestones=()) -> float:
    """Hyperparameter decay as a function of training progress in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ConfigurationError(f"progress must be in [0, 1], got {progress}")
    if kind == "none":
        return initial
    if kind == "linear_to_zero":
        return initial * (1.0 - progress)
    if kind == "step_factors":
        value = initial
        for at, factor in milestones:
            if not 0.0 < factor <= 1.0:
                raise ConfigurationError("step factors must be in (0, 1]")
            if progress >= at:
                value *= factor
        return value
    raise ConfigurationError(f"unknown decay kind {kind!r}")


def _require(batch, keys):
    for key in keys:
        if key not in batch or batch[key] is None:
            raise ContractViolationError(f"batch is missing {key!r}")


def _tagged(values, computed_with_version, data_version) -> Gradient:
    return Gradient(
        values,
        computed_with_version=computed_with_version,
        data_collected_with_version=data_version,
    )


# ---------------------------------------------------------------------------
# on-policy losses
# ---------------------------------------------------------------------------

def _onpolicy_heads(actor: OnPolicyActor, obs, actions):
    heads = actor.policy_heads(obs)
    if actor.dist_kind == "categorical":
        actions = np.asarray(actions, dtype=np.int64)
        log_probs = categorical_logprob(heads, actions)
        entropies = categorical_entropy(heads)
    else:
        actions = np.asarray(actions, dtype=np.float64)
        log_probs = gaussian_logprob(heads, actor.log_std(), actions)
        ent = float(actor.log_std().sum() + 0.5 * heads.shape[1] * (1 + math.log(2 * math.pi)))
        entropies = np.full(heads.shape[0], ent)
    return heads, actions, log_probs, entropies


def _onpolicy_gradient(actor, batch, heads, actions, g_logp, entropy_coef):
    """Assemble the flat gradient from per-sample dLoss/dlogp plus the
    entropy bonus and the squared-error value term."""
    obs = batch["observations"]
    B = obs.shape[0]
    if actor.dist_kind == "categorical":
        up_heads = g_logp[:, None] * categorical_logprob_grad(heads, actions)
        up_heads -= entropy_coef * categorical_entropy_grad(heads)
        grad = actor.policy_backward(obs, up_heads)
    else:
        sigma = np.exp(actor.log_std())
        z = (actions - heads) / sigma
        up_mean = g_logp[:, None] * z / sigma
        grad = actor.policy_backward(obs, up_mean)
        # shared log-std: mean over the batch of dlogp/dlog_std, minus the
        # entropy bonus (dH/dlog_std = 1 per dimension)
        grad[actor.log_std_slice] = (
            g_logp[:, None] * (z * z - 1.0)
        ).mean(axis=0) - entropy_coef

    values = actor.values_of(obs)
    up_value = (2.0 * (values - batch["returns"]))[:, None]
    return grad, values, up_value


def ppo_step(
    batch,
    actor: OnPolicyActor,
    cfg: AlgoConfig,
    clip_param: float | None = None,
    computed_with_version: int = 0,
    data_version: int = 0,
):
    """Clipped-surrogate policy gradient with value and entropy terms."""
    _require(batch, ("observations", "actions", "advantages", "returns", "behavior_log_probs"))
    eps = cfg.clip_param if clip_param is None else clip_param
    obs = batch["observations"]
    adv = batch["advantages"]
    heads, actions, log_probs, entropies = _onpolicy_heads(actor, obs, batch["actions"])

    ratio = np.exp(log_probs - batch["behavior_log_probs"])
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()
    unclipped_active = surr1 <= surr2
    g_logp = -ratio * adv * unclipped_active

    grad, values, up_value = _onpolicy_gradient(
        actor, batch, heads, actions, g_logp, cfg.entropy_coef
    )
    grad += cfg.value_loss_coef * actor.value_backward(obs, up_value)
    value_loss = float(((values - batch["returns"]) ** 2).mean())
    total = float(
        policy_loss + cfg.value_loss_coef * value_loss - cfg.entropy_coef * entropies.mean()
    )

    gradient = clip_grad_norm(
        _tagged(grad, computed_with_version, data_version), cfg.max_grad_norm
    )
    stats = LossStats(
        total_loss=total,
        policy_loss=float(policy_loss),
        value_loss=value_loss,
        entropy=float(entropies.mean()),
        clip_fraction=float((np.abs(ratio - 1.0) > eps).mean()),
    )
    return gradient, stats


def a2c_step(
    batch,
    actor: OnPolicyActor,
    cfg: AlgoConfig,
    computed_with_version: int = 0,
    data_version: int = 0,
):
    """Vanilla policy gradient: -mean(logpi * A) with the same value/entropy terms."""
    _require(batch, ("observations", "actions", "advantages", "returns"))
    obs = batch["observations"]
    adv = batch["advantages"]
    heads, actions, log_probs, entropies = _onpolicy_heads(actor, obs, batch["actions"])

    policy_loss = -(log_probs * adv).mean()
    g_logp = -adv

    grad, values, up_value = _onpolicy_gradient(
        actor, batch, heads, actions, g_logp, cfg.entropy_coef
    )
    grad += cfg.value_loss_coef * actor.value_backward(obs, up_value)
    value_loss = float(((values - batch["returns"]) ** 2).mean())
    total = float(
        policy_loss + cfg.value_loss_coef * value_loss - cfg.entropy_coef * entropies.mean()
    )

    gradient = clip_grad_norm(
        _tagged(grad, computed_with_version, data_version), cfg.max_grad_norm
    )
    stats = LossStats(
        total_loss=total,
        policy_loss=float(policy_loss),
        value_loss=value_loss,
        entropy=float(entropies.mean()),
    )
    return gradient, stats


# ---------------------------------------------------------------------------
# off-policy losses
# ---------------------------------------------------------------------------

def ddqn_step(
    batch,
    actor: DdqnActor,
    cfg: AlgoConfig,
    computed_with_version: int = 0,
    data_version: int = 0,
):
    """Double-DQN regression: online argmax, target evaluation, MSE loss."""
    if not isinstance(actor, DdqnActor):
        raise ContractViolationError("ddqn_step needs a DDQN-mode actor")
    _require(batch, ("observations", "actions", "rewards", "next_observations", "dones"))
    obs = batch["observations"]
    actions = np.asarray(batch["actions"], dtype=np.int64)
    B = obs.shape[0]

    q_all = actor.q_all(obs)
    q_pred = q_all[np.arange(B), actions]
    a_star = actor.q_all(batch["next_observations"]).argmax(axis=1)
    next_q = actor.q_target_all(batch["next_observations"])[np.arange(B), a_star]
    y = batch["rewards"] + cfg.gamma * (1.0 - batch["dones"]) * next_q

    td = q_pred - y
    loss = float((td * td).mean())
    upstream = np.zeros_like(q_all)
    upstream[np.arange(B), actions] = 2.0 * td
    grad = actor.q_backward(obs, upstream)

    gradient = clip_grad_norm(
        _tagged(grad, computed_with_version, data_version), cfg.max_grad_norm
    )
    return gradient, LossStats(total_loss=loss, q_loss=loss)


def sac_step(
    batch,
    actor: SacActor,
    cfg: AlgoConfig,
    rng=None,
    noise_next=None,
    noise_policy=None,
    computed_with_version: int = 0,
    data_version: int = 0,
):
    """All three SAC losses in one flat gradient (critics, policy, alpha).

    Fresh actions are reparameterized (u = mean + std * xi); pass explicit
    noise arrays to freeze the draw, otherwise ``rng`` supplies it. Target
    slices stay zero -- they move only through the polyak sync in
    :class:`UpdateRule`.
    """
    if not isinstance(actor, SacActor):
        raise ContractViolationError("sac_step needs a SAC-mode actor")
    _require(batch, ("observations", "actions", "rewards", "next_observations", "dones"))
    obs = batch["observations"]
    actions = np.asarray(batch["actions"], dtype=np.float64)
    next_obs = batch["next_observations"]
    B = obs.shape[0]
    A = actor.action_dim
    alpha = actor.alpha()
    target_entropy = (
        cfg.target_entropy if cfg.target_entropy is not None else -float(A)
    )

    if noise_next is None:
        noise_next = rng.standard_normal((B, A))
    if noise_policy is None:
        noise_policy = rng.standard_normal((B, A))

    # -- critic regression against the entropy-regularized target ----------
    next_action, next_logp = actor.sample_squashed(next_obs, noise=noise_next)
    q1_t, q2_t = actor.q_target_values(next_obs, next_action)
    y = batch["rewards"] + cfg.gamma * (1.0 - batch["dones"]) * (
        np.minimum(q1_t, q2_t) - alpha * next_logp
    )
    q1, q2 = actor.q_values(obs, actions)
    q_loss = float(((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean())
    grad = actor.q_backward(1, obs, actions, (2.0 * (q1 - y))[:, None])
    grad += actor.q_backward(2, obs, actions, (2.0 * (q2 - y))[:, None])

    # -- reparameterized policy loss ----------------------------------------
    mean, log_std, _ = actor.policy_heads(obs)
    sigma = np.exp(log_std)
    u = mean + sigma * noise_policy
    t = np.tanh(u)
    log_pi = (
        -0.5 * (noise_policy**2).sum(axis=1)
        - log_std.sum(axis=1)
        - 0.5 * A * math.log(2 * math.pi)
        - tanh_log_det(u).sum(axis=1)
    )
    pq1, pq2 = actor.q_values(obs, t)
    q_min = np.minimum(pq1, pq2)
    policy_loss = float((alpha * log_pi - q_min).mean())

    ones = np.ones((B, 1))
    ga1 = actor.q_action_grad(1, obs, t, ones)
    ga2 = actor.q_action_grad(2, obs, t, ones)
    g_action = np.where((pq1 <= pq2)[:, None], ga1, ga2)  # dQmin/da, per sample

    dlogp_du = 2.0 * t  # derivative of -log(1 - tanh(u)^2)
    one_m_t2 = 1.0 - t * t
    # per-sample dL_b/dhead_b; policy_backward averages over the batch
    up_mean = alpha * dlogp_du - g_action * one_m_t2
    up_log_std = (alpha * (dlogp_du * sigma * noise_policy - 1.0)
                  - g_action * one_m_t2 * sigma * noise_policy)
    grad += actor.policy_backward(obs, up_mean, up_log_std)

    # -- temperature ----------------------------------------------------------
    alpha_grad = -float((log_pi + target_entropy).mean())
    grad[actor.log_alpha_slice] = alpha_grad
    alpha_loss = -actor.log_alpha() * float((log_pi + target_entropy).mean())

    stats = LossStats(
        total_loss=q_loss + policy_loss + alpha_loss,
        policy_loss=policy_loss,
        q_loss=q_loss,
        entropy=float((-log_pi).mean()),
        alpha=alpha,
    )
    return _tagged(grad, computed_with_version, data_version), stats


# ---------------------------------------------------------------------------
# gradient application
# ---------------------------------------------------------------------------

def average_gradients(gradients) -> np.ndarray:
    """Elementwise mean in the given (fixed) order; order matters bit-for-bit."""
    stack = np.stack([g.values for g in gradients])
    return stack.mean(axis=0)


class UpdateRule:
    """Owns optimizer state and applies flat gradients to a flat actor vector.

    One ``apply`` = one Adam step per parameter group (with its own learning
    rate and optional decay), then the target-network sync, then a version
    bump. Replicas constructed from the same actor/config produce bit-equal
    results for equal inputs, which is what decentralized updates rely on.
    """

    def __init__(self, actor, cfg: AlgoConfig):
        self.cfg = cfg
        self.groups = []
        for name, sl in actor.param_groups():
            lr = self._group_lr(name)
            self.groups.append([name, sl, lr, AdamState.zeros(sl.stop - sl.start)])
        self.target_pairs = actor.target_pairs()
        self.applies = 0

    def _group_lr(self, name: str) -> float:
        if name == "policy" and self.cfg.kind == "sac":
            return self.cfg.lr_policy
        if name == "alpha":
            return self.cfg.lr_alpha
        return self.cfg.lr

    def apply(self, params: ParamVector, grad_values: np.ndarray, progress: float = 0.0) -> ParamVector:
        if grad_values.shape != params.values.shape:
            raise ContractViolationError("gradient length does not match parameters")
        new_values = params.values.copy()
        for group in self.groups:
            name, sl, base_lr, state = group
            lr = decay_schedule(base_lr, progress, self.cfg.lr_decay, self.cfg.decay_milestones)
            if lr <= 0.0:
                lr = 1e-12  # linear decay reaches zero exactly at the end
            sub = ParamVector(new_values[sl])
            updated, new_state = adam_step(sub, Gradient(grad_values[sl]), state, lr)
            new_values[sl] = updated.values
            group[3] = new_state
        self.applies += 1
        if self.target_pairs:
            if self.cfg.kind == "ddqn" and self.cfg.target_sync_period > 0:
                if self.applies % self.cfg.target_sync_period == 0:
                    for online, target in self.target_pairs:
                        new_values[target] = new_values[online]
            else:
                tau = self.cfg.polyak_tau
                for online, target in self.target_pairs:
                    new_values[target] = tau * new_values[target] + (1.0 - tau) * new_values[online]
        return params.with_values(new_values, params.version + 1)

    def get_state(self) -> dict:
        return {
            "applies": self.applies,
            "groups": [
                {
                    "name": name,
                    "first_moment": state.first_moment.copy(),
                    "second_moment": state.second_moment.copy(),
                    "step_count": state.step_count,
                }
                for name, _, __, state in self.groups
            ],
        }

    def set_state(self, state: dict) -> None:
        self.applies = int(state["applies"])
        if len(state["groups"]) != len(self.groups):
            raise ContractViolationError("optimizer state does not match this update rule")
        for group, saved in zip(self.groups, state["groups"]):
            if group[0] != saved["name"]:
                raise ContractViolationError("optimizer group mismatch")
            group[3] = AdamState(
                saved["first_moment"], saved["second_moment"], int(saved["step_count"])
            )
