"""Differentiable multilayer perceptrons over flat float64 parameter vectors.

Everything here is a pure function of value types: parameters live in a flat
vector, gradients come back as flat vectors of the same length, and the
backward pass recomputes its own forward activations so there is no cached
state to go stale. All numerics are 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractViolationError, NumericFaultError

ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("none", "tanh")

# Orthogonal-init gain per hidden activation.
_GAINS = {"tanh": 5.0 / 3.0, "relu": np.sqrt(2.0)}


@dataclass(frozen=True)
class MLPSpec:
    """Topology of a fully connected network: sizes plus activation choices."""

    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    output_activation: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all layer dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(
                f"output_activation must be one of {OUTPUT_ACTIVATIONS}, "
                f"got {self.output_activation!r}"
            )

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = self.layer_dims
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(fan_out * (fan_in + 1) for fan_out, fan_in in self.layer_shapes())


def _freeze(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus a monotone version counter."""

    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.version < 0:
            raise ContractViolationError("version must be non-negative")

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values, version: int | None = None) -> "ParamVector":
        return ParamVector(values, self.version if version is None else version)


@dataclass(frozen=True)
class Gradient:
    """Flat gradient with the policy versions it was computed from."""

    values: np.ndarray
    computed_with_version: int = 0
    data_collected_with_version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "first_moment", _freeze(self.first_moment))
        object.__setattr__(self, "second_moment", _freeze(self.second_moment))

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def _unpack(spec: MLPSpec, values: np.ndarray):
    """Yield (W, b) views into the flat vector, one pair per layer."""
    offset = 0
    for fan_out, fan_in in spec.layer_shapes():
        w = values[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = values[offset : offset + fan_out]
        offset += fan_out
        yield w, b


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((rows, cols) if rows >= cols else (cols, rows))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols])


def init_params(spec: MLPSpec, seed: int, output_gain: float = 1.0) -> ParamVector:
    """Seeded orthogonal weights (gain per activation), zero biases."""
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    values = np.zeros(spec.param_count())
    offset = 0
    hidden_gain = _GAINS[spec.activation]
    for i, (fan_out, fan_in) in enumerate(shapes):
        gain = output_gain if i == len(shapes) - 1 else hidden_gain
        w = gain * _orthogonal(rng, fan_out, fan_in)
        values[offset : offset + fan_out * fan_in] = w.ravel()
        offset += fan_out * fan_in + fan_out  # biases stay zero
    return ParamVector(values, version=0)


def _values_of(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def _check_params(spec: MLPSpec, values: np.ndarray):
    if values.shape != (spec.param_count(),):
        raise ConfigurationError(
            f"parameter vector has length {values.shape}, spec needs ({spec.param_count()},)"
        )


def _as_batch(name: str, x, dim: int):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigurationError(
            f"{name} must have trailing dimension {dim}, got shape {x.shape}"
        )
    return x, squeeze


def _apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(kind: str, post: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - post * post
    return (post > 0.0).astype(np.float64)


def _forward_cached(spec: MLPSpec, values: np.ndarray, x: np.ndarray):
    layers = list(_unpack(spec, values))
    acts = [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if i < len(layers) - 1:
            a = _apply_activation(spec.activation, z)
        elif spec.output_activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
        acts.append(a)
    return layers, acts


def mlp_forward(spec: MLPSpec, params, x) -> np.ndarray:
    """Deterministic batched forward pass; 1-D input gives 1-D output."""
    values = _values_of(params)
    _check_params(spec, values)
    xb, squeeze = _as_batch("input", x, spec.input_dim)
    _, acts = _forward_cached(spec, values, xb)
    out = acts[-1]
    return out[0] if squeeze else out


def mlp_backward(
    spec: MLPSpec,
    params,
    x,
    upstream,
    return_input_grad: bool = False,
):
    """Parameter gradient of ``mean_b(upstream_b . output_b)`` by reverse mode.

    ``upstream`` holds per-sample gradients of a scalar loss w.r.t. the
    network output. The returned :class:`Gradient` is averaged over the
    batch; the optional input gradient is per-sample and unaveraged (it is
    the raw Jacobian-transpose product, for chaining through inputs).
    """
    values = _values_of(params)
    _check_params(spec, values)
    xb, _ = _as_batch("input", x, spec.input_dim)
    ub, _ = _as_batch("upstream", upstream, spec.output_dim)
    if ub.shape[0] != xb.shape[0]:
        raise ContractViolationError(
            f"upstream batch {ub.shape[0]} does not match input batch {xb.shape[0]}"
        )
    layers, acts = _forward_cached(spec, values, xb)
    batch = xb.shape[0]

    grad = np.zeros_like(values)
    grad_views = list(_unpack(spec, grad))

    d = ub
    if spec.output_activation == "tanh":
        d = d * (1.0 - acts[-1] * acts[-1])
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_views[i]
        gw += d.T @ acts[i] / batch
        gb += d.mean(axis=0)
        d = d @ w
        if i > 0:
            d = d * _activation_grad(spec.activation, acts[i])

    version = params.version if isinstance(params, ParamVector) else 0
    result = Gradient(grad, computed_with_version=version, data_collected_with_version=version)
    if return_input_grad:
        return result, d
    return result


def adam_step(
    params: ParamVector,
    grad: Gradient,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """Bias-corrected Adam update; bumps the parameter version by one."""
    if lr <= 0.0:
        raise ConfigurationError(f"lr must be > 0, got {lr}")
    g = grad.values
    if g.shape != params.values.shape:
        raise ContractViolationError(
            f"gradient length {g.shape} does not match parameters {params.values.shape}"
        )
    if state.first_moment.shape != params.values.shape:
        raise ContractViolationError("optimizer state length does not match parameters")
    if not np.all(np.isfinite(g)):
        raise NumericFaultError("non-finite gradient rejected by adam_step")

    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * g
    v = beta2 * state.second_moment + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(new_values, params.version + 1), AdamState(m, v, t)


def clip_grad_norm(grad: Gradient, max_norm: float) -> Gradient:
    """Rescale to L2 norm ``max_norm`` when exceeded; zero passes through."""
    if max_norm <= 0.0:
        raise ConfigurationError(f"max_norm must be > 0, got {max_norm}")
    norm = float(np.linalg.norm(grad.values))
    if norm <= max_norm:
        return grad
    return replace(grad, values=grad.values * (max_norm / norm))


def polyak_update(target, source, tau: float):
    """Blend ``tau * target + (1 - tau) * source`` elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must be in [0, 1], got {tau}")
    tv = _values_of(target)
    sv = _values_of(source)
    if tv.shape != sv.shape:
        raise ContractViolationError(
            f"length mismatch: target {tv.shape} vs source {sv.shape}"
        )
    blended = tau * tv + (1.0 - tau) * sv
    if isinstance(target, ParamVector):
        return target.with_values(blended)
    return blended
