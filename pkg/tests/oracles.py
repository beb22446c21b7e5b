"""Independent brute-force oracles used across the test suite.

Everything here is deliberately written as explicit double loops or
per-layer matrix products, independent of the library's recursion kernels
and backward passes.
"""

from __future__ import annotations

import numpy as np


def discounted_returns_bruteforce(rewards, dones, bootstrap, gamma):
    T, N = rewards.shape
    out = np.zeros((T, N))
    for n in range(N):
        for t in range(T):
            acc = 0.0
            coef = 1.0
            for k in range(t, T):
                acc += coef * rewards[k, n]
                coef *= gamma * (1.0 - dones[k, n])
                if coef == 0.0:
                    break
            acc += coef * bootstrap[n]
            out[t, n] = acc
    return out


def gae_bruteforce(rewards, values, dones, bootstrap, gamma, lam):
    T, N = rewards.shape
    adv = np.zeros((T, N))
    for n in range(N):
        deltas = np.zeros(T)
        for t in range(T):
            next_v = bootstrap[n] if t == T - 1 else values[t + 1, n]
            deltas[t] = rewards[t, n] + gamma * (1.0 - dones[t, n]) * next_v - values[t, n]
        for t in range(T):
            acc = 0.0
            coef = 1.0
            for k in range(t, T):
                acc += coef * deltas[k]
                coef *= gamma * lam * (1.0 - dones[k, n])
                if coef == 0.0:
                    break
            adv[t, n] = acc
    return adv


def vtrace_bruteforce(rewards, values, dones, bootstrap, rhos, cs, gamma):
    T, N = rewards.shape
    vs = np.zeros((T, N))
    adv = np.zeros((T, N))
    for n in range(N):
        for s in range(T):
            acc = 0.0
            coef = 1.0
            for t in range(s, T):
                next_v = bootstrap[n] if t == T - 1 else values[t + 1, n]
                delta = rhos[t, n] * (
                    rewards[t, n] + gamma * (1.0 - dones[t, n]) * next_v - values[t, n]
                )
                acc += coef * delta
                coef *= gamma * (1.0 - dones[t, n]) * cs[t, n]
                if coef == 0.0:
                    break
            vs[s, n] = values[s, n] + acc
        for s in range(T):
            next_vs = bootstrap[n] if s == T - 1 else vs[s + 1, n]
            adv[s, n] = rhos[s, n] * (
                rewards[s, n] + gamma * (1.0 - dones[s, n]) * next_vs - values[s, n]
            )
    return vs, adv


def mlp_forward_bruteforce(spec, flat, x):
    """Explicit per-layer matrix products, unpacking the flat vector by hand."""
    dims = [spec.input_dim, *spec.hidden_layers, spec.output_dim]
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    offset = 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = flat[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = flat[offset : offset + fan_out]
        offset += fan_out
        z = a @ w.T + b
        last = i == len(dims) - 2
        if not last:
            a = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = np.tanh(z) if spec.output_activation == "tanh" else z
    return a


def central_differences(loss_fn, theta, step=1e-6):
    """Gradient of ``loss_fn`` by central finite differences, one coordinate at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        hi = theta.copy()
        lo = theta.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (loss_fn(hi) - loss_fn(lo)) / (2.0 * step)
    return grad


def assert_gradients_match(analytic, numeric, rtol=1e-5, floor=1e-6, atol=1e-10):
    """Per-coordinate relative comparison with an absolute floor for tiny values."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    tiny = scale < floor
    diff = np.abs(analytic - numeric)
    if tiny.any():
        bad = diff[tiny] > atol
        assert not bad.any(), (
            f"{int(bad.sum())} near-zero coordinates differ by more than {atol}: "
            f"max {diff[tiny].max():.3e}"
        )
    rest = ~tiny
    if rest.any():
        rel = diff[rest] / scale[rest]
        assert rel.max() <= rtol, (
            f"max relative gradient error {rel.max():.3e} exceeds {rtol:.1e} "
            f"(worst coordinate {int(np.flatnonzero(rest)[np.argmax(rel)])})"
        )
