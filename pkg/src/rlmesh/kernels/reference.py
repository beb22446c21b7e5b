"""Pure-numpy reference implementations of the return/advantage recursions.

These loop over the time axis only; the environment axis stays vectorized.
The numba twins in :mod:`rlmesh.kernels.jit` implement the identical
arithmetic in the identical order.
"""

from __future__ import annotations

import numpy as np


def discounted_returns(rewards, dones, bootstrap, gamma, out):
    T = rewards.shape[0]
    running = bootstrap.copy()
    for t in range(T - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        out[t] = running


def gae_advantages(rewards, values, dones, bootstrap, gamma, lam, out):
    T = rewards.shape[0]
    acc = np.zeros_like(bootstrap)
    for t in range(T - 1, -1, -1):
        next_values = bootstrap if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterminal * next_values - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        out[t] = acc


def vtrace_corrections(
    rewards, values, dones, bootstrap, rhos, cs, gamma, out_vs, out_adv
):
    T = rewards.shape[0]
    acc = np.zeros_like(bootstrap)
    for t in range(T - 1, -1, -1):
        next_values = bootstrap if t == T - 1 else values[t + 1]
        discount = gamma * (1.0 - dones[t])
        delta = rhos[t] * (rewards[t] + discount * next_values - values[t])
        acc = delta + discount * cs[t] * acc
        out_vs[t] = values[t] + acc
    for t in range(T):
        next_vs = bootstrap if t == T - 1 else out_vs[t + 1]
        discount = gamma * (1.0 - dones[t])
        out_adv[t] = rhos[t] * (rewards[t] + discount * next_vs - values[t])
