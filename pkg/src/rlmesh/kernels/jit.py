"""Numba-compiled twins of the recursion kernels.

Same arithmetic, same order of operations as the reference module; the inner
loops are written element-wise because that is what numba compiles well.
``cache=True`` keeps compilation a one-time cost per machine.
"""

from __future__ import annotations

from numba import njit


@njit(cache=True)
def discounted_returns(rewards, dones, bootstrap, gamma, out):
    T, N = rewards.shape
    for n in range(N):
        running = bootstrap[n]
        for t in range(T - 1, -1, -1):
            running = rewards[t, n] + gamma * (1.0 - dones[t, n]) * running
            out[t, n] = running


@njit(cache=True)
def gae_advantages(rewards, values, dones, bootstrap, gamma, lam, out):
    T, N = rewards.shape
    for n in range(N):
        acc = 0.0
        for t in range(T - 1, -1, -1):
            next_value = bootstrap[n] if t == T - 1 else values[t + 1, n]
            nonterminal = 1.0 - dones[t, n]
            delta = rewards[t, n] + gamma * nonterminal * next_value - values[t, n]
            acc = delta + gamma * lam * nonterminal * acc
            out[t, n] = acc


@njit(cache=True)
def vtrace_corrections(
    rewards, values, dones, bootstrap, rhos, cs, gamma, out_vs, out_adv
):
    T, N = rewards.shape
    for n in range(N):
        acc = 0.0
        for t in range(T - 1, -1, -1):
            next_value = bootstrap[n] if t == T - 1 else values[t + 1, n]
            discount = gamma * (1.0 - dones[t, n])
            delta = rhos[t, n] * (rewards[t, n] + discount * next_value - values[t, n])
            acc = delta + discount * cs[t, n] * acc
            out_vs[t, n] = values[t, n] + acc
        for t in range(T):
            next_vs = bootstrap[n] if t == T - 1 else out_vs[t + 1, n]
            discount = gamma * (1.0 - dones[t, n])
            out_adv[t, n] = rhos[t, n] * (
                rewards[t, n] + discount * next_vs - values[t, n]
            )
