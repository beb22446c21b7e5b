"""Return/advantage recursion kernels with backend dispatch.

Public functions take ``(T, N)`` float arrays (time-major, one column per
environment) plus a length-``N`` bootstrap vector and return freshly
allocated outputs. The active backend (see :mod:`rlmesh.backend`) decides
whether the numba or the pure-numpy implementation runs.
"""

from __future__ import annotations

import numpy as np

from .. import backend
from ..errors import ContractViolationError
from . import reference

_jit_module = None


def _impl():
    global _jit_module
    if backend.active_backend() == "numpy":
        return reference
    if _jit_module is None:
        from . import jit

        _jit_module = jit
    return _jit_module


def _as_tn(name, arr, T=None, N=None):
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D (T, N), got shape {out.shape}")
    if T is not None and out.shape != (T, N):
        raise ContractViolationError(
            f"{name} shape {out.shape} does not match expected ({T}, {N})"
        )
    return out


def discounted_returns(rewards, dones, bootstrap, gamma):
    """R_t = r_t + gamma * (1 - done_t) * R_{t+1}, seeded by the bootstrap value."""
    rewards = _as_tn("rewards", rewards)
    T, N = rewards.shape
    dones = _as_tn("dones", dones, T, N)
    bootstrap = np.ascontiguousarray(bootstrap, dtype=np.float64)
    out = np.empty((T, N), dtype=np.float64)
    _impl().discounted_returns(rewards, dones, bootstrap, float(gamma), out)
    return out


def gae_advantages(rewards, values, dones, bootstrap, gamma, lam):
    """Exponentially weighted TD-residual advantages over a rollout."""
    rewards = _as_tn("rewards", rewards)
    T, N = rewards.shape
    values = _as_tn("values", values, T, N)
    dones = _as_tn("dones", dones, T, N)
    bootstrap = np.ascontiguousarray(bootstrap, dtype=np.float64)
    out = np.empty((T, N), dtype=np.float64)
    _impl().gae_advantages(
        rewards, values, dones, bootstrap, float(gamma), float(lam), out
    )
    return out


def vtrace_corrections(rewards, values, dones, bootstrap, rhos, cs, gamma):
    """Truncated importance-weighted value targets and policy advantages.

    Returns ``(vs, pg_advantages)``; ``rhos``/``cs`` are the already-clipped
    importance ratios.
    """
    rewards = _as_tn("rewards", rewards)
    T, N = rewards.shape
    values = _as_tn("values", values, T, N)
    dones = _as_tn("dones", dones, T, N)
    rhos = _as_tn("rhos", rhos, T, N)
    cs = _as_tn("cs", cs, T, N)
    bootstrap = np.ascontiguousarray(bootstrap, dtype=np.float64)
    out_vs = np.empty((T, N), dtype=np.float64)
    out_adv = np.empty((T, N), dtype=np.float64)
    _impl().vtrace_corrections(
        rewards, values, dones, bootstrap, rhos, cs, float(gamma), out_vs, out_adv
    )
    return out_vs, out_adv
