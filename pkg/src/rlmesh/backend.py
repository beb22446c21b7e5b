"""Numeric backend selection.

The time-recursion kernels in :mod:`rlmesh.kernels` exist twice: a pure-numpy
reference and a numba ``@njit`` version. Which one runs is controlled by the
``RLMESH_BACKEND`` environment variable (``numba`` or ``numpy``); the default
is ``numba`` when importable, falling back to numpy otherwise.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from .errors import ConfigurationError

_ENV_VAR = "RLMESH_BACKEND"
_VALID = ("numba", "numpy")

try:
    import numba  # noqa: F401

    _NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    _NUMBA_AVAILABLE = False


def _initial_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice:
        if choice not in _VALID:
            raise ConfigurationError(
                f"{_ENV_VAR} must be one of {_VALID}, got {choice!r}"
            )
        if choice == "numba" and not _NUMBA_AVAILABLE:
            raise ConfigurationError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            )
        return choice
    return "numba" if _NUMBA_AVAILABLE else "numpy"


_active = _initial_backend()


def numba_available() -> bool:
    return _NUMBA_AVAILABLE


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _VALID:
        raise ConfigurationError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _NUMBA_AVAILABLE:
        raise ConfigurationError("numba backend requested but numba is not importable")
    _active = name


@contextmanager
def use_backend(name: str):
    """Temporarily switch backend (used by tests and the kernel benchmark)."""
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
