"""Training-architecture configuration: worker counts, coordination modes,
update mode, and preemption, plus the named-architecture table mapping
popular agent architectures onto those fields.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigurationError

COMMUNICATION = ("sync", "async")
UPDATE_MODES = ("centralized", "decentralized")
ARCHITECTURE_NAMES = (
    "single_threaded",
    "dppo",
    "appo",
    "impala_apex",
    "rapid",
    "async_rapid",
    "ddppo",
)


@dataclass(frozen=True)
class SchemeConfig:
    """Declarative description of a distributed training architecture."""

    num_grad_workers: int = 1
    num_col_workers_per_grad: int = 1
    col_communication: str = "sync"
    grad_communication: str = "sync"
    update_mode: str = "centralized"
    preemption_threshold: float | None = None
    col_slots: int | None = None
    grad_slots: int | None = None
    queue_depth: int = 2
    max_grad_lag: int | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.num_grad_workers < 1 or self.num_col_workers_per_grad < 1:
            raise ConfigurationError("worker counts must be >= 1")
        if self.col_communication not in COMMUNICATION:
            raise ConfigurationError(f"col_communication must be one of {COMMUNICATION}")
        if self.grad_communication not in COMMUNICATION:
            raise ConfigurationError(f"grad_communication must be one of {COMMUNICATION}")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigurationError(f"update_mode must be one of {UPDATE_MODES}")
        if self.update_mode == "decentralized" and self.grad_communication != "sync":
            raise ConfigurationError("decentralized updates require synchronous gradients")
        if self.preemption_threshold is not None:
            if not 0.0 < self.preemption_threshold <= 1.0:
                raise ConfigurationError("preemption_threshold must be in (0, 1]")
            if self.col_communication != "sync":
                raise ConfigurationError("preemption requires synchronous collection")
            if self.num_col_workers_per_grad < 2:
                raise ConfigurationError(
                    "preemption requires at least 2 collection workers per gradient worker"
                )
        if self.queue_depth < 1:
            raise ConfigurationError("queue_depth must be >= 1")
        if self.deterministic:
            if self.col_communication != "sync" or self.grad_communication != "sync":
                raise ConfigurationError(
                    "deterministic scheduling supports sync/sync schemes only"
                )
            if self.preemption_threshold is not None:
                raise ConfigurationError(
                    "preemption is wall-clock driven and unavailable in deterministic mode"
                )

    @property
    def total_col_workers(self) -> int:
        return self.num_grad_workers * self.num_col_workers_per_grad


# Constraint rows: (grad_exact, grad_min, col_exact, col_min, grad_comm, col_comm)
_TABLE = {
    "single_threaded": dict(grad_exact=1, col_exact=1, grad_comm="sync", col_comm="sync"),
    "dppo": dict(grad_min=1, col_exact=1, grad_comm="sync", col_comm="sync"),
    "appo": dict(grad_min=1, col_exact=1, grad_comm="async", col_comm="sync"),
    "impala_apex": dict(grad_exact=1, col_min=1, grad_comm="sync", col_comm="async"),
    "rapid": dict(grad_min=1, col_min=1, grad_comm="sync", col_comm="async"),
    "async_rapid": dict(grad_min=1, col_min=1, grad_comm="async", col_comm="async"),
}

_DEFAULT_COUNTS = {
    "single_threaded": (1, 1),
    "dppo": (2, 1),
    "appo": (2, 1),
    "impala_apex": (1, 2),
    "rapid": (2, 2),
    "async_rapid": (2, 2),
    "ddppo": (2, 2),
}

DDPPO_DEFAULT_PREEMPTION = 0.8


def resolve_architecture(
    name: str,
    num_grad_workers: int | None = None,
    num_col_workers_per_grad: int | None = None,
    **overrides,
) -> SchemeConfig:
    """Build the SchemeConfig for a named training architecture.

    Counts default to the architecture's canonical minimum shape and are
    validated against the row's constraints (e.g. DPPO runs exactly one
    collection worker per gradient worker).
    """
    if name not in ARCHITECTURE_NAMES:
        raise ConfigurationError(
            f"unknown architecture {name!r}; known: {ARCHITECTURE_NAMES}"
        )
    default_grad, default_col = _DEFAULT_COUNTS[name]
    grad = default_grad if num_grad_workers is None else int(num_grad_workers)
    col = default_col if num_col_workers_per_grad is None else int(num_col_workers_per_grad)

    if name == "ddppo":
        # DPPO's scheme plus decentralized updates and straggler preemption;
        # preemption needs >= 2 collection workers in each sync group.
        row = dict(grad_min=1, col_min=2, grad_comm="sync", col_comm="sync")
        extra = {
            "update_mode": "decentralized",
            "preemption_threshold": overrides.pop(
                "preemption_threshold", DDPPO_DEFAULT_PREEMPTION
            ),
        }
    else:
        row = _TABLE[name]
        extra = {}

    if "grad_exact" in row and grad != row["grad_exact"]:
        raise ConfigurationError(
            f"{name} requires exactly {row['grad_exact']} gradient worker(s), got {grad}"
        )
    if "col_exact" in row and col != row["col_exact"]:
        raise ConfigurationError(
            f"{name} requires exactly {row['col_exact']} collection worker(s) "
            f"per gradient worker, got {col}"
        )
    if grad < row.get("grad_min", 1) or col < row.get("col_min", 1):
        raise ConfigurationError(f"{name} needs more workers than {grad}x{col}")

    return SchemeConfig(
        num_grad_workers=grad,
        num_col_workers_per_grad=col,
        col_communication=row["col_comm"],
        grad_communication=row["grad_comm"],
        **extra,
        **overrides,
    )
