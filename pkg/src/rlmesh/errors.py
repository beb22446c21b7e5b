"""Exception hierarchy shared by all rlmesh modules."""


class RLMeshError(Exception):
    """Base class for all rlmesh errors."""


class ConfigurationError(RLMeshError):
    """Invalid specification, dimensions, enum value, or config field."""


class ContractViolationError(RLMeshError):
    """A caller broke an API precondition (bad action, shape mismatch, ...)."""


class NumericFaultError(RLMeshError):
    """Non-finite values where finite numbers are required (e.g. NaN gradients)."""


class BufferNotReadyError(RLMeshError):
    """Replay buffer holds fewer entries than the requested batch size."""


class CheckpointIntegrityError(RLMeshError):
    """Checkpoint file is truncated, corrupt, or fails its checksum."""


class WorkerFailureError(RLMeshError):
    """A worker died or the runtime could not reach a consistent state."""
