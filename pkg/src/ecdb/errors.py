"""Exception hierarchy shared by every subsystem."""


class ECDBError(Exception):
    """Base class for all package errors."""


class ConfigError(ECDBError, ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(ECDBError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class ShapeError(ECDBError, ValueError):
    """Tensor shapes are incompatible."""


class SamplerDivergence(ECDBError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at reverse step {step}")


class TrainingDivergence(ECDBError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at training step {step}")


class PairingError(ECDBError):
    """An HQ/LQ pair on disk is incomplete."""


class CheckpointError(ECDBError):
    """A checkpoint file is malformed or does not match the requested model."""
