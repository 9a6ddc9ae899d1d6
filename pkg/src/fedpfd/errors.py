"""Exception hierarchy shared by all fedpfd modules."""


class FedPFDError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FedPFDError, ValueError):
    """Invalid scenario, profile or run configuration."""


class SizeError(FedPFDError, ValueError):
    """Array length or shape not supported by a transform."""


class DomainError(FedPFDError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StructuralError(FedPFDError, ValueError):
    """Layer graph or parameter structure mismatch."""


class UsageError(FedPFDError, RuntimeError):
    """API used out of order (e.g. backward on a stale cache)."""


class TrainingError(FedPFDError, RuntimeError):
    """Numerical failure during optimisation."""


class DataError(FedPFDError, ValueError):
    """Dataset too small or otherwise unusable for the requested step."""


class ProtocolError(FedPFDError, RuntimeError):
    """Federated message exchange violated the protocol."""
