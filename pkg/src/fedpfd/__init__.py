"""Personalised federated learning for multi-task fault diagnosis of rotating machinery."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DomainError, FedPFDError,  # noqa: E402
                     ProtocolError, SizeError, StructuralError, TrainingError, UsageError)

__all__ = [
    "__version__", "FedPFDError", "ConfigurationError", "DataError", "DomainError",
    "ProtocolError", "SizeError", "StructuralError", "TrainingError", "UsageError",
]
