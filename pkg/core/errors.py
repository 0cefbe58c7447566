"""Exception types raised by the simulator.

Library code raises these; only ``cli.py`` turns them into exit codes.
Most derive from ``ValueError`` so callers that only care about "bad input"
can catch that.
"""
from __future__ import annotations


class ProtoEVFLError(Exception):
    """Base class for every simulator error."""


class ShapeError(ProtoEVFLError, ValueError):
    """Matrix / parameter dimensions do not compose."""


class DegenerateInputError(ProtoEVFLError, ValueError):
    """Input with no defined answer, e.g. a zero-norm vector under cosine."""


class DegeneratePriorError(DegenerateInputError):
    """A prior vector with no mass."""


class DomainError(ProtoEVFLError, ValueError):
    """Argument outside the operation's domain (Z < 2, empty batch, ...)."""


class IngestionError(ProtoEVFLError, ValueError):
    """A tabular file could not be read into a dataset."""


class SchemaError(IngestionError):
    """A tabular file parsed but its columns have the wrong meaning/type."""


class SpecError(ProtoEVFLError, ValueError):
    """A vertical split spec does not assign every column exactly once."""


class ScenarioError(ProtoEVFLError, ValueError):
    """An imbalance scenario cannot be realized from the available rows."""

    def __init__(self, message: str, deficit: dict[int, dict[int, int]] | None = None) -> None:
        super().__init__(message)
        # party_id -> {class_id: missing_rows}
        self.deficit = deficit or {}


class ConfigError(ProtoEVFLError, ValueError):
    """Experiment config failed validation.  ``errors`` lists each violation."""

    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors) if errors else "invalid config")
        self.errors = list(errors)


class FramingError(ProtoEVFLError, ValueError):
    """A byte stream does not contain a well-formed frame."""


class ProtocolError(ProtoEVFLError, ValueError):
    """A well-formed frame violates the round protocol."""


class TransportError(ProtoEVFLError, ConnectionError):
    """A party channel failed to deliver a frame."""
