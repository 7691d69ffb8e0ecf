"""Exception hierarchy for the forecasting engine.

Every error raised on purpose derives from :class:`GamError` so callers
(and the CLI) can map failures to categories without string matching.
"""


class GamError(Exception):
    """Base class for all engine errors."""


class ParseError(GamError):
    """A row or record could not be decoded; message names the line."""


class SchemaError(GamError):
    """Input violates the declared schema (unknown attribute, bad header)."""


class ValidationError(GamError):
    """Data fails a semantic precondition (overlaps, empty splits, ...)."""


class ConfigError(GamError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(GamError):
    """Tensor operands do not conform."""


class DomainError(GamError):
    """An operation was applied outside its mathematical domain."""


class ContractError(GamError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class OptimizerError(GamError):
    """Optimizer state became invalid (non-finite gradient)."""


class ProtocolError(GamError):
    """Federated round messages are malformed or inconsistent."""


class ClientError(GamError):
    """A simulated federated client failed mid-round."""


class FingerprintError(GamError):
    """An artifact was produced under an incompatible configuration."""


class StorageError(GamError):
    """A container file is missing, truncated, or has a wrong magic."""
