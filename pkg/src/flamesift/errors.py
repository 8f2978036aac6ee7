"""Shared exception types."""


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class ConfigError(ValueError):
    """A configuration (layer chain, schedule, run flags) is invalid."""


class ParseError(ValueError):
    """A file (checkpoint, manifest, PGM, packed dataset) cannot be parsed."""
