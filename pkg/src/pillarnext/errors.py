"""Exception hierarchy shared across the package."""


class PillarNeXtError(Exception):
    """Base class for all package errors."""


class DuplicateCoord(PillarNeXtError, ValueError):
    pass


class OutOfBounds(PillarNeXtError, IndexError):
    pass


class NonFinite(PillarNeXtError, ValueError):
    pass


class ShapeMismatch(PillarNeXtError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class InvalidSpec(PillarNeXtError, ValueError):
    pass


class TooFewRows(PillarNeXtError, ValueError):
    pass


class EmptyGroup(PillarNeXtError, ValueError):
    pass


class MalformedLength(PillarNeXtError, ValueError):
    pass


class ConfigMismatch(PillarNeXtError, ValueError):
    pass


class StrideMismatch(PillarNeXtError, ValueError):
    pass


class NoActiveSites(PillarNeXtError, ValueError):
    pass


class NonDifferentiablePoint(PillarNeXtError, RuntimeError):
    pass


class ManifestMismatch(PillarNeXtError, ValueError):
    pass


class InvalidConfig(PillarNeXtError, ValueError):
    """Raised for config files that fail schema validation.

    ``field`` names the offending dotted path, ``line`` is set when the
    failure comes from JSON decoding.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
