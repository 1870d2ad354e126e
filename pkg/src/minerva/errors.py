"""Exception hierarchy shared by every layer of the query system."""


class MinervaError(Exception):
    """Base class. ``stage`` is filled in by the query front end."""

    stage: str | None = None


class InvalidArgument(MinervaError, ValueError):
    pass


class IntegrityError(MinervaError):
    pass


class NotFound(MinervaError, KeyError):
    """A key or block is absent. ``elapsed`` carries the time already spent."""

    def __init__(self, key, message: str | None = None, elapsed: float = 0.0):
        self.key = key
        self.elapsed = elapsed
        super().__init__(message or f"not found: {key}")

    def __str__(self) -> str:
        return self.args[0]


class FlattenFailure(MinervaError):
    def __init__(self, cid, message: str | None = None):
        self.cid = cid
        super().__init__(message or f"cannot resolve merkle node {cid}")


class SchedulingFailure(MinervaError):
    pass


class TransferFailure(MinervaError):
    pass


class QueryFailure(MinervaError):
    pass


class PlanError(MinervaError):
    pass


class ParseError(MinervaError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class QuerySyntaxError(MinervaError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class FormatError(QuerySyntaxError):
    pass


class PathError(QuerySyntaxError):
    pass


class ResolutionError(MinervaError):
    """The numeric grid is too short to hold the distribution's mass."""


class OrderingViolation(MinervaError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"standard tree flattened faster than fat tree: {report}")
