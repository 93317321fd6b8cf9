class HorusError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(HorusError, ValueError):
    pass


class TraceParseError(HorusError):
    pass


class TraceSchemaError(HorusError):
    def __init__(self, message, step=None, line=None):
        super().__init__(message)
        self.step = step
        self.line = line


class IntegrityError(HorusError):
    """A trace is inconsistent with opcode semantics during replay."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FactFileError(HorusError):
    pass


class ProviderError(HorusError):
    def __init__(self, message, retry_exhausted=False):
        super().__init__(message)
        self.retry_exhausted = retry_exhausted


class PartialGraphError(HorusError):
    """Raised when a provider fails mid-expansion; carries what was built so far."""

    def __init__(self, message, graph=None, frontier=()):
        super().__init__(message)
        self.graph = graph
        self.frontier = tuple(frontier)
