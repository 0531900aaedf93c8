"""Exception hierarchy for the runtime."""


class LinealError(Exception):
    """Base class for all runtime errors."""


class ShapeError(LinealError):
    """Operand shapes do not satisfy an operation's contract."""


class ValueTypeError(LinealError):
    """Operand value types are unsupported for an operation."""


class SingularMatrixError(LinealError):
    """Cholesky breakdown; carries the failing pivot index."""

    def __init__(self, pivot: int, detail: str = ""):
        self.pivot = pivot
        msg = f"matrix is not positive definite (pivot {pivot} failed)"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ScriptSyntaxError(LinealError):
    """Script parse failure with source position."""

    def __init__(self, message: str, line: int, col: int, token: str = ""):
        self.line = line
        self.col = col
        self.token = token
        at = f" at line {line}, col {col}"
        if token:
            at += f" near {token!r}"
        super().__init__(message + at)


class ScriptRuntimeError(LinealError):
    """Execution failure, annotated with the script line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FederatedError(LinealError):
    """Federated protocol or worker failure; names the endpoint when known."""

    def __init__(self, message: str, endpoint: str | None = None):
        self.endpoint = endpoint
        if endpoint:
            message = f"[{endpoint}] {message}"
        super().__init__(message)


class IOFormatError(LinealError):
    """Malformed data file, sidecar, or binary block stream."""
