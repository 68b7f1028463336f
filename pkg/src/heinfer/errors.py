"""Exception hierarchy shared by every heinfer module."""


class HeinferError(Exception):
    """Base class for all errors raised by heinfer."""


class ParseError(HeinferError):
    pass


class GraphError(HeinferError):
    pass


class ShapeError(HeinferError):
    def __init__(self, message, node=None):
        if node is not None:
            message = f"{node}: {message}"
        super().__init__(message)
        self.node = node


class CalibrationError(HeinferError):
    pass


class ApproxError(HeinferError):
    pass


class ParamsError(HeinferError):
    pass


class PlanError(HeinferError):
    pass


class FormatError(HeinferError):
    """Malformed or unknown-version interchange file."""


class BackendError(HeinferError):
    pass


class KeyMismatchError(BackendError):
    """Wrong key kind for an operation, or ciphertext/key identifiers disagree."""


class CapacityError(BackendError):
    """Tensor does not fit the ciphertext slot capacity."""


class DepthError(BackendError):
    """Multiplicative level budget exhausted."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"{message} (at node {node!r})"
        super().__init__(message)
        self.node = node


class UnsupportedModelError(HeinferError):
    def __init__(self, report):
        super().__init__(str(report))
        self.report = report
