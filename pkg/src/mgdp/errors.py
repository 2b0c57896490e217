"""Exception hierarchy shared by all mgdp modules."""


class MgdpError(Exception):
    """Base class for every error raised by mgdp."""


# --- network data -----------------------------------------------------------
class MissingBlock(MgdpError):
    pass


class MalformedRow(MgdpError):
    pass


class DuplicateBusId(MgdpError):
    pass


class SchemaViolation(MgdpError):
    def __init__(self, message, path=()):
        self.path = tuple(path)
        where = "/".join(str(p) for p in self.path) or "<root>"
        super().__init__(f"{where}: {message}")


class UnknownRoot(MgdpError):
    pass


class NotRadial(MgdpError):
    pass


class EssBusUnknown(MgdpError):
    pass


# --- optimization -----------------------------------------------------------
class DimensionMismatch(MgdpError):
    pass


class NotOptimal(MgdpError):
    """A solve finished without an optimal status; ``status`` carries the engine verdict."""

    def __init__(self, status, message=""):
        self.status = status
        super().__init__(message or f"solve ended with status {status}")


class RootInfeasible(MgdpError):
    pass


class TooManyBits(MgdpError):
    pass


# --- privacy ----------------------------------------------------------------
class NonPositiveScale(MgdpError):
    pass


class InfeasibleInitialMode(MgdpError):
    pass


class IndexOutOfRange(MgdpError):
    pass


class FlipBudgetExhausted(MgdpError):
    pass


# --- orchestration ----------------------------------------------------------
class IoFailure(MgdpError):
    pass
