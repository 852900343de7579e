"""Exception hierarchy shared by all modules."""


class FlrudpError(Exception):
    """Base class for every error raised by this package."""


class MalformedFrame(FlrudpError, ValueError):
    """Datagram cannot be parsed into a valid frame; callers drop it silently."""


class MalformedModel(FlrudpError, ValueError):
    pass


class RankTooLarge(FlrudpError, ValueError):
    pass


class InvalidHex(FlrudpError, ValueError):
    pass


class EmptyModel(FlrudpError, ValueError):
    pass


class IncompleteChunkSet(FlrudpError, ValueError):
    pass


class InvalidState(FlrudpError, RuntimeError):
    """An FSM operation was invoked in a state that does not accept it."""


class UnknownTotal(FlrudpError, RuntimeError):
    pass


class TotalMismatch(FlrudpError, ValueError):
    """A DATA frame declared a packet total different from the one already established."""


class ShapeMismatch(FlrudpError, ValueError):
    pass


class SimulationStall(FlrudpError, RuntimeError):
    """The event queue drained while some client was still non-terminal."""


class BindFailure(FlrudpError, OSError):
    pass
