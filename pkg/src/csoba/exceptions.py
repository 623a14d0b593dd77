class SobaError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpecError(SobaError, ValueError):
    pass


class InputError(SobaError, ValueError):
    pass


class InfeasibleError(SobaError, ValueError):
    pass


class UnsupportedError(SobaError, NotImplementedError):
    pass


class ConsistencyError(SobaError, RuntimeError):
    """An internal bookkeeping identity was violated. Always a bug."""


class DivergenceError(SobaError, ArithmeticError):
    """Iterates blew up; carries the failing round and the partial trace."""

    def __init__(self, round_index, message="", trace=None):
        self.round = round_index
        self.trace = trace
        super().__init__(message or f"divergence detected at round {round_index}")


class ConfigError(SobaError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SearchFailure(SobaError, RuntimeError):
    pass
