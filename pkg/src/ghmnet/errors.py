"""Exception hierarchy shared by every module."""


class GhmError(Exception):
    """Base class for all library errors."""


class InvalidTopologyError(GhmError, ValueError):
    pass


class NoSiblingsError(GhmError, ValueError):
    pass


class InvalidParamsError(GhmError, ValueError):
    pass


class InvalidSampleError(GhmError, ValueError):
    pass


class InvalidNoiseError(GhmError, ValueError):
    pass


class EnumerationLimitError(GhmError, RuntimeError):
    pass


class ConfigurationError(GhmError, ValueError):
    pass


class NumericError(GhmError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(GhmError, RuntimeError):
    """Training risk blew past its divergence threshold; `log` holds the history."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
