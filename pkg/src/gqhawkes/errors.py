"""Exception hierarchy. Each class maps onto a CLI exit code."""


class GQHawkesError(Exception):
    exit_code = 1


class ConfigError(GQHawkesError, ValueError):
    exit_code = 2


class DataError(GQHawkesError, ValueError):
    exit_code = 3


class NumericalError(GQHawkesError, ArithmeticError):
    exit_code = 4
