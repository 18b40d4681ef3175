"""Exception classes shared across the package."""


class AmpoError(Exception):
    pass


class ConfigurationError(AmpoError, ValueError):
    pass


class UnsupportedConfigurationError(ConfigurationError):
    pass


class UsageError(AmpoError, RuntimeError):
    pass


class InputError(AmpoError, ValueError):
    pass


class TrainingError(AmpoError, ArithmeticError):
    pass


class NumericalError(AmpoError, ArithmeticError):
    pass
