class SafeMarlError(Exception):
    pass


class InvalidInputError(SafeMarlError, ValueError):
    """Rejected input: bad index, shape, or overlapping agent sets."""


class CapacityError(SafeMarlError, ValueError):
    pass


class DivergenceUndefinedError(SafeMarlError, ValueError):
    """KL requested between distributions with mismatched support."""


class PoisonedStateError(SafeMarlError, FloatingPointError):
    """A non-finite number appeared in parameters, gradients or a solve."""


class DegenerateDualError(SafeMarlError, ArithmeticError):
    pass


class RecoveryRequired(SafeMarlError):
    """The linearised constrained problem has no feasible point; use a recovery step."""


class ConfigError(SafeMarlError, ValueError):
    def __init__(self, fields):
        self.fields = list(fields)
        super().__init__("invalid configuration: " + "; ".join(self.fields))
