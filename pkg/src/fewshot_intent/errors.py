"""Exception hierarchy shared by every module.

``InputError`` maps to CLI exit code 2, ``NumericalError`` to exit code 1.
"""


class FewShotError(Exception):
    pass


class InputError(FewShotError, ValueError):
    """Bad user input: malformed files, infeasible protocols, invalid config."""


class NumericalError(FewShotError, ArithmeticError):
    """Non-finite values or failed solves during computation."""


class ConditioningError(NumericalError):
    pass
