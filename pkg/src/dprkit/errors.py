"""Exception hierarchy shared across the toolkit.

ValidationError covers malformed input and violated preconditions (CLI exit
code 1); NumericalError covers failures of the numerics themselves, such as
rank-deficient systems or solver non-convergence (CLI exit code 2).
"""


class DprError(Exception):
    pass


class ValidationError(DprError):
    pass


class NumericalError(DprError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
