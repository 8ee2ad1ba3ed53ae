"""Exception hierarchy shared across the package.

UserError covers invalid input (configs, data files, formulas) and maps to
CLI exit code 2; NumericalError covers breakdowns of the numerics (degenerate
covariances, failed factorizations) and maps to exit code 1.
"""


class SmoothSdeError(Exception):
    pass


class UserError(SmoothSdeError):
    pass


class NumericalError(SmoothSdeError):
    pass
