"""Error taxonomy shared by the library and the CLI exit codes."""


class SolverError(Exception):
    exit_code = 1


class ConfigError(SolverError):
    """Unparseable or dimensionally inconsistent input."""

    exit_code = 2


class ValidationError(SolverError):
    """Parameters parsed but violate a model invariant."""

    exit_code = 3

    def __init__(self, violations):
        self.violations = list(violations)
        fields = ", ".join(v["field"] for v in self.violations)
        super().__init__(f"invalid parameters: {fields}")


class BreakdownError(SolverError):
    """A matrix that must be inverted became singular along the time grid."""

    exit_code = 4

    def __init__(self, what, t):
        self.t = float(t)
        super().__init__(f"{what} singular at t={self.t:.6g}")


class NumericalError(SolverError):
    """Blow-up or non-finite values."""

    exit_code = 5
