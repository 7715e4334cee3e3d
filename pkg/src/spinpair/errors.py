"""Exception hierarchy.

Every error carries a short ``category`` string; the command line prints it
so batch drivers can branch on the failure kind without parsing messages.
"""


class SpinPairError(Exception):
    category = "error"


class ConfigurationError(SpinPairError, ValueError):
    """``violations`` lists (key path, message) or (key path, message, line)."""

    category = "config"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [("", violations)]
        self.violations = [tuple(v) for v in violations]
        super().__init__("; ".join(f"{v[0]}: {v[1]}" for v in self.violations))


class DegeneracyError(SpinPairError):
    category = "degeneracy"


class DomainError(SpinPairError, ValueError):
    category = "domain"


class CompileError(SpinPairError, ValueError):
    category = "compile"


class StepSizeError(SpinPairError, ValueError):
    category = "step-size"


class FrameError(SpinPairError, ValueError):
    category = "frame"


class CalibrationError(SpinPairError):
    category = "calibration"


class NumericError(SpinPairError):
    category = "numeric"


class SamplingError(SpinPairError, ValueError):
    category = "sampling"


class FitError(SpinPairError):
    """Raised by the fitters; ``diagnostics`` holds whatever was known."""

    category = "fit"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConvergenceError(SpinPairError):
    """Iteration cap reached. Keeps the last iterate for inspection."""

    category = "convergence"

    def __init__(self, message, last_iterate=None, gradient_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm


class ConsistencyError(SpinPairError):
    category = "consistency"
