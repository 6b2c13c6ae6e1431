"""
ShiftTune Errors
Exception hierarchy shared by the plant, policy, learning and CLI layers
"""


class ShiftTuneError(Exception):
    """Base class for every failure raised by the toolkit"""
    pass


class ConfigError(ShiftTuneError):
    """Configuration file missing, malformed or inconsistent"""
    pass


class ParameterDomainError(ShiftTuneError):
    """A physical or policy parameter is outside its valid domain"""
    pass


class CalibrationError(ShiftTuneError):
    """Driveline calibration did not reach its targets"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        if not self.diagnostics:
            return super().__str__()
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{super().__str__()} ({details})"


class ModelError(ShiftTuneError):
    """The nominal model cannot produce the requested quantity (singular balance)"""
    pass


class SynthesisError(ShiftTuneError):
    """LQR synthesis failed (Riccati recursion diverged or closed loop unstable)"""
    pass


class DatasetError(ShiftTuneError):
    """Transition dataset cannot be built from the given trials"""
    pass


class FactorizationError(ShiftTuneError):
    """Kernel matrix stayed non positive definite after jitter escalation"""
    pass


class TrainingError(ShiftTuneError):
    """Every hyperparameter optimization start failed"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class TrialAbortedError(ShiftTuneError):
    """Bench trial produced a non-finite state; carries the partial trial"""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class GradientError(ShiftTuneError):
    """Finite-difference gradient hit a non-finite objective value"""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DescentError(ShiftTuneError):
    """Line-search descent received an invalid starting point"""
    pass
