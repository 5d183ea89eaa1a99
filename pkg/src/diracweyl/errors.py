"""Exception hierarchy shared by all modules."""


class DiracError(Exception):
    """Base class for every error raised by :mod:`diracweyl`."""


# integration / core numerics
class StepSizeUnderflow(DiracError):
    pass


class NonFiniteValue(DiracError):
    pass


class OutOfRange(DiracError, ValueError):
    pass


class EvaluationFailed(DiracError):
    pass


# Weyl function and spectra
class AtPole(DiracError):
    """Raised when the Weyl function is evaluated (numerically) at an eigenvalue."""

    def __init__(self, z, ratio):
        super().__init__(f"z={z!r} is numerically a pole (|W|/(|Phi||u+|) = {ratio:.3e})")
        self.z = z
        self.ratio = ratio


class ClusterSuspected(DiracError):
    pass


class NotAnEigenvalue(DiracError):
    pass


class SlowConvergence(DiracError):
    pass


class NonIntegrableMagnetic(DiracError):
    pass


# commutation
class InvalidGamma(DiracError, ValueError):
    pass


class LambdaNotEigenvalue(DiracError):
    pass


class LambdaNotAdmissible(DiracError):
    pass


class ThetaSquareIntegrable(DiracError):
    pass


class ZEqualsLambda(DiracError):
    pass


class UnclassifiableCase(DiracError):
    pass


# radial
class SeriesDivergence(DiracError):
    pass


class LogCaseUnsupported(DiracError):
    pass


class KappaTooSmall(DiracError):
    pass


class NoAdmissibleLambda(DiracError):
    pass


class AtomMismatch(DiracError):
    pass


# front end
class ConfigError(DiracError):
    def __init__(self, message, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.field = field
        self.line = line


class TaskError(DiracError):
    """A module error raised while running a task; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class IoError(DiracError, OSError):
    pass
