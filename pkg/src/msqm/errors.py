"""Exception types raised across the package."""


class MSQMError(Exception):
    """Base class for every error raised by msqm."""


class ConfigError(MSQMError):
    """Invalid user configuration (bad spec, schema, flags)."""


class ComputationError(MSQMError):
    """A numerical routine could not produce a usable answer."""


# core_data
class MissingColumn(ConfigError):
    pass


class NonBinaryTreatment(ConfigError):
    pass


class NonNumericCell(ConfigError):
    pass


class TermPeriodOutOfRange(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


# numerics
class NonPositiveVariance(ComputationError):
    pass


class QuantileOutOfRange(ConfigError):
    pass


class SingularDesign(ComputationError):
    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class NonFiniteEvaluation(ComputationError):
    pass


class SolverFailed(ComputationError):
    """Root solve did not converge. Carries the best iterate and the report."""

    def __init__(self, message, x=None, report=None):
        super().__init__(message)
        self.x = x
        self.report = report


class SingularJacobian(SolverFailed):
    pass


class MaxIterExceeded(SolverFailed):
    pass


# propensity
class SeparationDetected(ComputationError):
    pass


class EmptyStratum(ComputationError):
    pass


# outcome / estimators
class NonPositiveVarianceFit(ComputationError):
    pass


class SingularInformation(ComputationError):
    pass


class DegenerateResiduals(ComputationError):
    pass


class BootstrapFailed(ComputationError):
    pass


# sensitivity
class PeakOutOfRange(ComputationError):
    pass


class NonPositiveArea(ComputationError):
    pass


# simulation
class BisectionFailed(ComputationError):
    pass


class UncalibratedIntercepts(ConfigError):
    pass


class AllReplicationsFailed(ComputationError):
    pass
