"""Exception hierarchy shared by all pmuopt modules."""


class PMUOptError(Exception):
    """Base class for every error raised by pmuopt."""


class SchemaError(PMUOptError, ValueError):
    """A grid file does not follow the documented schema."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        context = []
        if field is not None:
            context.append(f"field {field!r}")
        if line is not None:
            context.append(f"line {line}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class DuplicateBusId(SchemaError):
    pass


class PhaseMismatch(PMUOptError, ValueError):
    pass


class DisconnectedGrid(PMUOptError):
    pass


class InvalidConfig(PMUOptError, ValueError):
    pass


class UnknownCandidate(PMUOptError, KeyError):
    pass


class DegenerateMeasurement(PMUOptError, ValueError):
    pass


class PowerFlowDiverged(PMUOptError):
    pass


class SingularPrior(PMUOptError):
    pass


class ShapeMismatch(PMUOptError, ValueError):
    pass


class AlreadySelected(PMUOptError, ValueError):
    pass


class NonFiniteMetric(PMUOptError, ArithmeticError):
    pass


class EigensolverFailure(PMUOptError):
    pass


class NegativeInput(PMUOptError, ValueError):
    pass


class EmptyInput(PMUOptError, ValueError):
    pass


class NonFiniteObjective(PMUOptError, ArithmeticError):
    pass


class TooLarge(PMUOptError, ValueError):
    pass
