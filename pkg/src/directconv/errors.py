"""Exception types raised across the engine."""


class ConvError(ValueError):
    pass


class ShapeMismatch(ConvError):
    pass


class NonIntegralShape(ConvError):
    pass


class InvalidDescriptor(ConvError):
    pass


class OverflowRisk(ConvError):
    pass


class PlanInfeasible(ConvError):
    pass


class PlanTensorMismatch(ConvError):
    pass


class EmptyTrace(ConvError):
    pass


class InfeasibleStrategy(ConvError):
    pass


class ChainShapeMismatch(ConvError):
    pass


class ParseError(ConvError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
