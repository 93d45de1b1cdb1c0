class IsacError(Exception):
    """Base class for every error raised by the toolkit."""


class ScenarioSchemaError(IsacError):
    def __init__(self, message, field_path=""):
        self.field_path = field_path
        prefix = f"{field_path}: " if field_path else ""
        super().__init__(f"{prefix}{message}")


class ScenarioValidationError(IsacError):
    def __init__(self, constraint, message):
        self.constraint = constraint
        super().__init__(f"[{constraint}] {message}")


class GeometryError(IsacError):
    """Angle outside its domain or a zero-length link."""


class StructuralError(IsacError):
    """Array shapes or Hermitian structure do not match the scenario."""


class NumericalError(IsacError):
    pass


class DegenerateDenominatorError(IsacError):
    pass


class InitializationError(IsacError):
    pass


class SubproblemInfeasibleError(IsacError):
    def __init__(self, message, binding=None, iterate=None):
        self.binding = list(binding or [])
        self.iterate = iterate
        super().__init__(message)

    def to_dict(self):
        return {
            "error": str(self),
            "binding_constraints": self.binding,
            "iterate": self.iterate,
        }


class TrainingDivergedError(IsacError):
    pass
