"""Exception hierarchy shared by all riskscreen modules."""


class RiskScreenError(Exception):
    """Base class for every error raised by this package."""


class ParseError(RiskScreenError, ValueError):
    def __init__(self, field, value, reason=""):
        self.field = field
        self.value = value
        msg = f"cannot parse field {field!r} from {value!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class SchemaError(RiskScreenError, ValueError):
    pass


class AttributeConflictError(RiskScreenError, ValueError):
    def __init__(self, patient_ids):
        self.patient_ids = list(patient_ids)
        super().__init__(
            "conflicting sex/birth_date for patient(s): " + ", ".join(self.patient_ids)
        )


class WindowError(RiskScreenError, ValueError):
    """A patient cannot be given a valid observation window."""

    def __init__(self, patient_id, reason):
        self.patient_id = patient_id
        self.reason = reason
        super().__init__(f"{patient_id}: {reason}")


class UndefinedStatisticError(RiskScreenError, ValueError):
    pass


class RankDeficientError(RiskScreenError, ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("collinear covariate columns: " + ", ".join(self.columns))


class ConvergenceError(RiskScreenError, RuntimeError):
    def __init__(self, message, params=None, grad_norm=None):
        self.params = params
        self.grad_norm = grad_norm
        super().__init__(f"{message} (gradient max-norm {grad_norm})")


class NotFittedError(RiskScreenError, ValueError):
    pass


class SchemaMismatchError(RiskScreenError, ValueError):
    pass


class CalibrationError(RiskScreenError, ValueError):
    def __init__(self, message, suggested_scale=None):
        self.suggested_scale = suggested_scale
        super().__init__(message)


class BootstrapError(RiskScreenError, RuntimeError):
    pass


class HorizonError(RiskScreenError, ValueError):
    """Outcomes after the prediction date cannot be verified with the available data."""


class PipelineError(RiskScreenError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
