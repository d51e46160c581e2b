"""Exception hierarchy shared by all pipeline stages and the API service.

Every error carries a stable machine-readable ``code`` so the HTTP layer
can map failures without string matching.
"""


class HydraError(Exception):
    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)


class ValidationError(HydraError):
    code = "Validation"


class UnknownEntityError(HydraError):
    code = "UnknownEntity"


# -- domain-model --------------------------------------------------------

class DuplicateName(ValidationError):
    pass


class InvalidLabelSet(ValidationError):
    pass


class UnknownImage(UnknownEntityError):
    pass


class UnknownModel(UnknownEntityError):
    pass


class UnknownPlotType(UnknownEntityError):
    pass


class UnknownLabel(UnknownEntityError):
    pass


class MalformedWeights(ValidationError):
    pass


class InvalidLimit(ValidationError):
    pass


class PermissionDenied(HydraError):
    code = "PermissionDenied"


class LabelPlotTypeMismatch(ValidationError):
    pass


class DuplicateImage(ValidationError):
    pass


# -- ingest-feeder -------------------------------------------------------

class MalformedName(ValidationError):
    pass


class InvalidTarget(ValidationError):
    pass


class UnsupportedImageFormat(ValidationError):
    pass


# -- dispatch-balancer ---------------------------------------------------

class NoWorkers(HydraError):
    code = "NoWorkers"


class DuplicateEndpoint(ValidationError):
    pass


class UnknownEndpoint(UnknownEntityError):
    pass


# -- predict-worker ------------------------------------------------------

class NoActiveModel(HydraError):
    code = "NoActiveModel"


class ShapeMismatch(ValidationError):
    pass


class BackendFailure(HydraError):
    code = "BackendFailure"


class EmptyTrainingSet(ValidationError):
    pass


# -- keeper --------------------------------------------------------------

class MissingThreshold(ValidationError):
    pass


# -- analytics -----------------------------------------------------------

class UnlabeledImage(ValidationError):
    pass


class NoModel(UnknownEntityError):
    pass


class EmptyEvaluationSet(ValidationError):
    pass


# -- sim-harness ---------------------------------------------------------

class InvalidSchedule(ValidationError):
    pass
