"""Exception hierarchy.

Every error carries a short machine-readable ``code`` used by the CLI when it
reports failures as JSON on stderr.
"""


class FodkitError(Exception):
    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class InvalidArgumentError(FodkitError, ValueError):
    code = "invalid-argument"


class IllConditionedError(FodkitError):
    code = "ill-conditioned"

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number

    def to_dict(self):
        d = super().to_dict()
        d["condition_number"] = self.condition_number
        return d


class InfeasibleError(FodkitError):
    code = "infeasible"


class InvalidModelError(FodkitError):
    code = "invalid-model"


class NonConvergedError(FodkitError):
    """Raised when an iterative solver hits its cap; the best iterate is kept."""

    code = "non-converged"

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics


class EmptyPopulationError(FodkitError):
    code = "empty-population"


class EmptyDatasetError(FodkitError):
    code = "empty-dataset"


class AbortedTrainingError(FodkitError):
    code = "aborted-training"

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class InvalidCohortError(FodkitError):
    code = "invalid-cohort"


class ConfigError(FodkitError):
    code = "config-error"


class ParseError(FodkitError):
    code = "parse-error"


class VolumeFormatError(FodkitError):
    code = "volume-format"


class MalformedHeaderError(VolumeFormatError):
    code = "malformed-header"


class TruncatedPayloadError(VolumeFormatError):
    code = "truncated-payload"


class UnsupportedDatatypeError(VolumeFormatError):
    code = "unsupported-datatype"


class UnsupportedFeatureError(VolumeFormatError):
    code = "unsupported-feature"
