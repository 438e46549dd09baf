class TriageError(Exception):
    """Base class for every data error raised by ct_triage."""


class MissingFile(TriageError, FileNotFoundError):
    pass


class HeaderParseError(TriageError):
    pass


class SizeMismatch(TriageError):
    pass


class IoError(TriageError, OSError):
    pass


class InvalidOrientationCode(TriageError, ValueError):
    pass


class NegativeRadius(TriageError, ValueError):
    pass


class EmptyLungs(TriageError):
    pass


class EmptyComponent(TriageError):
    pass


class ExtractionRejected(TriageError):
    """Raised when a case bundle fails validation before feature extraction."""

    def __init__(self, case_id: str, report):
        self.case_id = case_id
        self.report = report
        kinds = ", ".join(v.kind for v in report.violations)
        super().__init__(f"Case {case_id!r} rejected: {kinds}")


class SchemaMismatch(TriageError):
    pass


class DegenerateData(TriageError):
    pass


class SingleClassData(TriageError):
    pass


class NonFiniteFeature(TriageError):
    pass


class EmptyNode(TriageError):
    pass


class TooFewPerClass(TriageError):
    pass


class FoldLeakage(TriageError):
    """A cross-validation fold shares cases between its train and test sides."""


class EmptyInput(TriageError):
    pass


class LesionOutsideLungs(TriageError):
    pass


class ConfigError(TriageError):
    pass


class StageError(TriageError):
    """Wraps a failure with the name of the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
