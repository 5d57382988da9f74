"""Exception hierarchy shared by all modules."""


class CrossLabelError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(CrossLabelError, ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownLabelError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class DegenerateSampleError(DatasetError):
    """A sample column has zero norm and cannot be normalized."""

    def __init__(self, column: int):
        super().__init__(f"column {column} has zero Euclidean norm")
        self.column = column


class SplitError(DatasetError):
    pass


class LayoutError(CrossLabelError, ValueError):
    pass


class ModelFormatError(CrossLabelError, ValueError):
    pass


class LearningError(CrossLabelError, RuntimeError):
    pass


class InsufficientSamplesError(LearningError, ValueError):
    pass


class FactorizationError(LearningError):
    """A symmetric positive-definite solve failed; inputs are corrupt."""

    def __init__(self, message: str, class_index: int | None = None):
        super().__init__(message)
        self.class_index = class_index


class ClassificationError(CrossLabelError, ValueError):
    pass


class UnclassifiableError(ClassificationError):
    pass


class LabelMismatchError(ClassificationError):
    pass
