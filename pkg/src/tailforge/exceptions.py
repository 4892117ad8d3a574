"""Exception hierarchy shared by every tailforge module."""


class TailforgeError(Exception):
    """Base class for all errors raised by tailforge."""


class ConfigError(TailforgeError, ValueError):
    """Invalid configuration or precondition violation."""


class NumericError(TailforgeError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class ShapeError(TailforgeError, ValueError):
    """Arrays with mutually inconsistent shapes."""


class DatasetFormatError(TailforgeError):
    """Base class for on-disk dataset/checkpoint problems."""


class MissingFileError(DatasetFormatError, FileNotFoundError):
    pass


class SizeMismatchError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class DatasetValidationError(DatasetFormatError, ValueError):
    pass


class DegenerateWeightError(TailforgeError, ValueError):
    """A classifier row has zero norm and cannot be normalized."""

    def __init__(self, class_id):
        super().__init__(f"classifier row for class {class_id} has zero norm")
        self.class_id = class_id


class ClassExhaustionError(TailforgeError):
    """A cleaning round would remove every sample of a class."""

    def __init__(self, class_id, round_index):
        super().__init__(
            f"cleaning round {round_index} would drop every sample of class {class_id}"
        )
        self.class_id = class_id
        self.round_index = round_index


class RecordMismatchError(TailforgeError, ValueError):
    """Prediction records from different sources do not line up."""
