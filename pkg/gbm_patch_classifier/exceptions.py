"""
Exceptions for gbm_patch_classifier
"""


class ClassifierError(Exception):
    """Error raised by the patch classifier"""
    message = None

    def __init__(self, message: str = None) -> None:
        if message:
            self.message = message
        super().__init__(self.message)

    def __str__(self):
        return self.message if self.message else self.__doc__


class ShapeError(ClassifierError):
    """Tensor shapes are incompatible"""
    message = "Shape mismatch"


class ConfigError(ClassifierError):
    """Invalid configuration value"""
    message = "Invalid configuration"


class DataError(ClassifierError):
    """Dataset could not be read or is unusable"""
    message = "Data error"


class ManifestError(DataError):
    """Manifest row could not be parsed"""
    message = "Malformed manifest"

    def __init__(self, message: str = None, line: int = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message or self.message}"
        super().__init__(message)


class ImageDecodeError(DataError):
    """Image bytes are not a supported PPM image"""
    message = "Image could not be decoded"


class StratificationError(DataError):
    """Class counts are too small to stratify"""
    message = "Cannot stratify"


class TrainingError(ClassifierError):
    """Training could not proceed"""
    message = "Training failed"


class MetricError(ClassifierError):
    """Metric is undefined for the given counts"""
    message = "Metric is undefined"


class CheckpointError(ClassifierError):
    """Checkpoint file is invalid"""
    message = "Invalid checkpoint"


class CheckpointMagicError(CheckpointError):
    """Checkpoint does not start with the expected magic bytes"""
    message = "Bad checkpoint magic"


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported"""
    message = "Unsupported checkpoint version"


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ended before all declared data was read"""
    message = "Truncated checkpoint"


class CheckpointSchemaError(CheckpointError):
    """Checkpoint tensors do not match the architecture schema"""
    message = "Checkpoint schema mismatch"
