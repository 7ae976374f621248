"""Exception hierarchy for the toolkit.

Two broad families matter for the CLI exit code: validation problems
(bad shapes, bad files, bad configuration) and numerical runtime
failures (non-finite losses, failed gradient checks).
"""


class MENetError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MENetError):
    """Bad inputs: shapes, files, codes, configuration."""


class NumericalError(MENetError):
    """Runtime numerical failure."""


# tensor core
class ShapeMismatch(ValidationError):
    pass


class NonPositiveOutput(ValidationError):
    """A convolution geometry produced an output extent below 1."""


class DegenerateBatch(ValidationError):
    """Batch normalization in train mode needs at least 2 samples per channel."""


class InvalidRate(ValidationError):
    """Dropout rate outside [0, 1)."""


# autodiff
class UnknownParameter(ValidationError):
    pass


class EmptyTape(ValidationError):
    pass


# model
class InvalidConfig(ValidationError):
    pass


# losses
class NotNormalized(ValidationError):
    """Per-voxel class probabilities do not sum to 1."""


class IndexOutOfRange(ValidationError):
    pass


# NIfTI / data pipeline
class BadMagic(ValidationError):
    pass


class UnsupportedDatatype(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class DimensionOverflow(ValidationError):
    """NIfTI dim[0] outside the supported 3..4 range (or extra frames)."""


class IoFailure(MENetError):
    pass


class UnknownLabelCode(ValidationError):
    pass


class PatchTooLarge(ValidationError):
    pass


class MissingLabels(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class ExtentTooSmall(ValidationError):
    pass


# metrics / evaluation
class EmptyInput(ValidationError):
    pass


class MissingCase(ValidationError):
    pass


# trainer
class NonFiniteLoss(NumericalError):
    """Loss became NaN/Inf during training; message carries parameter norms."""
