"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes; see ``irisnet.cli``.
"""


class IrisnetError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor / op errors ---------------------------------------------------

class ShapeMismatch(IrisnetError):
    """Operand shapes are incompatible for the requested operation."""


class NotScalar(IrisnetError):
    """backward() was called on a tensor with more than one element."""


class InvalidGeometry(IrisnetError):
    """Kernel/window geometry does not fit the (padded) input."""


class DegenerateBatch(IrisnetError):
    """Batch statistics are undefined (training-mode batchnorm with b < 2)."""


class InvalidSpec(IrisnetError):
    """Model spec violates its chaining or range invariants."""


# --- training / data errors -----------------------------------------------

class LabelOutOfRange(IrisnetError):
    """A class label falls outside [0, n_classes)."""


class EmptySplit(IrisnetError):
    """A train/val/test partition needed for the operation is empty."""


class EmptyCorpus(IrisnetError):
    """The dataset root contains no class directories or no images."""


class UnreadableImage(IrisnetError):
    """An image file could not be decoded; the message names the path."""


class InsufficientClassSamples(IrisnetError):
    """A class has too few images for the requested split; names the class."""


# --- saliency errors --------------------------------------------------------

class WindowOutOfBounds(IrisnetError):
    """An occlusion window extends past the image."""


# --- weight-file errors -----------------------------------------------------

class IoFailure(IrisnetError):
    """Reading or writing an artifact file failed."""


class BadMagic(IrisnetError):
    """The file does not start with the weight-file magic bytes."""


class VersionUnsupported(IrisnetError):
    """The weight-file version is newer than this reader understands."""


class CorruptPayload(IrisnetError):
    """Checksum mismatch or truncated weight file."""


class SpecMismatch(IrisnetError):
    """The stored model spec and tensor records disagree."""


class UnknownPrefix(IrisnetError):
    """A freeze prefix matches no parameter name."""
