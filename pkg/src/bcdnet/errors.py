"""Exception types shared across the package."""


class BcdnetError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor ---

class ShapeMismatch(BcdnetError):
    """Operand shapes are incompatible with the requested operation."""


class BadAxis(BcdnetError):
    """A reduction axis is out of range or repeated."""


class EmptyReduce(BcdnetError):
    """mean/max reduction over zero elements is undefined."""


# --- autograd ---

class NotScalar(BcdnetError):
    """backward() requires a single-element loss tensor."""


class NonDeterministicLayer(BcdnetError):
    """Two identical forward passes disagreed during a gradient check."""


# --- nn ---

class KernelTooLarge(BcdnetError):
    """Convolution kernel exceeds the padded input extent."""


class WindowTooLarge(BcdnetError):
    """Pooling window exceeds the input extent."""


class TooFewElements(BcdnetError):
    """Batch norm in train mode needs at least two elements per channel."""


# --- optim ---

class BadLabel(BcdnetError):
    """A class label lies outside [0, num_classes)."""


class EmptyBatch(BcdnetError):
    """Metric requested on an empty batch."""


# --- model / checkpoint ---

class BadConfig(BcdnetError):
    """Model configuration violates a structural invariant."""


class BadMagic(BcdnetError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionMismatch(BcdnetError):
    """Checkpoint format version is not supported."""


class TruncatedFile(BcdnetError):
    """Checkpoint ended before all declared payload bytes were read."""


class ChecksumMismatch(BcdnetError):
    """Checkpoint CRC32 trailer does not match the file contents."""


# --- data ---

class NoClasses(BcdnetError):
    """Dataset root contains no class subdirectories."""


class EmptyClass(BcdnetError):
    """A class subdirectory contains no images."""


class EmptySplit(BcdnetError):
    """The requested split has no records."""


class DecodeError(BcdnetError):
    """File could not be decoded as a PNG image."""


class UnsupportedBitDepth(BcdnetError):
    """Only 8-bit PNG images are supported."""
