"""Exception hierarchy shared by the codec modules.

Each family carries the process exit code the CLI maps it to.
"""


class CodecError(Exception):
    exit_code = 1


class InvalidPointError(CodecError, ValueError):
    pass


class DegenerateGeometryError(CodecError, ValueError):
    pass


class InvalidBeamError(CodecError, ValueError):
    pass


class EmptyFrameError(CodecError, ValueError):
    pass


class OutOfVolumeError(CodecError, ValueError):
    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class CorruptTreeError(CodecError):
    exit_code = 3


class FormatError(CodecError):
    """Malformed file, bitstream, or checkpoint."""

    exit_code = 3


class TruncationError(FormatError):
    pass


class ConfigMismatchError(CodecError):
    """Model digest or configuration disagrees with the bitstream/checkpoint."""

    exit_code = 4


class SyncError(CodecError):
    """Encoder/decoder state divergence detected on the probability path."""

    exit_code = 2


class RoundTripError(CodecError):
    exit_code = 2


class NumericError(CodecError, FloatingPointError):
    pass


class UsageError(CodecError, RuntimeError):
    pass
