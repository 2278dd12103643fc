"""Exception hierarchy shared across the toolkit."""


class AsrProbeError(Exception):
    """Base class for all toolkit errors."""


class FormatError(AsrProbeError):
    """Malformed container or checkpoint bytes."""


class UnsupportedEncodingError(FormatError):
    """Valid container, but a codec we do not handle."""


class ConfigError(AsrProbeError):
    """Invalid configuration or arguments."""


class ShapeError(AsrProbeError):
    """Inconsistent tensor / matrix shapes."""


class NumericError(AsrProbeError):
    """Non-finite values where finite ones are required."""


class DegenerateSignalError(AsrProbeError):
    """Signal with zero energy where energy is required."""


class TooShortError(AsrProbeError):
    """Signal or sequence shorter than the operation requires."""


class AlignmentError(AsrProbeError):
    """Paired inputs whose lengths or ids do not line up."""


class NoAlignmentError(AsrProbeError):
    """CTC target that admits no valid alignment path."""


class IncompatibleCheckpointError(FormatError):
    """Checkpoint with an unsupported format version."""


class UndefinedReferenceError(AsrProbeError):
    """Empty reference where a rate would be undefined."""


class SamplingError(AsrProbeError):
    """Corpus too small for the requested pair sampling."""


class UndefinedEerError(AsrProbeError):
    """Score set with only one class."""


class IncompleteRunError(AsrProbeError):
    """Run directory missing artifacts for requested layers."""


class MissingArtifactError(AsrProbeError):
    """Upstream pipeline artifact not found.

    ``producer`` names the subcommand that creates the artifact.
    """

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer
