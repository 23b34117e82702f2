"""Exception types shared across the package."""


class ConceptProbeError(Exception):
    """Base class for all package-specific errors."""


class FormatError(ConceptProbeError):
    """A container file is malformed.

    ``byte_offset`` points at the position where decoding failed, or -1
    when the failure is not attributable to a specific offset.
    """

    def __init__(self, message: str, byte_offset: int = -1):
        super().__init__(message)
        self.byte_offset = byte_offset


class ValidationError(ConceptProbeError):
    """A loaded artifact violates a structural invariant.

    ``subject`` names the offending element (layer, instance, ...).
    """

    def __init__(self, message: str, subject: str = ""):
        super().__init__(message)
        self.subject = subject


class LayerLookupError(ConceptProbeError):
    """A named layer does not exist in the model."""


class UnsupportedLayerError(ConceptProbeError):
    """The named layer cannot serve the requested role."""


class ParameterError(ConceptProbeError):
    """An operation was called with out-of-contract parameters."""


class EmptyClassError(ConceptProbeError):
    """A class has no instances in the required split."""


class CavTrainingError(ConceptProbeError):
    """A single CAV could not be trained (degenerate inputs)."""


class SnapshotCorruptionError(ConceptProbeError):
    """Stored snapshot bytes do not match their recorded digest."""


class UnsupportedSnapshotVersionError(ConceptProbeError):
    """Snapshot was written by an unknown schema version."""
