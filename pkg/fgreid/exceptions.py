"""
Custom exceptions for fgreid.

Provides specific exception types for better error handling
and single-line diagnostics on the command line.
"""


class FGReIDError(Exception):
    """Base exception for fgreid."""
    pass


class ShapeError(FGReIDError, ValueError):
    """Tensor shapes do not fit the operation.

    Common causes:
    - Channel count differs from the projection's input width
    - Coarse and fine feature maps with different (t, h, w)
    - Reducing over an empty or unknown axis
    """
    pass


class GradientCheckError(FGReIDError):
    """Gradient check could not be carried out.

    Common causes:
    - Operation produced NaN/Inf at the evaluation point
    - Non-positive finite-difference step
    """
    pass


class LossPreconditionError(FGReIDError, ValueError):
    """Batch or weights violate a loss precondition.

    Common causes:
    - Fewer than two identities in a batch-hard triplet batch
    - An identity with a single instance
    - Label outside the classifier range
    """
    pass


class NonFiniteLossError(FGReIDError):
    """A training step produced a NaN/Inf loss term.

    Common causes:
    - Learning rate too high
    - Degenerate batch statistics
    """
    def __init__(self, message, term=None):
        self.term = term
        super().__init__(message)


class SamplingError(FGReIDError, ValueError):
    """A batch could not be drawn from the dataset.

    Common causes:
    - Fewer identities than P
    - Empty tracklet
    - P < 2 or K < 2
    """
    pass


class ArchiveError(FGReIDError):
    """Tensor archive could not be read or written."""
    pass


class ArchiveFormatError(ArchiveError):
    """File is not an fgreid tensor archive (bad magic or malformed header)."""
    pass


class ArchiveCorruptionError(ArchiveError):
    """Archive header and payload disagree.

    Common causes:
    - Truncated file
    - Declared dims product does not match the payload length
    - Duplicate tensor names
    """
    pass


class UnsupportedVersionError(ArchiveError):
    """Archive was written by a newer format version."""
    pass


class ConfigurationError(FGReIDError):
    """Configuration is missing or invalid.

    Common causes:
    - Unknown key in the config file
    - Value that does not parse as the key's type
    - Head flags that disable both branches
    """
    pass


class EvaluationError(FGReIDError, ValueError):
    """Retrieval evaluation could not be carried out.

    Common causes:
    - Query and gallery embeddings of different width
    - Re-ranking k1 not smaller than the gallery
    - No query with a valid gallery match
    """
    pass


class ManifestError(FGReIDError):
    """Dataset manifest could not be read.

    Common causes:
    - Missing field or negative identity/camera
    - Archive path that does not resolve relative to the manifest
    - Frame count that disagrees with the archived tensor
    """
    pass


class ExportError(FGReIDError):
    """An image or report could not be written."""
    pass
