"""Exception types raised across the pipeline."""


class PartGaitError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PartGaitError, ValueError):
    pass


class EmptySilhouette(PartGaitError, ValueError):
    """Raised when a frame contains no foreground pixel."""

    def __init__(self, message="frame contains no foreground pixels", frame_index=None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        super().__init__(message)
        self.frame_index = frame_index


class MissingFrames(PartGaitError, FileNotFoundError):
    pass


class EmptySequence(PartGaitError, ValueError):
    pass


class InvalidBinCount(PartGaitError, ValueError):
    pass


class DegenerateBatch(PartGaitError, ValueError):
    """No valid (anchor, positive, negative) triplet exists in a batch."""


class ZeroVector(PartGaitError, ValueError):
    pass


class ManifestError(PartGaitError, ValueError):
    """Manifest rows failed validation; ``rows`` lists (row_number, reason)."""

    def __init__(self, rows):
        self.rows = list(rows)
        lines = "; ".join(f"row {n}: {why}" for n, why in self.rows[:20])
        more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
        super().__init__(f"invalid manifest: {lines}{more}")


class EmptyGalleryView(PartGaitError, ValueError):
    pass


class CheckpointError(PartGaitError, ValueError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class ConfigError(PartGaitError, ValueError):
    pass
