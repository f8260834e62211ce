"""Exception hierarchy shared by every module of the meta-segmentation stack."""

from typing import Optional


class MetaSegError(Exception):
    """Base class for all library errors"""


class NonFiniteError(MetaSegError, FloatingPointError):
    """A NaN or Inf showed up in a tape value, gradient or hypergradient"""


class ShapeError(MetaSegError, ValueError):
    """Shapes or spatial extents do not agree with what an operation expects"""


class ConfigValidationError(MetaSegError, ValueError):
    """A run configuration value or referenced path is invalid"""


class CheckpointError(MetaSegError):
    """Checkpoint files and manifest disagree"""


class SizeCapError(MetaSegError):
    """Second-order meta-update requested on a head above the size cap"""


class DivergenceError(MetaSegError):
    """Training or a rate experiment blew past the divergence threshold"""

    def __init__(self, message: str, iteration: Optional[int] = None,
                 last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good_checkpoint = last_good_checkpoint
