"""Action recognition from dense trajectories with learned two-stream ConvISA descriptors,
Fisher-vector encoding, linear SVMs and multi-class iterative re-ranking."""

__version__ = "0.1.0"

from .errors import (ContainerError, CorruptHeaderError, DataError, GeometryError, NumericError,  # noqa: E402
                     TrajlearnError, TruncatedPayloadError)

__all__ = ["__version__", "TrajlearnError", "DataError", "CorruptHeaderError", "TruncatedPayloadError",
           "ContainerError", "GeometryError", "NumericError"]
