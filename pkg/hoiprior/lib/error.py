"""Exceptions raised by hoiprior.

Every exception carries the process exit code the command line uses when it
is not handled further down: 2 for invalid input, 3 for numerical divergence.
"""


class HoiPriorError(Exception):
    """Base class for all hoiprior errors."""

    exit_code = 1


# Validation errors -------------------------------------------------------------


class ValidationError(HoiPriorError):
    """Input data or configuration failed validation."""

    exit_code = 2


class ConfigError(ValidationError):
    """A config value is missing, unknown or out of range."""


class DimensionMismatchError(ValidationError):
    """Array dimensions do not match what an operation expects."""


class DatasetTooSmallError(ValidationError):
    """The dataset has too few items for the requested neighbor count."""


class TemplateMismatchError(ValidationError):
    """Two scenes or templates which should agree do not."""


class InsufficientAnnotationsError(ValidationError):
    """Too few annotations were given for a well-posed pose solve."""


class EmptyPairsError(ValidationError):
    """No contact pairs were given."""


class EmptyInputError(ValidationError):
    """An operation was given an empty collection."""


class DatasetFormatError(ValidationError):
    """A file on disk does not follow the expected format."""


# Geometry errors ---------------------------------------------------------------


class GeometryError(ValidationError):
    """A geometric precondition was violated."""


class BehindCameraError(GeometryError):
    """A point lies on or behind the camera's near plane."""

    def __init__(self, index: int) -> None:
        """Create the error for a point index.

        Parameters
        ----------
        index : int
            The index of the offending point.

        """
        super().__init__(f"Point {index} is behind the camera")
        self.index = index


class DegenerateRayError(GeometryError):
    """A keypoint coincides with the camera center."""

    def __init__(self, index: int) -> None:
        """Create the error for a keypoint index.

        Parameters
        ----------
        index : int
            The index of the offending keypoint.

        """
        super().__init__(f"Keypoint {index} coincides with the camera center")
        self.index = index


class EmptyProjectionError(GeometryError):
    """Every triangle of a mesh is behind the camera."""


class RankDeficientError(GeometryError):
    """A point configuration is collinear or coincident."""


class ZeroAreaMeshError(GeometryError):
    """A mesh has no surface area to sample."""


# Numerical errors --------------------------------------------------------------


class NumericalDivergenceError(HoiPriorError):
    """A loss or intermediate value became non-finite."""

    exit_code = 3


class NoConvergenceError(NumericalDivergenceError):
    """A solver did not reach its acceptance threshold."""


# Pipeline errors ---------------------------------------------------------------


class StageError(HoiPriorError):
    """A pipeline stage failed.

    The exit code is taken from the error which caused the stage to fail.
    """

    def __init__(self, stage: str, cause: Exception) -> None:
        """Wrap the error raised by a stage.

        Parameters
        ----------
        stage : str
            The name of the stage which failed.
        cause : Exception
            The original error.

        """
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 1)
