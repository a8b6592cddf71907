"""Exception types raised by the scanloc library.

Every anticipated failure mode gets its own class so callers (and the CLI)
can distinguish bad input data from genuine bugs.  All of them derive from
ScanlocError; the CLI maps any ScanlocError to exit code 1.
"""


class ScanlocError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ScanlocError):
    """A config or data file is malformed (unknown keys, missing fields, bad paths)."""


# geometry ------------------------------------------------------------------

class NonPositiveDepthError(ScanlocError):
    """Projection or deprojection was asked for a depth at or behind the camera."""


class DegenerateGeometryError(ScanlocError):
    """Triangulation geometry carries no information (coincident cameras, parallel rays)."""


class ZeroVectorError(ScanlocError):
    """An angle or direction was requested for a zero-length vector."""


# hand-eye calibration ------------------------------------------------------

class InsufficientSamplesError(ScanlocError):
    """Too few pose samples to build calibration motion pairs."""


class InsufficientMotionError(ScanlocError):
    """The recorded motions do not excite enough rotation axes to solve AX = XB."""


# point cloud ---------------------------------------------------------------

class EmptyCloudError(ScanlocError):
    """No valid depth pixels survived fusion, or a query hit an empty cloud."""


# target model --------------------------------------------------------------

class DegenerateAxisError(ScanlocError):
    """The keypoint segment is vertical (or zero length); no planar perpendicular exists."""


class AmbiguousSignError(ScanlocError):
    """The reference direction cannot disambiguate the perpendicular's sign."""


class RankDeficientError(ScanlocError):
    """The least-squares design rows are collinear; ratios are not identifiable."""


class NonFiniteError(ScanlocError):
    """SGD diverged to non-finite parameters or loss."""


class MissingKeypointError(ScanlocError):
    """A joint required by the requested pose kind is invalid in at least one view."""


class DegenerateRollError(ScanlocError):
    """The roll reference is parallel to the surface normal; roll is unconstrained."""


# synthetic scenes ----------------------------------------------------------

class CameraMissesTorsoError(ScanlocError):
    """A synthetic camera placement does not keep the torso in both views."""


class InvalidRangeError(ScanlocError):
    """A sampling range is empty or outside the parameter's valid domain."""


# evaluation ----------------------------------------------------------------

class InsufficientDataError(ScanlocError):
    """Not enough scenes to run the requested evaluation."""


class NoValidFoldsError(ScanlocError):
    """Every cross-validation fold was faulty; summary statistics are undefined."""


class MissingPixelError(ScanlocError):
    """A depth lookup found no valid pixel near the requested image location."""
