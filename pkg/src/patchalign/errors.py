"""Exception hierarchy shared by all patchalign modules."""


class AlignmentError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(AlignmentError):
    """A value violates a documented precondition (non-finite, wrong sign, bad shape)."""


class PointAtInfinityError(AlignmentError):
    """Projective division denominator is (numerically) zero."""


class DegenerateFrameError(AlignmentError):
    """A warped keypoint frame collapsed to zero scale."""


class ZeroVarianceError(AlignmentError):
    """An image has no intensity variation and cannot be normalized."""


class InsufficientTextureError(AlignmentError):
    """No pixel passes the gradient-magnitude threshold for keypoint sampling."""


class InfeasibleNegativesError(AlignmentError):
    """The negative-pair distance constraint cannot be satisfied in this image."""


class InsufficientOverlapError(AlignmentError):
    """Too few keypoints warp inside the second image to fill a batch."""


class DivergedError(AlignmentError):
    """Training produced a non-finite loss or gradient."""
