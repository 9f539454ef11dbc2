"""Homography representation, the scale-normalized 8-vector parameterization,
point/keypoint warping, and analytic derivatives with respect to the 8-vector.

Conventions: pixel coordinates, +x right, +y down.  A homography maps points
of the first image into the second.  The parameter vector ``psi`` encodes the
eight free entries of the matrix after normalizing each entry by the image
dimensions so that all components have comparable magnitude; ``psi == 0`` is
the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateFrameError,
    InvalidParameterError,
    PointAtInfinityError,
)

TWO_PI = 2.0 * math.pi

DENOM_EPS = 1e-9
DET_EPS = 1e-12
FRAME_EPS = 1e-12


@dataclass(frozen=True)
class Homography:
    """3x3 projective map with the bottom-right entry fixed to 1."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=float)
        if m.shape != (3, 3):
            raise InvalidParameterError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidParameterError("homography has non-finite entries")
        if m[2, 2] != 1.0:
            raise InvalidParameterError("homography must have h[2][2] == 1")
        rows = np.linalg.norm(m, axis=1)
        if np.any(rows < DET_EPS):
            raise InvalidParameterError("homography has a zero row")
        if abs(np.linalg.det(m / rows[:, None])) <= DET_EPS:
            raise InvalidParameterError("homography is numerically singular")
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_flat(cls, values) -> "Homography":
        """Build from a row-major 9-element array, renormalizing to h33 == 1."""
        v = np.asarray(values, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("homography values are not finite")
        if abs(v[2, 2]) <= DET_EPS:
            raise InvalidParameterError("cannot normalize: h[2][2] is zero")
        return cls(v / v[2, 2])

    def to_flat(self) -> list:
        return [float(x) for x in self.h.reshape(9)]

    def inverse(self) -> "Homography":
        return Homography.from_flat(np.linalg.inv(self.h))


@dataclass(frozen=True)
class PsiParams:
    """Scale-normalized homography parameters: 8 dimensionless components
    plus the image dimensions and scale constant used for the normalization."""

    psi: np.ndarray
    w: int
    h: int
    alpha: float = 64.0

    def __post_init__(self):
        v = np.asarray(self.psi, dtype=float).reshape(8)
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("psi has non-finite components")
        if self.w <= 0 or self.h <= 0:
            raise InvalidParameterError("image dimensions must be positive")
        if self.alpha <= 0:
            raise InvalidParameterError("alpha must be positive")
        object.__setattr__(self, "psi", v)

    @classmethod
    def zero(cls, w: int, h: int, alpha: float = 64.0) -> "PsiParams":
        return cls(np.zeros(8), w, h, alpha)

    def replace_psi(self, psi: np.ndarray) -> "PsiParams":
        return PsiParams(psi, self.w, self.h, self.alpha)


@dataclass(frozen=True)
class Keypoint:
    """A patch sampling frame: position, orientation (radians), scale (pixels)."""

    x: float
    y: float
    phi: float
    s: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.phi, self.s)):
            raise InvalidParameterError("keypoint has non-finite fields")
        if self.s <= 0:
            raise InvalidParameterError("keypoint scale must be positive")
        object.__setattr__(self, "phi", self.phi % TWO_PI)

    def frame_vector(self) -> tuple:
        """The 2D vector of length s at angle phi anchored at (x, y)."""
        return (self.s * math.cos(self.phi), self.s * math.sin(self.phi))


def psi_to_homography(p: PsiParams) -> Homography:
    """Invert the componentwise dimension normalization to recover the matrix."""
    a, w, h = p.alpha, float(p.w), float(p.h)
    v = p.psi
    m = np.array(
        [
            [1.0 + v[0] / a, v[1] / a, w * v[4] / a],
            [v[2] / a, 1.0 + v[3] / a, h * v[5] / a],
            [v[6] / (a * w), v[7] / (a * h), 1.0],
        ]
    )
    return Homography(m)


def homography_to_psi(H: Homography, w: int, h: int, alpha: float = 64.0) -> PsiParams:
    """Normalize the eight free matrix entries into the dimensionless vector."""
    if w <= 0 or h <= 0 or alpha <= 0:
        raise InvalidParameterError("w, h and alpha must be positive")
    m = H.h
    psi = alpha * np.array(
        [
            m[0, 0] - 1.0,
            m[0, 1],
            m[1, 0],
            m[1, 1] - 1.0,
            m[0, 2] / w,
            m[1, 2] / h,
            m[2, 0] * w,
            m[2, 1] * h,
        ]
    )
    return PsiParams(psi, w, h, alpha)


def warp_point(H: Homography, x: float, y: float) -> tuple:
    m = H.h
    d = m[2, 0] * x + m[2, 1] * y + 1.0
    if abs(d) <= DENOM_EPS:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    xp = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d
    yp = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d
    return (xp, yp)


def warp_points(H: Homography, pts: np.ndarray) -> tuple:
    """Vectorized projective mapping of an (N, 2) point array.

    Returns (warped (N, 2), valid (N,)); rows with a near-zero denominator are
    flagged invalid and filled with NaN instead of raising.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    m = H.h
    d = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + 1.0
    valid = np.abs(d) > DENOM_EPS
    safe = np.where(valid, d, 1.0)
    out = np.empty_like(pts)
    out[:, 0] = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / safe
    out[:, 1] = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / safe
    out[~valid] = np.nan
    return out, valid


def warp_keypoint(H: Homography, k: Keypoint) -> Keypoint:
    """Warp a keypoint frame: exact projective position, linearized
    orientation/scale transport of the frame vector (shared denominator
    evaluated at the keypoint position)."""
    xp, yp = warp_point(H, k.x, k.y)
    m = H.h
    d = m[2, 0] * k.x + m[2, 1] * k.y + 1.0
    v0, v1 = k.frame_vector()
    v0p = (m[0, 0] * v0 + m[0, 1] * v1) / d
    v1p = (m[1, 0] * v0 + m[1, 1] * v1) / d
    sp = math.hypot(v0p, v1p)
    if sp <= FRAME_EPS:
        raise DegenerateFrameError("warped keypoint frame collapsed")
    return Keypoint(xp, yp, math.atan2(v1p, v0p) % TWO_PI, sp)


def warp_keypoint_frames(H: Homography, frames: np.ndarray) -> tuple:
    """Vectorized keypoint warp over an (N, 4) array of (x, y, phi, s) rows.

    Returns (warped (N, 4) with columns (x', y', v0', v1'), valid (N,)).
    The frame is kept in vector form because the sampling grid is linear in
    (v0', v1'); invalid rows (infinite point or degenerate frame) are NaN.
    """
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    m = H.h
    x, y, phi, s = frames.T
    d = m[2, 0] * x + m[2, 1] * y + 1.0
    valid = np.abs(d) > DENOM_EPS
    safe = np.where(valid, d, 1.0)
    v0 = s * np.cos(phi)
    v1 = s * np.sin(phi)
    out = np.empty_like(frames)
    out[:, 0] = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / safe
    out[:, 1] = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / safe
    out[:, 2] = (m[0, 0] * v0 + m[0, 1] * v1) / safe
    out[:, 3] = (m[1, 0] * v0 + m[1, 1] * v1) / safe
    valid &= np.hypot(out[:, 2], out[:, 3]) > FRAME_EPS
    out[~valid] = np.nan
    return out, valid


def warp_point_jacobian_psi(p: PsiParams, x: float, y: float) -> np.ndarray:
    """d(x', y')/d(psi), a 2x8 matrix, by chaining the projective map through
    the componentwise parameter normalization."""
    H = psi_to_homography(p)
    m = H.h
    d = m[2, 0] * x + m[2, 1] * y + 1.0
    if abs(d) <= DENOM_EPS:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    xp = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d
    yp = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d
    a, w, h = p.alpha, float(p.w), float(p.h)
    J = np.zeros((2, 8))
    J[0, 0] = x / (d * a)
    J[0, 1] = y / (d * a)
    J[0, 4] = w / (d * a)
    J[0, 6] = -xp * x / (d * a * w)
    J[0, 7] = -xp * y / (d * a * h)
    J[1, 2] = x / (d * a)
    J[1, 3] = y / (d * a)
    J[1, 5] = h / (d * a)
    J[1, 6] = -yp * x / (d * a * w)
    J[1, 7] = -yp * y / (d * a * h)
    return J


def warp_frame_jacobian_psi(p: PsiParams, frames: np.ndarray) -> np.ndarray:
    """d(x', y', v0', v1')/d(psi) for each frame row, shape (N, 4, 8).

    Rows follow the same linearized frame transport as warp_keypoint_frames,
    so chaining these Jacobians through the sampling grid gives the exact
    gradient of the coordinates actually used for patch extraction.
    """
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    H = psi_to_homography(p)
    m = H.h
    x, y, phi, s = frames.T
    d = m[2, 0] * x + m[2, 1] * y + 1.0
    if np.any(np.abs(d) <= DENOM_EPS):
        raise PointAtInfinityError("a frame position maps to infinity")
    v0 = s * np.cos(phi)
    v1 = s * np.sin(phi)
    xp = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d
    yp = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d
    v0p = (m[0, 0] * v0 + m[0, 1] * v1) / d
    v1p = (m[1, 0] * v0 + m[1, 1] * v1) / d

    a, w, h = p.alpha, float(p.w), float(p.h)
    n = frames.shape[0]
    J = np.zeros((n, 4, 8))
    da = d * a
    J[:, 0, 0] = x / da
    J[:, 0, 1] = y / da
    J[:, 0, 4] = w / da
    J[:, 1, 2] = x / da
    J[:, 1, 3] = y / da
    J[:, 1, 5] = h / da
    J[:, 2, 0] = v0 / da
    J[:, 2, 1] = v1 / da
    J[:, 3, 2] = v0 / da
    J[:, 3, 3] = v1 / da
    # denominator terms: d depends on psi[6], psi[7] through h31, h32
    for row, num in enumerate((xp, yp, v0p, v1p)):
        J[:, row, 6] = -num * x / (da * w)
        J[:, row, 7] = -num * y / (da * h)
    return J


def rescale_homography(H: Homography, sx: float, sy: float) -> Homography:
    """Conjugate by the axis scaling diag(sx, sy, 1): the returned map acts on
    coordinates multiplied by (sx, sy) on both sides."""
    if sx <= 0 or sy <= 0:
        raise InvalidParameterError("scale factors must be positive")
    S = np.diag([sx, sy, 1.0])
    Sinv = np.diag([1.0 / sx, 1.0 / sy, 1.0])
    m = S @ H.h @ Sinv
    if abs(m[2, 2]) <= DET_EPS:
        raise InvalidParameterError("rescaled homography is degenerate")
    return Homography(m / m[2, 2])


def rescale_homography_pair(
    H: Homography, sx1: float, sy1: float, sx2: float, sy2: float
) -> Homography:
    """Rescale with independent source/target axis factors: the returned map
    takes (sx1*x, sy1*y) to (sx2*x', sy2*y').  Needed when the two images of
    a pair do not share dimensions at a pyramid level."""
    if min(sx1, sy1, sx2, sy2) <= 0:
        raise InvalidParameterError("scale factors must be positive")
    S2 = np.diag([sx2, sy2, 1.0])
    S1inv = np.diag([1.0 / sx1, 1.0 / sy1, 1.0])
    m = S2 @ H.h @ S1inv
    if abs(m[2, 2]) <= DET_EPS:
        raise InvalidParameterError("rescaled homography is degenerate")
    return Homography(m / m[2, 2])
