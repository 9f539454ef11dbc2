"""Image containers, normalization, pyramid construction, keypoint sampling
grids, and differentiable bilinear patch extraction.

Pixel (i, j) of an image sits at coordinate (x=j, y=i); interpolation nodes
are at integer coordinates.  Sampling outside [0, w-1] x [0, h-1] clamps to
the border, and the coordinate gradient is zero in a clamped direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ZeroVarianceError
from .geometry import Homography, Keypoint, warp_points


@dataclass(frozen=True)
class Image:
    """Float raster with shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
            raise InvalidParameterError(f"bad image shape {a.shape}")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Patch:
    """Square n x n x c sample block resampled from an image."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InvalidParameterError(f"bad patch shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidParameterError("patch has non-finite samples")
        object.__setattr__(self, "data", a)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Pyramid:
    """Image pyramid, finest level first."""

    levels: list
    scale_factor: float


def normalize_image(raw: Image) -> Image:
    """Affinely map the raster to zero mean / unit standard deviation,
    computed jointly over all channels."""
    data = raw.data
    if data.size < 2:
        raise InvalidParameterError("image must have at least 2 samples")
    mean = float(data.mean())
    std = float(data.std())
    if std <= 1e-12:
        raise ZeroVarianceError("constant image cannot be normalized")
    return Image((data - mean) / std)


def pyramid_level_count(longer_side: int, factor: float, min_size: int) -> int:
    """1 + floor(log_factor(longer / min_size)), at least 1.

    A small epsilon absorbs floating-point log error at exact powers.
    """
    if longer_side < min_size:
        return 1
    return 1 + int(math.floor(math.log(longer_side / min_size) / math.log(factor) + 1e-9))


def _box_reduce(data: np.ndarray, out_h: int, out_w: int, factor: float) -> np.ndarray:
    """Box-filter-and-subsample one level: output pixel (i, j) averages the
    input box [i*factor, (i+1)*factor) x [j*factor, (j+1)*factor)."""
    in_h, in_w = data.shape[:2]

    def bounds(n_out, n_in):
        lo = np.minimum(np.floor(np.arange(n_out) * factor).astype(int), n_in - 1)
        hi = np.ceil((np.arange(n_out) + 1) * factor).astype(int)
        hi = np.clip(np.maximum(hi, lo + 1), 1, n_in)
        return lo, hi

    rlo, rhi = bounds(out_h, in_h)
    clo, chi = bounds(out_w, in_w)
    # integral image for O(1) box sums
    integ = np.zeros((in_h + 1, in_w + 1, data.shape[2]))
    np.cumsum(np.cumsum(data, axis=0), axis=1, out=integ[1:, 1:])
    box = (
        integ[rhi][:, chi]
        - integ[rlo][:, chi]
        - integ[rhi][:, clo]
        + integ[rlo][:, clo]
    )
    area = (rhi - rlo)[:, None] * (chi - clo)[None, :]
    return box / area[:, :, None]


def build_pyramid(img: Image, factor: float = 2.0, min_size: int = 80) -> Pyramid:
    """Repeatedly box-filter and subsample until the longer side would drop
    below min_size.  Images already smaller than min_size yield one level."""
    if factor <= 1:
        raise InvalidParameterError("pyramid factor must exceed 1")
    if min_size < 8:
        raise InvalidParameterError("pyramid min_size must be at least 8")
    n_levels = pyramid_level_count(max(img.width, img.height), factor, min_size)
    levels = [img]
    for _ in range(n_levels - 1):
        prev = levels[-1]
        out_h = max(1, int(math.floor(prev.height / factor + 0.5)))
        out_w = max(1, int(math.floor(prev.width / factor + 0.5)))
        levels.append(Image(_box_reduce(prev.data, out_h, out_w, factor)))
    return Pyramid(levels, factor)


def grid_offsets(n: int, magnification: float) -> tuple:
    """Row-major grid coefficients (a, b), each of length n*n, such that for a
    frame vector (v0, v1) anchored at (x, y) the sample coordinates are
    (x + a*v0 - b*v1, y + a*v1 + b*v0).

    The grid footprint side is magnification * s for a frame of scale s; a
    single-point grid (n == 1) sits exactly on the anchor.
    """
    if n < 1:
        raise InvalidParameterError("grid side must be at least 1")
    if magnification <= 0:
        raise InvalidParameterError("magnification must be positive")
    if n == 1:
        steps = np.zeros(1)
    else:
        steps = (np.arange(n) - (n - 1) / 2.0) * (magnification / (n - 1))
    a = np.tile(steps, n)           # varies along columns (+x in frame)
    b = np.repeat(steps, n)         # varies along rows (+y in frame)
    return a, b


def grid_from_frame(
    x: float, y: float, v0: float, v1: float, n: int, magnification: float
) -> np.ndarray:
    """Sample coordinates (n*n, 2) for a frame given in vector form."""
    a, b = grid_offsets(n, magnification)
    out = np.empty((n * n, 2))
    out[:, 0] = x + a * v0 - b * v1
    out[:, 1] = y + a * v1 + b * v0
    return out


def grids_from_frames(frames: np.ndarray, n: int, magnification: float) -> np.ndarray:
    """Vectorized grid_from_frame over (N, 4) rows of (x, y, v0, v1); returns
    (N, n*n, 2)."""
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    a, b = grid_offsets(n, magnification)
    x, y, v0, v1 = frames[:, 0:1], frames[:, 1:2], frames[:, 2:3], frames[:, 3:4]
    out = np.empty((frames.shape[0], n * n, 2))
    out[:, :, 0] = x + a[None, :] * v0 - b[None, :] * v1
    out[:, :, 1] = y + a[None, :] * v1 + b[None, :] * v0
    return out


def sample_grid(k: Keypoint, n: int, magnification: float) -> np.ndarray:
    """Row-major n x n coordinate grid centered on the keypoint, rotated by
    its orientation, with total footprint side magnification * s."""
    v0 = k.s * math.cos(k.phi)
    v1 = k.s * math.sin(k.phi)
    return grid_from_frame(k.x, k.y, v0, v1, n, magnification)


def _bilinear_terms(img: Image, coords: np.ndarray):
    h, w = img.height, img.width
    c = np.asarray(coords, dtype=float).reshape(-1, 2)
    x = np.clip(c[:, 0], 0.0, w - 1.0)
    y = np.clip(c[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    d = img.data
    p00 = d[y0, x0]
    p01 = d[y0, x1]
    p10 = d[y1, x0]
    p11 = d[y1, x1]
    return c, p00, p01, p10, p11, fx, fy


def bilinear_sample(img: Image, coords: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of (m, 2) coordinates; returns (m, channels).
    Out-of-bounds coordinates clamp to the border."""
    _, p00, p01, p10, p11, fx, fy = _bilinear_terms(img, coords)
    top = p00 + fx * (p01 - p00)
    bot = p10 + fx * (p11 - p10)
    return top + fy * (bot - top)


def bilinear_sample_backward(
    img: Image, coords: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of the sampled values w.r.t. the coordinates, contracted with
    upstream (m, channels); returns (m, 2).  Clamped directions get zero."""
    c, p00, p01, p10, p11, fx, fy = _bilinear_terms(img, coords)
    up = np.asarray(upstream, dtype=float).reshape(c.shape[0], img.channels)
    ddx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
    ddy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)
    grad = np.empty_like(c)
    grad[:, 0] = (ddx * up).sum(axis=1)
    grad[:, 1] = (ddy * up).sum(axis=1)
    in_x = (c[:, 0] >= 0.0) & (c[:, 0] <= img.width - 1.0)
    in_y = (c[:, 1] >= 0.0) & (c[:, 1] <= img.height - 1.0)
    grad[:, 0] *= in_x
    grad[:, 1] *= in_y
    return grad


def sample_patch(img: Image, coords: np.ndarray, n: int) -> Patch:
    """Extract an n x n patch from a row-major coordinate list."""
    values = bilinear_sample(img, coords)
    return Patch(values.reshape(n, n, img.channels))


def gradient_magnitude_map(img: Image) -> Image:
    """Per-pixel gradient magnitude (central differences, one-sided at the
    borders), maximized over channels; single-channel result."""
    gy, gx = np.gradient(img.data, axis=(0, 1))
    mag = np.sqrt(gx * gx + gy * gy).max(axis=2)
    return Image(mag[:, :, None])


def warp_image(img: Image, mapping: Homography) -> Image:
    """Resample: output pixel p takes the value of img at mapping(p), with
    border clamping.  To synthesize I' = I warped by H, pass H.inverse();
    to pull I' back into I's frame under an estimate H, pass H itself."""
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    mapped, valid = warp_points(mapping, pts)
    mapped[~valid] = 0.0
    values = bilinear_sample(img, mapped)
    values[~valid] = 0.0
    return Image(values.reshape(h, w, img.channels))
