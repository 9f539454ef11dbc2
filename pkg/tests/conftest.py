import os

# the network's GEMMs are too small for BLAS threading to pay off; a single
# thread is ~1.5x faster on 2-core boxes (must be set before numpy loads)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from patchalign.sampling import Image, normalize_image


def wave_image(height: int, width: int, seed: int, channels: int = 1) -> Image:
    """Smooth band-limited texture (sums of low-frequency sinusoids),
    normalized.  Smoothness keeps bilinear slope discontinuities small, so
    finite-difference gradient checks stay valid at step 1e-4."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    data = np.zeros((height, width, channels))
    for c in range(channels):
        for _ in range(6):
            fx, fy = rng.uniform(-0.12, 0.12, 2)
            data[:, :, c] += rng.uniform(0.5, 1.0) * np.sin(
                fx * xs + fy * ys + rng.uniform(0.0, 2 * np.pi)
            )
    return normalize_image(Image(data))


def textured_image(height: int, width: int, seed: int, channels: int = 1) -> Image:
    """Multi-scale random texture in [0, 1], the kind of raster the CLI
    loads; has fine detail at every scale so keypoint sampling always finds
    contrast."""
    rng = np.random.default_rng(seed)
    data = np.zeros((height, width, channels))
    for c in range(channels):
        acc = rng.standard_normal((height, width))
        for _ in range(2):
            acc = (
                np.roll(acc, 1, 0) + np.roll(acc, -1, 0)
                + np.roll(acc, 1, 1) + np.roll(acc, -1, 1) + acc
            ) / 5.0
        ys, xs = np.mgrid[0:height, 0:width].astype(float)
        for _ in range(4):
            fx, fy = rng.uniform(-0.3, 0.3, 2)
            acc += 0.8 * np.sin(fx * xs + fy * ys + rng.uniform(0.0, 2 * np.pi))
        lo, hi = acc.min(), acc.max()
        data[:, :, c] = (acc - lo) / (hi - lo)
    return Image(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
