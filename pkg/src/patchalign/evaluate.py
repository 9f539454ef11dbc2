"""Descriptor and alignment quality metrics: exact nearest-neighbor
matching, average precision, normalized homography error, correspondence
export, and the misalignment loss-surface sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, InvalidParameterError, PointAtInfinityError
from .geometry import (
    Homography,
    PsiParams,
    homography_to_psi,
    psi_to_homography,
    warp_keypoint_frames,
    warp_points,
)
from .network import PATCH_SIZE, NetworkWeights, forward_batch
from .sampling import Image, bilinear_sample, grids_from_frames, normalize_image
from .trainer import TrainConfig, _frames_to_vec, train_level

logger = logging.getLogger(__name__)

_NN_CHUNK_FLOATS = 1 << 22  # bound on the scratch distance block


@dataclass(frozen=True)
class MatchResult:
    """Per-query exact nearest neighbor and whether it hit the ground-truth
    index (queries and targets are index-aligned)."""

    nn_index: np.ndarray
    correct: np.ndarray

    def __len__(self) -> int:
        return self.nn_index.shape[0]


@dataclass
class SweepGrid:
    """Final training loss per translation offset; failed cells hold NaN and
    an entry in errors."""

    offsets: list
    values: list
    errors: dict = field(default_factory=dict)


def nn_match(queries: np.ndarray, targets: np.ndarray) -> MatchResult:
    """Exhaustive exact L2 nearest neighbor of every query among the targets;
    ties resolve to the lowest target index.  Query i's true match is
    target i."""
    q = np.asarray(queries, dtype=float)
    t = np.asarray(targets, dtype=float)
    if q.ndim != 2 or t.ndim != 2 or q.shape[1] != t.shape[1]:
        raise InvalidParameterError(
            f"descriptor arrays must be 2-D with equal dimension, "
            f"got {q.shape} and {t.shape}"
        )
    if q.shape[0] == 0 or t.shape[0] == 0:
        raise InvalidParameterError("descriptor lists must be nonempty")
    chunk = max(1, _NN_CHUNK_FLOATS // (t.shape[0] * t.shape[1]))
    nn = np.empty(q.shape[0], dtype=int)
    for start in range(0, q.shape[0], chunk):
        block = q[start : start + chunk]
        d2 = ((block[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
        nn[start : start + block.shape[0]] = d2.argmin(axis=1)
    correct = nn == np.arange(q.shape[0])
    return MatchResult(nn_index=nn, correct=correct)


def average_precision(m: MatchResult) -> float:
    """Fraction of queries whose nearest neighbor is the true correspondent."""
    if len(m) == 0:
        raise InvalidParameterError("empty match result")
    return float(np.count_nonzero(m.correct)) / len(m)


def mean_ap(aps) -> float:
    aps = list(aps)
    if not aps:
        raise InvalidParameterError("empty AP list")
    return float(np.mean(aps))


def homography_error(
    H_est: Homography, matches: np.ndarray, w: int, h: int
) -> float:
    """Mean warp residual of ground-truth matches (x, y, x', y') under the
    estimate, normalized by max(w, h).  Matches whose source maps to infinity
    are dropped with a logged count; if none survive this raises."""
    matches = np.asarray(matches, dtype=float).reshape(-1, 4)
    if matches.shape[0] == 0:
        raise InvalidParameterError("matches list is empty")
    warped, valid = warp_points(H_est, matches[:, :2])
    n_excluded = int(np.count_nonzero(~valid))
    if n_excluded:
        logger.warning("homography_error: %d matches mapped to infinity", n_excluded)
    if not np.any(valid):
        raise PointAtInfinityError("all matches map to infinity under the estimate")
    res = np.linalg.norm(warped[valid] - matches[valid, 2:], axis=1)
    return float(res.mean() / max(w, h))


def correspondence_frames(
    frames: np.ndarray, H: Homography, img2_width: int, img2_height: int
):
    """Warp keypoint frames and keep those landing strictly inside the second
    image with a non-degenerate frame.  Returns (kept source frames,
    warped frames in (x', y', v0', v1') form)."""
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    warped, valid = warp_keypoint_frames(H, frames)
    inside = (
        valid
        & (warped[:, 0] > 0.0)
        & (warped[:, 0] < img2_width - 1.0)
        & (warped[:, 1] > 0.0)
        & (warped[:, 1] < img2_height - 1.0)
    )
    return frames[inside], warped[inside]


def extract_patch_array(
    img: Image, frames_vec: np.ndarray, magnification: float
) -> np.ndarray:
    """(N, 4) frames in vector form -> (N, 16, 16, c) patch stack."""
    coords = grids_from_frames(frames_vec, PATCH_SIZE, magnification)
    values = bilinear_sample(img, coords.reshape(-1, 2))
    return values.reshape(frames_vec.shape[0], PATCH_SIZE, PATCH_SIZE, img.channels)


def describe_patches(
    patches: np.ndarray, weights: NetworkWeights, branch: str, chunk: int = 256
) -> np.ndarray:
    """Network descriptors for a patch stack, chunked to bound memory."""
    parts = [
        forward_batch(patches[i : i + chunk], weights, branch)
        for i in range(0, patches.shape[0], chunk)
    ]
    return np.concatenate(parts)


def raw_patch_descriptors(patches: np.ndarray) -> np.ndarray:
    """Baseline descriptor: the flattened patch."""
    return np.asarray(patches, dtype=float).reshape(patches.shape[0], -1)


def center_pixel_descriptors(patches: np.ndarray) -> np.ndarray:
    """Debug descriptor: the sample nearest the patch center."""
    p = np.asarray(patches, dtype=float)
    mid = p.shape[1] // 2
    return p[:, mid, mid, :]


def export_correspondences(
    psi_star: PsiParams, keypoints: np.ndarray, img2_width: int, img2_height: int
) -> np.ndarray:
    """Warp keypoints under the recovered homography and keep the in-bounds
    ones; rows are (x, y, phi, s, x', y', phi', s'), ready for text export."""
    H = psi_to_homography(psi_star)
    kept, warped = correspondence_frames(keypoints, H, img2_width, img2_height)
    out = np.empty((kept.shape[0], 8))
    out[:, :4] = kept
    out[:, 4] = warped[:, 0]
    out[:, 5] = warped[:, 1]
    out[:, 6] = np.arctan2(warped[:, 3], warped[:, 2]) % (2.0 * math.pi)
    out[:, 7] = np.hypot(warped[:, 2], warped[:, 3])
    return out


def loss_surface_sweep(
    img1: Image,
    img2: Image,
    psi_true: PsiParams,
    offsets,
    cfg: TrainConfig,
) -> SweepGrid:
    """Train the descriptor with the homography frozen at the true value
    composed with each pixel translation, recording the mean batch loss over
    the final 10% of iterations.  Cells are independent (per-cell RNG seeded
    by cell index) and a failing cell is recorded without aborting the sweep.
    """
    offsets = [(float(dx), float(dy)) for dx, dy in offsets]
    if (0.0, 0.0) not in offsets:
        raise InvalidParameterError("sweep offsets must include (0, 0)")
    lv1 = normalize_image(img1)
    lv2 = normalize_image(img2)
    h_true = psi_to_homography(psi_true)
    tail = max(1, cfg.iters_per_level - int(math.floor(0.9 * cfg.iters_per_level)))
    grid = SweepGrid(offsets=offsets, values=[])
    for idx, (dx, dy) in enumerate(offsets):
        shift = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
        h_cell = Homography(shift @ h_true.h)
        psi_cell = homography_to_psi(h_cell, psi_true.w, psi_true.h, psi_true.alpha)
        rng = np.random.default_rng([cfg.seed, idx])
        try:
            res = train_level(lv1, lv2, psi_cell, cfg, rng, freeze_psi=True)
            grid.values.append(float(np.mean(res.trace[-tail:])))
        except AlignmentError as exc:
            logger.warning("sweep cell %d (%g, %g) failed: %s", idx, dx, dy, exc)
            grid.values.append(float("nan"))
            grid.errors[idx] = str(exc)
    return grid
