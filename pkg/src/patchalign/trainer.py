"""Joint training of the patch descriptor and the homography parameters.

One momentum-SGD optimizer with a single annealed learning rate updates the
network weights and the 8-vector homography parameters together.  Positive
pairs are regenerated from the current homography estimate every iteration;
the negative set is built once per level and never changes.  The driver runs
the loop coarse-to-fine over an image pyramid, carrying the homography
estimate across levels and discarding the weights of all but the finest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    AlignmentError,
    DivergedError,
    InfeasibleNegativesError,
    InsufficientOverlapError,
    InsufficientTextureError,
    InvalidParameterError,
)
from .geometry import (
    TWO_PI,
    PsiParams,
    homography_to_psi,
    psi_to_homography,
    rescale_homography_pair,
    warp_frame_jacobian_psi,
    warp_keypoint_frames,
    warp_points,
)
from .loss import LossConfig, negative_loss_batch, positive_loss_batch
from .network import (
    MODE_PSEUDO,
    MODE_SIAMESE,
    PATCH_SIZE,
    NetworkWeights,
    accumulate,
    backward_batch,
    forward_batch,
    init_weights,
)
from .sampling import (
    Image,
    bilinear_sample,
    bilinear_sample_backward,
    build_pyramid,
    gradient_magnitude_map,
    grid_offsets,
    grids_from_frames,
    normalize_image,
)


@dataclass(frozen=True)
class TrainConfig:
    keypoints_per_image: int = 4000
    grad_threshold: float = 0.05
    log2_scale_range: tuple = (0.0, 4.0)
    tau: float = 32.0
    negatives_per_positive: int = 1
    batch_size: int = 64
    momentum: float = 0.9
    lr0: float = 1e-4
    lr_decay: float = 0.9995
    iters_per_level: int = 2000
    pyramid_factor: float = 2.0
    pyramid_min_size: int = 80
    alpha: float = 64.0
    mu: float = 1.0
    magnification: float = 2.0
    seed: int = 0
    mode: str = MODE_SIAMESE

    def __post_init__(self):
        if self.keypoints_per_image < 1 or self.batch_size < 1:
            raise InvalidParameterError("counts must be at least 1")
        if self.negatives_per_positive < 1 or self.iters_per_level < 1:
            raise InvalidParameterError("counts must be at least 1")
        if self.grad_threshold <= 0 or self.tau <= 0:
            raise InvalidParameterError("thresholds must be positive")
        lo, hi = self.log2_scale_range
        if not lo < hi:
            raise InvalidParameterError("log2_scale_range must be nondegenerate")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if self.lr0 < 0 or not 0.0 < self.lr_decay <= 1.0:
            raise InvalidParameterError("bad learning-rate schedule")
        if self.pyramid_factor <= 1 or self.pyramid_min_size < 8:
            raise InvalidParameterError("bad pyramid parameters")
        if min(self.alpha, self.mu, self.magnification) <= 0:
            raise InvalidParameterError("alpha, mu, magnification must be positive")
        if self.mode not in (MODE_SIAMESE, MODE_PSEUDO):
            raise InvalidParameterError(f"unknown sharing mode {self.mode!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(mu=self.mu)


@dataclass
class NegativeSet:
    """Fixed negative pairs: keypoint index in the first image, independently
    random frame in the second."""

    kp_index: np.ndarray      # (M,) into the level's keypoint array
    frames2: np.ndarray       # (M, 4) rows (x, y, phi, s) in the second image

    def __len__(self) -> int:
        return self.kp_index.shape[0]


@dataclass
class TrainState:
    psi: PsiParams
    weights: NetworkWeights
    psi_momentum: np.ndarray
    weight_momentum: NetworkWeights
    negatives: Optional[NegativeSet]
    keypoints: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    level: int = 0


@dataclass
class LevelResult:
    psi: PsiParams
    weights: NetworkWeights
    trace: list
    width: int
    height: int


@dataclass
class AlignResult:
    psi: PsiParams
    weights: NetworkWeights
    levels: list = field(default_factory=list)


def _frames_to_vec(frames: np.ndarray) -> np.ndarray:
    """(x, y, phi, s) rows -> (x, y, v0, v1) rows."""
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    out = frames.copy()
    out[:, 2] = frames[:, 3] * np.cos(frames[:, 2])
    out[:, 3] = frames[:, 3] * np.sin(frames[:, 2])
    return out


def sample_keypoints(img: Image, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random keypoint frames (N, 4): positions uniform over pixels whose
    gradient magnitude exceeds the threshold, orientation uniform over the
    circle, log2(scale) uniform over the configured interval."""
    mag = gradient_magnitude_map(img).data[:, :, 0]
    ys, xs = np.nonzero(mag > cfg.grad_threshold)
    if ys.size == 0:
        raise InsufficientTextureError(
            f"no pixel exceeds gradient threshold {cfg.grad_threshold}"
        )
    pick = rng.integers(0, ys.size, size=cfg.keypoints_per_image)
    phi = rng.uniform(0.0, TWO_PI, size=cfg.keypoints_per_image)
    log2s = rng.uniform(*cfg.log2_scale_range, size=cfg.keypoints_per_image)
    out = np.empty((cfg.keypoints_per_image, 4))
    out[:, 0] = xs[pick]
    out[:, 1] = ys[pick]
    out[:, 2] = phi
    out[:, 3] = np.exp2(log2s)
    return out


def build_negative_set(
    kps: np.ndarray,
    img2: Image,
    psi0: PsiParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> NegativeSet:
    """For each keypoint (negatives_per_positive times), rejection-sample a
    random frame in the second image whose position is at least tau pixels
    from where the keypoint lands under the initial homography."""
    kps = np.asarray(kps, dtype=float).reshape(-1, 4)
    if kps.shape[0] == 0:
        raise InvalidParameterError("keypoint list is empty")
    w2, h2 = img2.width, img2.height
    if cfg.tau > np.hypot(w2 - 1, h2 - 1):
        raise InfeasibleNegativesError(
            f"tau={cfg.tau} exceeds the image diagonal of {w2}x{h2}"
        )
    anchors, valid = warp_points(psi_to_homography(psi0), kps[:, :2])

    m = cfg.negatives_per_positive * kps.shape[0]
    kp_index = np.tile(np.arange(kps.shape[0]), cfg.negatives_per_positive)
    frames2 = np.empty((m, 4))
    lo, hi = cfg.log2_scale_range
    for row, ki in enumerate(kp_index):
        for attempt in range(100):
            x = float(rng.integers(0, w2))
            y = float(rng.integers(0, h2))
            far = (not valid[ki]) or np.hypot(
                x - anchors[ki, 0], y - anchors[ki, 1]
            ) >= cfg.tau
            if far:
                frames2[row] = (
                    x,
                    y,
                    rng.uniform(0.0, TWO_PI),
                    np.exp2(rng.uniform(lo, hi)),
                )
                break
        else:
            raise InfeasibleNegativesError(
                f"could not place a negative at least {cfg.tau}px away in 100 tries"
            )
    return NegativeSet(kp_index=kp_index, frames2=frames2)


def regenerate_positives(
    kps: np.ndarray,
    psi: PsiParams,
    img2_width: int,
    img2_height: int,
    min_count: int = 1,
):
    """Warp every keypoint under the current homography and keep those whose
    position lands strictly inside the second image with a non-degenerate
    frame.  Returns (surviving indices, warped frames (M, 4) in vector form
    (x', y', v0', v1')).
    """
    kps = np.asarray(kps, dtype=float).reshape(-1, 4)
    warped, valid = warp_keypoint_frames(psi_to_homography(psi), kps)
    inside = (
        valid
        & (warped[:, 0] > 0.0)
        & (warped[:, 0] < img2_width - 1.0)
        & (warped[:, 1] > 0.0)
        & (warped[:, 1] < img2_height - 1.0)
    )
    idx = np.flatnonzero(inside)
    if idx.size < min_count:
        raise InsufficientOverlapError(
            f"only {idx.size} of {kps.shape[0]} keypoints warp inside the "
            f"{img2_width}x{img2_height} image (need {min_count})"
        )
    return idx, warped[idx]


def _extract_patches(img: Image, frames_vec: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """(N, 4) vector-form frames -> (N, 16, 16, c) patches."""
    coords = grids_from_frames(frames_vec, PATCH_SIZE, cfg.magnification)
    values = bilinear_sample(img, coords.reshape(-1, 2))
    n = frames_vec.shape[0]
    return values.reshape(n, PATCH_SIZE, PATCH_SIZE, img.channels)


def batch_terms(
    img2: Image,
    pos1_patches: np.ndarray,
    pos_frames: np.ndarray,
    psi: PsiParams,
    weights: NetworkWeights,
    neg1_patches: np.ndarray,
    neg2_patches: np.ndarray,
    cfg: TrainConfig,
    compute_psi_grad: bool = True,
):
    """Objective and gradients for one batch.

    pos_frames (B, 4) are the first-image keypoints of the positive pairs in
    (x, y, phi, s) form; their second-image patches are resampled here under
    ``psi`` so the returned psi-gradient flows through the patch extraction.
    Negative patches are taken as given and contribute to the weight
    gradient only.  Returns (total loss, weight gradients, psi gradient).
    """
    b = pos_frames.shape[0]
    warped, valid = warp_keypoint_frames(psi_to_homography(psi), pos_frames)
    if not np.all(valid):
        raise InsufficientOverlapError("a positive keypoint no longer warps validly")
    coords2 = grids_from_frames(warped, PATCH_SIZE, cfg.magnification)
    pos2 = bilinear_sample(img2, coords2.reshape(-1, 2)).reshape(
        b, PATCH_SIZE, PATCH_SIZE, img2.channels
    )

    first = np.concatenate([pos1_patches, neg1_patches])
    second = np.concatenate([pos2, neg2_patches])
    f1, cache1 = forward_batch(first, weights, "first", return_cache=True)
    f2, cache2 = forward_batch(second, weights, "second", return_cache=True)

    pos_vals, g1p, g2p = positive_loss_batch(f1[:b], f2[:b])
    neg_vals, g1n, g2n = negative_loss_batch(f1[b:], f2[b:], cfg.loss_config())
    total = float(pos_vals.sum() + neg_vals.sum())

    # only the second-image positive patches carry homography gradients
    grads, _ = backward_batch(
        first, weights, "first", np.concatenate([g1p, g1n]), cache1,
        need_input=False,
    )
    grads2, dsecond = backward_batch(
        second, weights, "second", np.concatenate([g2p, g2n]), cache2,
        need_input=compute_psi_grad,
    )
    accumulate(grads, grads2)

    if compute_psi_grad:
        dpos2 = dsecond[:b]
        dcoords = bilinear_sample_backward(
            img2, coords2.reshape(-1, 2), dpos2.reshape(-1, img2.channels)
        ).reshape(b, PATCH_SIZE * PATCH_SIZE, 2)
        gx, gy = dcoords[:, :, 0], dcoords[:, :, 1]
        a, bb = grid_offsets(PATCH_SIZE, cfg.magnification)
        dframe = np.empty((b, 4))
        dframe[:, 0] = gx.sum(axis=1)
        dframe[:, 1] = gy.sum(axis=1)
        dframe[:, 2] = (gx * a).sum(axis=1) + (gy * bb).sum(axis=1)
        dframe[:, 3] = (gy * a).sum(axis=1) - (gx * bb).sum(axis=1)
        J = warp_frame_jacobian_psi(psi, pos_frames)
        grad_psi = np.einsum("bi,bij->j", dframe, J)
    else:
        grad_psi = np.zeros(8)
    return total, grads, grad_psi


def sgd_step(
    state: TrainState,
    grad_weights: NetworkWeights,
    grad_psi: np.ndarray,
    cfg: TrainConfig,
) -> TrainState:
    """Classical momentum applied identically to the weights and the
    homography parameters: v <- momentum*v - lr*g; param <- param + v, with
    lr = lr0 * lr_decay**iteration."""
    if not np.all(np.isfinite(grad_psi)) or any(
        not np.all(np.isfinite(arr)) for _, arr in grad_weights.blocks()
    ):
        raise DivergedError(f"non-finite gradient at iteration {state.iteration}")
    lr = cfg.lr0 * cfg.lr_decay**state.iteration
    for (name, vel), (_, grad) in zip(
        state.weight_momentum.blocks(), grad_weights.blocks()
    ):
        vel *= cfg.momentum
        vel -= lr * grad
        getattr(state.weights, name)[...] += vel
    state.psi_momentum *= cfg.momentum
    state.psi_momentum -= lr * np.asarray(grad_psi, dtype=float)
    state.psi = state.psi.replace_psi(state.psi.psi + state.psi_momentum)
    state.iteration += 1
    return state


def train_level(
    img1: Image,
    img2: Image,
    psi_init: PsiParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
    freeze_psi: bool = False,
    level: int = 0,
) -> LevelResult:
    """Joint optimization at one pyramid level: fresh weights, one keypoint
    set, one fixed negative set, then iters_per_level SGD steps.  With
    freeze_psi the homography is held fixed and only the descriptor trains
    (the supervised variant used for loss-surface sweeps)."""
    if img1.channels != img2.channels:
        raise InvalidParameterError("image pair must share a channel count")
    weights = init_weights(int(rng.integers(0, 2**63)), img1.channels, cfg.mode)
    kps = sample_keypoints(img1, cfg, rng)
    negatives = build_negative_set(kps, img2, psi_init, cfg, rng)
    if len(negatives) < cfg.batch_size:
        raise InvalidParameterError(
            "negative set smaller than batch size; increase keypoints_per_image"
        )

    pos1_patches = _extract_patches(img1, _frames_to_vec(kps), cfg)
    neg1_patches = pos1_patches[negatives.kp_index]
    neg2_patches = _extract_patches(img2, _frames_to_vec(negatives.frames2), cfg)

    state = TrainState(
        psi=psi_init,
        weights=weights,
        psi_momentum=np.zeros(8),
        weight_momentum=weights.zeros_like(),
        negatives=negatives,
        keypoints=kps,
        rng=rng,
        iteration=0,
        level=level,
    )
    trace = []
    for _ in range(cfg.iters_per_level):
        live_idx, _ = regenerate_positives(
            kps, state.psi, img2.width, img2.height, min_count=cfg.batch_size
        )
        bidx = rng.choice(live_idx, size=cfg.batch_size, replace=False)
        nidx = rng.choice(len(negatives), size=cfg.batch_size, replace=False)
        total, grads, grad_psi = batch_terms(
            img2,
            pos1_patches[bidx],
            kps[bidx],
            state.psi,
            state.weights,
            neg1_patches[nidx],
            neg2_patches[nidx],
            cfg,
            compute_psi_grad=not freeze_psi,
        )
        if not np.isfinite(total):
            raise DivergedError(f"non-finite batch loss at iteration {state.iteration}")
        if freeze_psi:
            grad_psi = np.zeros(8)
        sgd_step(state, grads, grad_psi, cfg)
        trace.append(total)
    return LevelResult(
        psi=state.psi,
        weights=state.weights,
        trace=trace,
        width=img1.width,
        height=img1.height,
    )


def align(
    img1: Image, img2: Image, psi_init: PsiParams, cfg: TrainConfig
) -> AlignResult:
    """Coarse-to-fine joint alignment.  Takes raw (unnormalized) images,
    builds pyramids, and normalizes each level independently; the homography
    estimate transfers across levels while the weights restart, except at the
    finest level whose weights are returned."""
    pyr1 = build_pyramid(img1, cfg.pyramid_factor, cfg.pyramid_min_size)
    pyr2 = build_pyramid(img2, cfg.pyramid_factor, cfg.pyramid_min_size)
    n_levels = min(len(pyr1.levels), len(pyr2.levels))
    rng = np.random.default_rng(cfg.seed)

    w1, h1 = img1.width, img1.height
    w2, h2 = img2.width, img2.height
    h_full = psi_to_homography(psi_init)
    result = AlignResult(psi=psi_init, weights=None)
    for li in range(n_levels - 1, -1, -1):
        lv1 = normalize_image(pyr1.levels[li])
        lv2 = normalize_image(pyr2.levels[li])
        sx1, sy1 = lv1.width / w1, lv1.height / h1
        sx2, sy2 = lv2.width / w2, lv2.height / h2
        h_level = rescale_homography_pair(h_full, sx1, sy1, sx2, sy2)
        psi_level = homography_to_psi(h_level, lv1.width, lv1.height, cfg.alpha)
        # distance constraints live in the second image; scale tau with it
        level_cfg = dataclasses.replace(cfg, tau=max(1.0, cfg.tau * max(sx2, sy2)))
        try:
            res = train_level(lv1, lv2, psi_level, level_cfg, rng, level=li)
        except AlignmentError as exc:
            raise type(exc)(
                f"level {li} ({lv1.width}x{lv1.height}): {exc}"
            ) from exc
        h_full = rescale_homography_pair(
            psi_to_homography(res.psi), 1.0 / sx1, 1.0 / sy1, 1.0 / sx2, 1.0 / sy2
        )
        result.weights = res.weights
        result.levels.append(
            {
                "level": li,
                "width": lv1.width,
                "height": lv1.height,
                "loss_trace": res.trace,
            }
        )
    result.psi = homography_to_psi(h_full, w1, h1, cfg.alpha)
    return result
