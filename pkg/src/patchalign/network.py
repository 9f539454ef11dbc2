"""The fixed patch-descriptor CNN: forward pass and exact reverse-mode
gradients w.r.t. both the weights and the input patch.

Layout: 16x16xc input -> 5x5 valid conv (32) -> tanh -> 2x2/2 max-pool ->
3x3 valid conv (64) -> tanh -> flatten -> fully connected -> 256 outputs.
Weight sharing between the two branches of a pair is either full (siamese)
or everything-but-the-first-layer (pseudo-siamese): in the latter mode each
branch owns its own first-layer copy.

All arithmetic is float64; convolutions are im2col matrix products with
kernel tensors shaped (k, k, c_in, c_out); the flatten order before the
fully connected layer is row-major (row, column, channel).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError

PATCH_SIZE = 16
DESCRIPTOR_DIM = 256

CONV1_K, CONV1_OUT = 5, 32
POOL = 2
CONV2_K, CONV2_OUT = 3, 64
FC_IN = 4 * 4 * CONV2_OUT

MODE_SIAMESE = "siamese"
MODE_PSEUDO = "pseudo"

_WEIGHTS_MAGIC = b"PADW"
_WEIGHTS_VERSION = 1


@dataclass
class NetworkWeights:
    """All network parameters.  conv1_w2/conv1_b2 are the second branch's
    first-layer copy and exist only in pseudo-siamese mode."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv1_w2: Optional[np.ndarray]
    conv1_b2: Optional[np.ndarray]
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    mode: str

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[2]

    def blocks(self):
        """(name, array) pairs in declaration order, skipping absent copies."""
        for name in ("conv1_w", "conv1_b", "conv1_w2", "conv1_b2",
                     "conv2_w", "conv2_b", "fc_w", "fc_b"):
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            conv1_w=self.conv1_w.copy(),
            conv1_b=self.conv1_b.copy(),
            conv1_w2=None if self.conv1_w2 is None else self.conv1_w2.copy(),
            conv1_b2=None if self.conv1_b2 is None else self.conv1_b2.copy(),
            conv2_w=self.conv2_w.copy(),
            conv2_b=self.conv2_b.copy(),
            fc_w=self.fc_w.copy(),
            fc_b=self.fc_b.copy(),
            mode=self.mode,
        )

    def zeros_like(self) -> "NetworkWeights":
        out = self.copy()
        for _, arr in out.blocks():
            arr[...] = 0.0
        return out


def parameter_count(w: NetworkWeights) -> int:
    return sum(arr.size for _, arr in w.blocks())


def init_weights(seed: int, channels: int, mode: str = MODE_SIAMESE) -> NetworkWeights:
    """Deterministic initialization: each layer uniform in
    [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.  In pseudo-siamese mode
    both first-layer copies start identical and diverge through gradients."""
    if channels < 1:
        raise InvalidParameterError("channels must be at least 1")
    if mode not in (MODE_SIAMESE, MODE_PSEUDO):
        raise InvalidParameterError(f"unknown sharing mode {mode!r}")
    rng = np.random.default_rng(seed)

    def layer(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    conv1_w = layer((CONV1_K, CONV1_K, channels, CONV1_OUT), CONV1_K * CONV1_K * channels)
    conv2_w = layer((CONV2_K, CONV2_K, CONV1_OUT, CONV2_OUT), CONV2_K * CONV2_K * CONV1_OUT)
    fc_w = layer((FC_IN, DESCRIPTOR_DIM), FC_IN)
    pseudo = mode == MODE_PSEUDO
    return NetworkWeights(
        conv1_w=conv1_w,
        conv1_b=np.zeros(CONV1_OUT),
        conv1_w2=conv1_w.copy() if pseudo else None,
        conv1_b2=np.zeros(CONV1_OUT) if pseudo else None,
        conv2_w=conv2_w,
        conv2_b=np.zeros(CONV2_OUT),
        fc_w=fc_w,
        fc_b=np.zeros(DESCRIPTOR_DIM),
        mode=mode,
    )


def _conv1_params(w: NetworkWeights, branch: str):
    if branch not in ("first", "second"):
        raise InvalidParameterError(f"unknown branch {branch!r}")
    if w.mode == MODE_PSEUDO and branch == "second":
        return w.conv1_w2, w.conv1_b2
    return w.conv1_w, w.conv1_b


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B * oh * ow, k*k*C) with column order (ki, kj, c)."""
    b = x.shape[0]
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (B, oh, ow, C, k, k)
    oh, ow = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, k * k * x.shape[3])


def _col2im(dcols: np.ndarray, b: int, oh: int, ow: int, k: int, c: int,
            in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add window gradients back onto the input."""
    dwin = dcols.reshape(b, oh, ow, k, k, c)
    dx = np.zeros((b, in_h, in_w, c))
    for ki in range(k):
        for kj in range(k):
            dx[:, ki : ki + oh, kj : kj + ow, :] += dwin[:, :, :, ki, kj, :]
    return dx


def _forward_impl(patches: np.ndarray, w: NetworkWeights, branch: str):
    b = patches.shape[0]
    c = w.channels
    if patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE, c):
        raise InvalidParameterError(
            f"expected patches of shape (B, {PATCH_SIZE}, {PATCH_SIZE}, {c}), "
            f"got {patches.shape}"
        )
    c1w, c1b = _conv1_params(w, branch)

    cols1 = _im2col(patches, CONV1_K)                       # (B*144, 25c)
    z1 = cols1 @ c1w.reshape(-1, CONV1_OUT) + c1b
    a1 = np.tanh(z1).reshape(b, 12, 12, CONV1_OUT)

    # 2x2/2 max pool; ties go to the first window sample in row-major order
    a1w = a1.reshape(b, 6, POOL, 6, POOL, CONV1_OUT)
    w00 = a1w[:, :, 0, :, 0]
    w01 = a1w[:, :, 0, :, 1]
    w10 = a1w[:, :, 1, :, 0]
    w11 = a1w[:, :, 1, :, 1]
    pooled = np.maximum(np.maximum(w00, w01), np.maximum(w10, w11))
    pool_idx = np.where(
        w00 == pooled, 0, np.where(w01 == pooled, 1, np.where(w10 == pooled, 2, 3))
    ).astype(np.uint8)

    cols2 = _im2col(pooled, CONV2_K)                        # (B*16, 288)
    z2 = cols2 @ w.conv2_w.reshape(-1, CONV2_OUT) + w.conv2_b
    a2 = np.tanh(z2).reshape(b, 4, 4, CONV2_OUT)

    flat = a2.reshape(b, FC_IN)
    desc = flat @ w.fc_w + w.fc_b
    cache = {
        "cols1": cols1, "a1": a1, "pool_idx": pool_idx, "pooled": pooled,
        "cols2": cols2, "a2": a2, "flat": flat,
    }
    return desc, cache


def forward_batch(
    patches: np.ndarray, w: NetworkWeights, branch: str = "first",
    return_cache: bool = False,
):
    """Descriptors for a batch of patches (B, 16, 16, c) -> (B, 256).  The
    optional cache feeds backward_batch to avoid recomputing activations."""
    patches = np.asarray(patches, dtype=float)
    desc, cache = _forward_impl(patches, w, branch)
    return (desc, cache) if return_cache else desc


def forward(patch, w: NetworkWeights, branch: str = "first") -> np.ndarray:
    """Descriptor of a single patch; accepts a Patch or an (16, 16, c) array.
    The branch argument selects the first-layer copy in pseudo-siamese mode
    and is ignored under full sharing."""
    data = getattr(patch, "data", patch)
    return forward_batch(np.asarray(data, dtype=float)[None], w, branch)[0]


def backward_batch(
    patches: np.ndarray, w: NetworkWeights, branch: str, upstream: np.ndarray,
    cache: Optional[dict] = None, need_input: bool = True,
):
    """Reverse-mode gradients of sum_i upstream_i . f(patch_i).

    Returns (weight gradients summed over the batch as a NetworkWeights,
    per-patch input gradients (B, 16, 16, c), or None with need_input=False).
    In pseudo-siamese mode the first-layer gradient lands only on the
    branch's copy; the other copy's gradient is present but zero.
    """
    patches = np.asarray(patches, dtype=float)
    b = patches.shape[0]
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (b, DESCRIPTOR_DIM):
        raise InvalidParameterError(
            f"upstream must be (B, {DESCRIPTOR_DIM}), got {upstream.shape}"
        )
    if cache is None:
        _, cache = _forward_impl(patches, w, branch)

    grads = w.zeros_like()

    # fully connected
    grads.fc_w[...] = cache["flat"].T @ upstream
    grads.fc_b[...] = upstream.sum(axis=0)
    dflat = upstream @ w.fc_w.T

    # tanh before flatten
    da2 = dflat.reshape(b, 4, 4, CONV2_OUT)
    dz2 = (da2 * (1.0 - cache["a2"] ** 2)).reshape(b * 16, CONV2_OUT)

    # conv2
    grads.conv2_w[...] = (cache["cols2"].T @ dz2).reshape(w.conv2_w.shape)
    grads.conv2_b[...] = dz2.sum(axis=0)
    dcols2 = dz2 @ w.conv2_w.reshape(-1, CONV2_OUT).T
    dpooled = _col2im(dcols2, b, 4, 4, CONV2_K, CONV1_OUT, 6, 6)

    # max pool: route to the argmax sample
    pool_idx = cache["pool_idx"][:, :, None, :, None, :]
    window_num = np.arange(POOL * POOL, dtype=np.uint8).reshape(1, 1, POOL, 1, POOL, 1)
    da1w = (pool_idx == window_num) * dpooled[:, :, None, :, None, :]
    da1 = da1w.reshape(b, 12, 12, CONV1_OUT)

    # tanh after conv1
    dz1 = (da1 * (1.0 - cache["a1"] ** 2)).reshape(b * 144, CONV1_OUT)

    # conv1 (branch-local in pseudo mode)
    c1w, _ = _conv1_params(w, branch)
    dw1 = (cache["cols1"].T @ dz1).reshape(c1w.shape)
    db1 = dz1.sum(axis=0)
    if w.mode == MODE_PSEUDO and branch == "second":
        grads.conv1_w2[...] = dw1
        grads.conv1_b2[...] = db1
    else:
        grads.conv1_w[...] = dw1
        grads.conv1_b[...] = db1
    if not need_input:
        return grads, None
    dcols1 = dz1 @ c1w.reshape(-1, CONV1_OUT).T
    dpatches = _col2im(dcols1, b, 12, 12, CONV1_K, w.channels, PATCH_SIZE, PATCH_SIZE)
    return grads, dpatches


def backward(patch, w: NetworkWeights, branch: str, upstream: np.ndarray):
    """Single-patch gradients; see backward_batch."""
    data = getattr(patch, "data", patch)
    grads, dpatch = backward_batch(
        np.asarray(data, dtype=float)[None], w, branch,
        np.asarray(upstream, dtype=float)[None],
    )
    return grads, dpatch[0]


def accumulate(dst: NetworkWeights, src: NetworkWeights) -> NetworkWeights:
    """In-place dst += src over all parameter blocks; returns dst."""
    for name, arr in dst.blocks():
        other = getattr(src, name)
        if other is not None:
            arr += other
    return dst


def save_weights(path: str, w: NetworkWeights) -> None:
    """Flat binary format: magic, version (u32 LE), mode byte (0 siamese,
    1 pseudo), channel count (u32 LE), then each block's float64 samples
    little-endian in declaration order."""
    mode_byte = 1 if w.mode == MODE_PSEUDO else 0
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(struct.pack("<IBI", _WEIGHTS_VERSION, mode_byte, w.channels))
        for _, arr in w.blocks():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path: str) -> NetworkWeights:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _WEIGHTS_MAGIC:
            raise InvalidParameterError(f"{path}: not a weights file")
        version, mode_byte, channels = struct.unpack("<IBI", f.read(9))
        if version != _WEIGHTS_VERSION:
            raise InvalidParameterError(f"{path}: unsupported version {version}")
        mode = MODE_PSEUDO if mode_byte == 1 else MODE_SIAMESE
        template = init_weights(0, channels, mode)
        out = template.zeros_like()
        for _, arr in out.blocks():
            raw = f.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise InvalidParameterError(f"{path}: truncated weights file")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
        if f.read(1):
            raise InvalidParameterError(f"{path}: trailing bytes")
    return out
