"""Binary PGM/PPM image files, keypoint text files, and homography JSON."""

from __future__ import annotations

import json

import numpy as np

from .errors import InvalidParameterError
from .geometry import Homography
from .sampling import Image


def _read_pnm_tokens(data: bytes, count: int) -> tuple:
    """Read `count` whitespace-separated header tokens, skipping # comments.
    Returns (tokens, offset of the first raster byte)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise InvalidParameterError("truncated PNM header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= len(data) or not data[i : i + 1].isspace():
        raise InvalidParameterError("malformed PNM header")
    return tokens, i + 1


def load_image(path: str) -> Image:
    """Load a binary PGM (P5) or PPM (P6) file; sample values map to [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_pnm_tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise InvalidParameterError(f"unsupported PNM magic {magic!r} in {path}")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if width < 1 or height < 1:
        raise InvalidParameterError(f"bad PNM dimensions in {path}")
    if not 0 < maxval < 256:
        raise InvalidParameterError(f"only 8-bit PNM supported, maxval={maxval}")
    n = width * height * channels
    if len(data) - offset < n:
        raise InvalidParameterError(f"truncated PNM raster in {path}")
    raster = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    values = raster.astype(float).reshape(height, width, channels) / maxval
    return Image(values)


def save_image(path: str, img: Image) -> None:
    """Write a binary PGM/PPM file; values are clipped to [0, 1] and scaled
    to 8 bits.  Channel count must be 1 or 3."""
    if img.channels == 1:
        magic = b"P5"
    elif img.channels == 3:
        magic = b"P6"
    else:
        raise InvalidParameterError(f"cannot write {img.channels}-channel PNM")
    raster = np.clip(img.data, 0.0, 1.0) * 255.0
    raster = np.floor(raster + 0.5).astype(np.uint8)
    header = magic + b"\n" + f"{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(raster.tobytes())


def save_heatmap(path: str, values: np.ndarray) -> None:
    """Write a grid of scalars as an 8-bit PGM, min-max scaled so the lowest
    value is darkest."""
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        finite = v[np.isfinite(v)]
        fill = finite.max() if finite.size else 0.0
        v = np.where(np.isfinite(v), v, fill)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi - lo <= 0 else (v - lo) / (hi - lo)
    save_image(path, Image(scaled[:, :, None]))


def load_keypoints(path: str) -> np.ndarray:
    """Parse a keypoint text file, one "x y phi s" line per keypoint;
    returns an (N, 4) array."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise InvalidParameterError(
                    f"{path}:{lineno}: expected 4 fields, got {len(parts)}"
                )
            rows.append([float(p) for p in parts])
    if not rows:
        raise InvalidParameterError(f"{path}: no keypoints")
    return np.asarray(rows, dtype=float)


def save_keypoints(path: str, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=float).reshape(-1, 4)
    with open(path, "w", encoding="utf-8") as f:
        for row in frames:
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def save_correspondences(path: str, pairs: np.ndarray) -> None:
    """Write exported correspondences, one "x y phi s x' y' phi' s'" line
    per pair."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 8)
    with open(path, "w", encoding="utf-8") as f:
        for row in pairs:
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_homography(path: str) -> Homography:
    """Read a homography from JSON: either a bare row-major 9-element array
    or an object with a "homography" key holding one."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if isinstance(doc, dict):
        if "homography" not in doc:
            raise InvalidParameterError(f"{path}: no 'homography' key")
        doc = doc["homography"]
    if not isinstance(doc, list) or len(doc) != 9:
        raise InvalidParameterError(f"{path}: expected 9 numbers")
    return Homography.from_flat(doc)


def save_homography(path: str, H: Homography) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(H.to_flat(), f)
        f.write("\n")
