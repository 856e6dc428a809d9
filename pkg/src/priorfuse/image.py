"""Unit-range image values, bilinear resampling, PNG I/O, and seeded RNG streams.

Conventions used across the package:
  * images are (H, W, C) float32 arrays with values in [0, 1], C in {1, 3};
  * dimension tuples are (height, width);
  * shifts, offsets and translations are (dy, dx).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

MIN_SIDE = 8
VALID_CHANNELS = (1, 3)

# Seed-stream tags. Every consumer of randomness derives its generator from
# (seed, tag, *indices) so streams never collide across subsystems.
STREAM_PATCH = 1
STREAM_EPOCH = 2
STREAM_SYNTH_PRIOR = 3
STREAM_INIT = 4

RandomSeed = int


class ImageError(ValueError):
    """Pixel data violates the unit-range image contract."""


def _first_nonfinite(arr: np.ndarray):
    bad = ~np.isfinite(arr)
    if bad.any():
        return tuple(int(i) for i in np.argwhere(bad)[0])
    return None


def _coerce(data) -> np.ndarray:
    arr = np.asarray(getattr(data, "data", data), dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageError(f"expected (H, W, C) pixel data, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImageBuffer:
    """Immutable (H, W, C) float32 image with all values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _coerce(self.data)
        h, w, c = arr.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ImageError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        if c not in VALID_CHANNELS:
            raise ImageError(f"channel count must be one of {VALID_CHANNELS}, got {c}")
        idx = _first_nonfinite(arr)
        if idx is not None:
            raise ImageError(f"non-finite value at index {idx}")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ImageError(
                f"values outside [0, 1] (min {lo:.6g}, max {hi:.6g}); "
                "use clamp_to_unit for raw data"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


def as_array(image) -> np.ndarray:
    """Accept an ImageBuffer or a raw (H, W[, C]) array; return the (H, W, C) view."""
    if isinstance(image, ImageBuffer):
        return image.data
    return _coerce(image)


def clamp_to_unit(image) -> ImageBuffer:
    """Clip values into [0, 1]. Rejects non-finite input, naming the first offender."""
    arr = as_array(image)
    idx = _first_nonfinite(arr)
    if idx is not None:
        raise ImageError(f"non-finite value at index {idx}")
    return ImageBuffer(np.clip(arr, 0.0, 1.0))


def resize_bilinear(image, out_h: int, out_w: int) -> ImageBuffer:
    """Bilinearly resample to (out_h, out_w) using half-pixel centers and edge clamping.

    This is the single resampler used everywhere in the package (prior
    normalization, synthetic warps), so resampling behaviour stays consistent
    across modules. Resampling to the input dims is an exact identity, and
    constant images stay constant, because interpolation is computed in
    lerp form a + (b - a) * t.
    """
    arr = as_array(image)
    if out_h < MIN_SIDE or out_w < MIN_SIDE:
        raise ImageError(f"target dims must be >= {MIN_SIDE}, got {out_h}x{out_w}")
    h, w, _ = arr.shape
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]

    v00 = arr[y0[:, None], x0[None, :]]
    v01 = arr[y0[:, None], x1[None, :]]
    v10 = arr[y1[:, None], x0[None, :]]
    v11 = arr[y1[:, None], x1[None, :]]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    out = top + (bot - top) * fy
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def load_png(path, channels: int = 3) -> ImageBuffer:
    """Load an 8-bit PNG as a unit-range buffer.

    Grayscale files are promoted to 3 channels when ``channels=3``; RGB files
    are averaged down when ``channels=1``. Alpha is dropped.
    """
    if channels not in VALID_CHANNELS:
        raise ImageError(f"channels must be one of {VALID_CHANNELS}")
    with PILImage.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return ImageBuffer(arr)


def save_png(image, path) -> None:
    """Write as 8-bit PNG, quantizing by round(v * 255)."""
    arr = as_array(image)
    q = np.rint(arr * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    PILImage.fromarray(q).save(path, format="PNG")


def encode_png(image) -> bytes:
    import io

    arr = as_array(image)
    q = np.rint(arr * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    buf = io.BytesIO()
    PILImage.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes, channels: int = 3) -> ImageBuffer:
    import io

    with PILImage.open(io.BytesIO(data)) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return ImageBuffer(arr)


_DISPLAY_NAMES = {
    "haze": "haze",
    "rain": "rain",
    "low_light": "low light",
    "raindrop": "raindrops",
    "reflection": "reflections",
    "underwater": "underwater distortion",
    "snow": "snow",
    "motion_blur": "motion blur",
    "defocus_blur": "defocus blur",
    "noise": "noise",
}

DEGRADATION_KINDS = tuple(_DISPLAY_NAMES)


@dataclass(frozen=True)
class DegradationType:
    """A degradation kind plus the phrase substituted into editing prompts."""

    kind: str
    display_name: str = ""

    def __post_init__(self):
        if self.kind not in _DISPLAY_NAMES:
            raise ValueError(f"unknown degradation kind {self.kind!r}; known: {DEGRADATION_KINDS}")
        name = self.display_name or _DISPLAY_NAMES[self.kind]
        if not name.strip() or name != name.lower():
            raise ValueError(f"display_name must be a non-empty lowercase phrase, got {name!r}")
        object.__setattr__(self, "display_name", name)


def validate_seed(seed: RandomSeed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def rng_stream(seed: RandomSeed, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, *key); equal arguments, equal stream."""
    return np.random.default_rng([validate_seed(seed), *[int(k) for k in key]])
