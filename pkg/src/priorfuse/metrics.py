"""Full-reference fidelity metrics and the perceptual-quality provider interface.

PSNR uses one MSE over all channels jointly on unit-range data (MAX = 1).
SSIM uses a Gaussian window (11 taps, sigma 1.5), is computed per channel on
the valid interior (windows fully inside the image) and averaged across
channels. Perceptual quality is never computed here: it comes from an
IqaProvider adapter and is reported as absent when no provider is available.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from .image import as_array


@dataclass(frozen=True)
class MetricConfig:
    max_value: float = 1.0
    psnr_cap: float = 100.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.max_value <= 0:
            raise ValueError("max_value must be positive")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")


DEFAULT_METRICS = MetricConfig()


def _pair(pred, ref):
    a = as_array(pred).astype(np.float64)
    b = as_array(ref).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, ref, cfg: MetricConfig = DEFAULT_METRICS) -> float:
    """Peak signal-to-noise ratio in dB; capped at cfg.psnr_cap when MSE is 0."""
    a, b = _pair(pred, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cfg.psnr_cap
    return min(10.0 * math.log10(cfg.max_value**2 / mse), cfg.psnr_cap)


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    coords = np.arange(window, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Constant-mode correlate, then crop to positions where the window fits;
    # the padding never reaches those positions, so this is a 'valid' filter.
    m = (kernel.shape[0] - 1) // 2
    out = ndimage.correlate(x, kernel, mode="constant")
    return out[m:-m, m:-m]


def ssim(pred, ref, cfg: MetricConfig = DEFAULT_METRICS) -> float:
    """Mean structural similarity over valid window positions, in [-1, 1]."""
    a, b = _pair(pred, ref)
    h, w, channels = a.shape
    if h < cfg.ssim_window or w < cfg.ssim_window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {cfg.ssim_window}")
    kernel = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma)
    c1 = (cfg.k1 * cfg.max_value) ** 2
    c2 = (cfg.k2 * cfg.max_value) ** 2
    scores = []
    for ch in range(channels):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _local_mean(x, kernel)
        mu_y = _local_mean(y, kernel)
        var_x = _local_mean(x * x, kernel) - mu_x * mu_x
        var_y = _local_mean(y * y, kernel) - mu_y * mu_y
        cov = _local_mean(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Perceptual quality through an adapter
# ---------------------------------------------------------------------------


class IqaUnavailable(RuntimeError):
    """The perceptual-quality provider cannot produce a score."""


@runtime_checkable
class IqaProvider(Protocol):
    version: str

    def score(self, image) -> float: ...


class ConstantIqaProvider:
    """Deterministic stub returning one fixed score for every image."""

    def __init__(self, value: float = 0.5, version: str = "constant-stub"):
        if not 0.0 <= value <= 1.0:
            raise ValueError("score must be in [0, 1]")
        self.value = value
        self.version = version

    def score(self, image) -> float:
        return self.value


_iqa_cache: dict[tuple[str, str], float] = {}


def iqa_score(image, provider: IqaProvider, cache: dict | None = None) -> float:
    """Provider's perceptual score in [0, 1], memoized by (image hash, version)."""
    arr = as_array(image)
    cache = _iqa_cache if cache is None else cache
    key = (hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest(), provider.version)
    if key in cache:
        return cache[key]
    value = float(provider.score(image))
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"provider {provider.version!r} returned {value}, outside [0, 1]")
    cache[key] = value
    return value
