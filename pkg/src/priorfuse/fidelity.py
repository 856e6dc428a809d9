"""Detectors for the ways external priors drift from the input frame.

Three cheap, dependency-free signals: aspect-ratio drift between the input
and the provider's native output, global translation by phase correlation,
and the fidelity/perception divergence flag (perceptually better, pixel-wise
worse than the degraded input). Viewpoint or content changes beyond pure
translation surface only as low phase-correlation confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import as_array

SHIFT_CONFIDENCE_FLOOR = 0.1
ASPECT_DRIFT_FLAG = 0.02


@dataclass(frozen=True)
class FidelityReport:
    aspect_ratio_delta: float
    translation_estimate: tuple[int, int]
    translation_confidence: float
    divergence_flag: bool
    notes: str = ""

    def __post_init__(self):
        if self.aspect_ratio_delta < 0:
            raise ValueError("aspect_ratio_delta must be non-negative")
        if not 0.0 <= self.translation_confidence <= 1.0:
            raise ValueError("translation_confidence must be in [0, 1]")


def aspect_ratio_drift(input_dims: tuple[int, int], raw_prior_dims: tuple[int, int]) -> float:
    """Relative aspect-ratio change |r_in - r_prior| / r_in with r = w / h."""
    h_in, w_in = input_dims
    h_p, w_p = raw_prior_dims
    if min(h_in, w_in, h_p, w_p) <= 0:
        raise ValueError("dims must be positive")
    r_in = w_in / h_in
    r_p = w_p / h_p
    return abs(r_in - r_p) / r_in


def _to_gray(image) -> np.ndarray:
    arr = as_array(image).astype(np.float64)
    return arr.mean(axis=2)


def estimate_global_shift(a, b) -> tuple[int, int, float]:
    """Integer translation (dy, dx) mapping a onto b, plus a confidence score.

    The shift is the peak of the normalized cross-power spectrum (phase
    correlation): b ~ roll(a, (dy, dx)) at the returned values, with shifts
    beyond half the image size wrapped to negative. Confidence is the peak
    of the correlation surface normalized by its total energy, in [0, 1];
    pure circular shifts score ~1, unrelated content scores near 0.
    Constant images return (0, 0, 0.0).
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    ga = ga - ga.mean()
    gb = gb - gb.mean()
    fa = np.fft.fft2(ga)
    fb = np.fft.fft2(gb)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    peak_mag = mag.max()
    if peak_mag <= 1e-12:
        return 0, 0, 0.0
    response = np.real(np.fft.ifft2(cross / np.maximum(mag, 1e-12 * peak_mag)))
    h, w = response.shape
    dy, dx = np.unravel_index(int(np.argmax(response)), response.shape)
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    energy = math.sqrt(float(np.sum(response**2)))
    confidence = float(response.max() / energy) if energy > 0 else 0.0
    return int(dy), int(dx), float(np.clip(confidence, 0.0, 1.0))


def divergence_flag(psnr_prior_vs_gt: float, psnr_degraded_vs_gt: float,
                    iqa_prior: float, iqa_degraded: float) -> bool:
    """True iff the prior looks better (IQA up) while measuring worse (PSNR down)."""
    vals = (psnr_prior_vs_gt, psnr_degraded_vs_gt, iqa_prior, iqa_degraded)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"inputs must be finite, got {vals}")
    return psnr_prior_vs_gt < psnr_degraded_vs_gt and iqa_prior > iqa_degraded


def analyze_pair(degraded, prior, raw_prior_dims: tuple[int, int] | None = None,
                 psnr_prior: float | None = None, psnr_degraded: float | None = None,
                 iqa_prior: float | None = None, iqa_degraded: float | None = None) -> FidelityReport:
    """Bundle the three detectors for one (degraded, prior) pair.

    The divergence flag needs PSNR and IQA values for both sides; when any is
    missing it is reported as False with a note.
    """
    deg = as_array(degraded)
    dims = (deg.shape[0], deg.shape[1])
    drift = aspect_ratio_drift(dims, raw_prior_dims) if raw_prior_dims else 0.0
    dy, dx, conf = estimate_global_shift(degraded, prior)
    notes = []
    if raw_prior_dims is None:
        notes.append("raw prior dims unknown; aspect drift assumed 0")
    if drift > ASPECT_DRIFT_FLAG:
        notes.append(f"aspect drift {drift:.4f} above {ASPECT_DRIFT_FLAG}")
    if conf < SHIFT_CONFIDENCE_FLOOR:
        notes.append("translation estimate unreliable (possible viewpoint/content change)")
    metric_inputs = (psnr_prior, psnr_degraded, iqa_prior, iqa_degraded)
    if any(v is None for v in metric_inputs):
        flag = False
        notes.append("divergence flag unavailable (missing PSNR/IQA inputs)")
    else:
        flag = divergence_flag(*metric_inputs)
    return FidelityReport(
        aspect_ratio_delta=float(drift),
        translation_estimate=(dy, dx),
        translation_confidence=conf,
        divergence_flag=flag,
        notes="; ".join(notes),
    )
