"""Deformable alignment of prior features onto the degraded frame.

A shared shallow encoder lifts both images to feature maps; an offset head
predicts, per position, a base offset plus per-tap residuals and modulation
weights; a sampler gathers the prior features at the offset tap locations via
explicit bilinear interpolation (mirror padding) and mixes the taps with
learned per-channel weights. No specialized deformable-conv operator is used,
so the whole path is plain differentiable tensor code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .image import RandomSeed, as_array, validate_seed


@dataclass(frozen=True)
class AlignConfig:
    feat_channels: int = 32
    taps: int = 9
    max_offset: float = 16.0
    use_modulation: bool = True

    def __post_init__(self):
        k = math.isqrt(self.taps)
        if k * k != self.taps:
            raise ValueError(f"taps must be a perfect square, got {self.taps}")
        if self.max_offset < 1:
            raise ValueError(f"max_offset must be >= 1, got {self.max_offset}")


class AlignmentField(NamedTuple):
    """Per-position sampling offsets (B, taps, 2, H, W) as (dy, dx) in cells,
    plus optional per-tap modulation weights (B, taps, H, W) in [0, 1]."""

    offsets: torch.Tensor
    modulation: torch.Tensor | None


def base_grid(taps: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Tap layout (taps, 2) as (dy, dx): a centered k x k pattern, row-major."""
    k = math.isqrt(taps)
    half = (k - 1) // 2
    coords = torch.arange(-half, half + 1, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    return torch.stack([gy.reshape(-1), gx.reshape(-1)], dim=1)


def reflect_coords(coords: torch.Tensor, n: int) -> torch.Tensor:
    # Mirror about the edge samples; piecewise-linear, so autograd sees +-1.
    if n == 1:
        return torch.zeros_like(coords)
    period = 2.0 * (n - 1)
    coords = torch.remainder(coords, period)
    return torch.where(coords > n - 1, period - coords, coords)


def bilinear_gather(feat: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample feat (B, C, H, W) at fractional (ys, xs) of shape (B, T, H, W).

    Out-of-bounds coordinates are mirrored. Returns (B, T, C, H, W).
    """
    b, c, h, w = feat.shape
    t = ys.shape[1]
    ys = reflect_coords(ys, h)
    xs = reflect_coords(xs, w)
    y0 = ys.floor()
    x0 = xs.floor()
    fy = (ys - y0).reshape(b, t, 1, -1)
    fx = (xs - x0).reshape(b, t, 1, -1)
    y0 = y0.long().clamp(0, h - 1)
    x0 = x0.long().clamp(0, w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = feat.reshape(b, 1, c, h * w).expand(b, t, c, h * w)

    def take(yi, xi):
        idx = (yi * w + xi).reshape(b, t, 1, -1).expand(b, t, c, -1)
        return torch.gather(flat, 3, idx)

    v00 = take(y0, x0)
    v01 = take(y0, x1)
    v10 = take(y1, x0)
    v11 = take(y1, x1)
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    out = top + (bot - top) * fy
    return out.reshape(b, t, c, h, w)


def deformable_sample(prior_feat: torch.Tensor, field: AlignmentField,
                      tap_weights: torch.Tensor) -> torch.Tensor:
    """Gather prior features at tap positions p + g_k + offset(p, k) and mix.

    tap_weights has shape (C, taps): per-channel, per-tap mixing. With zero
    offsets, unit modulation, and an identity kernel (center tap 1, rest 0)
    the result equals prior_feat exactly.
    """
    b, c, h, w = prior_feat.shape
    offsets, modulation = field
    taps = offsets.shape[1]
    if offsets.shape[-2:] != (h, w):
        raise ValueError(f"field resolution {tuple(offsets.shape[-2:])} != feature ({h}, {w})")
    grid = base_grid(taps, device=prior_feat.device, dtype=prior_feat.dtype)
    py = torch.arange(h, device=prior_feat.device, dtype=prior_feat.dtype).view(1, 1, h, 1)
    px = torch.arange(w, device=prior_feat.device, dtype=prior_feat.dtype).view(1, 1, 1, w)
    ys = py + grid[:, 0].view(1, taps, 1, 1) + offsets[:, :, 0]
    xs = px + grid[:, 1].view(1, taps, 1, 1) + offsets[:, :, 1]
    gathered = bilinear_gather(prior_feat, ys, xs)
    if modulation is not None:
        gathered = gathered * modulation.unsqueeze(2)
    return torch.einsum("btchw,ct->bchw", gathered, tap_weights)


##########################################################################
## Network pieces


class FeatureEncoder(nn.Module):
    """Shallow shared encoder: two 3x3 convs with mirror padding."""

    def __init__(self, channels: int, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        x = F.gelu(self.conv1(x))
        return F.gelu(self.conv2(x))


class OffsetHead(nn.Module):
    """Predicts a shared base offset, per-tap residual offsets, and modulation.

    The final conv starts at zero, so a fresh head emits zero offsets and
    sigmoid(0) = 0.5 modulation everywhere.
    """

    def __init__(self, cfg: AlignConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feat_channels
        out = 2 + 2 * cfg.taps + (cfg.taps if cfg.use_modulation else 0)
        self.conv1 = nn.Conv2d(2 * c, c, 7, padding=3, padding_mode="reflect")
        self.conv2 = nn.Conv2d(c, out, 3, padding=1, padding_mode="reflect")
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, deg_feat: torch.Tensor, prior_feat: torch.Tensor) -> AlignmentField:
        if deg_feat.shape != prior_feat.shape:
            raise ValueError(f"feature dims differ: {tuple(deg_feat.shape)} vs {tuple(prior_feat.shape)}")
        taps = self.cfg.taps
        raw = self.conv2(F.gelu(self.conv1(torch.cat([deg_feat, prior_feat], dim=1))))
        b, _, h, w = raw.shape
        base = raw[:, :2].view(b, 1, 2, h, w)
        delta = raw[:, 2 : 2 + 2 * taps].view(b, taps, 2, h, w)
        offsets = self.cfg.max_offset * torch.tanh(base + delta)
        modulation = None
        if self.cfg.use_modulation:
            modulation = torch.sigmoid(raw[:, 2 + 2 * taps :])
        return AlignmentField(offsets=offsets, modulation=modulation)


class TapMix(nn.Module):
    """Learned per-channel tap mixing. The center tap starts at 2 when
    modulation is enabled (cancelling sigmoid(0) = 0.5) so a fresh module is
    an exact identity warp; 1 otherwise."""

    def __init__(self, cfg: AlignConfig):
        super().__init__()
        weight = torch.zeros(cfg.feat_channels, cfg.taps)
        weight[:, cfg.taps // 2] = 2.0 if cfg.use_modulation else 1.0
        self.weight = nn.Parameter(weight)

    def forward(self, gathered_mix_input):  # pragma: no cover - used via deformable_sample
        raise NotImplementedError("TapMix only carries the mixing weights")


class AlignmentModule(nn.Module):
    def __init__(self, cfg: AlignConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.feat_channels)
        self.offset_head = OffsetHead(cfg)
        self.mix = TapMix(cfg)

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def predict(self, deg_feat: torch.Tensor, prior_feat: torch.Tensor) -> AlignmentField:
        return self.offset_head(deg_feat, prior_feat)

    def sample(self, prior_feat: torch.Tensor, field: AlignmentField) -> torch.Tensor:
        return deformable_sample(prior_feat, field, self.mix.weight)

    def forward(self, degraded: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        deg_feat = self.encoder(degraded)
        prior_feat = self.encoder(prior)
        field = self.predict(deg_feat, prior_feat)
        return self.sample(prior_feat, field)


def build_alignment(cfg: AlignConfig, seed: RandomSeed = 0) -> AlignmentModule:
    """Seeded construction; equal seeds give bit-identical initial weights."""
    torch.manual_seed(validate_seed(seed))
    return AlignmentModule(cfg)


##########################################################################
## Image-level wrappers (numpy in, numpy out)


def _to_tensor(image) -> torch.Tensor:
    arr = as_array(image)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def extract_features(image, module: AlignmentModule) -> np.ndarray:
    """Features of one image as a (C, H, W) array."""
    with torch.no_grad():
        return module.extract(_to_tensor(image))[0].numpy()


def align_prior(degraded, prior, module: AlignmentModule) -> np.ndarray:
    """Prior features warped onto the degraded frame, as (C, H, W)."""
    a = as_array(degraded)
    p = as_array(prior)
    if a.shape[:2] != p.shape[:2]:
        raise ValueError(f"dims differ: {a.shape[:2]} vs {p.shape[:2]}")
    with torch.no_grad():
        return module(_to_tensor(a), _to_tensor(p))[0].numpy()
