"""Acquisition of generative restoration priors.

A provider is any callable ``(png_bytes, prompt) -> png_bytes``. Providers are
registered by name; one reference HTTP adapter ships, everything else (and all
test stubs) is user-registered. Results are normalized to the request frame
and cached on disk, so a given (image, prompt, provider) is paid for once.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import (
    STREAM_SYNTH_PRIOR,
    DegradationType,
    ImageBuffer,
    RandomSeed,
    as_array,
    decode_png,
    encode_png,
    load_png,
    resize_bilinear,
    rng_stream,
    validate_seed,
)

PROMPT_TEMPLATE = (
    "Please remove the {degradation} from the image. "
    "The processed image should remain aligned with the input image."
)

API_KEY_ENV = "PRIORFUSE_API_KEY"


class ProviderError(RuntimeError):
    """Provider call failed; carries the provider's own message."""

    def __init__(self, provider: str, message: str):
        super().__init__(f"provider {provider!r} failed: {message}")
        self.provider = provider
        self.provider_message = message


class ProviderTimeout(ProviderError):
    def __init__(self, provider: str, elapsed: float):
        super().__init__(provider, f"timed out after {elapsed:.1f}s")
        self.elapsed = elapsed


class PriorDecodeError(RuntimeError):
    """Provider returned bytes that do not decode as an image."""


def render_prompt(degradation: DegradationType) -> str:
    """Render the editing instruction for one degradation kind."""
    return PROMPT_TEMPLATE.format(degradation=degradation.display_name)


@dataclass(frozen=True)
class PriorRequest:
    image: ImageBuffer
    degradation: DegradationType
    provider: str
    prompt: str = ""
    request_id: str = field(init=False, default="")

    def __post_init__(self):
        if not self.prompt:
            object.__setattr__(self, "prompt", render_prompt(self.degradation))
        digest = hashlib.sha256()
        digest.update(encode_png(self.image))
        digest.update(b"\x00" + self.prompt.encode("utf-8"))
        digest.update(b"\x00" + self.provider.encode("utf-8"))
        object.__setattr__(self, "request_id", digest.hexdigest())


@dataclass(frozen=True)
class PriorResult:
    prior: ImageBuffer
    raw_dims: tuple[int, int]
    provider: str
    latency: float
    from_cache: bool


# ---------------------------------------------------------------------------
# Provider registry and reference HTTP adapter
# ---------------------------------------------------------------------------

_PROVIDERS: dict[str, object] = {}
_registry_lock = threading.Lock()


def register_provider(name: str, fn) -> None:
    """Register ``fn(png_bytes, prompt) -> png_bytes`` under ``name``."""
    with _registry_lock:
        _PROVIDERS[name] = fn


def get_provider(name: str):
    with _registry_lock:
        fn = _PROVIDERS.get(name)
    if fn is None:
        raise KeyError(f"no provider registered under {name!r}; call register_provider first")
    return fn


class HttpProvider:
    """Reference adapter for HTTP image-editing endpoints.

    Request body: {"image": <base64 png>, "prompt": <text>}; response body:
    {"image": <base64 png>}. The bearer token is read from the
    PRIORFUSE_API_KEY environment variable at call time.
    """

    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, png_bytes: bytes, prompt: str) -> bytes:
        import requests

        headers = {}
        token = os.environ.get(API_KEY_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        started = time.monotonic()
        try:
            resp = requests.post(
                self.endpoint,
                json={"image": base64.b64encode(png_bytes).decode("ascii"), "prompt": prompt},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.Timeout:
            raise TimeoutError(f"no response within {time.monotonic() - started:.1f}s")
        if resp.status_code != 200:
            raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        return base64.b64decode(resp.json()["image"])


class RateLimiter:
    """Caps concurrent in-flight calls and, optionally, calls per minute."""

    def __init__(self, max_concurrent: int = 2, per_minute: float | None = None,
                 clock=time.monotonic, sleep=time.sleep):
        self._sem = threading.Semaphore(max_concurrent)
        self._per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._tokens = float(per_minute) if per_minute else 0.0
        self._last = clock()

    def _take_token(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(
                    self._per_minute, self._tokens + (now - self._last) * self._per_minute / 60.0
                )
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) * 60.0 / self._per_minute
            self._sleep(wait)

    def __enter__(self):
        self._sem.acquire()
        if self._per_minute:
            try:
                self._take_token()
            except BaseException:
                self._sem.release()
                raise
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


_default_limiter = RateLimiter()
_id_locks: dict[str, threading.Lock] = {}
_id_locks_guard = threading.Lock()


def _lock_for(request_id: str) -> threading.Lock:
    with _id_locks_guard:
        lock = _id_locks.get(request_id)
        if lock is None:
            lock = threading.Lock()
            _id_locks[request_id] = lock
        return lock


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cache_paths(cache_dir, req: PriorRequest) -> tuple[Path, Path]:
    base = Path(cache_dir) / req.provider
    return base / f"{req.request_id}.png", base / f"{req.request_id}.json"


def acquire_prior(req: PriorRequest, cache_dir, provider_fn=None,
                  limiter: RateLimiter | None = None) -> PriorResult:
    """Fetch (or replay from cache) the prior for one request.

    On a miss the provider is invoked once, its output decoded, recorded at
    native dims, stretched to the request frame, and persisted as
    ``<cache_dir>/<provider>/<request_id>.png`` plus a JSON sidecar. Cache
    writes are atomic; concurrent calls with the same id serialize on a
    per-id lock so the provider runs at most once per id.
    """
    png_path, meta_path = _cache_paths(cache_dir, req)
    h, w = req.image.dims
    limiter = limiter or _default_limiter

    with _lock_for(req.request_id):
        if png_path.exists() and meta_path.exists():
            meta = json.loads(meta_path.read_text("utf-8"))
            return PriorResult(
                prior=load_png(png_path, channels=req.image.channels),
                raw_dims=tuple(meta["raw_dims"]),
                provider=req.provider,
                latency=float(meta["latency"]),
                from_cache=True,
            )

        fn = provider_fn if provider_fn is not None else get_provider(req.provider)
        started = time.monotonic()
        try:
            with limiter:
                raw = fn(encode_png(req.image), req.prompt)
        except TimeoutError:
            raise ProviderTimeout(req.provider, time.monotonic() - started)
        except Exception as exc:
            raise ProviderError(req.provider, str(exc)) from exc
        latency = time.monotonic() - started

        try:
            decoded = decode_png(raw, channels=req.image.channels)
        except Exception as exc:
            raise PriorDecodeError(
                f"provider {req.provider!r} returned undecodable output: {exc}"
            ) from exc
        raw_dims = decoded.dims
        prior = decoded if raw_dims == (h, w) else resize_bilinear(decoded, h, w)

        _atomic_write(png_path, encode_png(prior))
        meta = {
            "prompt": req.prompt,
            "raw_dims": list(raw_dims),
            "latency": latency,
            "timestamp": time.time(),
        }
        _atomic_write(meta_path, json.dumps(meta).encode("utf-8"))
        # Re-read through the cache so repeated calls are bit-identical.
        return PriorResult(
            prior=load_png(png_path, channels=req.image.channels),
            raw_dims=raw_dims,
            provider=req.provider,
            latency=latency,
            from_cache=False,
        )


# ---------------------------------------------------------------------------
# Offline synthetic oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPriorConfig:
    """Emulates a clean-looking but geometrically drifting external restorer."""

    max_translation: float = 8.0
    max_scale_delta: float = 0.03
    color_jitter: float = 0.05
    seed: RandomSeed = 0

    def __post_init__(self):
        if self.max_translation < 0 or self.max_scale_delta < 0 or self.color_jitter < 0:
            raise ValueError("magnitudes must be non-negative")
        if self.max_scale_delta >= 0.5:
            raise ValueError(f"max_scale_delta must be < 0.5, got {self.max_scale_delta}")
        validate_seed(self.seed)


def _reflect_coords(coords: np.ndarray, n: int) -> np.ndarray:
    # Mirror about edge samples (period 2(n-1)); slope is +-1 everywhere, so
    # interpolating after reflection equals interpolating the mirrored signal.
    if n == 1:
        return np.zeros_like(coords)
    period = 2.0 * (n - 1)
    coords = np.remainder(coords, period)
    return np.where(coords > n - 1, period - coords, coords)


def _bilinear_at(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w, _ = arr.shape
    ys = _reflect_coords(ys, h)
    xs = _reflect_coords(xs, w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[..., None]
    fx = (xs - x0).astype(np.float32)[..., None]
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def warp_similarity(image, translation: tuple[float, float] = (0.0, 0.0),
                    scale: float = 1.0) -> ImageBuffer:
    """Translate by (dy, dx) pixels and scale about the center, mirror-padded.

    The output at p samples the input at center + (p - t - center) / s, so
    content moves by +t; estimate_global_shift(image, warped) recovers t.
    A zero translation with scale 1 is an exact identity.
    """
    arr = as_array(image)
    h, w, _ = arr.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = float(translation[0]), float(translation[1])
    ys = (np.arange(h, dtype=np.float64)[:, None] - dy - cy) / scale + cy
    xs = (np.arange(w, dtype=np.float64)[None, :] - dx - cx) / scale + cx
    ys, xs = np.broadcast_arrays(ys, xs)
    return ImageBuffer(np.clip(_bilinear_at(arr, ys, xs), 0.0, 1.0))


def synthesize_offline_prior(gt, cfg: SyntheticPriorConfig) -> ImageBuffer:
    """Warp a clean image into a plausible external-prior stand-in.

    Random similarity transform (|translation| <= max_translation per axis,
    scale within 1 +- max_scale_delta) plus multiplicative per-channel color
    jitter; deterministic given cfg.seed. With all magnitudes zero the output
    equals the input exactly.
    """
    arr = as_array(gt)
    rng = rng_stream(cfg.seed, STREAM_SYNTH_PRIOR)
    dy = float(rng.uniform(-cfg.max_translation, cfg.max_translation))
    dx = float(rng.uniform(-cfg.max_translation, cfg.max_translation))
    scale = float(1.0 + rng.uniform(-cfg.max_scale_delta, cfg.max_scale_delta))
    warped = warp_similarity(arr, (dy, dx), scale).data
    gains = (1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=arr.shape[2])).astype(
        np.float32
    )
    return ImageBuffer(np.clip(warped * gains, 0.0, 1.0))
