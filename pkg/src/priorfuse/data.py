"""Dataset manifests, triplet loading, and the co-augmented patch sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import (
    STREAM_EPOCH,
    STREAM_PATCH,
    DegradationType,
    ImageBuffer,
    RandomSeed,
    load_png,
    rng_stream,
    validate_seed,
)

ROTATION_SET = (0, 90, 180, 270)


class ManifestError(ValueError):
    """Manifest file is malformed or violates dataset invariants."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    degraded_path: Path
    gt_path: Path | None = None
    prior_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    degradation: DegradationType
    split: str
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be 'train' or 'test', got {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate entry id {e.id!r}")
            seen.add(e.id)
            if self.split == "train" and e.gt_path is None:
                raise ManifestError(f"train entry {e.id!r} is missing a ground-truth path")

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest.

    Line 1 is the header {"name", "degradation", "split"}; every following
    line is an entry {"id", "degraded", "gt"?, "prior"?}. Relative paths are
    resolved against the manifest's directory. All referenced files must
    exist; every absent path is reported in one error.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    lines = [ln for ln in path.read_text("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
        raw_entries = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON lines: {exc}") from exc

    for key in ("name", "degradation", "split"):
        if key not in header:
            raise ManifestError(f"manifest header missing {key!r}")

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else root / p

    entries = []
    for raw in raw_entries:
        if "id" not in raw or "degraded" not in raw:
            raise ManifestError(f"entry missing 'id' or 'degraded': {raw}")
        entries.append(
            ManifestEntry(
                id=str(raw["id"]),
                degraded_path=resolve(raw["degraded"]),
                gt_path=resolve(raw.get("gt")),
                prior_path=resolve(raw.get("prior")),
            )
        )

    manifest = DatasetManifest(
        name=str(header["name"]),
        degradation=DegradationType(header["degradation"]),
        split=str(header["split"]),
        entries=tuple(entries),
    )
    missing = []
    for e in manifest.entries:
        for p in (e.degraded_path, e.gt_path, e.prior_path):
            if p is not None and not p.exists():
                missing.append(str(p))
    if missing:
        raise ManifestError("missing files:\n  " + "\n  ".join(missing))
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the JSON-lines form, with paths relative to the manifest directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent

    def rel(p):
        if p is None:
            return None
        try:
            return str(Path(p).relative_to(root))
        except ValueError:
            return str(p)

    rows = [
        json.dumps(
            {
                "name": manifest.name,
                "degradation": manifest.degradation.kind,
                "split": manifest.split,
            }
        )
    ]
    for e in manifest.entries:
        row = {"id": e.id, "degraded": rel(e.degraded_path)}
        if e.gt_path is not None:
            row["gt"] = rel(e.gt_path)
        if e.prior_path is not None:
            row["prior"] = rel(e.prior_path)
        rows.append(json.dumps(row))
    path.write_text("\n".join(rows) + "\n", "utf-8")


@dataclass(frozen=True)
class SampleTriplet:
    """A (degraded, prior, ground-truth) record sharing one pixel frame."""

    degraded: ImageBuffer
    prior: ImageBuffer | None
    gt: ImageBuffer | None
    id: str

    def __post_init__(self):
        dims = self.degraded.dims
        if self.prior is not None and self.prior.dims != dims:
            raise ValueError(
                f"prior dims {self.prior.dims} != degraded dims {dims} for {self.id!r}; "
                "priors must be normalized to the degraded frame before loading"
            )
        if self.gt is not None and self.gt.dims != dims:
            raise ValueError(f"gt dims {self.gt.dims} != degraded dims {dims} for {self.id!r}")


@dataclass(frozen=True)
class AugmentationConfig:
    crop: int = 256
    hflip_prob: float = 0.5
    rotation_set: tuple[int, ...] = ROTATION_SET
    seed: RandomSeed = 0

    def __post_init__(self):
        if self.crop < 8:
            raise ValueError(f"crop must be >= 8, got {self.crop}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if not self.rotation_set or any(r not in ROTATION_SET for r in self.rotation_set):
            raise ValueError(f"rotation_set must be a non-empty subset of {ROTATION_SET}")
        validate_seed(self.seed)


def _transform(arr: np.ndarray, top: int, left: int, crop: int, flip: bool, rot: int) -> np.ndarray:
    out = arr[top : top + crop, left : left + crop]
    if flip:
        out = out[:, ::-1]
    if rot:
        out = np.rot90(out, k=rot // 90, axes=(0, 1))
    return np.ascontiguousarray(out)


def sample_patch(triplet: SampleTriplet, cfg: AugmentationConfig, draw_index: int) -> SampleTriplet:
    """Crop one window and apply one flip/rotation to every image in the triplet.

    The window and the transform are drawn from a stream keyed by
    (cfg.seed, draw_index), so a given draw index always yields the same
    patch and two workers sampling disjoint indices never interfere.
    """
    h, w = triplet.degraded.dims
    crop = cfg.crop
    if h < crop or w < crop:
        raise ValueError(
            f"image {triplet.id!r} is {h}x{w}, smaller than crop {crop}; pre-resize the inputs"
        )
    rng = rng_stream(cfg.seed, STREAM_PATCH, int(draw_index))
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < cfg.hflip_prob)
    rot = int(rng.choice(np.asarray(cfg.rotation_set)))

    def tf(img):
        if img is None:
            return None
        return ImageBuffer(_transform(img.data, top, left, crop, flip, rot))

    return SampleTriplet(
        degraded=tf(triplet.degraded), prior=tf(triplet.prior), gt=tf(triplet.gt), id=triplet.id
    )


def epoch_permutation(n: int, seed: RandomSeed, epoch: int) -> np.ndarray:
    """Deterministic shuffle of entry indices for one epoch."""
    return rng_stream(seed, STREAM_EPOCH, int(epoch)).permutation(n)


class TripletLoader:
    """Loads manifest entries as triplets, with a small in-memory cache.

    ``with_prior=False`` skips prior files entirely (they are never opened),
    which is what the no-prior training mode relies on. The ``reader`` hook
    exists so tests can observe exactly which files get read.
    """

    def __init__(self, manifest: DatasetManifest, with_prior: bool = True, with_gt: bool = True,
                 reader=load_png, cache_size: int = 128):
        self.manifest = manifest
        self.with_prior = with_prior
        self.with_gt = with_gt
        self._reader = reader
        self._cache: dict[str, ImageBuffer] = {}
        self._cache_size = cache_size

    def _read(self, path) -> ImageBuffer:
        key = str(path)
        img = self._cache.get(key)
        if img is None:
            img = self._reader(path)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = img
        return img

    def load(self, index: int) -> SampleTriplet:
        e = self.manifest.entries[index]
        prior = None
        if self.with_prior:
            if e.prior_path is None:
                raise ManifestError(f"entry {e.id!r} has no prior, but priors were requested")
            prior = self._read(e.prior_path)
        gt = self._read(e.gt_path) if (self.with_gt and e.gt_path is not None) else None
        return SampleTriplet(degraded=self._read(e.degraded_path), prior=prior, gt=gt, id=e.id)
