"""Synthetic lesion domains, augmentation, normalization and subset sampling.

Images are single-channel 2D float grids with bright elliptical lesions on a
textured background. A source and a target domain differ in background
level, texture, noise, lesion contrast and the gamma of the lesion edge
profile. Target ground truth is generated (so it can be scored) but sealed:
reading ``ImageSample.mask`` on a target sample raises ``QuarantineError``.
Only :func:`reveal_mask` opens it, and only evaluation code and the explicit
labeled-target budget call it.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ExhaustionError, QuarantineError, ShapeError

log = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


class ImageSample:
    """One image with an optional binary mask and a domain tag."""

    __slots__ = ("id", "image", "_mask", "domain")

    def __init__(self, id, image, mask=None, domain=SOURCE):
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}")
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2 or image.size == 0:
            raise ShapeError(f"image must be a non-empty 2D grid, got shape {image.shape}")
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != image.shape:
                raise ShapeError(f"mask shape {mask.shape} != image shape {image.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ShapeError("mask values must be 0 or 1")
            mask = mask.astype(np.uint8)
        self.id = str(id)
        self.image = image
        self._mask = mask
        self.domain = domain

    @property
    def has_mask(self):
        return self._mask is not None

    @property
    def mask(self):
        if self.domain == TARGET and self._mask is not None:
            raise QuarantineError(
                f"ground truth of target sample {self.id!r} is quarantined; "
                "use reveal_mask() from evaluation code only"
            )
        return self._mask

    @property
    def shape(self):
        return self.image.shape

    def replace(self, image=None, mask=None):
        """Copy with a new image and/or mask (mask unchanged when None)."""
        return ImageSample(
            self.id,
            self.image if image is None else image,
            self._mask if mask is None else mask,
            self.domain,
        )

    def unlabeled(self):
        return ImageSample(self.id, self.image, None, self.domain)

    def __repr__(self):
        return f"ImageSample(id={self.id!r}, shape={self.image.shape}, domain={self.domain!r}, masked={self.has_mask})"


def reveal_mask(sample: ImageSample) -> np.ndarray | None:
    """Return the ground truth mask, bypassing target quarantine."""
    return sample._mask


def same_sample(a: ImageSample, b: ImageSample) -> bool:
    """Element-wise equality of id, domain, image and mask."""
    if a.id != b.id or a.domain != b.domain or not np.array_equal(a.image, b.image):
        return False
    ma, mb = reveal_mask(a), reveal_mask(b)
    if ma is None or mb is None:
        return ma is None and mb is None
    return np.array_equal(ma, mb)


@dataclass(frozen=True)
class DomainConfig:
    image_size: int = 64
    background_mean: float = 1.0
    background_std: float = 0.15
    lesion_intensity_offset: float = 0.8
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_radius_range: tuple[float, float] = (2.0, 6.0)
    gamma: float = 1.0
    noise_std: float = 0.1
    seed: int = 0
    # bright non-lesion spots; 0 disables them
    artifact_count_range: tuple[int, int] = (0, 0)
    artifact_intensity: float = 0.0

    def __post_init__(self):
        if int(self.image_size) < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        for name in ("lesion_count_range", "lesion_radius_range", "artifact_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must satisfy min <= max, got {(lo, hi)}")
            if lo < 0:
                raise ConfigError(f"{name} must be non-negative, got {(lo, hi)}")
        if self.lesion_radius_range[0] <= 0:
            raise ConfigError("lesion radii must be positive")
        if self.noise_std < 0 or self.background_std < 0:
            raise ConfigError("noise_std and background_std must be >= 0")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("lesion_count_range", "lesion_radius_range", "artifact_count_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DomainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d


def source_domain_config(seed=0, image_size=64) -> DomainConfig:
    """Clean, high-contrast domain standing in for the annotated source data."""
    return DomainConfig(
        image_size=image_size,
        lesion_count_range=(1, 3),
        lesion_radius_range=(2.0, 5.0),
        seed=seed,
        artifact_count_range=(1, 2),
        artifact_intensity=0.5,
    )


def target_domain_config(seed=1, image_size=64) -> DomainConfig:
    """Shifted domain: darker, noisier, larger lesions with soft edges, more and brighter artifacts."""
    return DomainConfig(
        image_size=image_size,
        background_mean=0.7,
        background_std=0.2,
        lesion_intensity_offset=0.7,
        lesion_count_range=(1, 2),
        lesion_radius_range=(4.0, 8.0),
        gamma=1.5,
        noise_std=0.15,
        seed=seed,
        artifact_count_range=(2, 4),
        artifact_intensity=0.9,
    )


def _ellipse_distance(shape, center, radii, angle):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / radii[0]) ** 2 + (v / radii[1]) ** 2)


def _blob_profile(shape, rng, count_range, radius_range):
    """Soft union of random ellipses; profile >= 0.5 exactly on the ellipses."""
    size = shape[0]
    profile = np.zeros(shape)
    for _ in range(int(rng.integers(count_range[0], count_range[1] + 1))):
        radii = rng.uniform(radius_range[0], radius_range[1], size=2)
        margin = min(float(radii.max()) + 1.0, size / 2 - 1)
        center = rng.uniform(margin, size - 1 - margin, size=2)
        angle = rng.uniform(0, np.pi)
        d = _ellipse_distance(shape, center, radii, angle)
        profile = np.maximum(profile, np.clip((1.25 - d) / 0.5, 0.0, 1.0))
    return profile


def _generate_one(config: DomainConfig, index: int):
    rng = np.random.default_rng([config.seed, index])
    size = int(config.image_size)
    shape = (size, size)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0, mode="reflect")
    texture = (texture - texture.mean()) / (texture.std() + 1e-12)
    lesions = _blob_profile(shape, rng, config.lesion_count_range, config.lesion_radius_range)
    artifacts = _blob_profile(shape, rng, config.artifact_count_range, (1.0, 2.0))
    mask = (lesions >= 0.5).astype(np.uint8)
    image = (
        config.background_mean
        + config.background_std * texture
        + config.lesion_intensity_offset * lesions**config.gamma
        + config.artifact_intensity * artifacts * (1 - mask)
        + config.noise_std * rng.standard_normal(shape)
    )
    return image, mask


def generate_domain(config: DomainConfig, n: int, domain: str = SOURCE, prefix=None) -> list[ImageSample]:
    """Generate ``n`` labeled samples; a pure function of ``(config, n, domain)``."""
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}")
    prefix = prefix or domain[:3]
    samples = []
    for i in range(n):
        image, mask = _generate_one(config, i)
        samples.append(ImageSample(f"{prefix}{i:04d}", image, mask, domain))
    return samples


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance standardization; constant grids map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ShapeError("cannot normalize an empty image")
    std = image.std()
    if std < 1e-12:
        log.warning("normalize: constant image, returning zeros")
        return np.zeros_like(image)
    return (image - image.mean()) / std


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[-2:]
    if size > h or size > w:
        raise ShapeError(f"crop size {size} exceeds image size {(h, w)}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[..., top : top + size, left : left + size]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotation: bool = True
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    scaling: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    elastic: bool = True
    elastic_sigma: float = 0.5
    elastic_spacing: int = 16
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range
        if not (-180 <= lo <= hi <= 180):
            raise ConfigError(f"rotation_range must lie in [-180, 180], got {self.rotation_range}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"scale factors must be positive with min <= max, got {self.scale_range}")
        if self.elastic_sigma < 0 or self.elastic_spacing < 1:
            raise ConfigError("elastic_sigma must be >= 0 and elastic_spacing >= 1")

    @classmethod
    def disabled(cls):
        return cls(hflip=False, vflip=False, rotation=False, scaling=False, elastic=False)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("rotation_range", "scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d


@dataclass
class SpatialTransform:
    """A drawn augmentation; re-applying it to the same grid is exact."""

    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    displacement: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_warp(self):
        return self.angle != 0.0 or self.scale != 1.0 or self.displacement is not None

    def _coordinates(self, shape):
        h, w = shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        theta = np.deg2rad(self.angle)
        c, s = np.cos(theta), np.sin(theta)
        # inverse map: output pixel -> input location
        dy, dx = (yy - cy) / self.scale, (xx - cx) / self.scale
        src_y = c * dy - s * dx + cy
        src_x = s * dy + c * dx + cx
        if self.displacement is not None:
            src_y = src_y + self.displacement[0]
            src_x = src_x + self.displacement[1]
        return np.stack([src_y, src_x])

    def apply(self, grid, is_mask=False):
        out = np.asarray(grid, dtype=np.float64)
        if self.is_warp:
            coords = self._coordinates(out.shape)
            if is_mask:
                out = ndimage.map_coordinates(out, coords, order=1, mode="constant", cval=0.0)
            else:
                out = ndimage.map_coordinates(out, coords, order=1, mode="reflect")
        if self.hflip:
            out = out[:, ::-1]
        if self.vflip:
            out = out[::-1, :]
        out = np.ascontiguousarray(out)
        if is_mask:
            return (out >= 0.5).astype(np.uint8)
        return out


def draw_transform(cfg: AugmentConfig, shape, draw: np.random.Generator) -> SpatialTransform:
    """Draw one transform. Every enabled component consumes the generator."""
    t = SpatialTransform()
    if cfg.hflip:
        t.hflip = bool(draw.random() < 0.5)
    if cfg.vflip:
        t.vflip = bool(draw.random() < 0.5)
    if cfg.rotation:
        t.angle = float(draw.uniform(*cfg.rotation_range))
    if cfg.scaling:
        t.scale = float(draw.uniform(*cfg.scale_range))
    if cfg.elastic and cfg.elastic_sigma > 0:
        h, w = shape
        gh = max(2, int(np.ceil(h / cfg.elastic_spacing)) + 1)
        gw = max(2, int(np.ceil(w / cfg.elastic_spacing)) + 1)
        coarse = draw.normal(0.0, cfg.elastic_sigma, size=(2, gh, gw))
        t.displacement = np.stack(
            [ndimage.zoom(c, (h / gh, w / gw), order=3, grid_mode=True, mode="nearest") for c in coarse]
        )
    return t


def augment(sample: ImageSample, cfg: AugmentConfig, draw: np.random.Generator) -> ImageSample:
    """Apply one random spatial transform identically to image and mask."""
    mask = reveal_mask(sample)
    if mask is None:
        raise ShapeError(f"augment needs a labeled sample, {sample.id!r} has no mask")
    t = draw_transform(cfg, sample.shape, draw)
    if not (t.is_warp or t.hflip or t.vflip):
        return sample
    return sample.replace(image=t.apply(sample.image), mask=t.apply(mask, is_mask=True))


# ---------------------------------------------------------------------------
# subset sampling


class TargetPool:
    """Mutable pool of unlabeled target samples, drawn without replacement."""

    def __init__(self, samples):
        self._samples = list(samples)
        ids = [s.id for s in self._samples]
        if len(set(ids)) != len(ids):
            raise ConfigError("sample ids in a pool must be unique")

    def __len__(self):
        return len(self._samples)

    @property
    def ids(self):
        return [s.id for s in self._samples]

    def remove_ids(self, ids):
        ids = set(ids)
        self._samples = [s for s in self._samples if s.id not in ids]


def sample_subset(pool: TargetPool, p: int, draw: np.random.Generator) -> list[ImageSample]:
    """Remove and return ``p`` random samples from ``pool``."""
    remaining = len(pool)
    if p < 0:
        raise ConfigError(f"subset size must be >= 0, got {p}")
    if p > remaining:
        raise ExhaustionError(f"requested {p} samples but only {remaining} remain in the pool")
    picked = draw.choice(remaining, size=p, replace=False)
    chosen = [pool._samples[i] for i in picked]
    keep = set(range(remaining)) - set(int(i) for i in picked)
    pool._samples = [pool._samples[i] for i in sorted(keep)]
    return chosen


# ---------------------------------------------------------------------------
# serialization

MANIFEST = "manifest.txt"


def _to_uint16(grid):
    lo, hi = float(grid.min()), float(grid.max())
    span = hi - lo
    if span <= 0:
        return np.zeros(grid.shape, dtype=np.uint16), lo, hi
    q = np.round((grid - lo) / span * 65535.0)
    return q.astype(np.uint16), lo, hi


def _from_uint16(q, lo, hi):
    return lo + q.astype(np.float64) / 65535.0 * (hi - lo)


def save_domain(samples, directory) -> Path:
    """Write 16-bit PNG images/masks plus a key=value manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        q, lo, hi = _to_uint16(s.image)
        image_rel = f"images/{s.id}.png"
        Image.fromarray(q).save(directory / image_rel)
        record = [f"id={s.id}", f"image={image_rel}"]
        mask = reveal_mask(s)
        if mask is not None:
            mask_rel = f"masks/{s.id}.png"
            Image.fromarray(mask.astype(np.uint16)).save(directory / mask_rel)
            record.append(f"mask={mask_rel}")
        record += [f"domain={s.domain}", f"lo={lo!r}", f"hi={hi!r}"]
        lines.append(" ".join(record))
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, directory / MANIFEST)
    return directory


def read_manifest(directory):
    records = []
    for line in (Path(directory) / MANIFEST).read_text().splitlines():
        if line.strip():
            records.append(dict(kv.split("=", 1) for kv in line.split()))
    return records


def load_domain(directory) -> list[ImageSample]:
    directory = Path(directory)
    samples = []
    for rec in read_manifest(directory):
        q = np.array(Image.open(directory / rec["image"]))
        image = _from_uint16(q, float(rec["lo"]), float(rec["hi"]))
        mask = None
        if "mask" in rec:
            mask = np.array(Image.open(directory / rec["mask"])).astype(np.uint8)
        samples.append(ImageSample(rec["id"], image, mask, rec["domain"]))
    return samples
