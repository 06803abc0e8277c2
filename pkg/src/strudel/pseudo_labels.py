"""Heuristic auxiliary segmenter, thresholding, and OR fusion of pseudo labels.

The auxiliary segmenter plays the part of an established, deliberately
over-sensitive lesion detector: smooth the normalized image, read the
result as a z-score, and squash it through a logistic curve whose midpoint
is pulled below the nominal z threshold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import backbones
from .datasets import normalize
from .errors import ConfigError, ShapeError

NETWORK_THRESHOLD = 0.5
AUX_THRESHOLD = 0.75
# operating point of the auxiliary segmenter when it is evaluated on its own
AUX_STANDALONE_THRESHOLD = 0.45


class Provenance(str, enum.Enum):
    FUSED_INIT = "fused_init"
    MC_REFRESHED = "mc_refreshed"
    MODEL_FINAL = "model_final"

    @property
    def rank(self):
        return list(Provenance).index(self)


@dataclass
class PseudoLabel:
    sample_id: str
    mask: np.ndarray
    provenance: Provenance
    iteration: int
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.provenance = Provenance(self.provenance)
        self.mask = np.asarray(self.mask)
        if not np.isin(self.mask, (0, 1)).all():
            raise ShapeError(f"pseudo label {self.sample_id!r} is not binary")
        self.mask = self.mask.astype(np.uint8)

    def advance(self, mask, provenance, **thresholds) -> "PseudoLabel":
        """Successor label; provenance may only move forward."""
        provenance = Provenance(provenance)
        if provenance.rank <= self.provenance.rank:
            raise ConfigError(f"provenance cannot go from {self.provenance.value} to {provenance.value}")
        return PseudoLabel(self.sample_id, mask, provenance, self.iteration, thresholds)


@dataclass(frozen=True)
class AuxSegmenterConfig:
    zscore_threshold: float = 1.5
    smoothing_radius: float = 1.0
    sensitivity_bias: float = -0.25
    slope: float = 3.0

    def __post_init__(self):
        if self.smoothing_radius < 0:
            raise ConfigError(f"smoothing_radius must be >= 0, got {self.smoothing_radius}")
        if self.slope <= 0:
            raise ConfigError(f"slope must be > 0, got {self.slope}")


def aux_segment(image, cfg: AuxSegmenterConfig = AuxSegmenterConfig()) -> np.ndarray:
    """Soft lesion response in [0, 1] for a normalized image.

    The response is non-decreasing in every input pixel: the smoothing
    kernel is non-negative and the squashing is monotone.
    """
    z = np.asarray(image, dtype=np.float64)
    if cfg.smoothing_radius > 0:
        z = ndimage.gaussian_filter(z, sigma=cfg.smoothing_radius, mode="nearest")
    midpoint = cfg.zscore_threshold + cfg.sensitivity_bias
    return 0.5 * (1.0 + np.tanh(0.5 * cfg.slope * (z - midpoint)))


def binarize(soft, threshold) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(soft) >= threshold).astype(np.uint8)


def fuse_or(mask_a, mask_b) -> np.ndarray:
    a, b = np.asarray(mask_a), np.asarray(mask_b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse masks of shapes {a.shape} and {b.shape}")
    return np.logical_or(a, b).astype(np.uint8)


def aux_masks(images, cfg=AuxSegmenterConfig(), threshold=AUX_THRESHOLD):
    return [binarize(aux_segment(normalize(im), cfg), threshold) for im in images]


def init_pseudo_labels(
    model: backbones.ModelParams,
    aux_cfg: AuxSegmenterConfig | None,
    subset,
    iteration: int = 0,
    network_threshold: float = NETWORK_THRESHOLD,
    aux_threshold: float = AUX_THRESHOLD,
) -> list[PseudoLabel]:
    """Model mask OR auxiliary mask per sample. ``aux_cfg=None`` skips fusion."""
    if not subset:
        raise ConfigError("cannot initialize pseudo labels for an empty subset")
    from .training import predict

    probs = predict(model, [s.image for s in subset])
    labels = []
    for sample, prob in zip(subset, probs):
        mask = binarize(prob, network_threshold)
        thresholds = {"network": network_threshold}
        if aux_cfg is not None:
            mask = fuse_or(mask, binarize(aux_segment(normalize(sample.image), aux_cfg), aux_threshold))
            thresholds["aux"] = aux_threshold
        labels.append(PseudoLabel(sample.id, mask, Provenance.FUSED_INIT, iteration, thresholds))
    return labels
