"""Monte Carlo dropout sampling and per-pixel predictive variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbones
from .datasets import normalize
from .errors import ConfigError, ShapeError

DEFAULT_PASSES = 10


@dataclass(frozen=True)
class McSamples:
    maps: np.ndarray  # (C, H, W)
    fingerprint: str = ""
    seeds: tuple = ()

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ShapeError(f"MC stack must be (C, H, W), got {self.maps.shape}")
        if self.maps.shape[0] < 2:
            raise ConfigError("an MC stack needs at least 2 samples")

    @property
    def c(self):
        return self.maps.shape[0]


@dataclass(frozen=True)
class UncertaintyMap:
    raw: np.ndarray
    rescaled: np.ndarray
    c: int


def pass_seeds(seed, c):
    """Per-pass dropout seeds derived from one run seed."""
    ss = np.random.SeedSequence([int(seed), 0x3C])
    return tuple(int(s) for s in ss.generate_state(c, dtype=np.uint32))


def mc_sample(params: backbones.ModelParams, image, c: int = DEFAULT_PASSES, seed: int = 0) -> McSamples:
    """``c`` dropout-active forward passes over one raw image."""
    if c < 2:
        raise ConfigError(f"need at least 2 MC passes, got {c}")
    x = normalize(image)[None]
    seeds = pass_seeds(seed, c)
    maps = np.stack([backbones.forward(params, x, True, s)[0, 0].double().numpy() for s in seeds])
    return McSamples(maps, params.fingerprint(), seeds)


def mc_sample_batch(params, images, c=DEFAULT_PASSES, seed=0) -> list[McSamples]:
    """MC stacks for several images; pass ``i`` shares one dropout seed across the batch."""
    if c < 2:
        raise ConfigError(f"need at least 2 MC passes, got {c}")
    if len(images) == 0:
        return []
    x = np.stack([normalize(im) for im in images])
    seeds = pass_seeds(seed, c)
    stack = np.stack([backbones.forward(params, x, True, s)[:, 0].double().numpy() for s in seeds], axis=1)
    fp = params.fingerprint()
    return [McSamples(stack[i], fp, seeds) for i in range(len(images))]


def expectation(samples: McSamples) -> np.ndarray:
    return samples.maps.mean(axis=0)


def variance_map(samples: McSamples) -> np.ndarray:
    """Population variance over the MC axis (divides by C).

    Computed on data shifted by the first pass so identical passes give an
    exact zero.
    """
    dev = samples.maps - samples.maps[0]
    return ((dev - dev.mean(axis=0)) ** 2).mean(axis=0)


def rescale_unit(raw: np.ndarray) -> np.ndarray:
    """Per-image min-max rescaling to [0, 1]; constant grids map to zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def uncertainty(samples: McSamples) -> UncertaintyMap:
    raw = variance_map(samples)
    return UncertaintyMap(raw, rescale_unit(raw), samples.c)
