"""Supervised training with per-sample loss routing.

A :class:`TrainingPool` holds the fixed set (source labels and accepted
pseudo labels, trained with Dice + BCE) and the active pseudo-labeled subset
(trained with Dice + UBCE when it carries an uncertainty map). ``train``
runs Adam over the union and returns new parameters plus a per-epoch loss
trace; the input parameters are left untouched.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import backbones
from .datasets import AugmentConfig, SpatialTransform, draw_transform, normalize
from .errors import ConfigError, NonFiniteLossError
from .losses import DEFAULT as DEFAULT_LOSS
from .losses import LossConfig, Routing, batch_loss

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "total", "dice", "bce", "ubce")


@dataclass
class TrainItem:
    """One training example: normalized image, binary label, optional sigma."""

    id: str
    image: np.ndarray
    label: np.ndarray
    sigma: np.ndarray | None = None
    routing: Routing = Routing.FIXED

    def __post_init__(self):
        self.routing = Routing(self.routing)
        if self.routing is Routing.FIXED and self.sigma is not None:
            raise ConfigError(f"{self.id}: fixed-label items carry no uncertainty map")


def make_item(sample_id, image, label, sigma=None, routing=None) -> TrainItem:
    """Normalize ``image`` and package it; routing follows ``sigma`` by default."""
    if routing is None:
        routing = Routing.FIXED if sigma is None else Routing.PSEUDO
    return TrainItem(
        sample_id,
        normalize(image).astype(np.float32),
        np.asarray(label, dtype=np.float32),
        None if sigma is None else np.asarray(sigma, dtype=np.float32),
        routing,
    )


@dataclass
class TrainingPool:
    fixed: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        fixed_ids = [it.id for it in self.fixed]
        pseudo_ids = [it.id for it in self.pseudo]
        if len(set(fixed_ids)) != len(fixed_ids) or len(set(pseudo_ids)) != len(pseudo_ids):
            raise ConfigError("duplicate sample ids in training pool")
        both = set(fixed_ids) & set(pseudo_ids)
        if both:
            raise ConfigError(f"ids in both fixed and pseudo sets: {sorted(both)[:5]}")
        if any(it.routing is not Routing.FIXED for it in self.fixed):
            raise ConfigError("fixed set items must use fixed-label routing")

    def items(self):
        return list(self.fixed) + list(self.pseudo)

    def with_pseudo(self, pseudo) -> "TrainingPool":
        """Same fixed set, new active pseudo subset."""
        return TrainingPool(list(self.fixed), list(pseudo))

    def extend_fixed(self, items):
        ids = {it.id for it in self.fixed}
        for it in items:
            if it.id in ids:
                raise ConfigError(f"{it.id} is already in the fixed set")
        self.fixed.extend(items)
        self.validate()

    def __len__(self):
        return len(self.fixed) + len(self.pseudo)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            if self.lr == 0:
                continue
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / c1)


def _augment_item(item: TrainItem, t: SpatialTransform):
    image = t.apply(item.image)
    label = t.apply(item.label, is_mask=True)
    sigma = None if item.sigma is None else np.clip(t.apply(item.sigma), 0.0, 1.0)
    return image, label, sigma


def train(
    params: backbones.ModelParams,
    pool,
    loss_cfg: LossConfig = DEFAULT_LOSS,
    epochs: int = 40,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
    augment_cfg: AugmentConfig | None = None,
    iteration=None,
):
    """Train a copy of ``params`` on ``pool``; returns ``(params, trace)``."""
    items = pool.items() if isinstance(pool, TrainingPool) else list(pool)
    if not items:
        raise ConfigError("cannot train on an empty pool")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")

    model = params.clone()
    dtype = next(model.net.parameters()).dtype
    opt = Adam(model.net.parameters(), lr=lr)
    rng = np.random.default_rng([int(seed), 0x7EA1])
    n = len(items)
    trace = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model.net.train()
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            sums = dict.fromkeys(TRACE_COLUMNS[1:], 0.0)
            for b, start in enumerate(range(0, n, batch_size)):
                chunk = [items[i] for i in order[start : start + batch_size]]
                images, labels, sigmas = [], [], []
                for it in chunk:
                    if augment_cfg is not None:
                        image, label, sigma = _augment_item(it, draw_transform(augment_cfg, it.image.shape, rng))
                    else:
                        image, label, sigma = it.image, it.label, it.sigma
                    images.append(image)
                    labels.append(label)
                    sigmas.append(np.zeros_like(label) if sigma is None else sigma)
                x = torch.as_tensor(np.stack(images)[:, None], dtype=dtype)
                y = torch.as_tensor(np.stack(labels)[:, None], dtype=dtype)
                s = torch.as_tensor(np.stack(sigmas)[:, None], dtype=dtype)
                is_pseudo = torch.tensor([it.routing is Routing.PSEUDO for it in chunk])

                opt.zero_grad()
                pred = torch.sigmoid(backbones.logits(model, x, dropout_active=True))
                total, parts = batch_loss(pred, y, s, is_pseudo, loss_cfg)
                if not torch.isfinite(total):
                    raise NonFiniteLossError(
                        epoch, b, {k: float(v.detach()) for k, v in parts.items()} | {"total": float(total.detach())}, iteration
                    )
                total.backward()
                opt.step()
                w = len(chunk) / n
                sums["total"] += float(total.detach()) * w
                for k, v in parts.items():
                    sums[k] += float(v.detach()) * w
            trace.append({"epoch": epoch, **sums})
            log.debug("epoch %d loss %.4f", epoch, sums["total"])
    model.net.eval()
    return model, trace


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in TRACE_COLUMNS})


def read_trace(path):
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)
        ]


def predict(params: backbones.ModelParams, images, batch_size=16) -> np.ndarray:
    """Deterministic (dropout off) probabilities for raw 2D images."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([normalize(im) for im in images[start : start + batch_size]])
        out.append(backbones.forward(params, chunk, dropout_active=False)[:, 0].double().numpy())
    if not out:
        return np.zeros((0,))
    return np.concatenate(out)

