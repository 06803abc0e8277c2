"""Self-training with uncertainty-dependent label refinement, plus baselines.

One iteration ``k`` of the loop:

1. draw ``P`` target images without replacement;
2. pseudo label them with the previous model OR the auxiliary segmenter;
3. fine-tune the previous model on D_fix plus those labels (Dice + BCE);
4. refresh the labels from the MC-dropout mean of the fine-tuned model and
   take the rescaled MC variance as per-pixel uncertainty;
5. train a freshly initialized model on D_fix plus the refreshed labels,
   with uncertainty-weighted BCE on the pseudo-labeled part;
6. add the new model's own predictions on the subset to D_fix.

Plain self-training runs the identical loop with every uncertainty weight
forced to zero and ordinary BCE on the pseudo labels.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .backbones import BackboneSpec, ModelParams, init_model, load_checkpoint, save_checkpoint
from .datasets import AugmentConfig, TargetPool, reveal_mask, sample_subset
from .errors import ConfigError, ExhaustionError, NonFiniteLossError
from .losses import LossConfig
from .pseudo_labels import (
    AUX_THRESHOLD,
    NETWORK_THRESHOLD,
    AuxSegmenterConfig,
    Provenance,
    binarize,
    init_pseudo_labels,
)
from .training import TrainingPool, make_item, predict, train, write_trace
from .uncertainty import DEFAULT_PASSES, expectation, mc_sample_batch, rescale_unit, variance_map

log = logging.getLogger(__name__)


def derive_seed(seed, *tags) -> int:
    return int(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]).generate_state(1)[0])


@dataclass(frozen=True)
class StrudelConfig:
    K: int = 5
    P: int = 8
    C: int = DEFAULT_PASSES
    network_threshold: float = NETWORK_THRESHOLD
    aux_threshold: float = AUX_THRESHOLD
    epochs_scratch: int = 40
    epochs_finetune: int = 10
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    aux: AuxSegmenterConfig = field(default_factory=AuxSegmenterConfig)
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.P < 1:
            raise ConfigError(f"P must be >= 1, got {self.P}")
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}")
        for name in ("network_threshold", "aux_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.epochs_scratch < 1 or self.epochs_finetune < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("lr must be >= 0 and batch_size >= 1")

    def check_pool(self, target_size):
        if self.K * self.P > target_size:
            raise ConfigError(f"K*P = {self.K * self.P} exceeds the target pool size {target_size}")

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["augment"] = None if self.augment is None else self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = BackboneSpec.from_dict(d["backbone"])
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "aux" in d:
            d["aux"] = AuxSegmenterConfig(**d["aux"])
        if d.get("augment") is not None:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        return cls(**d)


@dataclass
class IterationRecord:
    k: int
    subset_ids: list
    provenance_counts: dict
    fixed_size: int
    finetune_trace: list
    retrain_trace: list
    metrics: dict | None = None
    dsc_per_sample: list | None = None
    checkpoint: str | None = None
    model: ModelParams | None = field(default=None, repr=False)

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if k != "model"}
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class RunHistory:
    method: str
    records: list = field(default_factory=list)
    base_metrics: dict | None = None

    def dsc_curve(self):
        return [r.metrics["dsc"][0] if r.metrics else float("nan") for r in self.records]

    def append(self, record: IterationRecord):
        if self.records and record.k != self.records[-1].k + 1:
            raise ConfigError(f"iteration {record.k} does not follow {self.records[-1].k}")
        self.records.append(record)


# ---------------------------------------------------------------------------
# helpers


def source_items(source):
    if not source:
        raise ConfigError("labeled source set is empty")
    items = []
    for s in source:
        if s.mask is None:
            raise ConfigError(f"source sample {s.id!r} has no label")
        items.append(make_item(s.id, s.image, s.mask))
    return items


def labeled_target_items(labeled_target):
    """The explicitly budgeted labeled target samples (quarantine lifted on purpose)."""
    items = []
    for s in labeled_target:
        mask = reveal_mask(s)
        if mask is None:
            raise ConfigError(f"labeled target sample {s.id!r} has no mask")
        items.append(make_item(s.id, s.image, mask))
    return items


def evaluate_model(params, eval_set, threshold=NETWORK_THRESHOLD):
    """Per-sample metric reports of a model on held-out labeled samples."""
    if not eval_set:
        return []
    probs = predict(params, [s.image for s in eval_set])
    return metrics.evaluate_samples([binarize(p, threshold) for p in probs], eval_set)


def _summary(reports):
    return {k: list(v) for k, v in metrics.summarize(reports).items()} if reports else None


def _save_mask(mask, path):
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def _load_mask(path):
    return (np.array(Image.open(path)) > 0).astype(np.uint8)


def _write_json(obj, path):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# base and supervised baselines


def train_base(source, spec: BackboneSpec, seed: int, config: StrudelConfig | None = None) -> ModelParams:
    """Supervised Dice + BCE training on labeled source data only."""
    config = config or StrudelConfig(backbone=spec)
    items = source_items(source)
    model = init_model(spec, derive_seed(seed, 0, 0))
    model, _ = train(
        model,
        TrainingPool(items),
        config.loss,
        config.epochs_scratch,
        config.lr,
        config.batch_size,
        derive_seed(seed, 0, 1),
        config.augment,
    )
    return model


def run_joint(source, labeled_target, spec: BackboneSpec, seed: int, config: StrudelConfig | None = None):
    """Train from scratch on source plus the labeled target budget."""
    config = config or StrudelConfig(backbone=spec)
    items = source_items(source) + labeled_target_items(labeled_target)
    model = init_model(spec, derive_seed(seed, 0, 0))
    model, _ = train(
        model, TrainingPool(items), config.loss, config.epochs_scratch, config.lr, config.batch_size,
        derive_seed(seed, 900, 1), config.augment,
    )
    return model


def run_finetune(base: ModelParams, labeled_target, seed: int, config: StrudelConfig | None = None):
    """Fine-tune the base model on the labeled target budget alone."""
    config = config or StrudelConfig(backbone=base.spec)
    items = labeled_target_items(labeled_target)
    model, _ = train(
        base, TrainingPool(items), config.loss, config.epochs_finetune, config.lr, config.batch_size,
        derive_seed(seed, 901, 1), config.augment,
    )
    return model


# ---------------------------------------------------------------------------
# the self-training loop


def _refresh(model, subset, config, seed, k, use_uncertainty, init_labels):
    """MC-mean labels and rescaled variance for one subset."""
    stacks = mc_sample_batch(model, [s.image for s in subset], config.C, derive_seed(seed, k, 3))
    refreshed, sigmas = [], []
    for lab, stack in zip(init_labels, stacks):
        mask = binarize(expectation(stack), config.network_threshold)
        refreshed.append(lab.advance(mask, Provenance.MC_REFRESHED, network=config.network_threshold))
        raw = variance_map(stack)
        sigmas.append(rescale_unit(raw) if use_uncertainty else np.zeros_like(raw))
    return refreshed, sigmas


def _persist_iteration(run_dir, k, model, subset, labels_by_stage, sigmas, ft_trace, rt_trace):
    it_dir = Path(run_dir) / f"iter_{k:02d}"
    (it_dir / "pseudo_labels").mkdir(parents=True, exist_ok=True)
    (it_dir / "uncertainty").mkdir(exist_ok=True)
    save_checkpoint(model, it_dir / "checkpoint.pt", extra={"iteration": k})
    lines = []
    for stage in labels_by_stage:
        for lab in stage:
            rel = f"pseudo_labels/{lab.sample_id}.{lab.provenance.value}.png"
            _save_mask(lab.mask, it_dir / rel)
            th = ",".join(f"{k_}:{v}" for k_, v in sorted(lab.thresholds.items()))
            lines.append(
                f"id={lab.sample_id} provenance={lab.provenance.value} iteration={lab.iteration} thresholds={th} path={rel}"
            )
    (it_dir / "pseudo_labels" / "manifest.txt").write_text("\n".join(lines) + "\n")
    for s, sigma in zip(subset, sigmas):
        np.save(it_dir / "uncertainty" / f"{s.id}.npy", sigma.astype(np.float32))
    write_trace(ft_trace, it_dir / "loss_finetune.csv")
    write_trace(rt_trace, it_dir / "loss_retrain.csv")
    return it_dir


def _load_completed(run_dir, K):
    """Iteration records already finished in ``run_dir`` (in order)."""
    done = []
    for k in range(1, K + 1):
        path = Path(run_dir) / f"iter_{k:02d}" / "record.json"
        if not path.exists():
            break
        done.append(IterationRecord.from_json(json.loads(path.read_text())))
    return done


def self_train(
    config: StrudelConfig,
    source,
    target,
    *,
    use_aux=True,
    use_uncertainty=True,
    zero_uncertainty=False,
    base: ModelParams | None = None,
    eval_set=None,
    run_dir=None,
    resume=False,
    method="strudel",
):
    """The shared iterative loop behind every self-training variant.

    ``use_uncertainty=False`` trains pseudo labels with plain BCE (routing
    ``fixed_label``); ``zero_uncertainty=True`` keeps UBCE routing but with
    all weights at zero, which must reproduce plain self-training exactly.
    Returns ``(final model, RunHistory)``.
    """
    target = list(target)
    config.check_pool(len(target))
    seed = config.seed
    pool = TargetPool(target)
    by_id = {s.id: s for s in target}
    fixed = TrainingPool(source_items(source))
    n_source = len(fixed.fixed)
    history = RunHistory(method)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    completed = _load_completed(run_dir, config.K) if (run_dir is not None and resume) else []

    if base is None:
        base_ckpt = run_dir / "base" / "checkpoint.pt" if run_dir is not None else None
        if resume and base_ckpt is not None and base_ckpt.exists():
            base = load_checkpoint(base_ckpt)
        else:
            base = train_base(source, config.backbone, seed, config)
            if base_ckpt is not None:
                base_ckpt.parent.mkdir(exist_ok=True)
                save_checkpoint(base, base_ckpt)
    if eval_set:
        history.base_metrics = _summary(evaluate_model(base, eval_set, config.network_threshold))

    model = base
    for rec in completed:
        it_dir = run_dir / f"iter_{rec.k:02d}"
        pool.remove_ids(rec.subset_ids)
        finals = [
            make_item(i, by_id[i].image, _load_mask(it_dir / "pseudo_labels" / f"{i}.model_final.png"))
            for i in rec.subset_ids
        ]
        fixed.extend_fixed(finals)
        model = load_checkpoint(it_dir / "checkpoint.pt")
        rec.model = model
        history.append(rec)
        log.info("resumed iteration %d from %s", rec.k, it_dir)

    for k in range(len(completed) + 1, config.K + 1):
        try:
            subset = sample_subset(pool, config.P, np.random.default_rng(derive_seed(seed, k, 0)))
        except ExhaustionError as exc:
            raise ExhaustionError(f"iteration {k}: {exc}") from exc
        ids = [s.id for s in subset]
        images = [s.image for s in subset]

        # initial pseudo labels: previous model OR auxiliary segmenter
        init = init_pseudo_labels(
            model, config.aux if use_aux else None, subset, k, config.network_threshold, config.aux_threshold
        )

        try:
            # fine-tune the previous model on D_fix + initial labels
            d_k = fixed.with_pseudo([make_item(i, im, lab.mask) for i, im, lab in zip(ids, images, init)])
            tuned, ft_trace = train(
                model, d_k, config.loss, config.epochs_finetune, config.lr, config.batch_size,
                derive_seed(seed, k, 1), config.augment, iteration=k,
            )

            # refresh labels and uncertainty from MC dropout
            refreshed, sigmas = _refresh(tuned, subset, config, seed, k, use_uncertainty and not zero_uncertainty, init)
            del tuned

            # retrain from scratch on D_fix + refreshed labels
            if use_uncertainty:
                pseudo = [
                    make_item(i, im, lab.mask, sigma)
                    for i, im, lab, sigma in zip(ids, images, refreshed, sigmas)
                ]
                assert all(it.sigma is not None for it in pseudo)
            else:
                pseudo = [make_item(i, im, lab.mask) for i, im, lab in zip(ids, images, refreshed)]
            assert all(lab.provenance is Provenance.MC_REFRESHED for lab in refreshed)
            model, rt_trace = train(
                init_model(config.backbone, derive_seed(seed, k, 2)),
                fixed.with_pseudo(pseudo),
                config.loss, config.epochs_scratch, config.lr, config.batch_size,
                derive_seed(seed, k, 4), config.augment, iteration=k,
            )
        except NonFiniteLossError as exc:
            exc.iteration = k
            raise

        # the new model's own predictions join the fixed set
        probs = predict(model, images)
        finals = [
            lab.advance(binarize(p, config.network_threshold), Provenance.MODEL_FINAL, network=config.network_threshold)
            for lab, p in zip(refreshed, probs)
        ]
        fixed.extend_fixed([make_item(i, im, lab.mask) for i, im, lab in zip(ids, images, finals)])

        record = IterationRecord(
            k=k,
            subset_ids=ids,
            provenance_counts={p.value: len(ids) for p in Provenance},
            fixed_size=len(fixed.fixed),
            finetune_trace=ft_trace,
            retrain_trace=rt_trace,
            model=model,
        )
        if eval_set:
            reports = evaluate_model(model, eval_set, config.network_threshold)
            record.metrics = _summary(reports)
            record.dsc_per_sample = [r.dsc for r in reports]
        if run_dir is not None:
            it_dir = _persist_iteration(run_dir, k, model, subset, (init, refreshed, finals), sigmas, ft_trace, rt_trace)
            record.checkpoint = str((it_dir / "checkpoint.pt").relative_to(run_dir))
            _write_json(record.to_json(), it_dir / "record.json")
        history.append(record)
        log.info(
            "%s iteration %d: |D_fix|=%d dsc=%s", method, k, len(fixed.fixed),
            None if record.metrics is None else f"{record.metrics['dsc'][0]:.4f}",
        )

    assert len(fixed.fixed) == n_source + config.K * config.P
    return model, history


def run_strudel(config, source, target, **kw):
    return self_train(config, source, target, use_aux=True, use_uncertainty=True, method="strudel", **kw)


def run_self_training(config, source, target, **kw):
    return self_train(config, source, target, use_aux=True, use_uncertainty=False, method="selftrain", **kw)


def run_strudel_no_aux(config, source, target, **kw):
    return self_train(config, source, target, use_aux=False, use_uncertainty=True, method="strudel_no_aux", **kw)
