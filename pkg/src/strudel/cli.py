"""Command-line experiment runner: generate data, run one method, report.

    python -m strudel.cli generate --config exp.json [--force]
    python -m strudel.cli run --method strudel --config exp.json [--seed 3] [--resume]
    python -m strudel.cli report out/runs/*/* --out out/report
    python -m strudel.cli config --out exp.json     # write the default config
    python -m strudel.cli schema                     # print the config JSON schema

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import metrics
from .backbones import BackboneSpec, load_checkpoint, save_checkpoint
from .datasets import (
    SOURCE,
    TARGET,
    DomainConfig,
    generate_domain,
    load_domain,
    normalize,
    save_domain,
    source_domain_config,
    target_domain_config,
)
from .errors import ConfigError, StrudelError
from .pseudo_labels import AUX_STANDALONE_THRESHOLD, AuxSegmenterConfig, aux_segment, binarize
from .self_training import (
    StrudelConfig,
    evaluate_model,
    run_finetune,
    run_joint,
    run_self_training,
    run_strudel,
    run_strudel_no_aux,
    train_base,
)

log = logging.getLogger("strudel")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
METHODS = ("base", "joint", "finetune", "selftrain", "strudel", "strudel_no_aux", "aux_only")
ITERATIVE = {"selftrain": run_self_training, "strudel": run_strudel, "strudel_no_aux": run_strudel_no_aux}
# method pairs compared in the report, (a, b) tests a > b
REPORT_PAIRS = (("strudel", "selftrain"), ("strudel", "strudel_no_aux"), ("selftrain", "base"), ("strudel", "base"))


class UsageError(StrudelError):
    pass


class ReportError(StrudelError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetSection:
    source: DomainConfig = field(default_factory=lambda: source_domain_config(seed=100, image_size=32))
    target: DomainConfig = field(default_factory=lambda: target_domain_config(seed=200, image_size=32))
    n_source: int = 16
    n_target_pool: int = 80
    n_eval: int = 21
    n_labeled_target: int = 9
    split_seed: int = 0

    def __post_init__(self):
        for name in ("n_source", "n_target_pool", "n_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        if self.n_labeled_target < 0:
            raise ConfigError("dataset.n_labeled_target must be >= 0")
        if self.source.image_size != self.target.image_size:
            raise ConfigError("source and target image sizes differ")

    @property
    def n_target(self):
        return self.n_target_pool + self.n_eval + self.n_labeled_target

    def to_dict(self):
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "n_source": self.n_source,
            "n_target_pool": self.n_target_pool,
            "n_eval": self.n_eval,
            "n_labeled_target": self.n_labeled_target,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["source"] = DomainConfig.from_dict(d["source"])
        d["target"] = DomainConfig.from_dict(d["target"])
        return cls(**d)


def desk_strudel_config(seed=0) -> StrudelConfig:
    """Desk-scale defaults; the full-scale values are listed in the schema."""
    return StrudelConfig(
        K=5,
        P=16,
        backbone=BackboneSpec(kind="unet", depth=3, base_channels=8),
        aux=AuxSegmenterConfig(zscore_threshold=1.0),
        seed=seed,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    strudel: StrudelConfig = field(default_factory=desk_strudel_config)
    methods: tuple = ("base", "selftrain", "strudel")
    output_dir: str = "out"

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods list is empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        self.strudel.check_pool(self.dataset.n_target_pool)
        size, step = self.dataset.source.image_size, 2**self.strudel.backbone.depth
        if size % step:
            raise ConfigError(f"image_size {size} not divisible by 2**depth = {step}")

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "backbone": self.strudel.backbone.to_dict(),
            "strudel": {k: v for k, v in self.strudel.to_dict().items() if k != "backbone"},
            "methods": list(self.methods),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        strudel = dict(d["strudel"], backbone=d["backbone"])
        return cls(
            dataset=DatasetSection.from_dict(d["dataset"]),
            strudel=StrudelConfig.from_dict(strudel),
            methods=tuple(d["methods"]),
            output_dir=d.get("output_dir", "out"),
        )

    def with_seed(self, seed):
        return replace(self, strudel=replace(self.strudel, seed=int(seed)))

    def digest(self) -> str:
        return config_hash(self.to_dict())

    @property
    def data_dir(self):
        return Path(self.output_dir) / "data"

    def run_dir(self, method):
        return Path(self.output_dir) / "runs" / method / f"seed_{self.strudel.seed}"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _num(desc, minimum=None, integer=False, full=None):
    s = {"type": "integer" if integer else "number", "description": desc}
    if minimum is not None:
        s["minimum"] = minimum
    if full is not None:
        s["description"] = f"{desc} (full-scale value: {full})"
    return s


_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

_DOMAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "image_size": _num("square image side in pixels", 16, True, "192 after center crop"),
        "background_mean": _num("mean background intensity"),
        "background_std": _num("amplitude of smooth background texture", 0),
        "lesion_intensity_offset": _num("peak lesion brightness above background"),
        "lesion_count_range": dict(_PAIR, description="inclusive [min, max] lesions per image"),
        "lesion_radius_range": dict(_PAIR, description="[min, max] lesion semi-axis in pixels"),
        "gamma": _num("exponent applied to the lesion profile; > 1 fades lesion edges", 0),
        "noise_std": _num("white noise standard deviation", 0),
        "seed": _num("generator seed", integer=True),
        "artifact_count_range": dict(_PAIR, description="inclusive [min, max] bright non-lesion spots"),
        "artifact_intensity": _num("brightness of non-lesion spots"),
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "strudel experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "backbone", "strudel", "methods"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source", "target", "split_seed"],
            "properties": {
                "source": _DOMAIN_SCHEMA,
                "target": _DOMAIN_SCHEMA,
                "n_source": _num("labeled source images", 1, True),
                "n_target_pool": _num("unlabeled target images available to self-training", 1, True),
                "n_eval": _num("held-out labeled target images for evaluation", 1, True, 21),
                "n_labeled_target": _num("labeled target budget for joint / finetune", 0, True, 9),
                "split_seed": _num("seed of the pool / labeled / eval split", integer=True),
            },
        },
        "backbone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["unet", "octse"]},
                "depth": _num("pooling levels", 2, True),
                "base_channels": _num("channels of the first block", 4, True),
                "dropout_rate": _num("spatial dropout after each block", 0, full=0.2),
                "octave_alpha": _num("low-frequency channel fraction (octse)", 0),
                "se_reduction": _num("squeeze-excitation bottleneck ratio (octse)", 1, True),
                "norm": {"enum": ["group", "none"]},
                "activation": {"enum": ["relu"]},
            },
        },
        "strudel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seed"],
            "properties": {
                "K": _num("self-training iterations", 1, True, 5),
                "P": _num("target subset size per iteration", 1, True, 35),
                "C": _num("MC dropout passes", 2, True, 10),
                "network_threshold": _num("binarization threshold of network output", full=0.5),
                "aux_threshold": _num("binarization threshold of the auxiliary segmenter", full=0.75),
                "epochs_scratch": _num("epochs when training from scratch", 1, True, 80),
                "epochs_finetune": _num("epochs when fine-tuning", 1, True, 20),
                "lr": _num("Adam learning rate", 0, full="1e-4"),
                "batch_size": _num("minibatch size", 1, True, 4),
                "seed": _num("run seed; --seed overrides it", integer=True),
                "loss": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "bce_clamp_epsilon": _num("probability clamp inside the log", 0),
                        "dice_smooth": _num("soft Dice smoothing term", 0),
                    },
                },
                "aux": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "zscore_threshold": _num("nominal z-score of a lesion"),
                        "smoothing_radius": _num("Gaussian pre-smoothing sigma", 0),
                        "sensitivity_bias": _num("shift of the logistic midpoint below the threshold"),
                        "slope": _num("logistic slope", 0),
                    },
                },
                "augment": {"type": ["object", "null"], "description": "spatial augmentation; null disables it"},
            },
        },
        "methods": {"type": "array", "minItems": 1, "items": {"enum": list(METHODS)}},
        "output_dir": {"type": "string"},
    },
}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# generate


def _split(cfg: DatasetSection, target):
    rng = np.random.default_rng([cfg.split_seed, 0x5B1])
    order = rng.permutation(len(target))
    ids = [target[i].id for i in order]
    n_eval, n_lab = cfg.n_eval, cfg.n_labeled_target
    return {"eval": ids[:n_eval], "labeled": ids[n_eval : n_eval + n_lab], "pool": ids[n_eval + n_lab :]}


def generate(cfg: ExperimentConfig, force=False) -> Path:
    """Write both domains, the split, and a dataset stamp; no-op if already current."""
    out = cfg.data_dir
    stamp = {"dataset": cfg.dataset.to_dict(), "hash": config_hash(cfg.dataset.to_dict())}
    stamp_path = out / "dataset.json"
    if out.exists() and any(out.iterdir()):
        if stamp_path.exists() and json.loads(stamp_path.read_text()) == stamp:
            log.info("dataset in %s is up to date", out)
            return out
        if not force:
            raise UsageError(f"{out} exists and holds a different dataset; pass --force to overwrite")
        shutil.rmtree(out)
    ds = cfg.dataset
    source = generate_domain(ds.source, ds.n_source, SOURCE)
    target = generate_domain(ds.target, ds.n_target, TARGET)
    save_domain(source, out / "source")
    save_domain(target, out / "target")
    (out / "split.json").write_text(json.dumps(_split(ds, target), indent=2))
    stamp_path.write_text(json.dumps(stamp, indent=2, sort_keys=True))
    log.info("wrote %d source and %d target images to %s", len(source), len(target), out)
    return out


def load_data(cfg: ExperimentConfig):
    """``(source, pool, labeled_target, eval_set)`` from the generated dataset."""
    out = generate(cfg)
    split = json.loads((out / "split.json").read_text())
    source = load_domain(out / "source")
    by_id = {s.id: s for s in load_domain(out / "target")}
    pick = lambda key: [by_id[i] for i in split[key]]  # noqa: E731
    return source, pick("pool"), pick("labeled"), pick("eval")


# ---------------------------------------------------------------------------
# run


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def run(cfg: ExperimentConfig, method: str, resume=False, base=None) -> Path:
    """Train and evaluate one method; ``base`` reuses an already trained source model."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    source, pool, labeled, eval_set = load_data(cfg)
    sc = cfg.strudel
    run_dir = cfg.run_dir(method)
    if run_dir.exists() and not resume:
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json({"config": cfg.to_dict(), "hash": cfg.digest()}, run_dir / "config.json")
    info = {"method": method, "seed": sc.seed, "config_hash": cfg.digest(), "dsc_curve": None}

    if method == "aux_only":
        masks = [binarize(aux_segment(normalize(s.image), sc.aux), AUX_STANDALONE_THRESHOLD) for s in eval_set]
        reports = metrics.evaluate_samples(masks, eval_set)
    elif method in ITERATIVE:
        model, history = ITERATIVE[method](
            sc, source, pool, base=base, eval_set=eval_set, run_dir=run_dir, resume=resume
        )
        reports = evaluate_model(model, eval_set, sc.network_threshold)
        info["dsc_curve"] = [history.base_metrics["dsc"][0]] + history.dsc_curve()
    else:
        if method == "joint":
            model = run_joint(source, labeled, sc.backbone, sc.seed, sc)
        else:
            base_ckpt = run_dir / "base.pt"
            if base is not None:
                model = base
            elif resume and base_ckpt.exists():
                model = load_checkpoint(base_ckpt)
            else:
                model = train_base(source, sc.backbone, sc.seed, sc)
                save_checkpoint(model, base_ckpt)
            if method == "finetune":
                model = run_finetune(model, labeled, sc.seed, sc)
        save_checkpoint(model, run_dir / "final.pt")
        reports = evaluate_model(model, eval_set, sc.network_threshold)

    metrics.write_metrics_csv(reports, run_dir / "metrics.csv")
    info["summary"] = {k: list(v) for k, v in metrics.summarize(reports).items()}
    _write_json(info, run_dir / "run.json")
    log.info("%s seed %d: dsc %.4f -> %s", method, sc.seed, info["summary"]["dsc"][0], run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# report


def _load_run(run_dir):
    run_dir = Path(run_dir)
    csv_path = run_dir / "metrics.csv"
    if not csv_path.exists():
        raise ReportError(f"run {run_dir}: missing metrics.csv")
    info_path = run_dir / "run.json"
    if not info_path.exists():
        raise ReportError(f"run {run_dir}: missing run.json")
    info = json.loads(info_path.read_text())
    info["rows"] = metrics.read_metrics_csv(csv_path)
    info["dir"] = str(run_dir)
    return info


def _ordered(methods):
    return [m for m in METHODS if m in methods]


def summary_table(runs):
    """One row per method: pooled per-sample mean and std of every metric."""
    by_method = defaultdict(list)
    for r in runs:
        by_method[r["method"]].append(r)
    table = []
    for m in _ordered(by_method):
        rows = [row for r in by_method[m] for row in r["rows"]]
        entry = {"method": m, "runs": len(by_method[m]), "n": len(rows)}
        for k in metrics.METRIC_NAMES:
            v = np.array([row[k] for row in rows])
            entry[k] = (float(v.mean()), float(v.std()))
        entry["seeds"] = sorted(r["seed"] for r in by_method[m])
        entry["config_hashes"] = sorted({r["config_hash"] for r in by_method[m]})
        table.append(entry)
    return table


def pairwise_tests(runs):
    """One-sided Wilcoxon tests on per-sample DSC paired by (seed, sample id)."""
    dsc = defaultdict(dict)
    for r in runs:
        for row in r["rows"]:
            dsc[r["method"]][(r["seed"], row["sample_id"])] = row["dsc"]
    out = []
    for a, b in REPORT_PAIRS:
        if a not in dsc or b not in dsc:
            continue
        keys = sorted(set(dsc[a]) & set(dsc[b]))
        xa = np.array([dsc[a][k] for k in keys])
        xb = np.array([dsc[b][k] for k in keys])
        try:
            res = metrics.wilcoxon_signed_rank(xa, xb, alternative="greater")
            p, w, n = res.pvalue, res.statistic, res.n
        except StrudelError as exc:
            log.warning("wilcoxon %s vs %s skipped: %s", a, b, exc)
            p, w, n = float("nan"), float("nan"), 0
        out.append({"a": a, "b": b, "pairs": len(keys), "n_nonzero": n, "w_plus": w, "p_greater": p})
    return out


def _plots(runs, table, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = [e["method"] for e in table]
    fig, ax = plt.subplots(figsize=(1.4 * len(methods) + 2, 4))
    data = [[row["dsc"] for r in runs if r["method"] == m for row in r["rows"]] for m in methods]
    ax.boxplot(data, showmeans=True)
    ax.set_xticks(range(1, len(methods) + 1), methods, rotation=20)
    for i, m in enumerate(methods, 1):
        seed_means = [np.mean([row["dsc"] for row in r["rows"]]) for r in runs if r["method"] == m]
        ax.scatter(np.full(len(seed_means), i + 0.25), seed_means, marker="d", s=18, color="tab:red", zorder=3)
    ax.set_ylabel("DSC")
    ax.set_title("Target DSC per method (diamonds: per-seed means)")
    fig.tight_layout()
    fig.savefig(out / "dsc_boxplot.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    colors = dict(zip(ITERATIVE, ("tab:blue", "tab:orange", "tab:green")))
    labeled = set()
    for r in runs:
        curve = r.get("dsc_curve")
        if not curve:
            continue
        m = r["method"]
        ax.plot(range(len(curve)), curve, marker="o", color=colors.get(m), alpha=0.7,
                label=None if m in labeled else m)
        labeled.add(m)
    ax.set_xlabel("iteration (0 = base model)")
    ax.set_ylabel("mean target DSC")
    if labeled:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "dsc_iterations.png", dpi=120)
    plt.close(fig)


def report(run_dirs, out) -> Path:
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    runs = [_load_run(d) for d in run_dirs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = summary_table(runs)
    tests = pairwise_tests(runs)
    _plots(runs, table, out)

    cols = metrics.METRIC_NAMES
    lines = ["| method | runs | n | " + " | ".join(cols) + " | config |", "|" + "---|" * (len(cols) + 4)]
    for e in table:
        cells = " | ".join(f"{e[k][0]:.3f} ± {e[k][1]:.3f}" for k in cols)
        lines.append(f"| {e['method']} | {e['runs']} | {e['n']} | {cells} | {','.join(e['config_hashes'])} |")
    if tests:
        lines += ["", "| comparison | pairs | W+ | p (one-sided) |", "|---|---|---|---|"]
        for t in tests:
            lines.append(f"| {t['a']} > {t['b']} | {t['pairs']} | {t['w_plus']} | {t['p_greater']:.4g} |")
    lines += ["", "Runs:"] + [f"- {r['dir']} ({r['method']}, seed {r['seed']}, config {r['config_hash']})" for r in runs]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    _write_json({"summary": table, "tests": tests, "runs": [r["dir"] for r in runs]}, out / "summary.json")
    return out


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="strudel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", help="write the synthetic source and target domains")
    g.add_argument("--config", required=True)
    g.add_argument("--force", action="store_true")
    r = sub.add_parser("run", help="train and evaluate one method")
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--resume", action="store_true")
    rep = sub.add_parser("report", help="aggregate run directories into figures and tables")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out", required=True)
    c = sub.add_parser("config", help="write the default experiment config")
    c.add_argument("--out", required=True)
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            print(generate(load_config(args.config), force=args.force))
        elif args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            print(run(cfg, args.method, resume=args.resume))
        elif args.command == "report":
            print(report(args.runs, args.out))
        elif args.command == "config":
            _write_json(ExperimentConfig().to_dict(), args.out)
        else:
            print(json.dumps(CONFIG_SCHEMA, indent=2))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StrudelError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
