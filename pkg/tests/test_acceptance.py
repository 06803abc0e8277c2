"""Acceptance checks, one group per numbered criterion.

The conftest prints a PASS/FAIL line per criterion after the run. The
synthetic experiment behind criteria 7 to 9 trains every method for five
seeds at desk defaults and takes several minutes of CPU.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

import oracles
from strudel import cli, losses, metrics
from strudel import uncertainty as unc
from strudel.backbones import BackboneSpec, load_checkpoint
from strudel.datasets import SOURCE, TARGET, generate_domain, normalize, reveal_mask, source_domain_config, target_domain_config
from strudel.losses import Routing
from strudel.pseudo_labels import aux_segment, binarize, fuse_or
from strudel.self_training import StrudelConfig, run_self_training, run_strudel, self_train, train_base
from strudel.training import predict

SEEDS = (0, 1, 2, 3, 4)
TOL = 1e-10


def rand_inputs(seed, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.05, 0.95, shape)
    target = (rng.random(shape) < 0.4).astype(np.float64)
    sigma = rng.random(shape)
    return pred, target, sigma


# ---------------------------------------------------------------------------
# 1


@pytest.mark.criterion(1)
@pytest.mark.parametrize("seed", range(20))
def test_loss_identities(seed):
    pred, target, sigma = rand_inputs(seed)
    bce = float(losses.bce(pred, target))
    assert abs(float(losses.ubce(pred, target, np.zeros_like(sigma))) - bce) <= TOL
    assert abs(float(losses.ubce(pred, target, np.ones_like(sigma)))) <= TOL
    for routing, s in ((Routing.FIXED, None), (Routing.PSEUDO, sigma)):
        total, parts = losses.combined_loss(pred, target, s, routing)
        assert abs(float(total) - sum(float(v) for v in parts.values())) <= TOL


# ---------------------------------------------------------------------------
# 2


@pytest.mark.criterion(2)
def test_variance_map_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        maps = rng.random((10, 8, 8)) ** rng.uniform(0.2, 5)
        raw = unc.variance_map(unc.McSamples(maps))
        np.testing.assert_allclose(raw, oracles.two_pass_variance(maps), rtol=0, atol=TOL)
        assert raw.max() <= 0.25


# ---------------------------------------------------------------------------
# 3

GRAD_CASES = {
    "dice": lambda p, t, s: losses.dice_loss(p, t),
    "bce": lambda p, t, s: losses.bce(p, t),
    "ubce": lambda p, t, s: losses.ubce(p, t, s),
    "combined_fixed": lambda p, t, s: losses.combined_loss(p, t)[0],
    "combined_pseudo": lambda p, t, s: losses.combined_loss(p, t, s, Routing.PSEUDO)[0],
}


@pytest.mark.criterion(3)
@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_gradients(name, seed):
    fn = GRAD_CASES[name]
    pred, target, sigma = rand_inputs(300 + seed)
    analytic = oracles.autograd(lambda p: fn(p, target, sigma), pred)
    numeric = oracles.central_fd(lambda p: float(fn(p, target, sigma)), pred)
    assert np.mean(oracles.rel_err(analytic, numeric) <= 1e-3) >= 0.99


# ---------------------------------------------------------------------------
# 4


@pytest.mark.criterion(4)
def test_metrics_match_oracles():
    rng = np.random.default_rng(4)
    for i in range(200):
        p = (rng.random((16, 16)) < rng.uniform(0.02, 0.6)).astype(np.uint8)
        g = (rng.random((16, 16)) < rng.uniform(0.02, 0.6)).astype(np.uint8)
        if i % 40 == 0:
            p[:] = 0
        if i % 40 == 20:
            g[:] = 0
        ref = oracles.lesion_stats(p, g)
        assert abs(metrics.dsc(p, g) - oracles.dsc(p, g)) <= 1e-9
        assert abs(metrics.lavd(p, g) - oracles.lavd(p, g)) <= 1e-9
        assert metrics.hausdorff95(p, g) == oracles.h95(p, g)
        assert metrics.lesion_recall(p, g) == ref["recall"]
        assert metrics.lesion_f1(p, g) == ref["f1"]


# ---------------------------------------------------------------------------
# 5

SMALL = StrudelConfig(
    K=3, P=4, C=3, epochs_scratch=3, epochs_finetune=1, batch_size=4, seed=11,
    backbone=BackboneSpec(depth=2, base_channels=4),
)


@pytest.fixture(scope="module")
def small_data():
    source = generate_domain(source_domain_config(seed=51, image_size=32), 10, SOURCE)
    target = generate_domain(target_domain_config(seed=52, image_size=32), 16, TARGET)
    base = train_base(source, SMALL.backbone, SMALL.seed, SMALL)
    return source, target, base


@pytest.mark.criterion(5)
def test_bookkeeping(small_data):
    source, target, base = small_data
    _, history = run_strudel(SMALL, source, target, base=base)
    assert len(history.records) == 3
    assert history.records[-1].fixed_size == 22
    ids = [i for r in history.records for i in r.subset_ids]
    assert len(ids) == len(set(ids)) == 12


@pytest.mark.criterion(5)
def test_zero_uncertainty_traces_match_self_training(small_data):
    source, target, base = small_data
    _, st = run_self_training(SMALL, source, target, base=base)
    _, zero = self_train(SMALL, source, target, zero_uncertainty=True, base=base)
    for a, b in zip(st.records, zero.records, strict=True):
        assert a.subset_ids == b.subset_ids
        assert a.finetune_trace == b.finetune_trace
        assert [r["total"] for r in a.retrain_trace] == [r["total"] for r in b.retrain_trace]
        assert [r["dice"] for r in a.retrain_trace] == [r["dice"] for r in b.retrain_trace]


# ---------------------------------------------------------------------------
# 6


@pytest.mark.criterion(6)
def test_fusion_recall(small_data):
    base = small_data[2]
    samples = generate_domain(target_domain_config(seed=60, image_size=32), 100, TARGET)
    probs = predict(base, [s.image for s in samples])
    violations = 0
    for s, prob in zip(samples, probs):
        gt = reveal_mask(s)
        net = binarize(prob, 0.5)
        aux = binarize(aux_segment(normalize(s.image)), 0.75)
        fused = metrics.lesion_recall(fuse_or(net, aux), gt)
        violations += fused < metrics.lesion_recall(net, gt)
        violations += fused < metrics.lesion_recall(aux, gt)
    assert violations == 0


# ---------------------------------------------------------------------------
# 7 to 9: the desk-scale synthetic experiment

ITERATIVE = ("selftrain", "strudel", "strudel_no_aux")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = replace(cli.ExperimentConfig(), output_dir=str(out))
    dirs = {m: {} for m in ("base", *ITERATIVE)}
    for seed in SEEDS:
        run_cfg = cfg.with_seed(seed)
        dirs["base"][seed] = cli.run(run_cfg, "base")
        base = load_checkpoint(dirs["base"][seed] / "final.pt")
        for method in ITERATIVE:
            dirs[method][seed] = cli.run(run_cfg, method, base=base)
    info = {m: {s: json.loads((d / "run.json").read_text()) for s, d in by_seed.items()} for m, by_seed in dirs.items()}
    mean_dsc = {m: np.array([info[m][s]["summary"]["dsc"][0] for s in SEEDS]) for m in dirs}
    return cfg, dirs, info, mean_dsc


@pytest.mark.criterion(7)
def test_method_ordering(desk):
    _, _, _, dsc = desk
    means = {m: float(v.mean()) for m, v in dsc.items()}
    print("mean DSC per method:", {m: round(v, 4) for m, v in means.items()})
    print("per-seed STRUDEL - self-training:", np.round(dsc["strudel"] - dsc["selftrain"], 4).tolist())
    assert means["base"] < means["selftrain"] <= means["strudel"]
    assert means["strudel"] >= means["strudel_no_aux"]


@pytest.mark.criterion(7)
def test_uncertainty_gain_is_significant(desk):
    _, _, _, dsc = desk
    gain = float((dsc["strudel"] - dsc["selftrain"]).mean())
    test = metrics.wilcoxon_signed_rank(dsc["strudel"], dsc["selftrain"], alternative="greater")
    print(f"STRUDEL - self-training = {gain:+.4f}, one-sided Wilcoxon p = {test.pvalue:.4f}")
    assert gain >= 0.02
    assert test.pvalue < 0.1


def _pixel_uncertainty(model, samples, c, seed):
    """Pooled rescaled uncertainty over false-positive and true-positive pixels."""
    fp, tp = [], []
    stacks = unc.mc_sample_batch(model, [s.image for s in samples], c, seed)
    pred = predict(model, [s.image for s in samples]) >= 0.5
    for s, stack, p in zip(samples, stacks, pred):
        sigma = unc.uncertainty(stack).rescaled
        gt = reveal_mask(s).astype(bool)
        fp.append(sigma[p & ~gt])
        tp.append(sigma[p & gt])
    return np.concatenate(fp), np.concatenate(tp)


@pytest.mark.criterion(8)
def test_uncertainty_flags_false_positives(desk):
    cfg, dirs, _, _ = desk
    _, _, _, eval_set = cli.load_data(cfg)
    wins = 0
    for seed in SEEDS:
        model = load_checkpoint(dirs["strudel"][seed] / f"iter_{cfg.strudel.K:02d}" / "checkpoint.pt")
        fp, tp = _pixel_uncertainty(model, eval_set, cfg.strudel.C, seed)
        print(f"seed {seed}: sigma FP {fp.mean():.3f} ({fp.size} px), TP {tp.mean():.3f} ({tp.size} px)")
        wins += fp.size > 0 and fp.mean() > tp.mean()
    assert wins >= 4


def rises_to_peak(curve, band=0.02):
    """Every value up to the maximum stays within ``band`` of the running maximum."""
    curve = np.asarray(curve, dtype=float)
    peak = int(np.argmax(curve))
    running = np.maximum.accumulate(curve[: peak + 1])
    return bool(np.all(curve[: peak + 1] >= running - band))


def test_rises_to_peak_helper():
    assert rises_to_peak([0.5, 0.6, 0.59, 0.7, 0.65])
    assert not rises_to_peak([0.5, 0.6, 0.55, 0.7])
    assert rises_to_peak([0.9, 0.5, 0.4])


@pytest.mark.criterion(9)
def test_iteration_curves(desk, tmp_path):
    _, dirs, info, _ = desk
    curves = [info["strudel"][s]["dsc_curve"][1:] for s in SEEDS]
    for s, c in zip(SEEDS, curves):
        print(f"seed {s}:", np.round(c, 4).tolist())
    assert sum(rises_to_peak(c) for c in curves) >= 4
    out = cli.report(list(dirs["strudel"].values()), tmp_path / "report")
    assert (out / "dsc_iterations.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# 10


@pytest.mark.criterion(10)
def test_cli_runs_are_identical(tmp_path):
    raw = cli.ExperimentConfig().to_dict()
    for side in ("source", "target"):
        raw["dataset"][side]["image_size"] = 32
    raw["dataset"].update(n_source=10, n_target_pool=12, n_eval=6, n_labeled_target=0)
    raw["backbone"].update(depth=2, base_channels=4)
    raw["strudel"].update(K=3, P=4, C=3, epochs_scratch=3, epochs_finetune=1)
    csvs = []
    for name in ("a", "b"):
        raw["output_dir"] = str(tmp_path / name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(raw))
        assert cli.main(["run", "--method", "strudel", "--config", str(path)]) == 0
        csvs.append((tmp_path / name / "runs" / "strudel" / "seed_0" / "metrics.csv").read_bytes())
    assert csvs[0] == csvs[1]
