import json
from dataclasses import replace

import numpy as np
import pytest

from strudel import datasets, metrics, self_training
from strudel.backbones import BackboneSpec
from strudel.datasets import SOURCE, TARGET, generate_domain
from strudel.errors import ConfigError, NonFiniteLossError
from strudel.self_training import (
    StrudelConfig,
    run_self_training,
    run_strudel,
    run_strudel_no_aux,
    self_train,
    train_base,
)

TINY = StrudelConfig(
    K=3, P=4, C=3, epochs_scratch=2, epochs_finetune=1, batch_size=4, seed=5,
    backbone=BackboneSpec(depth=2, base_channels=4),
)


@pytest.fixture(scope="module")
def data():
    source = generate_domain(datasets.source_domain_config(seed=1, image_size=32), 10, SOURCE)
    target = generate_domain(datasets.target_domain_config(seed=2, image_size=32), 16, TARGET)
    return source, target


@pytest.fixture(scope="module")
def base(data):
    return train_base(data[0], TINY.backbone, TINY.seed, TINY)


@pytest.fixture(scope="module")
def strudel_run(data, base):
    return run_strudel(TINY, *data, base=base)


class TestBookkeeping:
    def test_fixed_set_growth(self, strudel_run):
        _, history = strudel_run
        assert [r.fixed_size for r in history.records] == [14, 18, 22]

    def test_records_and_subsets(self, strudel_run):
        _, history = strudel_run
        assert [r.k for r in history.records] == [1, 2, 3]
        ids = [i for r in history.records for i in r.subset_ids]
        assert len(ids) == len(set(ids)) == 12
        for r in history.records:
            assert r.provenance_counts == {"fused_init": 4, "mc_refreshed": 4, "model_final": 4}
            assert len(r.finetune_trace) == 1 and len(r.retrain_trace) == 2

    def test_strudel_routes_pseudo_labels_through_ubce(self, strudel_run):
        for r in strudel_run[1].records:
            assert all(row["ubce"] > 0 for row in r.retrain_trace)
            # fine-tuning uses plain cross entropy on every sample
            assert all(row["ubce"] == 0 for row in r.finetune_trace)

    def test_self_training_has_no_ubce(self, data, base):
        _, history = run_self_training(TINY, *data, base=base)
        assert all(row["ubce"] == 0 for r in history.records for row in r.retrain_trace)

    def test_pool_too_small(self, data, base):
        cfg = replace(TINY, K=5)
        with pytest.raises(ConfigError, match="exceeds"):
            run_strudel(cfg, *data, base=base)


def test_zero_uncertainty_reproduces_self_training(data, base):
    _, st = run_self_training(TINY, *data, base=base)
    _, zero = self_train(TINY, *data, use_uncertainty=True, zero_uncertainty=True, base=base)
    for a, b in zip(st.records, zero.records):
        assert a.subset_ids == b.subset_ids
        for ta, tb in ((a.finetune_trace, b.finetune_trace), (a.retrain_trace, b.retrain_trace)):
            assert [r["total"] for r in ta] == [r["total"] for r in tb]
            assert [r["dice"] for r in ta] == [r["dice"] for r in tb]
    assert st.records[-1].model.equals(zero.records[-1].model)


def test_deterministic(data, base, strudel_run):
    model, history = run_strudel(TINY, *data, base=base)
    assert model.equals(strudel_run[0])
    assert [r.subset_ids for r in history.records] == [r.subset_ids for r in strudel_run[1].records]


def test_target_ground_truth_never_read(data, base, monkeypatch):
    def forbidden(sample):
        raise AssertionError(f"ground truth of {sample.id} was read")

    monkeypatch.setattr(self_training, "reveal_mask", forbidden)
    monkeypatch.setattr(metrics, "reveal_mask", forbidden)
    monkeypatch.setattr(datasets, "reveal_mask", forbidden)
    run_strudel(TINY, *data, base=base)
    run_strudel_no_aux(TINY, *data, base=base)


def test_no_aux_labels_are_subsets_of_fused(data, base):
    from strudel.pseudo_labels import AuxSegmenterConfig, init_pseudo_labels

    subset = data[1][:6]
    fused = init_pseudo_labels(base, AuxSegmenterConfig(), subset)
    plain = init_pseudo_labels(base, None, subset)
    for f, p in zip(fused, plain):
        assert (f.mask >= p.mask).all()


def test_evaluation_history(data, base):
    source, target = data
    eval_set, pool = target[:4], target[4:]
    _, history = run_strudel(TINY, source, pool, base=base, eval_set=eval_set)
    assert history.base_metrics is not None
    curve = history.dsc_curve()
    assert len(curve) == 3 and all(0 <= v <= 1 for v in curve)
    assert all(len(r.dsc_per_sample) == 4 for r in history.records)


class TestPersistence:
    def test_artifacts(self, data, base, tmp_path):
        run_strudel(TINY, *data, base=base, run_dir=tmp_path)
        it = tmp_path / "iter_02"
        for name in ("checkpoint.pt", "loss_finetune.csv", "loss_retrain.csv", "record.json"):
            assert (it / name).exists()
        lines = (it / "pseudo_labels" / "manifest.txt").read_text().split("\n")
        lines = [line for line in lines if line]
        assert len(lines) == 12
        assert {line.split()[1] for line in lines} == {
            "provenance=fused_init", "provenance=mc_refreshed", "provenance=model_final"
        }
        sigmas = [np.load(p) for p in (it / "uncertainty").glob("*.npy")]
        assert len(sigmas) == 4 and all(0 <= s.min() and s.max() <= 1 for s in sigmas)
        record = json.loads((it / "record.json").read_text())
        assert record["k"] == 2 and record["fixed_size"] == 18

    def test_resume_matches_uninterrupted_run(self, data, base, tmp_path):
        full, _ = run_strudel(TINY, *data, base=base, run_dir=tmp_path / "a")
        run_strudel(TINY, *data, base=base, run_dir=tmp_path / "b")
        # pretend the last iteration never finished
        (tmp_path / "b" / "iter_03" / "record.json").unlink()
        resumed, history = run_strudel(TINY, *data, base=base, run_dir=tmp_path / "b", resume=True)
        assert resumed.equals(full)
        assert [r.k for r in history.records] == [1, 2, 3]


def test_non_finite_loss_names_iteration(data, base):
    source, target = data
    bad = [s.replace(image=np.full(s.shape, np.nan)) if i == 0 else s for i, s in enumerate(target)]
    cfg = replace(TINY, K=1, P=16)
    with pytest.raises(NonFiniteLossError) as info:
        run_strudel(cfg, source, bad, base=base)
    assert info.value.iteration == 1


def test_config_roundtrip():
    assert StrudelConfig.from_dict(json.loads(json.dumps(TINY.to_dict()))) == TINY


@pytest.mark.parametrize("bad", [dict(K=0), dict(P=0), dict(C=1), dict(aux_threshold=1.0), dict(epochs_scratch=0)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        StrudelConfig(**bad)
