import json

import numpy as np
import pytest
import torch

from slsr.backbone import BackboneConfig, init_model
from slsr.data import PreprocessConfig, make_synthetic_corpus
from slsr.gan import GanConfig, pseudo_generator_sample
from slsr.labels import lsro
from slsr.optim import NumericError, apply_sgd_update
from slsr.trainer import (StageError, TrainConfig, allocate_counts, generated_targets, joint_train, lr_schedule,
                          run_pipeline, sgd_step, substream, supervised_records)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(cfg, 0) == 0.01
    assert lr_schedule(cfg, 1000) == pytest.approx(0.01 * 101 ** -0.025, abs=1e-12)
    assert round(lr_schedule(cfg, 1000), 5) == 0.00891
    flat = TrainConfig(inv_gamma=0.0)
    assert {lr_schedule(flat, i) for i in (0, 10, 10_000)} == {0.01}
    assert all(lr_schedule(cfg, i + 1) < lr_schedule(cfg, i) for i in range(0, 5000, 7))
    with pytest.raises(ValueError):
        lr_schedule(cfg, -1)


def test_config_validation():
    for bad in ({"base_lr": 0}, {"batch_size": 0}, {"K": 0}, {"scheme": "x"}, {"generator": "vae"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _param(values):
    return torch.nn.Parameter(torch.tensor(values, dtype=torch.float64))


def test_plain_gradient_descent():
    p = _param([1.0, -2.0])
    p.grad = torch.tensor([0.5, 0.25], dtype=torch.float64)
    apply_sgd_update([("p", p)], {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.detach().tolist() == [1.0 - 0.05, -2.0 - 0.025]


def test_zero_gradient_is_a_fixpoint():
    p = _param([3.0])
    p.grad = torch.zeros(1, dtype=torch.float64)
    apply_sgd_update([("p", p)], {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.item() == 3.0


def test_momentum_recursion_on_quadratic():
    p = _param([1.0])
    buffers = {}
    theta, v = 1.0, 0.0
    for _ in range(20):
        p.grad = p.detach().clone()  # gradient of theta^2 / 2
        apply_sgd_update([("p", p)], buffers, lr=0.1, momentum=0.9, weight_decay=0.0)
        v = 0.9 * v + theta
        theta = theta - 0.1 * v
        assert abs(p.item() - theta) < 1e-12


def test_weight_decay_is_added_to_gradient():
    p = _param([2.0])
    p.grad = torch.tensor([1.0], dtype=torch.float64)
    apply_sgd_update([("p", p)], {}, lr=0.1, momentum=0.0, weight_decay=0.5)
    assert p.item() == pytest.approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0), abs=1e-15)


def test_non_finite_gradient_aborts():
    p = _param([1.0])
    p.grad = torch.tensor([float("inf")], dtype=torch.float64)
    with pytest.raises(NumericError, match="p"):
        apply_sgd_update([("p", p)], {}, lr=0.1, momentum=0.9, weight_decay=0.0)


def test_sgd_step_increments_counter():
    m = init_model(BackboneConfig(n_classes=3, input_size=32, channels=(8,)), seed=0)
    x = torch.randn(4, 3, 32, 32)
    T = torch.eye(3)[[0, 1, 2, 0]]
    before = m.flat_parameters().copy()
    loss, lp = sgd_step(m, x, T, torch.zeros(4), lr=0.01, momentum=0.9, weight_decay=5e-4)
    assert m.training_step == 1 and np.isfinite(loss) and lp.shape == (4, 3)
    assert not np.array_equal(before, m.flat_parameters())


def test_allocate_counts():
    assert allocate_counts([100, 100, 100], 300) == [100, 100, 100]
    assert allocate_counts([120, 100, 80], 300) == [120, 100, 80]
    assert sum(allocate_counts([7, 5, 1], 10)) == 10
    assert allocate_counts([7, 5, 1], 9, "uniform") == [3, 3, 3]


def test_substreams_are_distinct_and_stable():
    assert substream(7, "gan") == substream(7, "gan")
    assert len({substream(7, "gan"), substream(7, "final"), substream(8, "gan"), substream(7, "gan", 1)}) == 4


def test_validation_holdout(corpus):
    sup, val = supervised_records(corpus, True)
    assert len(val) == corpus.n_identities and len(sup) + len(val) == len(corpus.train)
    assert supervised_records(corpus, False) == (corpus.train, [])


class _OneCluster:
    K = 1

    def __init__(self, n):
        self.support = [frozenset(range(n))]


def test_single_cluster_targets_equal_lsro(corpus):
    gen = pseudo_generator_sample(corpus.train, 5, 0.0, seed=0)
    for t in generated_targets("slsr", gen, _OneCluster(30), 30):
        assert np.array_equal(t.probs, lsro(30).probs)


def _joint(corpus, seed, scheme="slsr", epochs=3, n_gen=60):
    from slsr.cluster import cluster_support, kmeans_fit
    X = np.stack([r.pixels.reshape(-1) for r in corpus.train]).astype(np.float64)
    cl = cluster_support(kmeans_fit(X, 3, seed=0), corpus)
    gen = []
    for c in range(3):
        members = [r for r, a in zip(corpus.train, cl.assignments) if a == c]
        gen += pseudo_generator_sample(members, n_gen // 3, 0.1, seed=seed, cluster_id=c, start_index=len(gen))
    targets = generated_targets(scheme, gen, cl, 30)
    bb = BackboneConfig(n_classes=30, input_size=32, channels=(8, 16, 32))
    cfg = TrainConfig(epochs=epochs, scheme=scheme)
    pre = PreprocessConfig.desk()
    return joint_train(corpus, corpus.train, gen, targets, cfg, bb, pre, seed), gen


def test_joint_training_is_reproducible(corpus):
    a, _ = _joint(corpus, 1, epochs=1)
    b, _ = _joint(corpus, 1, epochs=1)
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())
    assert a.history == b.history


def test_generated_fraction_per_epoch(corpus):
    m, gen = _joint(corpus, 0, epochs=2, n_gen=150)
    expected = len(gen) / (len(corpus.train) + len(gen))
    for h in m.history:
        assert abs(h["gen_fraction"] - expected) <= 0.02


@pytest.mark.parametrize("seed", range(10))
def test_joint_loss_decreases(corpus, seed):
    m, _ = _joint(corpus, seed, epochs=4)
    assert m.history[-1]["loss"] < m.history[0]["loss"]


def test_pseudo_scheme_uses_model_argmax(corpus):
    m, _ = _joint(corpus, 0, scheme="pseudo", epochs=1, n_gen=30)
    assert m.training_step > 0 and np.isfinite(m.history[0]["loss"])


def test_run_pipeline_artifacts(tmp_path):
    bundle = make_synthetic_corpus(6, 3, 6, 32, seed=0)
    cfg = TrainConfig(epochs=1, stage1_epochs=1, batch_size=8, silhouette_ks=(2, 3))
    bb = BackboneConfig(n_classes=6, input_size=32, channels=(8, 16))
    gan = GanConfig.desk(base_channels=8, max_steps=2, batch_size=8)
    res = run_pipeline(bundle, cfg, bb, gan, tmp_path, PreprocessConfig.desk())
    kinds = {a["kind"] for a in res.manifest["artifacts"]}
    assert {"checkpoint", "features", "assignments", "generated", "report"} <= kinds
    ckpts = [a["path"] for a in res.manifest["artifacts"] if a["kind"] == "checkpoint"]
    assert {"stage1.ckpt", "final.ckpt"} <= set(ckpts)
    for a in res.manifest["artifacts"]:
        assert (tmp_path / a["path"]).exists() and a["config_hash"] and "seed" in a and a["stage"]
    assert len(res.generated) == len(bundle.train)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep == res.report and 0 <= rep["mAP"] <= 1
    assert (tmp_path / "logs/train.csv").read_text().startswith("step,lr,loss,real_loss,gen_loss")
    gen_manifest = json.loads((tmp_path / "generated/manifest.json").read_text())
    assert set(gen_manifest[0]) == {"file", "cluster", "seed"}
    assert res.clusters.K == 3


def test_run_pipeline_k1_trains_on_lsro_targets(tmp_path):
    bundle = make_synthetic_corpus(6, 3, 6, 32, seed=0)
    cfg = TrainConfig(K=1, epochs=1, stage1_epochs=1, batch_size=8, silhouette_ks=(2,), generator="pseudo")
    bb = BackboneConfig(n_classes=6, input_size=32, channels=(8, 16))
    run_pipeline(bundle, cfg, bb, GanConfig.desk(), tmp_path, PreprocessConfig.desk())
    targets = json.loads((tmp_path / "generated/targets.json").read_text())
    assert all(t["indices"] == list(range(6)) and t["values"] == [1 / 6] * 6 for t in targets)


def test_stage_failure_names_stage(tmp_path):
    bundle = make_synthetic_corpus(6, 3, 2, 32, seed=0)
    cfg = TrainConfig(K=50, epochs=1, stage1_epochs=1, batch_size=4)
    bb = BackboneConfig(n_classes=6, input_size=32, channels=(8,))
    with pytest.raises(StageError) as e:
        run_pipeline(bundle, cfg, bb, GanConfig.desk(), tmp_path, PreprocessConfig.desk())
    assert e.value.stage == "cluster"
    assert (tmp_path / "stage1.ckpt").exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["failed_stage"] == "cluster"
