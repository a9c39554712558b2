from __future__ import annotations

import itertools

import numpy as np
import pytest

from wsirisk.config import RunConfig
from wsirisk.labeling import RiskCategory
from wsirisk.nn_core import Network, NetworkConfig
from wsirisk.slide_core import PatchRef
from wsirisk.synthgen import SynthSpec, generate_corpus
from wsirisk.train_infer import (
    STATUS_NO_CANCER, PatchPrediction, TrainingError, WsiPrediction, aggregate_wsi, predict_patch,
    predict_patches, predict_slide, prepare_corpus, read_patch_predictions, read_slide_predictions, risk_argmax,
    run_cv, select_patches, train_fold,
)

L, I, H = RiskCategory.LOW, RiskCategory.INTERMEDIATE, RiskCategory.HIGH


def pred(cat, cf=0.9):
    return PatchPrediction(PatchRef("s", 0, 0), 0.9, (0.1, 0.1, 0.8), cf, cat)


def test_risk_argmax_ties_go_up():
    assert risk_argmax(np.array([[0.4, 0.4, 0.2], [0.3, 0.3, 0.4], [1 / 3, 1 / 3, 1 / 3]])).tolist() == [1, 2, 2]


def test_aggregate_examples():
    accepted = [pred(L)] * 3 + [pred(I)] + [pred(H)] * 5
    assert aggregate_wsi("s", accepted).category == H
    assert aggregate_wsi("s", [pred(L)] * 4 + [pred(H)] * 4).category == H
    empty = aggregate_wsi("s", [])
    assert empty.category is None and empty.status == STATUS_NO_CANCER


def test_aggregate_permutation_invariant():
    accepted = [pred(L), pred(L), pred(I), pred(H), pred(I)]
    results = {aggregate_wsi("s", list(p)).category for p in itertools.permutations(accepted)}
    assert results == {I}


def test_select_patches_threshold_semantics():
    preds = [pred(L, 0.4), pred(L, 0.6), pred(RiskCategory.BENIGN, 0.99)]
    assert len(select_patches(preds, 0.5)) == 1
    assert select_patches([pred(L, 0.0)], 0.5) == []
    assert len(select_patches(preds[:2], 0.0)) == 2


def test_wsi_prediction_dict_roundtrip():
    w = aggregate_wsi("s", [pred(I)], rejected=2, benign=3)
    assert WsiPrediction.from_dict(w.to_dict()) == w


def _zero_net(classes):
    net = Network.init(NetworkConfig(input_size=16, stages=[(4, 3, 2)], num_classes=classes, embed_dim=0))
    for v in net.params.values():
        v[...] = 0
    return net


def test_gate_boundary_routes_to_risk_head():
    gate, risk = _zero_net(2), _zero_net(3)
    p = predict_patch(gate, risk, np.zeros((16, 16, 3), dtype=np.uint8))
    assert p.p_cancer == 0.5
    assert p.predicted == H  # uniform risk probabilities tie toward High
    assert p.cf == pytest.approx(1 / 3)
    benign = predict_patch(gate, risk, np.zeros((16, 16, 3), dtype=np.uint8), cancer_cutoff=0.6)
    assert benign.predicted == RiskCategory.BENIGN and benign.p_risk is None


def test_prediction_is_pure():
    gate = Network.init(NetworkConfig(input_size=16, stages=[(4, 3, 2)], num_classes=2, embed_dim=0), 1)
    risk = Network.init(NetworkConfig(input_size=16, stages=[(4, 3, 2)], num_classes=3, embed_dim=0), 2)
    imgs = np.random.default_rng(0).integers(0, 256, (5, 16, 16, 3), dtype=np.uint8)
    refs = [PatchRef("s", i, 0) for i in range(5)]
    a = predict_patches(gate, risk, imgs, refs)
    b = predict_patches(gate, risk, imgs[::-1], refs[::-1])[::-1]
    assert [(x.p_cancer, x.p_risk) for x in a] == [(x.p_cancer, x.p_risk) for x in b]
    for x in a:
        if x.p_risk is not None:
            assert sum(x.p_risk) == pytest.approx(1, abs=1e-6)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate_corpus(root, n_patients=10, spec=SynthSpec(width=1024, height=1024), seed=1)
    return root, manifest


def tiny_cfg(**kw):
    base = dict(input_size=32, channels=[8, 8], embed_dim=8, epochs=1, cancer_epochs=1, batch_size=16,
                k_folds=2, patch_size=256, stride=256, seed=0)
    base.update(kw)
    return RunConfig(**base)


def test_vote_count_conservation(tiny_corpus):
    _, manifest = tiny_corpus
    cfg = tiny_cfg()
    corpus = prepare_corpus(manifest[:3], cfg)
    gate = Network.init(cfg.network_config(2, False), 0)
    risk = Network.init(cfg.network_config(3, True), 1)
    for sp in corpus.values():
        preds, wsi = predict_slide(gate, risk, sp, 0.4)
        assert wsi.accepted + wsi.rejected + wsi.benign == len(sp.refs) == len(preds)
        assert sum(wsi.tallies.values()) == wsi.accepted


def test_zero_epochs_keep_initialisation(tiny_corpus):
    _, manifest = tiny_corpus
    cfg = tiny_cfg(epochs=0, cancer_epochs=0)
    corpus = list(prepare_corpus(manifest, cfg).values())
    models = train_fold(corpus[:7], corpus[7:], cfg, seed=11)
    init_gate = Network.init(cfg.network_config(2, False), 11)
    init_risk = Network.init(cfg.network_config(3, True), 12)
    assert all(np.array_equal(models.cancer.params[k], init_gate.params[k]) for k in init_gate.params)
    assert all(np.array_equal(models.risk.params[k], init_risk.params[k]) for k in init_risk.params)


def test_missing_class_is_rejected(tiny_corpus):
    _, manifest = tiny_corpus
    cfg = tiny_cfg()
    corpus = prepare_corpus(manifest, cfg)
    lows = [sp for sp in corpus.values() if sp.entry.rs_score <= 17]
    with pytest.raises(TrainingError, match="risk head"):
        train_fold(lows, lows, cfg)


def test_run_cv_partition_and_determinism(tiny_corpus, tmp_path):
    _, manifest = tiny_corpus
    cfg = tiny_cfg()
    corpus = prepare_corpus(manifest, cfg)
    a = run_cv(manifest, cfg, tmp_path / "a", corpus)
    b = run_cv(manifest, cfg, tmp_path / "b", corpus)
    assert sorted(a.wsi_predictions) == sorted(e.slide_id for e in manifest)
    for f in range(cfg.k_folds):
        for j in range(f + 1, cfg.k_folds):
            assert not set(a.folds.patients(f)) & set(a.folds.patients(j))
    for rel in ("fold_0/cancer.ckpt", "fold_1/risk.ckpt", "fold_0/train_log.json", "patch_predictions.csv",
                "slide_predictions.json", "folds.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    slides = read_slide_predictions(tmp_path / "a" / "slide_predictions.json")
    assert len(slides) == len(manifest)
    rows = read_patch_predictions(tmp_path / "a" / "patch_predictions.csv")
    assert sum(len(v) for v in rows.values()) == sum(len(sp.refs) for sp in corpus.values())
