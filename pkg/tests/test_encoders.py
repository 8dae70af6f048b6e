from __future__ import annotations

import numpy as np
import pytest
import torch

from chunkpd.classify import ClassifierSpec, predict_scores, train_classifier
from chunkpd.dataset import DRAWING_TYPES, synthesize_toy_manifest
from chunkpd.encoders import (
    FeatureStore,
    TrainSchedule,
    adapt_batchnorm,
    build_encoder,
    classify_drawing_type,
    classify_drawing_types,
    encoder_id,
    extract_features,
    extract_features_batch,
    finetune,
    load_encoder,
    load_type_classifier,
    save_encoder,
    save_type_classifier,
    train_type_classifier,
)
from chunkpd.errors import DimensionMismatch, DivergedLoss, EmptyTrainingSet, ModelNotLoaded
from chunkpd.evaluation import make_split
from chunkpd.preprocess import AugmentationSpec, ChunkGrid, Tile, run_pipeline


@pytest.fixture(scope="module")
def tiles():
    rng = np.random.default_rng(0)
    return [rng.random((224, 224, 3), dtype=np.float32) for _ in range(3)]


@pytest.fixture(scope="module")
def hybrid():
    return build_encoder(encoder_id("hybrid_concat"), seed=0)


def test_encoder_ids():
    assert encoder_id("residual_cnn").output_dim == 512
    assert encoder_id("pyramid_transformer").output_dim == 512
    h = encoder_id("hybrid_concat")
    assert h.output_dim == 1024 and h.parts == ("resnet18", "pvt_v2_b0")
    with pytest.raises(ValueError):
        encoder_id("vit")


def test_hybrid_is_residual_then_pyramid(hybrid, tiles):
    full = extract_features_batch(tiles, hybrid)
    assert full.shape == (3, 1024)
    res = extract_features_batch(tiles, hybrid.component("residual_cnn"))
    pyr = extract_features_batch(tiles, hybrid.component("pyramid_transformer"))
    assert np.array_equal(full[:, :512], res) and np.array_equal(full[:, 512:], pyr)


def test_inference_is_deterministic(hybrid, tiles):
    t = Tile("s", 0, (0, 0), tiles[0], normalized=True)
    a, b = extract_features(t, hybrid), extract_features(t, hybrid)
    assert a.values.shape == (1024,) and np.array_equal(a.values, b.values)
    assert a.tile_ref == ("s", 0, (0, 0))


def test_construction_is_a_function_of_seed():
    a = build_encoder(encoder_id("residual_cnn"), seed=5)
    b = build_encoder(encoder_id("residual_cnn"), seed=5)
    c = build_encoder(encoder_id("residual_cnn"), seed=6)
    assert a.fingerprint == b.fingerprint != c.fingerprint


def test_wrong_tile_shape_and_missing_weights(tiles):
    enc = build_encoder(encoder_id("residual_cnn"))
    with pytest.raises(DimensionMismatch):
        extract_features_batch([np.zeros((100, 100, 3), dtype=np.float32)], enc)
    enc.module = None
    with pytest.raises(ModelNotLoaded):
        extract_features_batch(tiles, enc)


def test_zero_epoch_finetune_keeps_initial_weights(tiles):
    enc = build_encoder(encoder_id("residual_cnn"), seed=1)
    data = [(t, i % 2) for i, t in enumerate(tiles)]
    out = finetune(enc, data, TrainSchedule(epochs=0))
    assert out.fingerprint == enc.fingerprint
    with pytest.raises(EmptyTrainingSet):
        finetune(enc, [], TrainSchedule(epochs=1))


def test_finetune_updates_weights_reproducibly(tiles):
    enc = build_encoder(encoder_id("residual_cnn"), seed=1)
    data = [(t, i % 2) for i, t in enumerate(tiles)] * 2
    sched = TrainSchedule(epochs=1, lr=1e-3, batch_size=3, seed=2)
    a, b = finetune(enc, data, sched), finetune(enc, data, sched)
    assert a.fingerprint != enc.fingerprint
    assert a.fingerprint == b.fingerprint
    assert len(a.history) == 1 and np.isfinite(a.history[0]["loss"])


def test_non_finite_loss_is_reported(tiles):
    enc = build_encoder(encoder_id("residual_cnn"), seed=1)
    bad = np.full((224, 224, 3), np.nan, dtype=np.float32)
    with pytest.raises(DivergedLoss):
        finetune(enc, [(bad, 0), (bad, 1)], TrainSchedule(epochs=1, batch_size=2))


def test_batchnorm_adaptation_only_touches_statistics(tiles):
    enc = build_encoder(encoder_id("residual_cnn"), seed=1)
    adapted = adapt_batchnorm(enc, tiles, batch_size=2)
    before, after = enc.module.state_dict(), adapted.module.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(k.endswith(("running_mean", "running_var", "num_batches_tracked")) for k in changed)
    assert adapt_batchnorm(enc, tiles, batch_size=2).fingerprint == adapted.fingerprint


def test_type_classifier_softmax_and_routing(tmp_path):
    rng = np.random.default_rng(3)
    canvases, types = [], []
    for i, d in enumerate(DRAWING_TYPES * 4):
        img = np.zeros((224, 224, 3), dtype=np.float32)
        img[:, :, DRAWING_TYPES.index(d)] = 1.0
        canvases.append(img * rng.uniform(0.8, 1.0))
        types.append(d)
    state = train_type_classifier(canvases, types, TrainSchedule(epochs=100, lr=1e-2, batch_size=4, freeze_backbone=True))
    preds = classify_drawing_types(canvases, state)
    for p, d in zip(preds, types):
        assert abs(sum(p.scores) - 1) < 1e-6
        assert p.drawing_type == DRAWING_TYPES[int(np.argmax(p.scores))] == d
    path = save_type_classifier(state, tmp_path / "t.pt", "h")
    back, h = load_type_classifier(path)
    assert h == "h" and classify_drawing_type(canvases[0], back) == preds[0]
    with pytest.raises(ModelNotLoaded):
        classify_drawing_type(canvases[0], None)


def test_encoder_checkpoint_round_trip(tmp_path, hybrid, tiles):
    path = save_encoder(hybrid, tmp_path / "e.pt", "cfg")
    back, h = load_encoder(path)
    assert h == "cfg" and back.fingerprint == hybrid.fingerprint
    assert np.array_equal(extract_features_batch(tiles[:1], back), extract_features_batch(tiles[:1], hybrid))
    with pytest.raises(ModelNotLoaded):
        load_encoder(tmp_path / "missing.pt")


def test_feature_store_avoids_recomputation(tmp_path, tiles):
    enc = build_encoder(encoder_id("residual_cnn"))
    store = FeatureStore()
    calls = []

    def make(idx):
        calls.append(list(idx))
        return [tiles[i] for i in idx]

    a = store.features(enc, ["a", "b", "c"], make)
    b = store.features(enc, ["c", "a"], make)
    assert calls == [[0, 1, 2]]
    assert np.array_equal(b, a[[2, 0]])
    store.save(tmp_path / "f.npz")
    again = FeatureStore.load(tmp_path / "f.npz")
    assert np.array_equal(again.features(enc, ["b"], make), a[[1]]) and len(calls) == 1


@pytest.mark.slow
def test_finetuned_features_beat_the_majority_floor():
    m = synthesize_toy_manifest(10, 11)
    spirals = m.subset([s.sample_id for s in m.samples if s.drawing_type == "spiral"])
    plan = make_split(spirals, "ind_cv5", 0)
    fold = plan.folds[0]
    grid, spec = ChunkGrid(2), AugmentationSpec()
    idx = spirals.sample_index()

    def tiles_of(ids):
        out = []
        for sid in ids:
            s = idx[sid]
            out += [(t.pixels, int(s.label == "PD")) for t in run_pipeline(s, grid, spec, False)]
        return out

    train, test = tiles_of(fold.train_ids), tiles_of(fold.test_ids)
    enc = finetune(build_encoder(encoder_id("residual_cnn"), seed=0), train, TrainSchedule(epochs=2, lr=1e-3, batch_size=8))
    Xtr = extract_features_batch([p for p, _ in train], enc)
    Xte = extract_features_batch([p for p, _ in test], enc)
    ytr = ["PD" if y else "Healthy" for _, y in train]
    yte = np.array([y for _, y in test])
    clf = train_classifier(ClassifierSpec("knn"), Xtr, ytr)
    acc = float(np.mean((predict_scores(clf, Xte) >= 0.5) == yte))
    floor = max(yte.mean(), 1 - yte.mean())
    assert acc > floor
