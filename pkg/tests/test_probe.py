from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cesbench.dataset import TAXONOMY, synthetic_manifest
from cesbench.embeddings.vectors import EmbeddingVector
from cesbench.errors import ConfigError, DataError, DimensionMismatch
from cesbench.probe import (
    PRESETS,
    ProbeModel,
    TrainConfig,
    evaluate_probe,
    forward,
    load_probe,
    loss_and_grad,
    predict,
    preset,
    save_probe,
    train_probe,
)
from conftest import class_embeddings, three_class_blobs

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------------------
# forward


def test_zero_model_is_uniform():
    m = ProbeModel.zeros(6, 4, TAXONOMY)
    assert np.allclose(forward(m, np.ones(4)), np.full(6, 1 / 6), atol=1e-15)


def test_bias_dominates():
    m = ProbeModel(np.zeros((6, 3)), np.array([10.0, 0, 0, 0, 0, 0]), TAXONOMY)
    p = forward(m, np.array([1.0, -2.0, 0.5]))
    oracle = math.exp(10) / (math.exp(10) + 5)
    assert p[0] > 0.999 and p[0] == pytest.approx(oracle, abs=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(ProbeModel.zeros(3, 4), np.ones(5))
    with pytest.raises(DimensionMismatch):
        predict(ProbeModel.zeros(3, 4), np.ones((2, 5)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, 4, elements=finite),
       arrays(np.float64, 3, elements=finite), st.floats(-50, 50), st.permutations(range(4)))
def test_forward_properties(W, b, x, shift, perm):
    m = ProbeModel(W, b, tuple("abcd"))
    p = forward(m, x)
    assert abs(p.sum() - 1.0) <= 1e-9
    shifted = ProbeModel(W, b + shift, tuple("abcd"))
    assert np.allclose(forward(shifted, x), p, atol=1e-9)
    perm = list(perm)
    permuted = ProbeModel(W[perm], b[perm], tuple("abcd"[i] for i in perm))
    assert np.allclose(forward(permuted, x), p[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# loss and gradient


def test_uniform_loss_is_ln6():
    m = ProbeModel.zeros(6, 2, TAXONOMY)
    loss, _, _ = loss_and_grad(m, [(np.array([1.0, 2.0]), TAXONOMY[3])])
    assert loss == pytest.approx(math.log(6), abs=1e-12)
    assert f"{loss:.5f}" == "1.79176"


def test_confident_correct_loss_goes_to_zero():
    W = np.array([[50.0, 0.0], [0.0, 0.0]])
    loss, _, _ = loss_and_grad(ProbeModel(W, np.zeros(2), ("a", "b")), [(np.array([1.0, 0.0]), "a")])
    assert loss < 1e-20


def test_gradient_small_instance_finite_differences():
    rng = np.random.default_rng(0)
    m = ProbeModel(rng.standard_normal((3, 4)), rng.standard_normal(3), (0, 1, 2))
    batch = [(rng.standard_normal(4), int(rng.integers(3))) for _ in range(5)]
    _, gW, gb = loss_and_grad(m, batch)
    h = 1e-5
    for arr, g in ((m.weights, gW), (m.bias, gb)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_and_grad(m, batch)[0]
            arr[idx] = orig - h
            down = loss_and_grad(m, batch)[0]
            arr[idx] = orig
            num = (up - down) / (2 * h)
            assert abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6) < 1e-4


def test_gradient_matches_softmax_minus_onehot_oracle():
    rng = np.random.default_rng(1)
    W, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
    xs = rng.standard_normal((4, 2))
    ys = [0, 2, 1, 2]
    m = ProbeModel(W, b, (0, 1, 2))
    _, gW, gb = loss_and_grad(m, list(zip(xs, ys)))
    oW, ob = np.zeros_like(W), np.zeros_like(b)
    for x, y in zip(xs, ys):
        z = [sum(W[c, j] * x[j] for j in range(2)) + b[c] for c in range(3)]
        e = [math.exp(v) for v in z]
        for c in range(3):
            d = e[c] / sum(e) - (1.0 if c == y else 0.0)
            ob[c] += d / 4
            for j in range(2):
                oW[c, j] += d * x[j] / 4
    assert np.allclose(gW, oW, atol=1e-12) and np.allclose(gb, ob, atol=1e-12)


def test_loss_errors():
    m = ProbeModel.zeros(2, 2, ("a", "b"))
    with pytest.raises(DataError):
        loss_and_grad(m, [])
    with pytest.raises(DimensionMismatch):
        loss_and_grad(m, [(np.ones(3), "a")])
    with pytest.raises(DataError):
        loss_and_grad(m, [(np.ones(2), "zzz")])


# ---------------------------------------------------------------------------
# training


def test_presets():
    assert PRESETS["text-probe"] == TrainConfig(epochs=5, batch_size=16, learning_rate=2e-5, weight_decay=0.01)
    assert preset("vision-probe").epochs == 100 and preset("vision-probe").learning_rate == 2e-3
    assert preset("vision-probe", epochs=3).epochs == 3
    with pytest.raises(ConfigError):
        preset("huge-probe")


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"learning_rate": 0.0}, {"weight_decay": -1.0},
                                {"batch_size": 0}, {"optimizer": "lbfgs"}, {"validation_fraction": 1.0}])
def test_train_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def _blob_features():
    X, y = three_class_blobs()
    return [(x, int(lbl)) for x, lbl in zip(X, y)]


def test_training_is_bit_deterministic():
    feats = _blob_features()
    cfg = TrainConfig(epochs=10, seed=3)
    m1, r1 = train_probe(feats, cfg)
    m2, r2 = train_probe(feats, cfg)
    assert m1.weights.tobytes() == m2.weights.tobytes() and m1.bias.tobytes() == m2.bias.tobytes()
    assert r1.epoch_losses == r2.epoch_losses
    m3, _ = train_probe(feats, TrainConfig(epochs=10, seed=4))
    assert m3.weights.tobytes() != m1.weights.tobytes()


def test_report_records_every_epoch():
    _, rep = train_probe(_blob_features(), TrainConfig(epochs=7))
    assert len(rep.epoch_losses) == 7 and all(math.isfinite(v) for v in rep.epoch_losses)
    assert rep.config["epochs"] == 7 and rep.wall_time >= 0


def test_sgd_step_applies_decoupled_decay_to_weights_only():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((6, 3))
    y = [0, 1, 2, 0, 1, 2]
    cfg = TrainConfig(epochs=1, batch_size=6, learning_rate=0.1, weight_decay=0.5, optimizer="sgd", seed=9)
    model, _ = train_probe(list(zip(X, y)), cfg, classes=(0, 1, 2))
    # documented initialisation: uniform(+-1/sqrt(D)) weights from the seeded generator, zero bias
    W0 = np.random.default_rng(9).uniform(-1 / np.sqrt(3), 1 / np.sqrt(3), size=(3, 3))
    b0 = np.zeros(3)
    _, gW, gb = loss_and_grad(ProbeModel(W0, b0, (0, 1, 2)), list(zip(X, y)))
    assert np.allclose(model.weights, W0 - 0.1 * 0.5 * W0 - 0.1 * gW, atol=1e-12)
    assert np.allclose(model.bias, b0 - 0.1 * gb, atol=1e-12)


def test_train_errors():
    with pytest.raises(DataError):
        train_probe([], TrainConfig())
    with pytest.raises(DataError):
        train_probe([(np.ones(2), "a")], TrainConfig(), classes=("a", "b"))
    with pytest.raises(DimensionMismatch):
        train_probe([(np.ones(2), "a"), (np.ones(3), "b")], TrainConfig())


def test_validation_split_and_early_stopping():
    cfg = TrainConfig(epochs=200, validation_fraction=0.2, patience=3, learning_rate=0.05)
    _, rep = train_probe(_blob_features(), cfg)
    assert rep.validation_losses and len(rep.validation_losses) == len(rep.epoch_losses)
    assert rep.stopped_early == (len(rep.epoch_losses) < 200)


def test_vision_preset_on_separable_blobs():
    _, rep = train_probe(_blob_features(), preset("vision-probe"))
    assert rep.train_accuracy >= 99.0


@pytest.fixture(scope="module")
def probe_data():
    manifest = synthetic_manifest(160)
    emb = class_embeddings(manifest, separation=8.0, noise=0.3, dims=16, seed=2)
    feats = [(emb[r.id], r.label) for r in manifest.records]
    return manifest, feats


def test_evaluate_separable_embeddings_is_perfect(probe_data):
    manifest, feats = probe_data
    model, _ = train_probe(feats[::2], preset("vision-probe", epochs=20))
    rep = evaluate_probe(model, feats[1::2])
    assert rep.accuracy == 100.0 and model.classes == TAXONOMY


def test_shuffled_labels_score_near_chance(probe_data):
    _, feats = probe_data
    model, _ = train_probe(feats, preset("vision-probe", epochs=20))
    labels = [lbl for _, lbl in feats]
    shuffled = list(np.random.default_rng(0).permutation(len(labels)))
    rep = evaluate_probe(model, [(x, labels[j]) for (x, _), j in zip(feats, shuffled)])
    assert abs(rep.accuracy - 100 / 6) <= 5.0


def test_checkpoint_round_trip(tmp_path, probe_data):
    _, feats = probe_data
    model, _ = train_probe(feats[::16], TrainConfig(epochs=2), trained_on="mock-image")
    path = save_probe(model, tmp_path / "p.ckpt")
    back = load_probe(path)
    assert back.classes == model.classes and back.trained_on == "mock-image"
    assert back.weights.tobytes() == model.weights.tobytes() and back.bias.tobytes() == model.bias.tobytes()
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DataError):
        load_probe(path)
    path.write_bytes(b"NOTAPROBE" + raw)
    with pytest.raises(DataError):
        load_probe(path)


def test_evaluate_uses_embedding_ids():
    m = ProbeModel(np.array([[1.0], [-1.0]]), np.zeros(2), ("pos", "neg"))
    feats = [(EmbeddingVector("a", "image", "m", [2.0]), "pos"), (EmbeddingVector("b", "image", "m", [-2.0]), "pos")]
    rep = evaluate_probe(m, feats)
    assert rep.accuracy == 50.0 and rep.n_items == 2
