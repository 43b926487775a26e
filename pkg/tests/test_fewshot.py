from __future__ import annotations

import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesbench.dataset import TAXONOMY, CesClass, synthetic_manifest
from cesbench.embeddings.vectors import EmbeddingVector
from cesbench.errors import ConfigError, DataError
from cesbench.fewshot import (
    FewShotConfig,
    classify_query,
    curve_csv,
    run_experiment,
    run_trial,
    summarize,
    summary_report,
)
from conftest import class_embeddings


def ev(values, item_id="q"):
    return EmbeddingVector(item_id, "image", "m", values)


def _axis_prototypes():
    return {cls: ev(np.eye(6)[i], f"p{i}") for i, cls in enumerate(TAXONOMY)}


def test_query_equal_to_prototype_wins():
    protos = _axis_prototypes()
    out = classify_query(protos, ev(np.eye(6)[2]), order=TAXONOMY)
    assert out.predicted is CesClass.Gastronomy and not out.tie
    assert out.probabilities[2] == out.probabilities.max()
    assert all(out.probabilities[2] > p for i, p in enumerate(out.probabilities) if i != 2)
    assert out.probabilities.sum() == pytest.approx(1.0)


def test_tie_goes_to_taxonomy_order_and_is_recorded():
    protos = _axis_prototypes()
    q = np.zeros(6)
    q[[1, 4]] = 1.0  # equidistant from Fauna-Flora and Sports
    out = classify_query(protos, ev(q), order=TAXONOMY)
    assert out.predicted is CesClass.FaunaFlora and out.tie
    reversed_order = tuple(reversed(TAXONOMY))
    assert classify_query(protos, ev(q), order=reversed_order).predicted is CesClass.Sports


def test_noisy_queries_match_bruteforce():
    rng = np.random.default_rng(4)
    raw = {cls: rng.standard_normal(8) for cls in TAXONOMY}
    protos = {c: ev(v, c.name) for c, v in raw.items()}
    for j in range(100):
        q = raw[TAXONOMY[j % 6]] + rng.standard_normal(8)
        sims = {c: float(np.dot(v, q) / (np.linalg.norm(v) * np.linalg.norm(q))) for c, v in raw.items()}
        assert classify_query(protos, ev(q), order=TAXONOMY).predicted is max(sims, key=sims.get)


def test_shots_1_with_centroid_embeddings_is_perfect():
    m = synthetic_manifest(12)
    emb = class_embeddings(m, separation=5.0, noise=0.0, dims=8)
    res = run_trial(m, FewShotConfig(shots=(1,), trials=1), seed=0, embeddings=emb)
    assert res.metrics.accuracy == 100.0 and res.shots == 1


def test_trial_is_deterministic_per_seed():
    m = synthetic_manifest(20)
    emb = class_embeddings(m, separation=1.5, dims=8)
    cfg = FewShotConfig(shots=(3,))
    a, b = run_trial(m, cfg, 11, emb), run_trial(m, cfg, 11, emb)
    assert a.prototype_ids == b.prototype_ids and a.metrics.to_dict() == b.metrics.to_dict()


def test_missing_embedding_is_reported():
    m = synthetic_manifest(12)
    emb = class_embeddings(m)
    emb.pop(m.records[-1].id)
    with pytest.raises(DataError):
        run_trial(m, FewShotConfig(), 0, emb)


@pytest.mark.parametrize("kw", [{"shots": ()}, {"shots": (0,)}, {"shots": (11,)}, {"trials": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        FewShotConfig(**kw)


def test_single_trial_average_equals_trial():
    m = synthetic_manifest(20)
    emb = class_embeddings(m, separation=1.0, dims=8)
    [summary] = run_experiment(m, FewShotConfig(shots=(5,), trials=1), emb)
    t = summary.trials[0].metrics
    assert summary.accuracy == (t.accuracy, 0.0)
    assert summary.precision == (t.precision, 0.0) and summary.recall == (t.recall, 0.0)


def test_summary_uses_sample_standard_deviation():
    m = synthetic_manifest(20)
    emb = class_embeddings(m, separation=1.0, dims=8)
    [s] = run_experiment(m, FewShotConfig(shots=(2,), trials=6, base_seed=3), emb)
    accs = [t.metrics.accuracy for t in s.trials]
    assert s.accuracy[0] == pytest.approx(statistics.fmean(accs), abs=1e-12)
    assert s.accuracy[1] == pytest.approx(statistics.stdev(accs), abs=1e-12)
    assert [t.seed for t in s.trials] == list(range(3, 9))


def test_separation_sweep_is_monotone():
    m = synthetic_manifest(30)
    means = []
    for sep in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
        emb = class_embeddings(m, separation=sep, noise=1.0, dims=16, seed=1)
        [s] = run_experiment(m, FewShotConfig(shots=(5,), trials=10), emb)
        means.append(s.accuracy[0])
    assert all(b >= a for a, b in zip(means, means[1:])), means
    assert means[-1] == 100.0 and means[0] < 40.0


def test_parallel_workers_match_serial():
    m = synthetic_manifest(20)
    emb = class_embeddings(m, separation=1.0, dims=8)
    serial = run_experiment(m, FewShotConfig(shots=(1, 4), trials=8), emb)
    parallel = run_experiment(m, FewShotConfig(shots=(1, 4), trials=8, workers=4), emb)
    assert [s.to_dict() for s in serial] == [s.to_dict() for s in parallel]


def test_curve_csv_and_summary_report():
    m = synthetic_manifest(20)
    emb = class_embeddings(m, separation=1.0, dims=8)
    sums = run_experiment(m, FewShotConfig(shots=(1, 2), trials=3), emb)
    lines = curve_csv(sums).splitlines()
    assert lines[0] == "shots,trials,precision,precision_std,recall,recall_std,accuracy,accuracy_std"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]
    rep = summary_report(sums[0])
    assert rep.accuracy == sums[0].accuracy[0]
    assert rep.n_items == sum(t.metrics.n_items for t in sums[0].trials)
    assert "averaged_over_trials:3" in rep.flags


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_trial_queries_exclude_support(shots, seed):
    m = synthetic_manifest(12)
    emb = class_embeddings(m, dims=4)
    res = run_trial(m, FewShotConfig(shots=(shots,)), seed, emb, shots=shots)
    assert res.metrics.n_items == len(m) - 6 * shots
    assert summarize(shots, [res]).accuracy[0] == res.metrics.accuracy
