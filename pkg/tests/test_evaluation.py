import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare import evaluation as ev
from flare.datamodel import SampleSet, SynthSpec, TriDomainDataset, ViewManifest, build_task, synth_generate
from flare.evaluation import (ConfusionMatrix, MetricsReport, aggregate, confusion, evaluate, grid_search,
                              metrics, repeated_runs, stratified_folds, write_results)
from flare.trainer import TrainConfig

MANIFEST = ViewManifest.from_dims([4, 3])
SMALL = TrainConfig(batch=16, latent=4, extractor_hidden=8, classifier_hidden=4, decoder_hidden=4,
                    translator_hidden=(6, 6), lr=1e-3, epochs=2)


def tiny_task(seed=0):
    spec = SynthSpec(sites=2, counts=(60, 20), manifest=MANIFEST, separation=4.0, shift=0.5)
    s1, s2 = synth_generate(spec, seed)
    return build_task(s1, s2, MANIFEST, "imbalanced", seed)


def probs_for(pred):
    pred = np.asarray(pred, dtype=float)
    return np.column_stack([1 - pred, pred])


# --- metrics ---------------------------------------------------------------------------

def test_crafted_confusion_case():
    labels = np.array([1] * 10 + [0] * 10)
    pred = np.array([1] * 8 + [0] * 2 + [0] * 9 + [1])
    cm = confusion(probs_for(pred), labels)
    assert cm == ConfusionMatrix(tp=8, fp=1, tn=9, fn=2)
    r = metrics(cm)
    assert r.sen == pytest.approx(0.8, abs=1e-4)
    assert r.spe == pytest.approx(0.9, abs=1e-4)
    assert r.f1 == pytest.approx(0.8421, abs=1e-4)
    assert r.gmean == pytest.approx(0.8485, abs=1e-4)


def test_metric_oracles_from_counts():
    # F1 = 2 TP / (2 TP + FP + FN); G-mean = sqrt(SEN * SPE)
    r = metrics(ConfusionMatrix(tp=8, fp=1, tn=9, fn=2))
    assert r.f1 == pytest.approx(16 / 19, abs=1e-12)
    assert r.gmean == pytest.approx(math.sqrt(0.72), abs=1e-12)


def test_perfect_and_all_negative_predictions():
    labels = np.array([1, 1, 0, 0])
    cm = confusion(probs_for(labels), labels)
    assert cm.fp == cm.fn == 0
    cm = confusion(probs_for(np.zeros(4)), labels)
    assert cm.tp == cm.fp == 0
    r = metrics(cm)
    assert (r.sen, r.f1, r.gmean) == (0.0, 0.0, 0.0)


def test_threshold_tie_counts_as_positive():
    cm = confusion(np.array([[0.5, 0.5]]), np.array([1]))
    assert cm.tp == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_metrics_are_bounded_and_f1_matches_count_form(tp, fp, tn, fn):
    r = metrics(ConfusionMatrix(tp, fp, tn, fn))
    for m in ("sen", "spe", "f1", "gmean"):
        assert 0.0 <= getattr(r, m) <= 1.0
    if tp:
        assert r.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), rel=1e-12)


def test_aggregate_examples():
    one = aggregate([MetricsReport(0.8, 0.8, 0.8, 0.8)])
    assert one.stderr["sen"] == 0.0
    same = aggregate([MetricsReport(0.5, 0.5, 0.5, 0.5)] * 4)
    assert same.stderr["gmean"] == 0.0
    two = aggregate([MetricsReport(0.8, 0.8, 0.8, 0.8), MetricsReport(0.9, 0.9, 0.9, 0.9)])
    assert two.sen == pytest.approx(0.85)
    assert two.stderr["sen"] == pytest.approx(0.05)
    with pytest.raises(ValueError):
        aggregate([])


# --- folds and grid search ------------------------------------------------------------------

def test_folds_are_stratified_disjoint_and_seeded():
    y = np.repeat([0, 1], [23, 7])
    folds = stratified_folds(y, 5, 3)
    flat = np.concatenate(folds)
    assert sorted(flat.tolist()) == list(range(30))
    for c in (0, 1):
        per = [int(np.sum(y[f] == c)) for f in folds]
        assert max(per) - min(per) <= 1
    again = stratified_folds(y, 5, 3)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))
    with pytest.raises(ValueError):
        stratified_folds(np.repeat([0, 1], [10, 2]), 5, 0)


def test_grid_single_cell_is_selected():
    task = tiny_task()
    res = grid_search(task, SMALL, [50.0], [1e-3], [0.4], folds=2)
    assert (res.best.lambda2, res.best.lambda3, res.best.alpha) == (50.0, 1e-3, 0.4)
    assert len(res.table) == 1
    again = grid_search(task, SMALL, [50.0], [1e-3], [0.4], folds=2)
    assert again.to_json() == res.to_json()


def test_grid_ties_go_to_smallest_cell(monkeypatch):
    monkeypatch.setattr(ev, "_cv_cell", lambda args: (0.5, [0.5]))
    res = grid_search(tiny_task(), SMALL, [100.0, 10.0], [2e-3, 2e-4], [0.8, 0.0], folds=2)
    assert (res.best.lambda2, res.best.lambda3, res.best.alpha) == (10.0, 2e-4, 0.0)
    assert len(res.table) == 8


# --- baselines and experiments ----------------------------------------------------------------

def test_source_only_ignores_target_labels():
    task = tiny_task()
    rng = np.random.default_rng(0)
    tl = task.target_labeled
    shuffled = TriDomainDataset(task.source, SampleSet(tl.X, rng.permutation(tl.y), tl.site),
                                task.target_unlabeled, task.manifest)
    a = ev.train_source_only(task, SMALL).proba(task.target_unlabeled.X)
    b = ev.train_source_only(shuffled, SMALL).proba(task.target_unlabeled.X)
    np.testing.assert_array_equal(a, b)


def test_baselines_score_on_the_same_pool():
    out = ev.run_baselines(tiny_task(), SMALL)
    assert list(out) == ["Source-only", "FCN", "FCN+SCBS", "JointDomain"]


def test_repeated_runs_aggregate_and_reproduce():
    def once(seed):
        v = (seed % 7) / 7
        return {"m": MetricsReport(v, v, v, v)}

    agg, detail = repeated_runs(once, 4, master_seed=5)
    agg2, detail2 = repeated_runs(once, 4, master_seed=5)
    assert detail == detail2
    assert agg["m"].n == 4
    assert agg["m"].sen == pytest.approx(np.mean([d["m"]["sen"] for d in detail]))


def test_write_results(tmp_path):
    agg = {"FLARE": aggregate([MetricsReport(0.8, 0.8, 0.8, 0.8), MetricsReport(0.9, 0.9, 0.9, 0.9)])}
    write_results(tmp_path / "r.csv", tmp_path / "r.json", agg, "imbalanced")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[0]["method"] == "FLARE"
    assert float(rows[0]["SEN_stderr"]) == pytest.approx(0.05)
    assert json.loads((tmp_path / "r.json").read_text())["setting"] == "imbalanced"
