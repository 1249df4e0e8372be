"""Metrics, baselines, cross-validated grid search and repeated-partition experiments."""

from __future__ import annotations

import csv
import functools
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .datamodel import (SampleSet, SynthSpec, TriDomainDataset, build_task, subsample_regime,
                        synth_generate)
from .model import ModelParams, predict_labels
from .rng import stream
from .trainer import TrainConfig, fit, fit_multi, fit_supervised, predict_proba

METRICS = ("sen", "spe", "f1", "gmean")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    sen: float
    spe: float
    f1: float
    gmean: float
    stderr: dict[str, float] = field(default_factory=dict)
    n: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(probs, labels, threshold: float = 0.5, positive: int = 1) -> ConfusionMatrix:
    """Binary confusion counts; a row is predicted positive when ``p[positive] >= threshold``."""
    P = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pred = P[:, positive] >= threshold
    truth = labels == positive
    return ConfusionMatrix(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                           int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """SEN, SPE, F1 (of SEN and precision) and G-mean; 0/0 counts as 0."""
    sen = _ratio(cm.tp, cm.tp + cm.fn)
    spe = _ratio(cm.tn, cm.tn + cm.fp)
    prec = _ratio(cm.tp, cm.tp + cm.fp)
    f1 = _ratio(2 * sen * prec, sen + prec)
    return MetricsReport(sen, spe, f1, math.sqrt(sen * spe))


def evaluate(probs, labels) -> MetricsReport:
    return metrics(confusion(probs, labels))


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and standard error (sample std / sqrt(n)) of each metric."""
    n = len(reports)
    if n == 0:
        raise ValueError("nothing to aggregate")
    out, se = {}, {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        out[m] = float(vals.mean())
        se[m] = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MetricsReport(**out, stderr=se, n=n)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

@dataclass
class Trained:
    params: ModelParams
    source_weights: list[float] | None = None

    def proba(self, X) -> np.ndarray:
        return predict_proba(self.params, X, self.source_weights)


def train_flare(task: TriDomainDataset, config: TrainConfig) -> Trained:
    params, report = fit(task, config)
    return Trained(params, report.final_source_weights)


def train_mflare(tasks: Sequence[TriDomainDataset], config: TrainConfig) -> Trained:
    params, report = fit_multi(tasks, config)
    return Trained(params, report.final_source_weights)


def train_source_only(task: TriDomainDataset, config: TrainConfig) -> Trained:
    return Trained(fit_supervised(task.source, task.manifest.dims, task.C, config))


def train_target_only(task: TriDomainDataset, config: TrainConfig, scbs: bool = False) -> Trained:
    return Trained(fit_supervised(task.target_labeled, task.manifest.dims, task.C, config, scbs=scbs))


def train_joint(task: TriDomainDataset, config: TrainConfig) -> Trained:
    pooled = SampleSet.concat(task.source, task.target_labeled)
    return Trained(fit_supervised(pooled, task.manifest.dims, task.C, config))


BASELINES: dict[str, Callable[[TriDomainDataset, TrainConfig], Trained]] = {
    "Source-only": train_source_only,
    "FCN": train_target_only,
    "FCN+SCBS": lambda t, c: train_target_only(t, c, scbs=True),
    "JointDomain": train_joint,
}


def run_baselines(task: TriDomainDataset, config: TrainConfig) -> dict[str, MetricsReport]:
    """Train each baseline and score it on D_u."""
    Xu, yu = task.target_unlabeled.X, task.target_unlabeled.y
    return {name: evaluate(train(task, config).proba(Xu), yu) for name, train in BASELINES.items()}


# ---------------------------------------------------------------------------
# Cross-validated grid search on the labeled target pool
# ---------------------------------------------------------------------------

def stratified_folds(labels, k: int, seed) -> list[np.ndarray]:
    """Class-stratified fold assignment; per-fold class counts differ by at most one."""
    labels = np.asarray(labels)
    rng = stream(seed, "folds") if not isinstance(seed, np.random.Generator) else seed
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < k:
            raise ValueError(f"class {c} has {len(idx)} labeled samples; use at most {len(idx)} folds")
        for i, j in enumerate(idx):
            folds[(i + offset) % k].append(int(j))
        offset += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


@dataclass
class GridResult:
    best: TrainConfig
    table: list[dict]

    def to_json(self) -> str:
        return json.dumps({"best": self.best.to_dict(), "table": self.table}, sort_keys=True, indent=1)


def _cv_cell(args):
    task, config, folds, criterion = args
    scores = []
    tl = task.target_labeled
    for i, held in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        fold_task = TriDomainDataset(task.source, tl.subset(train_idx),
                                     SampleSet.concat(tl.subset(held), task.target_unlabeled),
                                     task.manifest)
        model = train_flare(fold_task, config)
        rep = evaluate(model.proba(tl.X[held]), tl.y[held])
        scores.append(getattr(rep, criterion))
    return float(np.mean(scores)), scores


def grid_search(task: TriDomainDataset, config: TrainConfig, lambda2s: Iterable[float] | None = None,
                lambda3s: Iterable[float] | None = None, alphas: Iterable[float] | None = None,
                folds: int = 5, criterion: str = "gmean", jobs: int = 1) -> GridResult:
    """Pick (lambda2, lambda3, alpha) by k-fold CV on D_t.

    Held-out folds join D_u as unlabeled data during training. Ties go to
    the lexicographically smaller (lambda2, lambda3, alpha).
    """
    lambda2s = tuple(lambda2s or TrainConfig.GRID_LAMBDA2)
    lambda3s = tuple(lambda3s or TrainConfig.GRID_LAMBDA3)
    alphas = tuple(alphas or TrainConfig.GRID_ALPHA)
    fold_idx = stratified_folds(task.target_labeled.y, folds, stream(config.seed, "cv"))
    cells = sorted(itertools.product(lambda2s, lambda3s, alphas))
    jobs_args = [(task, replace(config, lambda2=a, lambda3=b, alpha=c), fold_idx, criterion)
                 for a, b, c in cells]
    results = _map(_cv_cell, jobs_args, jobs)
    table = [{"lambda2": a, "lambda3": b, "alpha": c, criterion: mean, "folds": scores}
             for (a, b, c), (mean, scores) in zip(cells, results)]
    best_i = max(range(len(cells)), key=lambda i: (results[i][0], [-x for x in cells[i]]))
    a, b, c = cells[best_i]
    return GridResult(replace(config, lambda2=a, lambda3=b, alpha=c), table)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Repeated partitions
# ---------------------------------------------------------------------------

def repeated_runs(run_once: Callable[[int], dict[str, MetricsReport]], n_repetitions: int = 10,
                  master_seed: int = 0, jobs: int = 1) -> tuple[dict[str, MetricsReport], list[dict]]:
    """Call ``run_once(seed)`` for derived seeds and aggregate each method's metrics.

    Returns the aggregated reports and the per-repetition detail.
    """
    seeds = [int(stream(master_seed, "repetition", r).integers(0, 2**31 - 1)) for r in range(n_repetitions)]
    per_rep = _map(run_once, seeds, jobs)
    methods = list(per_rep[0].keys())
    agg = {m: aggregate([rep[m] for rep in per_rep]) for m in methods}
    detail = [{"seed": s, **{m: rep[m].as_dict() for m in methods}} for s, rep in zip(seeds, per_rep)]
    return agg, detail


def write_results(path_csv, path_json, results: dict[str, MetricsReport], setting: str,
                  detail: list | None = None) -> None:
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "setting", "SEN", "SPE", "F1", "Gmean",
                    "SEN_stderr", "SPE_stderr", "F1_stderr", "Gmean_stderr"])
        for name, r in results.items():
            w.writerow([name, setting, *(f"{getattr(r, m):.6f}" for m in METRICS),
                        *(f"{r.stderr.get(m, 0.0):.6f}" for m in METRICS)])
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump({"setting": setting, "results": {k: v.as_dict() for k, v in results.items()},
                   "repetitions": detail or []}, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

BENCH_SYNTH = SynthSpec(sites=2, counts=(900, 90), separation=7.0, shift=0.75, noise=1.0,
                        site_counts=((900, 90), (1000, 100)))
BENCH_CONFIG = TrainConfig(epochs=60, lr=1e-3, steps_rule="max")


@dataclass(frozen=True)
class BenchSpec:
    """Seeded two-site task: site 1 is the source, site 2 the target.

    The target's training split is thinned to ``labeled_ratio`` per class,
    giving a small labeled pool; M-FLARE trains on ``mflare_sources`` copies
    of the source.
    """

    synth: SynthSpec = BENCH_SYNTH
    setting: str = "imbalanced"
    labeled_ratio: float = 0.1
    unlabeled_ratio: float = 1.0
    mflare_sources: int = 2


def bench_task(spec: BenchSpec, seed: int) -> TriDomainDataset:
    sites = synth_generate(spec.synth, seed)
    task = build_task(sites[0], sites[1], spec.synth.manifest, spec.setting, seed)
    return subsample_regime(task, spec.labeled_ratio, spec.unlabeled_ratio, seed)


def bench_once(seed: int, spec: BenchSpec = BenchSpec(), config: TrainConfig = BENCH_CONFIG
               ) -> dict[str, MetricsReport]:
    """FLARE, M-FLARE and the four baselines on one seeded task, scored on D_u."""
    task = bench_task(spec, seed)
    cfg = replace(config, seed=seed)
    Xu, yu = task.target_unlabeled.X, task.target_unlabeled.y
    methods = {"FLARE": train_flare,
               "M-FLARE": lambda t, c: train_mflare([t] * spec.mflare_sources, c),
               **BASELINES}
    return {name: evaluate(train(task, cfg).proba(Xu), yu) for name, train in methods.items()}


def run_bench(spec: BenchSpec = BenchSpec(), config: TrainConfig = BENCH_CONFIG,
              n_repetitions: int = 10, master_seed: int = 0, jobs: int = 1):
    """:func:`repeated_runs` over :func:`bench_once`."""
    once = functools.partial(bench_once, spec=spec, config=config)
    return repeated_runs(once, n_repetitions, master_seed, jobs)
