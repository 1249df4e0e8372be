"""AMSGrad and the training loops.

One engine trains both the single-source model and the multi-source one:
:func:`fit` is :func:`fit_multi` with a single source, so the two agree
exactly under the same seed. Each mini-batch runs a target step (CMMD and
reconstruction on the target) followed by a source step (CMMD, triplet and
reconstruction on every source), each with its own optimizer update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .datamodel import SampleSet, TriDomainDataset
from .losses import (KernelConfig, LossWeights, Prototypes, cmmd, combined_probs, cross_entropy,
                     estimate_prototypes, msource_total, msource_weights, one_hot,
                     prototype_triplet_loss, recon_loss, split_views)
from .model import (ModelParams, NetworkShape, classify, extract, forward_source, init_params,
                    reconstruct, translate)
from .rng import stream
from .sampler import (ScbsState, base_prob, cosine_weight, difficulty, draw_epoch, epoch_size,
                      scbs_update)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 100.0
    lambda3: float = 2e-3
    alpha: float = 0.8
    tau: float = 1e-3
    kernel: str = "rbf"
    bandwidth: str | float = "median"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 100
    epochs: int = 300
    delta: float = 0.3
    seed: int = 0
    latent: int = 64
    extractor_hidden: int = 128
    classifier_hidden: int = 32
    decoder_hidden: int = 64
    translator_hidden: tuple[int, int] | None = None
    use_translator: bool = True
    use_scbs: bool = True
    steps_rule: str = "target"

    GRID_LAMBDA2 = (10.0, 50.0, 100.0, 500.0, 1000.0)
    GRID_LAMBDA3 = (2e-4, 1e-3, 2e-3, 5e-3, 2e-2)
    GRID_ALPHA = (0.0, 0.4, 0.8, 1.2, 1.6)

    def __post_init__(self):
        if self.steps_rule not in ("target", "max"):
            raise ValueError(f"steps_rule must be 'target' or 'max', got {self.steps_rule!r}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        LossWeights(self.lambda1, self.lambda2, self.lambda3, self.alpha)
        KernelConfig(self.kernel, self.bandwidth, self.tau)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.alpha)

    @property
    def kernel_config(self) -> KernelConfig:
        return KernelConfig(self.kernel, self.bandwidth, self.tau)

    def network_shape(self, view_dims, classes: int, sources: int = 1, translator: bool | None = None,
                      decoders: bool = True) -> NetworkShape:
        return NetworkShape(tuple(view_dims), classes, self.translator_hidden, self.extractor_hidden,
                            self.latent, self.classifier_hidden, self.decoder_hidden, sources,
                            self.use_translator if translator is None else translator, decoders)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["translator_hidden"] is not None:
            d["translator_hidden"] = list(d["translator_hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("translator_hidden") is not None:
            d["translator_hidden"] = tuple(d["translator_hidden"])
        return cls(**d)


# ---------------------------------------------------------------------------
# AMSGrad
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    vhat: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def amsgrad_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
                 lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected AMSGrad update of the parameters that have a gradient.

    Parameters absent from ``grads`` are left alone (their moments do not
    decay), as when a network takes no part in the current loss. Arrays in
    ``params`` are updated in place and the same dict is returned.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
        th = params[k]
        if g.shape != th.shape:
            raise tc.ShapeError("amsgrad_step", th.shape, g.shape)
        if k not in state.m:
            state.m[k] = np.zeros_like(th)
            state.v[k] = np.zeros_like(th)
            state.vhat[k] = np.zeros_like(th)
            state.steps[k] = 0
        t = state.steps[k] = state.steps[k] + 1
        m, v, vh = state.m[k], state.v[k], state.vhat[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        np.maximum(vh, v, out=vh)
        # th -= lr * (m / bc1) / (sqrt(vh / bc2) + eps)
        denom = np.sqrt(vh)
        denom *= 1.0 / math.sqrt(1.0 - beta2 ** t)
        denom += eps
        th -= (lr / (1.0 - beta1 ** t)) * m / denom
    return params, state


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    epsilon: float
    w_t: float
    scbs: dict[str, list[float]]
    source_weights: list[float]
    losses: dict[str, float]
    flags: dict[str, int]
    max_norm_dev: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_source_weights: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs],
                "final_source_weights": list(self.final_source_weights)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def loss_curve(self, term: str = "total") -> list[float]:
        return [e.losses.get(term, 0.0) for e in self.epochs]


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------

def _steps(n_target: int, n_sources: Sequence[int], cfg: TrainConfig) -> int:
    n = n_target if cfg.steps_rule == "target" else max([n_target, *n_sources])
    return max(1, math.ceil(n / cfg.batch))


def _chunk(idx: np.ndarray, k: int, size: int) -> np.ndarray:
    """k-th block of ``size`` indices, cycling through ``idx``."""
    start = (k * size) % len(idx)
    take = np.arange(start, start + size) % len(idx)
    return idx[take]


def _norm_dev(Z: tc.Matrix) -> float:
    return float(np.max(np.abs(np.linalg.norm(Z.value, axis=1) - 1.0), initial=0.0))


class _Tracker:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}
        self.flags = {"norm_guard": 0, "mining_skip": 0, "prototype_flag": 0}
        self.norm_dev = 0.0

    def add(self, key: str, value: float):
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def latent(self, Z: tc.Matrix):
        self.flags["norm_guard"] += Z.guarded
        self.norm_dev = max(self.norm_dev, _norm_dev(Z))

    def means(self) -> dict[str, float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}


def _check_shared_target(datasets: Sequence[TriDomainDataset]):
    t0 = datasets[0]
    for d in datasets[1:]:
        if not (np.array_equal(d.target_labeled.X, t0.target_labeled.X)
                and np.array_equal(d.target_unlabeled.X, t0.target_unlabeled.X)):
            raise ValueError("all sources must share the same target pools")


class _Run:
    """State of one training run (single writer)."""

    def __init__(self, datasets: Sequence[TriDomainDataset], cfg: TrainConfig,
                 params: ModelParams | None = None):
        _check_shared_target(datasets)
        self.cfg = cfg
        self.data = datasets
        self.E = len(datasets)
        ds = datasets[0]
        self.C = ds.C
        self.dims = ds.manifest.dims
        self.shape = cfg.network_shape(self.dims, self.C, self.E)
        self.params = params.copy() if params is not None else init_params(self.shape, cfg.seed)
        self.opt = OptimState()
        self.w = cfg.weights
        self.kcfg = cfg.kernel_config
        self.source_weights = np.full(self.E, 1.0 / self.E)
        self.Xt, self.yt = ds.target_labeled.X, ds.target_labeled.y
        self.Xu = ds.target_unlabeled.X
        self.Xtu = np.vstack([self.Xt, self.Xu])
        self.counts_t = ds.target_labeled.class_counts(self.C)
        self.counts_s = [d.source.class_counts(self.C) for d in datasets]
        T = max(cfg.epochs, 1)
        self.scbs_t = ScbsState.initial(self.counts_t, T, cfg.delta)
        self.scbs_s = [ScbsState.initial(c, T, cfg.delta) for c in self.counts_s]
        self.r0_t = base_prob(self.counts_t, 0.0)
        self.r0_s = [base_prob(c, 0.0) for c in self.counts_s]
        self.rng_eps = stream(cfg.seed, "epsilon")
        self.rng_t = stream(cfg.seed, "draw", "target")
        self.rng_s = [stream(cfg.seed, "draw", "source", e) for e in range(self.E)]
        self.rng_b = stream(cfg.seed, "batch", "target-b")
        self.prototypes: Prototypes | None = None
        self.diff_t = self.r0_t
        self.diff_s = list(self.r0_s)
        self.report = TrainReport()

    # -- epoch hooks ---------------------------------------------------------
    def refresh(self):
        """Prototypes and class difficulties from the current parameters."""
        p = self.params.matrices()
        Zt = extract(p, self.Xt)
        if self.w.lambda2 > 0:
            self.prototypes = estimate_prototypes(Zt, self.yt, self.C, self.prototypes)
        probs_t = combined_probs(p, Zt, self.source_weights).value
        self.diff_t = difficulty(probs_t[np.arange(len(self.yt)), self.yt], self.yt, self.C)
        for e, d in enumerate(self.data):
            _, Zs = forward_source(p, d.source.X, e)
            ps = classify(p, Zs, e).value
            self.diff_s[e] = difficulty(ps[np.arange(len(d.source)), d.source.y], d.source.y, self.C)

    # -- steps ---------------------------------------------------------------
    def _apply(self, loss):
        grads = tc.backward(loss)
        named = {m.name: g for m, g in grads.items()}
        amsgrad_step(self.params.arrays, named, self.opt, self.cfg.lr, self.cfg.beta1,
                     self.cfg.beta2, self.cfg.eps)

    def target_step(self, idx_a: np.ndarray, tr: _Tracker):
        w = self.w
        if w.lambda1 == 0 and w.lambda3 == 0:
            return
        n = len(idx_a)
        nets = {"F"} | {f"L{e}" for e in range(self.E)} | {f"R{v}" for v in range(len(self.dims))}
        p = self.params.matrices(trainable=True, nets=nets)
        Xa = self.Xt[idx_a]
        Za = extract(p, Xa)
        tr.latent(Za)
        loss = None
        if w.lambda1 > 0:
            Xb = self.Xtu[self.rng_b.integers(0, len(self.Xtu), size=n)]
            Zb = extract(p, Xb)
            tr.latent(Zb)
            Yb = combined_probs(p, Zb, self.source_weights)
            lc = cmmd(Za, one_hot(self.yt[idx_a], self.C), Zb, Yb, self.kcfg)
            tr.add("cmmd_t", lc.item())
            loss = lc * w.lambda1
        if w.lambda3 > 0:
            Xu = self.Xu[self.rng_b.integers(0, len(self.Xu), size=n)]
            Zu = extract(p, Xu)
            tr.latent(Zu)
            lr_ = (recon_loss(reconstruct(p, Za), split_views(Xa, self.dims), n)
                   + recon_loss(reconstruct(p, Zu), split_views(Xu, self.dims), n))
            tr.add("recon_t", lr_.item())
            loss = lr_ * w.lambda3 if loss is None else loss + lr_ * w.lambda3
        self._apply(loss)

    def source_step(self, batches: list[tuple[np.ndarray, np.ndarray]], tr: _Tracker):
        w = self.w
        if w.lambda1 == 0 and w.lambda2 == 0 and w.lambda3 == 0:
            return
        p = self.params.matrices(trainable=True)
        terms = []
        for e, (ia, ib) in enumerate(batches):
            src = self.data[e].source
            t = {}
            Xpa, Za = forward_source(p, src.X[ia], e)
            tr.latent(Za)
            if w.lambda1 > 0:
                _, Zb = forward_source(p, src.X[ib], e)
                tr.latent(Zb)
                Yb = classify(p, Zb, e)
                t["cmmd_s"] = cmmd(Za, one_hot(src.y[ia], self.C), Zb, Yb, self.kcfg)
                tr.add(f"cmmd_s{e}", t["cmmd_s"].item())
            if w.lambda2 > 0:
                t["proto"], skipped = prototype_triplet_loss(self.prototypes, Za, src.y[ia], w.alpha)
                tr.flags["mining_skip"] += len(skipped)
                tr.add(f"proto{e}", t["proto"].item())
            if w.lambda3 > 0:
                t["recon_s"] = recon_loss(reconstruct(p, Za), split_views(Xpa, self.dims), len(ia))
                tr.add(f"recon_s{e}", t["recon_s"].item())
            terms.append(t)
        loss = msource_total(terms, {}, self.source_weights, w)
        self._apply(loss)

    # -- epochs --------------------------------------------------------------
    def epoch(self, t: int) -> EpochRecord:
        cfg = self.cfg
        eps = float(self.rng_eps.uniform())
        if cfg.use_scbs:
            self.scbs_t = scbs_update(self.scbs_t, eps, self.r0_t, self.diff_t)
            self.scbs_s = [scbs_update(s, eps, r0, rd)
                           for s, r0, rd in zip(self.scbs_s, self.r0_s, self.diff_s)]
        n_t = epoch_size(self.counts_t)
        n_s = [epoch_size(c) for c in self.counts_s]
        idx_t = draw_epoch(self.yt, self.scbs_t.current, n_t, self.rng_t)
        idx_s = [draw_epoch(d.source.y, s.current, n, r)
                 for d, s, n, r in zip(self.data, self.scbs_s, n_s, self.rng_s)]
        tr = _Tracker()
        bt = min(cfg.batch, n_t)
        for k in range(_steps(n_t, n_s, cfg)):
            self.target_step(_chunk(idx_t, k, bt), tr)
            batches = [(_chunk(ix, 2 * k, min(cfg.batch, len(ix))),
                        _chunk(ix, 2 * k + 1, min(cfg.batch, len(ix)))) for ix in idx_s]
            self.source_step(batches, tr)
        losses = tr.means()
        self.refresh()
        if self.prototypes is not None:
            tr.flags["prototype_flag"] += len(self.prototypes.flagged)
        if self.E > 1 and self.w.lambda1 > 0:
            self.source_weights = msource_weights([losses[f"cmmd_s{e}"] for e in range(self.E)])
        src_terms = [{"cmmd_s": losses.get(f"cmmd_s{e}"), "proto": losses.get(f"proto{e}"),
                      "recon_s": losses.get(f"recon_s{e}")} for e in range(self.E)]
        losses["total"] = float(msource_total(
            src_terms, {"cmmd_t": losses.get("cmmd_t"), "recon_t": losses.get("recon_t")},
            np.full(self.E, 1.0 / self.E) if self.E > 1 else [1.0], self.w))
        if tr.flags["norm_guard"]:
            log.warning("epoch %d: %d latent rows hit the normalization guard", t, tr.flags["norm_guard"])
        dists = {"target": self.scbs_t.current.tolist()}
        dists.update({f"source{e}": s.current.tolist() for e, s in enumerate(self.scbs_s)})
        return EpochRecord(t, eps, cosine_weight(t, self.scbs_t.T), dists,
                           self.source_weights.tolist(), losses, dict(tr.flags), tr.norm_dev)


def fit_multi(datasets: Sequence[TriDomainDataset], config: TrainConfig,
              callback: Callable[[EpochRecord, ModelParams], None] | None = None,
              init: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    """Train with one translator/classifier per source and a shared extractor."""
    if len(datasets) < 1:
        raise ValueError("need at least one source")
    run = _Run(datasets, config, init)
    if config.epochs == 0:
        run.report.final_source_weights = run.source_weights.tolist()
        return run.params, run.report
    run.refresh()
    for t in range(1, config.epochs + 1):
        rec = run.epoch(t)
        run.report.epochs.append(rec)
        log.info("epoch %d total %.5f", t, rec.losses["total"])
        if callback is not None:
            callback(rec, run.params)
    run.report.final_source_weights = run.source_weights.tolist()
    return run.params, run.report


def fit(dataset: TriDomainDataset, config: TrainConfig, callback=None,
        init: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    return fit_multi([dataset], config, callback, init)


def train_epoch(run: _Run, t: int) -> EpochRecord:
    """Run epoch ``t`` of an existing run (exposed for step-level tests)."""
    return run.epoch(t)


def new_run(datasets: Sequence[TriDomainDataset] | TriDomainDataset, config: TrainConfig) -> _Run:
    if isinstance(datasets, TriDomainDataset):
        datasets = [datasets]
    run = _Run(datasets, config)
    run.refresh()
    return run


# ---------------------------------------------------------------------------
# Supervised baselines (extractor + classifier, cross-entropy)
# ---------------------------------------------------------------------------

def fit_supervised(train: SampleSet, view_dims, classes: int, config: TrainConfig,
                   scbs: bool = False) -> ModelParams:
    """Train F and L on ``train`` with cross-entropy; SCBS optional, natural sampling otherwise."""
    shape = config.network_shape(view_dims, classes, 1, translator=False, decoders=False)
    params = init_params(shape, config.seed)
    opt = OptimState()
    counts = train.class_counts(classes)
    if np.any(counts == 0):
        raise ValueError(f"training set lacks a class: counts {counts}")
    T = max(config.epochs, 1)
    state = ScbsState.initial(counts, T, config.delta)
    r0 = base_prob(counts, 0.0)
    rdiff = r0
    rng_eps = stream(config.seed, "epsilon")
    rng = stream(config.seed, "draw", "supervised")
    n = epoch_size(counts)
    for t in range(1, config.epochs + 1):
        eps = float(rng_eps.uniform())
        if scbs:
            state = scbs_update(state, eps, r0, rdiff)
        idx = draw_epoch(train.y, state.current, n, rng)
        b = min(config.batch, n)
        for k in range(math.ceil(n / b)):
            ib = _chunk(idx, k, b)
            p = params.matrices(trainable=True)
            probs = classify(p, extract(p, train.X[ib]))
            loss = cross_entropy(probs, train.y[ib], classes)
            named = {m.name: g for m, g in tc.backward(loss).items()}
            amsgrad_step(params.arrays, named, opt, config.lr, config.beta1, config.beta2, config.eps)
        if scbs:
            P = classify(params, extract(params, train.X)).value
            rdiff = difficulty(P[np.arange(len(train)), train.y], train.y, classes)
    return params


def predict_proba(params: ModelParams, X, source_weights: Sequence[float] | None = None,
                  source: int | None = None) -> np.ndarray:
    """Class probabilities for target rows (``source`` routes rows through ``D_source`` first)."""
    p = params.matrices()
    Xm = tc.constant(X)
    if source is not None:
        Z = extract(p, translate(p, Xm, source))
        return classify(p, Z, source).value
    return combined_probs(p, extract(p, Xm), source_weights).value
