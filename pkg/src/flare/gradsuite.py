"""Finite-difference checks of every training loss on small seeded problems.

Each case builds a tiny network (8 input features in three views, 4-d latent)
and a batch of 8 rows, then compares :func:`flare.tensorcore.backward` with
central differences over every parameter entry. The RBF bandwidth is pinned
so the check sees the same function on both sides of each difference.
Problems are redrawn until they sit away from mining ties, hinge kinks and
near-singular Gram matrices, where central differences are unreliable.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .losses import (KernelConfig, LossWeights, estimate_prototypes, msource_total, one_hot,
                     prototype_triplet_loss, recon_loss, split_views, total_loss, cmmd,
                     combined_probs)
from .model import NetworkShape, classify, extract, forward_source, init_params, reconstruct
from .rng import stream

VIEW_DIMS = (3, 2, 3)
BATCH = 8
SIGMA = 0.5
# Unit trade-offs keep every block's gradient above the central-difference
# noise floor eps*|f|/h; the weighting itself is linear and checked exactly.
UNIT_WEIGHTS = LossWeights(1.0, 1.0, 1.0, 0.8)
TIE_GAP = 1e-3
MIN_GRAM_EIG = 1e-2

CASES = ("proto", "cmmd_s", "cmmd_t", "recon_s", "recon_t", "total", "msource")


@dataclass
class CaseResult:
    name: str
    report: tc.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        r = self.report
        status = "PASS" if r.passed else "FAIL"
        where = f"{r.worst_param}{list(r.worst_index)}" if r.worst_param else "-"
        if r.nan_at:
            where = f"non-finite at {r.nan_at[0]}{list(r.nan_at[1])}"
        return (f"{status} {self.name:8s} max_rel_err={r.max_rel_err:.3e} worst={where} "
                f"analytic={r.analytic:.6e} numeric={r.numeric:.6e} entries={r.checked}")


def _shape(sources: int) -> NetworkShape:
    return NetworkShape(VIEW_DIMS, 2, (6, 6), extractor_hidden=6, latent=4, classifier_hidden=5,
                        decoder_hidden=4, sources=sources)


def _problem(seed: int, sources: int, attempt: int):
    rng = stream(seed, "gradsuite", attempt)
    shape = _shape(sources)
    arrays = init_params(shape, seed + attempt).arrays
    # jitter so zero-initialized layers are exercised too
    arrays = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in arrays.items()}
    D = shape.total_dim
    data = {
        "Xs": [rng.standard_normal((BATCH, D)) for _ in range(sources)],
        "Xsb": [rng.standard_normal((BATCH, D)) for _ in range(sources)],
        "Xt": rng.standard_normal((BATCH, D)),
        "Xtb": rng.standard_normal((BATCH, D)),
        "Xu": rng.standard_normal((BATCH, D)),
        "ys": [np.repeat([0, 1], BATCH // 2)[rng.permutation(BATCH)] for _ in range(sources)],
        "yt": np.repeat([0, 1], BATCH // 2)[rng.permutation(BATCH)],
    }
    P = estimate_prototypes(extract(arrays_as(arrays), data["Xt"]), data["yt"], 2).P
    return arrays, data, P


def arrays_as(arrays):
    return {k: tc.Matrix(v, name=k) for k, v in arrays.items()}


def _margins_ok(arrays, data, P, alpha, sources) -> bool:
    """Mining choices and hinge activity must not flip under small perturbations."""
    p = arrays_as(arrays)
    for e in range(sources):
        _, Z = forward_source(p, data["Xs"][e], e)
        S = Z.value @ P.T
        y = data["ys"][e]
        for j in range(P.shape[0]):
            pos, neg = np.sort(S[y == j, j]), np.sort(S[y != j, j])
            if len(pos) > 1 and pos[1] - pos[0] < TIE_GAP:
                return False
            if len(neg) > 1 and neg[-1] - neg[-2] < TIE_GAP:
                return False
            if abs(neg[-1] - pos[0] + alpha) < TIE_GAP:
                return False
    return True


def _gram_ok(arrays, data, sources) -> bool:
    """CMMD Gram matrices must be far from singular, or differences drown in noise."""
    p = arrays_as(arrays)
    Zs = [extract(p, data["Xt"]), extract(p, data["Xtb"])]
    for e in range(sources):
        Zs += [forward_source(p, data["Xs"][e], e)[1], forward_source(p, data["Xsb"][e], e)[1]]
    for Z in Zs:
        sq = np.einsum("ij,ij->i", Z.value, Z.value)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Z.value @ Z.value.T, 0.0)
        if np.linalg.eigvalsh(np.exp(-d2 / (2.0 * SIGMA ** 2)))[0] < MIN_GRAM_EIG:
            return False
    return True


def _builders(data, P, kcfg: KernelConfig, w: LossWeights, sources: int):
    dims = VIEW_DIMS

    def src_terms(p, e):
        Xpa, Za = forward_source(p, data["Xs"][e], e)
        _, Zb = forward_source(p, data["Xsb"][e], e)
        return {
            "cmmd_s": cmmd(Za, one_hot(data["ys"][e], 2), Zb, classify(p, Zb, e), kcfg, SIGMA),
            "proto": prototype_triplet_loss(P, Za, data["ys"][e], w.alpha)[0],
            "recon_s": recon_loss(reconstruct(p, Za), split_views(Xpa, dims)),
        }

    def tgt_terms(p, weights):
        Za = extract(p, data["Xt"])
        Zb = extract(p, data["Xtb"])
        Zu = extract(p, data["Xu"])
        Yb = combined_probs(p, Zb, weights)
        return {
            "cmmd_t": cmmd(Za, one_hot(data["yt"], 2), Zb, Yb, kcfg, SIGMA),
            "recon_t": recon_loss(reconstruct(p, Za), split_views(data["Xt"], dims), BATCH)
            + recon_loss(reconstruct(p, Zu), split_views(data["Xu"], dims), BATCH),
        }

    weights = [0.6, 0.4][:sources] if sources > 1 else None
    return {
        "proto": lambda p: src_terms(p, 0)["proto"],
        "cmmd_s": lambda p: src_terms(p, 0)["cmmd_s"],
        "cmmd_t": lambda p: tgt_terms(p, weights)["cmmd_t"],
        "recon_s": lambda p: src_terms(p, 0)["recon_s"],
        "recon_t": lambda p: tgt_terms(p, weights)["recon_t"],
        "total": lambda p: total_loss({**src_terms(p, 0), **tgt_terms(p, None)}, w),
        "msource": lambda p: msource_total([src_terms(p, e) for e in range(sources)],
                                           tgt_terms(p, weights), weights or [1.0], w),
    }


def run(seed: int = 0, cases=CASES, tolerance: float = 1e-4, step: float = 1e-5,
        kernel: str = "rbf", tau: float = 1e-3, weights: LossWeights | None = None) -> list[CaseResult]:
    """Check each named loss; the multi-source case uses two sources."""
    kcfg = KernelConfig(kernel, SIGMA, tau)
    w = weights or UNIT_WEIGHTS
    out = []
    for name in cases:
        if name not in CASES:
            raise ValueError(f"unknown loss {name!r}; choose from {CASES}")
        sources = 2 if name == "msource" else 1
        for attempt in range(50):
            arrays, data, P = _problem(seed, sources, attempt)
            if _margins_ok(arrays, data, P, w.alpha, sources) and _gram_ok(arrays, data, sources):
                break
        else:
            raise RuntimeError("could not draw a problem clear of mining ties and singular Gram matrices")
        build = _builders(data, P, kcfg, w, sources)[name]
        out.append(CaseResult(name, tc.grad_check(build, arrays, step, tolerance)))
    return out


@contextlib.contextmanager
def faulty_adjoint(op: str, factor: float = 1.1):
    """Temporarily scale the adjoint of ``op`` by ``factor`` (for testing the checker)."""
    if op not in tc.ADJOINTS:
        raise KeyError(f"no adjoint registered for {op!r}")
    original = tc.ADJOINTS[op]

    def wrong(g, node, need):
        return tuple(None if x is None else x * factor for x in original(g, node, need))

    tc.ADJOINTS[op] = wrong
    try:
        yield
    finally:
        tc.ADJOINTS[op] = original
