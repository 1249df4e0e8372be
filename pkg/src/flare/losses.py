"""Objective terms: prototype triplet loss, conditional MMD, view reconstruction, totals.

All terms are built from :mod:`flare.tensorcore` primitives so they can be
differentiated end to end. Label batches enter CMMD as rows: one-hot rows for
true labels, classifier probability rows for predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .model import classify, forward_source, forward_target
from .tensorcore import ContractError, Matrix

PROTO_EPS = 1e-8
WEIGHT_CLAMP = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    """Feature kernel ``"rbf"`` or ``"linear"``; ``bandwidth`` is ``"median"`` or a fixed sigma."""

    kernel: str = "rbf"
    bandwidth: str | float = "median"
    tau: float = 1e-3

    def __post_init__(self):
        if self.kernel not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 100.0
    lambda3: float = 2e-3
    alpha: float = 0.8

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.alpha <= 2.0:
            raise ValueError("alpha must lie in [0, 2]")


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Prototypes and the triplet loss
# ---------------------------------------------------------------------------

class PrototypeDegeneracyError(ValueError):
    pass


@dataclass(frozen=True)
class Prototypes:
    P: np.ndarray
    flagged: tuple[int, ...] = ()


def estimate_prototypes(Z, labels, classes: int, previous: Prototypes | None = None) -> Prototypes:
    """Normalized class means of unit latents.

    A class whose mean has norm < 1e-8, or that has no samples, keeps its
    previous prototype and is reported in ``flagged``.
    """
    Z = Z.value if isinstance(Z, Matrix) else np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    P = np.zeros((classes, Z.shape[1]))
    flagged = []
    for c in range(classes):
        rows = Z[labels == c]
        m = rows.mean(axis=0) if len(rows) else np.zeros(Z.shape[1])
        norm = np.linalg.norm(m)
        if norm < PROTO_EPS:
            if previous is None:
                raise PrototypeDegeneracyError(f"class {c}: degenerate prototype and no fallback")
            P[c] = previous.P[c]
            flagged.append(c)
        else:
            P[c] = m / norm
    return Prototypes(P, tuple(flagged))


def prototype_triplet_loss(P, Z: Matrix, labels, alpha: float) -> tuple[Matrix, list[int]]:
    """Hard-mined triplet loss against constant prototypes.

    For class ``j``: ``[max_neg <p_j, z> - min_pos <p_j, z> + alpha]_+``,
    averaged over all ``C`` classes. Classes without a positive or a negative
    in the batch contribute 0 and are returned as skipped.
    """
    P = P.P if isinstance(P, Prototypes) else np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.rows == 0:
        raise ContractError("triplet loss on an empty batch")
    C = P.shape[0]
    S = Z @ tc.constant(P.T)
    sv = S.value
    select = np.zeros(sv.shape)
    active = np.zeros((1, C))
    skipped = []
    for j in range(C):
        pos = np.flatnonzero(labels == j)
        neg = np.flatnonzero(labels != j)
        if len(pos) == 0 or len(neg) == 0:
            skipped.append(j)
            continue
        select[neg[np.argmax(sv[neg, j])], j] += 1.0
        select[pos[np.argmin(sv[pos, j])], j] -= 1.0
        active[0, j] = 1.0
    gaps = tc.constant(np.ones((1, Z.rows))) @ tc.mul(S, tc.constant(select))
    hinge = tc.mul(tc.relu(tc.add_scalar(gaps, alpha)), tc.constant(active))
    return tc.scale(tc.sum(hinge), 1.0 / C), skipped


# ---------------------------------------------------------------------------
# Conditional MMD
# ---------------------------------------------------------------------------

def median_bandwidth(*batches: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled rows (1.0 if all coincide)."""
    X = np.vstack(batches)
    sq = np.einsum("ij,ij->i", X, X)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    iu = np.triu_indices(len(X), k=1)
    d = np.sqrt(d2[iu])
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def resolve_bandwidth(cfg: KernelConfig, Za, Zb) -> float:
    if cfg.bandwidth == "median":
        return median_bandwidth(_val(Za), _val(Zb))
    return float(cfg.bandwidth)


def _val(m):
    return m.value if isinstance(m, Matrix) else np.asarray(m)


def gram(A: Matrix, B: Matrix, cfg: KernelConfig, sigma: float | None = None) -> Matrix:
    if cfg.kernel == "linear":
        return A @ B.T
    return tc.exp(tc.scale(tc.sq_dists(A, B), -1.0 / (2.0 * sigma * sigma)))


def cmmd(Za, Ya, Zb, Yb, cfg: KernelConfig, sigma: float | None = None) -> Matrix:
    """Squared distance between the conditional embeddings of two labeled batches.

    With ``L = (K + tau I)^-1`` the value is
    ``Tr(La Ga La Ka) + Tr(Lb Gb Lb Kb) - 2 Tr(La Gab Lb Kba)`` where ``K`` are
    feature Gram matrices and ``G`` linear-kernel Gram matrices of label rows.
    The median bandwidth is treated as a constant (no gradient); pass
    ``sigma`` to pin it.
    """
    Za, Ya, Zb, Yb = (tc.constant(m) for m in (Za, Ya, Zb, Yb))
    if Za.rows != Zb.rows:
        raise ContractError(f"cmmd: batch sizes differ ({Za.rows} vs {Zb.rows})")
    if Ya.rows != Za.rows or Yb.rows != Zb.rows:
        raise ContractError("cmmd: label rows do not match feature rows")
    if cfg.kernel == "rbf" and sigma is None:
        sigma = resolve_bandwidth(cfg, Za, Zb)
    Ka = gram(Za, Za, cfg, sigma)
    Kb = gram(Zb, Zb, cfg, sigma)
    Kba = gram(Zb, Za, cfg, sigma)
    La = tc.regularized_inverse(Ka, cfg.tau)
    Lb = tc.regularized_inverse(Kb, cfg.tau)
    Ga = Ya @ Ya.T
    Gb = Yb @ Yb.T
    Gab = Ya @ Yb.T
    term_a = tc.trace(La @ Ga @ La @ Ka)
    term_b = tc.trace(Lb @ Gb @ Lb @ Kb)
    cross = tc.trace(La @ Gab @ Lb @ Kba)
    return term_a + term_b - tc.scale(cross, 2.0)


def cmmd_source(p, Xa, labels_a, Xb, cfg: KernelConfig, classes: int, source: int = 0,
                sigma: float | None = None) -> Matrix:
    """True labels on batch a, ``L(F(D(Xb)))`` on batch b."""
    _, Za = forward_source(p, Xa, source)
    _, Zb = forward_source(p, Xb, source)
    Yb = classify(p, Zb, source)
    return cmmd(Za, one_hot(labels_a, classes), Zb, Yb, cfg, sigma)


def cmmd_target(p, Xa, labels_a, Xb, cfg: KernelConfig, classes: int,
                weights: Sequence[float] | None = None, sigma: float | None = None) -> Matrix:
    """True labels on the D_t batch a, predictions on the D_t u D_u batch b (labels ignored)."""
    Za = forward_target(p, Xa)
    Zb = forward_target(p, Xb)
    Yb = combined_probs(p, Zb, weights)
    return cmmd(Za, one_hot(labels_a, classes), Zb, Yb, cfg, sigma)


def combined_probs(p, Z: Matrix, weights: Sequence[float] | None = None) -> Matrix:
    """``sum_e w_e L_e(Z)``; a single classifier when ``weights`` is None or has length 1."""
    if weights is None or len(weights) == 1:
        return classify(p, Z, 0)
    return msource_predict([classify(p, Z, e) for e in range(len(weights))], weights)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _selectors(dims: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    D = int(np.sum(dims))
    out, start = [], 0
    for d in dims:
        S = np.zeros((D, d))
        S[start:start + d, :] = np.eye(d)
        out.append(S)
        start += d
    return tuple(out)


def split_views(X, dims: Sequence[int]) -> list[Matrix]:
    """Column blocks of ``X``; differentiable when ``X`` is a graph node."""
    X = tc.constant(X)
    dims = tuple(int(d) for d in dims)
    if X.cols != int(np.sum(dims)):
        raise tc.ShapeError("split_views", X.shape, (X.rows, int(np.sum(dims))))
    if X.op == "leaf" and not X.trainable:
        out, start = [], 0
        for d in dims:
            out.append(Matrix(X.value[:, start:start + d]))
            start += d
        return out
    return [X @ tc.constant(S) for S in _selectors(dims)]


def recon_loss(recons: Sequence[Matrix], targets: Sequence, n: int | None = None) -> Matrix:
    """``(1/n) sum_v ||R_v - T_v||_F^2``."""
    if len(recons) != len(targets):
        raise ContractError(f"{len(recons)} reconstructions for {len(targets)} views")
    total = None
    for v, (r, t) in enumerate(zip(recons, targets)):
        t = tc.constant(t)
        if r.shape != t.shape:
            raise tc.ShapeError(f"recon_loss[view {v}]", r.shape, t.shape)
        term = tc.sum(tc.square(r - t))
        total = term if total is None else total + term
    n = recons[0].rows if n is None else n
    return tc.scale(total, 1.0 / n)


# ---------------------------------------------------------------------------
# Totals and multi-source weighting
# ---------------------------------------------------------------------------

def total_loss(terms: Mapping, w: LossWeights):
    """``l1 (Lc_s + Lc_t) + l2 Lp + l3 (Lr_s + Lr_t)``; missing terms count as 0.

    Works on floats or on graph scalars.
    """
    parts = [(w.lambda1, terms.get("cmmd_s")), (w.lambda1, terms.get("cmmd_t")),
             (w.lambda2, terms.get("proto")), (w.lambda3, terms.get("recon_s")),
             (w.lambda3, terms.get("recon_t"))]
    return _weighted_sum(parts)


def _weighted_sum(parts):
    total = None
    for lam, term in parts:
        if term is None:
            continue
        piece = term * lam if isinstance(term, Matrix) else lam * term
        total = piece if total is None else total + piece
    return 0.0 if total is None else total


def msource_weights(losses: Sequence[float]) -> np.ndarray:
    inv = 1.0 / np.maximum(np.asarray(losses, dtype=np.float64), WEIGHT_CLAMP)
    return inv / inv.sum()


def msource_predict(probs: Sequence, weights: Sequence[float]):
    """Convex combination of per-source probability rows (arrays or graph nodes)."""
    if len(probs) != len(weights):
        raise ContractError("one weight per source prediction")
    if isinstance(probs[0], Matrix):
        out = tc.scale(probs[0], float(weights[0]))
        for p, w in zip(probs[1:], weights[1:]):
            out = out + tc.scale(p, float(w))
        return out
    return np.sum([w * np.asarray(p) for p, w in zip(probs, weights)], axis=0)


def msource_total(source_terms: Sequence[Mapping], target_terms: Mapping, weights: Sequence[float],
                  w: LossWeights):
    """``l1 Lc_t + l3 Lr_t + sum_e (l1/E Lc_s^e + l2 w_e Lp^e + l3/E Lr_s^e)``."""
    E = len(source_terms)
    # same accumulation order as total_loss, so E=1 reproduces it bit for bit
    parts = [(w.lambda1 / E, t.get("cmmd_s")) for t in source_terms]
    parts.append((w.lambda1, target_terms.get("cmmd_t")))
    parts += [(w.lambda2 * float(weights[e]), t.get("proto")) for e, t in enumerate(source_terms)]
    parts += [(w.lambda3 / E, t.get("recon_s")) for t in source_terms]
    parts.append((w.lambda3, target_terms.get("recon_t")))
    return _weighted_sum(parts)


def cross_entropy(probs: Matrix, labels, classes: int) -> Matrix:
    """Mean negative log-likelihood; used by the baselines."""
    Y = tc.constant(one_hot(labels, classes))
    logp = tc.log(tc.add_scalar(probs, 1e-12))
    return tc.scale(tc.sum(tc.mul(Y, logp)), -1.0 / probs.rows)
