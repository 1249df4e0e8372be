"""Stochastic class-balanced boosting sampling (SCBS).

Per epoch the class distribution either stays put or moves to a mixture of
the class-balanced distribution and a difficulty distribution built from the
mean self-information ``-log p(y|x)`` of each class. The mixing weight follows
a half-cosine ramp from 0 to 1 over training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

PROB_CLAMP = 1e-7


def _check(p: np.ndarray) -> np.ndarray:
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"not a probability vector: {p}")
    return p


def base_prob(counts, q: float) -> np.ndarray:
    """``|S_j|^q / sum_k |S_k|^q``: q=1 keeps the data ratio, q=0 is class-balanced."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one sample, got counts {counts}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    w = counts ** q
    return w / w.sum()


def difficulty(p_true, labels, classes: int) -> np.ndarray:
    """Per-class mean self-information of the true-class probability, normalized to sum 1."""
    p = np.clip(np.asarray(p_true, dtype=np.float64), PROB_CLAMP, 1.0)
    labels = np.asarray(labels)
    info = -np.log(p)
    means = np.empty(classes)
    for c in range(classes):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no samples")
        means[c] = info[mask].mean()
    total = means.sum()
    if total <= 0:
        return np.full(classes, 1.0 / classes)
    return means / total


def cosine_weight(t: int, T: int) -> float:
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return (1.0 - math.cos(t * math.pi / T)) / 2.0


@dataclass(frozen=True)
class ScbsState:
    current: np.ndarray
    t: int
    T: int
    delta: float = 0.3
    last_difficulty: np.ndarray | None = None

    @classmethod
    def initial(cls, counts, T: int, delta: float = 0.3) -> "ScbsState":
        if not 0 < delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {delta}")
        return cls(base_prob(counts, 1.0), 0, T, delta)


def scbs_update(state: ScbsState, epsilon: float, r0, r_diff, w: float | None = None) -> ScbsState:
    """Advance one epoch. ``w`` overrides the cosine schedule (used by ablations and tests)."""
    t = state.t + 1
    if t > state.T:
        raise ValueError(f"epoch {t} beyond T={state.T}")
    if epsilon <= state.delta:
        w = cosine_weight(t, state.T) if w is None else w
        new = (1.0 - w) * np.asarray(r0, dtype=np.float64) + w * np.asarray(r_diff, dtype=np.float64)
        new = new / new.sum()
        return replace(state, current=_check(new), t=t, last_difficulty=np.asarray(r_diff))
    return replace(state, t=t)


def draw_epoch(labels, distribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` draws: a class from ``distribution``, then a uniform member of it."""
    labels = np.asarray(labels)
    p = _check(np.asarray(distribution, dtype=np.float64))
    members = [np.flatnonzero(labels == c) for c in range(len(p))]
    for c, m in enumerate(members):
        if p[c] > 0 and len(m) == 0:
            raise ValueError(f"class {c} has probability {p[c]} but no samples")
    cls = rng.choice(len(p), size=n, p=p)
    out = np.empty(n, dtype=np.int64)
    for c, m in enumerate(members):
        sel = cls == c
        k = int(sel.sum())
        if k:
            out[sel] = m[rng.integers(0, len(m), size=k)]
    return out


def epoch_size(counts) -> int:
    """C * max_j |S_j|, the random-oversampling scale."""
    counts = np.asarray(counts)
    return int(len(counts) * counts.max())
