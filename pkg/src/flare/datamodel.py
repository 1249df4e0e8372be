"""Multi-view feature tables, site partitions and a synthetic multi-site generator.

Samples are stored column-wise in :class:`SampleSet` (one feature matrix, one
label vector, one site vector) because everything downstream works on whole
batches; :class:`MultiViewSample` is the row view handed out by
:meth:`SampleSet.samples`.

Label convention: ``-1`` marks a missing label. In the binary severity task
class ``1`` is the positive ("severe") class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

from .rng import stream

STD_EPS = 1e-8
UNLABELED = -1
POSITIVE = 1

DEFAULT_VIEW_NAMES = ("gray", "texture", "histogram", "number", "intensity", "surface", "volume")
DEFAULT_VIEW_DIMS = (34, 34, 34, 34, 34, 34, 33)


class ParseError(ValueError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


class InfeasibleError(ValueError):
    """A partition or subsample cannot satisfy its count rules."""


@dataclass(frozen=True)
class ViewManifest:
    views: tuple[tuple[str, int], ...]
    classes: int = 2

    def __post_init__(self):
        names = [n for n, _ in self.views]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate view names in {names}")
        if any(d <= 0 for _, d in self.views):
            raise ValueError("view dims must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def default(cls, classes: int = 2) -> "ViewManifest":
        return cls(tuple(zip(DEFAULT_VIEW_NAMES, DEFAULT_VIEW_DIMS)), classes)

    @classmethod
    def from_dims(cls, dims: Sequence[int], classes: int = 2) -> "ViewManifest":
        return cls(tuple((f"view{i}", int(d)) for i, d in enumerate(dims)), classes)

    @property
    def total_dim(self) -> int:
        return int(np.sum([d for _, d in self.views]))

    @property
    def dims(self) -> list[int]:
        return [d for _, d in self.views]

    def slices(self) -> list[slice]:
        out, start = [], 0
        for _, d in self.views:
            out.append(slice(start, start + d))
            start += d
        return out

    def to_json(self) -> str:
        return json.dumps({"views": [{"name": n, "dim": d} for n, d in self.views],
                           "classes": self.classes}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ViewManifest":
        obj = json.loads(text)
        return cls(tuple((v["name"], int(v["dim"])) for v in obj["views"]), int(obj["classes"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ViewManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class MultiViewSample:
    features: np.ndarray
    label: int | None
    site: str


@dataclass(frozen=True)
class SampleSet:
    """A batch of samples: ``X`` is n x D, ``y`` holds class ids or -1."""

    X: np.ndarray
    y: np.ndarray
    site: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.y), -1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        object.__setattr__(self, "site", np.asarray(self.site, dtype=object))
        if not (len(X) == len(self.y) == len(self.site)):
            raise ValueError("X, y and site lengths differ")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")

    @classmethod
    def empty(cls, dim: int) -> "SampleSet":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.X[idx], self.y[idx], self.site[idx])

    def with_X(self, X: np.ndarray) -> "SampleSet":
        return SampleSet(X, self.y, self.site)

    def class_counts(self, classes: int) -> np.ndarray:
        lab = self.y[self.y >= 0]
        return np.bincount(lab, minlength=classes)[:classes]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)

    def samples(self) -> Iterator[MultiViewSample]:
        for x, y, s in zip(self.X, self.y, self.site):
            yield MultiViewSample(x, None if y < 0 else int(y), str(s))

    @staticmethod
    def concat(*sets: "SampleSet") -> "SampleSet":
        return SampleSet(np.vstack([s.X for s in sets]), np.concatenate([s.y for s in sets]),
                         np.concatenate([s.site for s in sets]))


@dataclass(frozen=True)
class TriDomainDataset:
    """Source labeled, target labeled and target unlabeled pools.

    ``target_unlabeled`` keeps its labels for evaluation; training code only
    reads its features.
    """

    source: SampleSet
    target_labeled: SampleSet
    target_unlabeled: SampleSet
    manifest: ViewManifest

    def __post_init__(self):
        D = self.manifest.total_dim
        for name in ("source", "target_labeled", "target_unlabeled"):
            s = getattr(self, name)
            if s.dim != D:
                raise ValueError(f"{name} has {s.dim} features, manifest says {D}")
        if np.any(self.source.y < 0):
            raise ValueError("source pool must be fully labeled")
        if np.any(self.target_labeled.y < 0):
            raise ValueError("target labeled pool has missing labels")
        if np.any(self.target_labeled.class_counts(self.C) == 0):
            raise InfeasibleError("target labeled pool needs every class at least once")

    @property
    def C(self) -> int:
        return self.manifest.classes


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def csv_header(dim: int) -> list[str]:
    return [f"f{i}" for i in range(dim)] + ["label", "site"]


def load_csv(path, manifest: ViewManifest, require_labels: bool = False) -> SampleSet:
    """Read a dataset CSV (``f0..f{D-1},label,site``). Row numbers in errors are 1-based file lines."""
    D = manifest.total_dim
    X, y, site = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return SampleSet.empty(D)
        if len(header) != D + 2:
            raise ParseError(1, f"expected {D + 2} columns, got {len(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != D + 2:
                raise ParseError(lineno, f"expected {D + 2} columns, got {len(row)}")
            try:
                feats = [float(v) for v in row[:D]]
            except ValueError as exc:
                raise ParseError(lineno, f"non-numeric feature ({exc})") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(lineno, "non-finite feature")
            cell = row[D].strip()
            if cell == "":
                if require_labels:
                    raise ParseError(lineno, "missing label")
                lab = UNLABELED
            else:
                try:
                    lab = int(cell)
                except ValueError:
                    raise ParseError(lineno, f"bad label {cell!r}") from None
                if not 0 <= lab < manifest.classes:
                    raise ParseError(lineno, f"label {lab} outside 0..{manifest.classes - 1}")
            X.append(feats)
            y.append(lab)
            site.append(row[D + 1])
    if not X:
        return SampleSet.empty(D)
    return SampleSet(np.array(X), np.array(y), np.array(site, dtype=object))


def save_csv(path, samples: SampleSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(samples.dim))
        for x, lab, s in zip(samples.X, samples.y, samples.site):
            w.writerow([repr(float(v)) for v in x] + ["" if lab < 0 else str(int(lab)), s])


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationParams:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray = field(default=None)


def fit_standardizer(samples: SampleSet | np.ndarray) -> StandardizationParams:
    X = samples.X if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot fit a standardizer on an empty set")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)  # population std
    degenerate = sd < STD_EPS
    return StandardizationParams(mu, np.maximum(sd, STD_EPS), degenerate)


def apply_standardizer(params: StandardizationParams, samples: SampleSet) -> SampleSet:
    Z = (samples.X - params.mean) / params.std
    if params.degenerate is not None and params.degenerate.any():
        Z[:, params.degenerate] = 0.0
    return samples.with_X(Z)


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

def train_count(n: int) -> int:
    """ceil(0.3 n) in exact integer arithmetic."""
    return (3 * n + 9) // 10


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else stream(seed, "partition")


def partition_balanced(samples: SampleSet, seed, positive: int = POSITIVE):
    """Severe class split 30/70; the test set gets as many mild as severe samples."""
    rng = _rng(seed)
    labels = set(np.unique(samples.y).tolist())
    if not labels <= {0, 1}:
        raise ValueError(f"balanced partition needs binary labels, got {sorted(labels)}")
    pos = rng.permutation(samples.class_indices(positive))
    neg = rng.permutation(samples.class_indices(1 - positive))
    k = train_count(len(pos))
    pos_train, pos_test = pos[:k], pos[k:]
    if len(neg) < len(pos_test):
        raise InfeasibleError(f"only {len(neg)} mild samples for a {len(pos_test)}-sample mild test split")
    neg_test, neg_train = neg[:len(pos_test)], neg[len(pos_test):]
    train = np.sort(np.concatenate([neg_train, pos_train]))
    test = np.sort(np.concatenate([neg_test, pos_test]))
    return samples.subset(train), samples.subset(test)


def partition_imbalanced(samples: SampleSet, seed, classes: int | None = None):
    """Class-stratified 30/70 split with ``ceil(0.3 n_c)`` training samples per class."""
    rng = _rng(seed)
    classes = classes or int(samples.y.max()) + 1
    train, test = [], []
    for c in range(classes):
        idx = rng.permutation(samples.class_indices(c))
        if len(idx) == 0:
            raise InfeasibleError(f"class {c} is empty")
        k = train_count(len(idx))
        train.append(idx[:k])
        test.append(idx[k:])
    return (samples.subset(np.sort(np.concatenate(train))),
            samples.subset(np.sort(np.concatenate(test))))


def partition(samples: SampleSet, setting: str, seed, classes: int = 2):
    if setting == "balanced":
        return partition_balanced(samples, seed)
    if setting == "imbalanced":
        return partition_imbalanced(samples, seed, classes)
    raise ValueError(f"unknown setting {setting!r}")


# ---------------------------------------------------------------------------
# Synthetic multi-site data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic generator.

    ``counts[c]`` samples of class ``c`` are drawn per site. Class means sit on
    orthonormal random directions at pairwise distance ``separation``. Each
    site maps ``x -> R x + t`` where ``R = expm(shift * S)`` for a random
    skew-symmetric ``S`` (a rotation) and ``t`` has norm ``shift * separation``.
    """

    sites: int = 2
    counts: tuple[int, ...] = (900, 90)
    manifest: ViewManifest = field(default_factory=ViewManifest.default)
    separation: float = 3.0
    shift: float = 1.0
    noise: float = 1.0
    site_counts: tuple[tuple[int, ...], ...] | None = None

    def counts_for(self, site: int) -> tuple[int, ...]:
        return self.site_counts[site] if self.site_counts is not None else self.counts


def synth_generate(spec: SynthSpec, seed: int) -> list[SampleSet]:
    """One labeled :class:`SampleSet` per site, deterministic in ``seed``."""
    C, D = spec.manifest.classes, spec.manifest.total_dim
    if D < C:
        raise ValueError(f"total_dim {D} < classes {C}: class means cannot be separated")
    for s in range(spec.sites):
        if len(spec.counts_for(s)) != C or min(spec.counts_for(s)) < 1:
            raise ValueError("need a count >= 1 for every class")
    base = stream(seed, "synth", "means")
    q, _ = np.linalg.qr(base.standard_normal((D, C)))
    means = (spec.separation / math.sqrt(2.0)) * q.T
    out = []
    for s in range(spec.sites):
        rng = stream(seed, "synth", "site", s)
        G = rng.standard_normal((D, D))
        S = (G - G.T) / math.sqrt(2.0 * D)
        R = expm(spec.shift * S) if spec.shift else np.eye(D)
        t = rng.standard_normal(D)
        t *= spec.shift * spec.separation / np.linalg.norm(t)
        X, y = [], []
        for c, n in enumerate(spec.counts_for(s)):
            X.append(means[c] + spec.noise * rng.standard_normal((n, D)))
            y.append(np.full(n, c))
        X = np.vstack(X) @ R.T + t
        y = np.concatenate(y)
        order = rng.permutation(len(y))
        out.append(SampleSet(X[order], y[order], np.full(len(y), f"site{s + 1}", dtype=object)))
    return out


def subsample_regime(dataset: TriDomainDataset, labeled_ratio: float, unlabeled_ratio: float,
                     seed) -> TriDomainDataset:
    """Keep ``floor(ratio * n_c)`` labeled target samples per class and a uniform share of D_u."""
    for r in (labeled_ratio, unlabeled_ratio):
        if not 0 < r <= 1:
            raise ValueError(f"ratios must lie in (0, 1], got {r}")
    rng = stream(seed, "subsample") if not isinstance(seed, np.random.Generator) else seed
    tl = dataset.target_labeled
    keep = []
    for c in range(dataset.C):
        idx = tl.class_indices(c)
        k = int(math.floor(labeled_ratio * len(idx) + 1e-9))
        if k == 0:
            raise InfeasibleError(f"labeled ratio {labeled_ratio} leaves class {c} empty")
        keep.append(rng.permutation(idx)[:k] if k < len(idx) else idx)
    tu = dataset.target_unlabeled
    ku = int(math.floor(unlabeled_ratio * len(tu) + 1e-9))
    u_idx = np.sort(rng.permutation(len(tu))[:ku]) if ku < len(tu) else np.arange(len(tu))
    return TriDomainDataset(dataset.source, tl.subset(np.sort(np.concatenate(keep))),
                            tu.subset(u_idx), dataset.manifest)


def build_task(source: SampleSet | Sequence[SampleSet], target: SampleSet, manifest: ViewManifest,
               setting: str, seed: int, standardize: bool = True):
    """Assemble the adaptation task(s) for one target site.

    The target site is partitioned per ``setting``; its training split becomes
    D_t and its testing split D_u. Each site is standardized with statistics
    fitted on its own training portion (all of a source site). A sequence of
    sources yields one :class:`TriDomainDataset` per source sharing D_t/D_u.
    """
    sources = [source] if isinstance(source, SampleSet) else list(source)
    train, test = partition(target, setting, stream(seed, "partition", setting), manifest.classes)
    if standardize:
        p = fit_standardizer(train)
        train, test = apply_standardizer(p, train), apply_standardizer(p, test)
        sources = [apply_standardizer(fit_standardizer(s), s) for s in sources]
    tasks = [TriDomainDataset(s, train, test, manifest) for s in sources]
    return tasks[0] if isinstance(source, SampleSet) else tasks
