"""Fully connected networks: translator(s), shared extractor, classifier(s), view decoders.

Parameters are plain arrays named ``<net>.W<i>`` / ``<net>.b<i>`` where
``<net>`` is ``D<e>`` (translator of source ``e``), ``F`` (extractor),
``L<e>`` (classifier of source ``e``) or ``R<v>`` (decoder of view ``v``).
Forward functions take a mapping of those names to :class:`Matrix` nodes so
that the same code serves training graphs and plain inference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .rng import stream
from .tensorcore import Matrix


@dataclass(frozen=True)
class NetworkShape:
    view_dims: tuple[int, ...]
    classes: int = 2
    translator_hidden: tuple[int, int] | None = None  # None -> (total_dim, total_dim)
    extractor_hidden: int = 128
    latent: int = 64
    classifier_hidden: int = 32
    decoder_hidden: int = 64
    sources: int = 1
    translator: bool = True
    decoders: bool = True

    def __post_init__(self):
        object.__setattr__(self, "view_dims", tuple(int(d) for d in self.view_dims))
        if self.translator_hidden is not None:
            th = tuple(int(h) for h in self.translator_hidden)
            if len(th) != 2:
                raise ValueError("the translator has exactly two hidden layers")
            object.__setattr__(self, "translator_hidden", th)
        if self.sources < 1:
            raise ValueError("need at least one source")

    @property
    def total_dim(self) -> int:
        return int(np.sum(self.view_dims))

    def layers(self) -> dict[str, list[tuple[int, int]]]:
        D = self.total_dim
        out: dict[str, list[tuple[int, int]]] = {}
        if self.translator:
            h1, h2 = self.translator_hidden or (D, D)
            for e in range(self.sources):
                out[f"D{e}"] = [(D, h1), (h1, h2), (h2, D)]
        out["F"] = [(D, self.extractor_hidden), (self.extractor_hidden, self.latent)]
        for e in range(self.sources):
            out[f"L{e}"] = [(self.latent, self.classifier_hidden), (self.classifier_hidden, self.classes)]
        for v, d in enumerate(self.view_dims if self.decoders else ()):
            out[f"R{v}"] = [(self.latent, self.decoder_hidden), (self.decoder_hidden, d)]
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkShape":
        return cls(**d)


@dataclass
class ModelParams:
    shape: NetworkShape
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def matrices(self, trainable: bool = False, nets=None) -> dict[str, Matrix]:
        """Graph leaves for every array; only nets in ``nets`` (prefixes) are trainable."""
        out = {}
        for k, v in self.arrays.items():
            tr = trainable and (nets is None or k.split(".")[0] in nets)
            out[k] = Matrix(v, trainable=tr, name=k)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.shape, {k: v.copy() for k, v in self.arrays.items()})

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.allclose(v, other.arrays[k], rtol=0, atol=atol) for k, v in self.arrays.items())

    def save(self, path, meta: dict | None = None) -> None:
        """npz checkpoint: one float64 array per tensor plus a JSON header."""
        header = {"shape": self.shape.to_dict(), "meta": meta or {}}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **self.arrays)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__header__"}
        return cls(NetworkShape.from_dict(header["shape"]), arrays), header.get("meta", {})


def init_params(shape: NetworkShape, seed: int) -> ModelParams:
    """Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero.

    Translator output layers start at zero, so ``D`` starts as the identity.
    """
    arrays = {}
    for net, layers in shape.layers().items():
        rng = stream(seed, "init", net)
        for i, (fi, fo) in enumerate(layers):
            bound = np.sqrt(6.0 / fi)
            arrays[f"{net}.W{i}"] = rng.uniform(-bound, bound, size=(fi, fo))
            arrays[f"{net}.b{i}"] = np.zeros((1, fo))
        if net.startswith("D"):
            arrays[f"{net}.W{len(layers) - 1}"][:] = 0.0
    return ModelParams(shape, arrays)


Params = Mapping[str, Matrix]


def _as_params(p) -> Params:
    return p.matrices() if isinstance(p, ModelParams) else p


def mlp(p: Params, net: str, X: Matrix) -> Matrix:
    """ReLU hidden layers, linear output."""
    n = 0
    while f"{net}.W{n}" in p:
        n += 1
    h = X
    for i in range(n):
        h = tc.add_row(h @ p[f"{net}.W{i}"], p[f"{net}.b{i}"])
        if i < n - 1:
            h = tc.relu(h)
    return h


def _check_width(X: Matrix, p: Params):
    d = p["F.W0"].rows
    if X.cols != d:
        raise tc.ShapeError("forward", X.shape, (X.rows, d))


def translate(p, X, source: int = 0) -> Matrix:
    """Residual translator ``X + D<source>(X)``; identity when the model has none."""
    p = _as_params(p)
    X = tc.constant(X)
    _check_width(X, p)
    key = f"D{source}"
    if f"{key}.W0" not in p:
        return X
    return X + mlp(p, key, X)


def extract(p, X) -> Matrix:
    """Hypersphere latent ``normalize(F(X))``; ``.guarded`` counts zero rows."""
    p = _as_params(p)
    X = tc.constant(X)
    _check_width(X, p)
    return tc.l2_normalize_rows(mlp(p, "F", X))


def forward_source(p, X, source: int = 0) -> tuple[Matrix, Matrix]:
    """Return ``(X', normalize(F(X')))`` with ``X'`` the translated rows."""
    Xp = translate(p, X, source)
    return Xp, extract(p, Xp)


def forward_target(p, X) -> Matrix:
    return extract(p, X)


def classify(p, Z, source: int = 0) -> Matrix:
    """Class-probability rows from classifier ``L<source>``."""
    p = _as_params(p)
    return tc.softmax_rows(mlp(p, f"L{source}", tc.constant(Z)))


def reconstruct(p, Z) -> list[Matrix]:
    p = _as_params(p)
    Z = tc.constant(Z)
    out, v = [], 0
    while f"R{v}.W0" in p:
        out.append(mlp(p, f"R{v}", Z))
        v += 1
    return out


def predict_labels(probs) -> np.ndarray:
    """Argmax; in the binary case class 1 wins whenever its probability is >= 0.5."""
    P = probs.value if isinstance(probs, Matrix) else np.asarray(probs)
    if P.shape[1] == 2:
        return (P[:, 1] >= 0.5).astype(np.int64)
    return P.argmax(axis=1)
