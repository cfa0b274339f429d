"""Attribute scorer: a one-layer perceptron with a sigmoid output.

Trained once on preprocessed vectors and then frozen; downstream stages
treat its raw scores as uncalibrated evidence (see `calibration`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .corpus import Corpus
from .errors import DataError, ParseError


@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        object.__setattr__(self, "weights",
                           np.asarray(self.weights, dtype=np.float64))
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise DataError("classifier parameters must be finite")


def train(corpus: Corpus, epochs: int = 20, lr: float = 1e-2,
          batch_size: int = 256, seed: int = 0) -> LinearClassifier:
    """Minimize mean binary cross-entropy with mini-batch gradient descent.

    Vectors are expected to be standardized and length-normalized already.
    Deterministic for a fixed seed; parameters start at zero.
    """
    labels = corpus.labels
    if len(np.unique(labels)) < 2:
        raise DataError("training corpus must contain both labels")
    X = corpus.vectors
    y = labels.astype(np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    rng = np.random.default_rng(np.random.PCG64(seed))
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            p = expit(X[idx] @ w + b)
            g = (p - y[idx]) / len(idx)
            w -= lr * (X[idx].T @ g)
            b -= lr * g.sum()
    return LinearClassifier(w, float(b))


def score(clf: LinearClassifier, vectors: np.ndarray) -> np.ndarray:
    """sigmoid(w . v + b) for one vector or a matrix of row vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != clf.weights.shape[0]:
        raise DataError(
            f"dimension mismatch: vector has {vectors.shape[-1]}, "
            f"classifier has {clf.weights.shape[0]}")
    return expit(vectors @ clf.weights + clf.bias)


def save(clf: LinearClassifier, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("veilvec-linclf v1\n")
        fh.write(f"dim {clf.weights.shape[0]}\n")
        fh.write(f"bias {clf.bias:.17g}\n")
        for v in clf.weights:
            fh.write(f"{v:.17g}\n")


def load(path) -> LinearClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "veilvec-linclf v1":
        raise ParseError("expected 'veilvec-linclf v1' header", line=1, path=path)
    try:
        dim = int(lines[1].split()[1])
        bias = float(lines[2].split()[1])
        weights = [float(t) for t in lines[3:3 + dim]]
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed classifier file: {exc}", path=path)
    if len(weights) != dim:
        raise ParseError(f"expected {dim} weights, found {len(weights)}",
                         path=path)
    return LinearClassifier(np.asarray(weights), bias)
