"""Per-dimension standardisation and length normalisation.

Every model in the package consumes vectors that were standardised with
statistics from its training corpus and then projected to the unit sphere.
The statistics are value objects so they can ride along inside model files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import DataError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class StandardizerStats:
    """Per-dimension mean and (floored) standard deviation."""

    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "stddev", np.asarray(self.stddev, dtype=np.float64))
        if self.mean.shape != self.stddev.shape or self.mean.ndim != 1:
            raise DataError("mean and stddev must be 1-D with equal length")
        if np.any(self.stddev < STD_FLOOR):
            raise DataError(f"stddev entries must be >= {STD_FLOOR}")


def fit_standardizer(corpus: Corpus) -> StandardizerStats:
    """Sample per-dimension mean and population (1/N) standard deviation.

    Deviations are floored at 1e-8 so constant dimensions stay harmless.
    """
    if len(corpus) == 0:
        raise DataError("cannot fit standardizer on an empty corpus")
    mean = corpus.vectors.mean(axis=0)
    stddev = corpus.vectors.std(axis=0)  # population convention
    return StandardizerStats(mean, np.maximum(stddev, STD_FLOOR))


def standardize(stats: StandardizerStats, vectors: np.ndarray) -> np.ndarray:
    """(v - mean) / stddev, elementwise; accepts a vector or a matrix."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != stats.mean.shape[0]:
        raise DataError(
            f"dimension mismatch: vectors have {vectors.shape[-1]}, "
            f"stats have {stats.mean.shape[0]}")
    return (vectors - stats.mean) / stats.stddev


def length_normalize(vectors: np.ndarray) -> np.ndarray:
    """Scale each vector to Euclidean norm 1; zero vectors are rejected."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DataError("cannot length-normalize a zero vector")
    return vectors / norms


def preprocess(stats: StandardizerStats, vectors: np.ndarray) -> np.ndarray:
    """Standardize then length-normalize (the model input transform)."""
    return length_normalize(standardize(stats, vectors))
