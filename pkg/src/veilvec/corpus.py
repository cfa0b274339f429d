"""Embedding corpora: data model, synthetic generator and text-file I/O.

A corpus is an immutable collection of fixed-dimension embedding vectors,
each tagged with a segment id, a speaker id and a binary attribute label
(0/1), plus an optional soft posterior for the label-1 proposition.
Storage is columnar (one matrix, parallel id/label arrays); `Embedding`
records are materialized on access.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

_HEADER_RE = re.compile(r"^veilvec-corpus v1 dim=(\d+)$")


@dataclass(frozen=True)
class Embedding:
    """One embedding vector with its metadata."""

    segment_id: str
    speaker_id: str
    label_y: int
    vector: np.ndarray
    posterior_soft: Optional[float] = None

    def __post_init__(self):
        if self.label_y not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label_y!r}")
        if self.posterior_soft is not None and not 0.0 <= self.posterior_soft <= 1.0:
            raise DataError(f"posterior_soft outside [0,1]: {self.posterior_soft!r}")


class Corpus:
    """Immutable embedding corpus with columnar storage.

    Args:
        dim: vector dimension shared by every item.
        segment_ids: unique segment identifiers.
        speaker_ids: speaker identifier per item.
        labels: 0/1 attribute label per item.
        vectors: (n, dim) float64 matrix, one row per item.
        posteriors: optional per-item soft posterior in [0,1]; NaN marks
            a missing value when only some items carry one.
    """

    def __init__(self, dim, segment_ids, speaker_ids, labels, vectors,
                 posteriors=None):
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise DataError(f"vectors must be (n, {dim}), got {vectors.shape}")
        n = vectors.shape[0]
        if not (len(segment_ids) == len(speaker_ids) == n):
            raise DataError("id columns and vectors disagree on item count")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,) or not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be a length-n sequence over {0,1}")
        if len(set(segment_ids)) != n:
            raise DataError("segment ids are not unique")
        if posteriors is None:
            posteriors = np.full(n, np.nan)
        posteriors = np.asarray(posteriors, dtype=np.float64)
        if posteriors.shape != (n,):
            raise DataError("posteriors must be a length-n sequence")
        ok = np.isnan(posteriors) | ((posteriors >= 0.0) & (posteriors <= 1.0))
        if not ok.all():
            raise DataError("posteriors must lie in [0,1] (or NaN for missing)")

        self.dim = int(dim)
        self.segment_ids = tuple(str(s) for s in segment_ids)
        self.speaker_ids = tuple(str(s) for s in speaker_ids)
        self.labels = labels
        self.vectors = vectors
        self.posteriors = posteriors
        for arr in (self.labels, self.vectors, self.posteriors):
            arr.flags.writeable = False

    @classmethod
    def from_items(cls, dim: int, items: Sequence[Embedding]) -> "Corpus":
        vectors = (np.asarray([it.vector for it in items], dtype=np.float64)
                   if items else np.empty((0, dim)))
        for it in items:
            if np.asarray(it.vector).shape != (dim,):
                raise DataError(
                    f"segment {it.segment_id}: vector length != dim {dim}")
        posts = [np.nan if it.posterior_soft is None else it.posterior_soft
                 for it in items]
        return cls(dim,
                   [it.segment_id for it in items],
                   [it.speaker_id for it in items],
                   [it.label_y for it in items],
                   vectors, posts)

    def __len__(self) -> int:
        return len(self.segment_ids)

    def __getitem__(self, i: int) -> Embedding:
        p = self.posteriors[i]
        return Embedding(self.segment_ids[i], self.speaker_ids[i],
                         int(self.labels[i]), self.vectors[i],
                         None if np.isnan(p) else float(p))

    def __iter__(self) -> Iterator[Embedding]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.dim == other.dim
                and self.segment_ids == other.segment_ids
                and self.speaker_ids == other.speaker_ids
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.vectors, other.vectors)
                and np.array_equal(self.posteriors, other.posteriors,
                                   equal_nan=True))

    def speakers(self) -> tuple:
        """Distinct speaker ids in order of first appearance."""
        seen = dict.fromkeys(self.speaker_ids)
        return tuple(seen)

    def subset(self, indices) -> "Corpus":
        indices = np.asarray(indices, dtype=np.intp)
        return Corpus(self.dim,
                      [self.segment_ids[i] for i in indices],
                      [self.speaker_ids[i] for i in indices],
                      self.labels[indices], self.vectors[indices],
                      self.posteriors[indices])

    def with_vectors(self, vectors) -> "Corpus":
        """Same metadata over a replacement vector matrix."""
        return Corpus(self.dim, self.segment_ids, self.speaker_ids,
                      self.labels, vectors, self.posteriors)

    def with_posteriors(self, posteriors) -> "Corpus":
        return Corpus(self.dim, self.segment_ids, self.speaker_ids,
                      self.labels, self.vectors, posteriors)


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the synthetic corpus generator.

    The generated population has one mean per speaker; all segments of a
    speaker share its attribute label. Class means are separated by
    `attribute_shift` along a single random unit direction. Speaker means
    scatter around the class mean with per-direction spread
    `speaker_spread`; segments scatter around the speaker mean with
    spherical per-dimension spread `within_spread`.

    Real embedding corpora concentrate both their speaker variability and
    a large share of their segment variability in low-rank subspaces;
    `speaker_rank` confines speaker offsets to a shared random subspace
    of that rank, and `within_rank`/`within_structured_spread` add a
    shared low-rank segment-noise component on top of the spherical
    `within_spread` tail. Leaving the ranks at None keeps the plain
    full-rank spherical model.
    """

    n_speakers: int
    segments_per_speaker: int
    dim: int
    attribute_shift: float
    speaker_spread: float
    within_spread: float
    seed: int
    speaker_rank: Optional[int] = None
    within_rank: Optional[int] = None
    within_structured_spread: float = 0.0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("n_speakers must be >= 2")
        if self.segments_per_speaker < 2:
            raise ConfigError("segments_per_speaker must be >= 2")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.attribute_shift < 0:
            raise ConfigError("attribute_shift must be >= 0")
        if self.speaker_spread <= 0 or self.within_spread <= 0:
            raise ConfigError("spreads must be > 0")
        for name in ("speaker_rank", "within_rank"):
            rank = getattr(self, name)
            if rank is not None and not 1 <= rank <= self.dim:
                raise ConfigError(f"{name} must be in [1, dim]")
        if self.within_rank is not None and self.within_structured_spread <= 0:
            raise ConfigError(
                "within_structured_spread must be > 0 when within_rank is set")


def generate(cfg: SynthConfig) -> Corpus:
    """Generate a deterministic attribute- and speaker-structured corpus.

    Labels alternate over speakers so both classes stay balanced to within
    one speaker. Identical configs (seed included) produce byte-identical
    corpora.
    """
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    d = cfg.dim
    global_mean = 0.5 * rng.standard_normal(d)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)

    if cfg.speaker_rank is not None and cfg.speaker_rank < d:
        basis, _ = np.linalg.qr(rng.standard_normal((d, cfg.speaker_rank)))
        coeffs = cfg.speaker_spread * rng.standard_normal(
            (cfg.n_speakers, cfg.speaker_rank))
        offsets = coeffs @ basis.T
    else:
        offsets = cfg.speaker_spread * rng.standard_normal((cfg.n_speakers, d))

    noise_basis = None
    if cfg.within_rank is not None:
        noise_basis, _ = np.linalg.qr(rng.standard_normal((d, cfg.within_rank)))

    seg_ids, spk_ids, labels, rows = [], [], [], []
    width = len(str(cfg.n_speakers - 1))
    for s in range(cfg.n_speakers):
        label = s % 2
        speaker = f"spk{s:0{width}d}"
        mean = global_mean + label * cfg.attribute_shift * u + offsets[s]
        noise = cfg.within_spread * rng.standard_normal(
            (cfg.segments_per_speaker, d))
        if noise_basis is not None:
            noise += (cfg.within_structured_spread * rng.standard_normal(
                (cfg.segments_per_speaker, cfg.within_rank))) @ noise_basis.T
        for j in range(cfg.segments_per_speaker):
            seg_ids.append(f"{speaker}-seg{j:03d}")
            spk_ids.append(speaker)
            labels.append(label)
            rows.append(mean + noise[j])
    return Corpus(d, seg_ids, spk_ids, labels, np.asarray(rows))


def save(corpus: Corpus, path) -> None:
    """Write a corpus in the `veilvec-corpus v1` text format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"veilvec-corpus v1 dim={corpus.dim}\n")
        for i in range(len(corpus)):
            row = " ".join(format(v, ".17g") for v in corpus.vectors[i])
            fh.write(f"{corpus.segment_ids[i]} {corpus.speaker_ids[i]} "
                     f"{corpus.labels[i]} {row}\n")


def load(path) -> Corpus:
    """Read a `veilvec-corpus v1` file; raises ParseError with line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, expected corpus header", line=1, path=path)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ParseError(f"bad header {lines[0]!r}", line=1, path=path)
    dim = int(m.group(1))

    seg_ids, spk_ids, labels, rows = [], [], [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 + dim:
            raise ParseError(
                f"expected {3 + dim} fields, found {len(parts)}",
                line=lineno, path=path)
        seg, spk, lab = parts[0], parts[1], parts[2]
        if seg in seen:
            raise ParseError(f"duplicate segment id {seg!r}", line=lineno,
                             path=path)
        seen.add(seg)
        if lab not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {lab!r}",
                             line=lineno, path=path)
        try:
            vec = [float(t) for t in parts[3:]]
        except ValueError as exc:
            raise ParseError(f"bad float: {exc}", line=lineno, path=path)
        seg_ids.append(seg)
        spk_ids.append(spk)
        labels.append(int(lab))
        rows.append(vec)
    vectors = np.asarray(rows) if rows else np.empty((0, dim))
    return Corpus(dim, seg_ids, spk_ids, labels, vectors)


def split(corpus: Corpus, fractions: Sequence[float], seed: int,
          by_speaker: bool = True) -> tuple:
    """Partition a corpus into disjoint parts with the given fractions.

    With `by_speaker` no speaker appears in two parts. The assignment is a
    pure function of (fractions, seed, corpus order).
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions):
        raise ConfigError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(np.random.PCG64(seed))

    if by_speaker:
        speakers = corpus.speakers()
        if len(speakers) < len(fractions):
            raise ConfigError(
                f"{len(speakers)} speakers cannot fill {len(fractions)} parts")
        order = [speakers[i] for i in rng.permutation(len(speakers))]
        bounds = _boundaries(len(order), fractions)
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            chosen = set(order[lo:hi])
            idx = [i for i, s in enumerate(corpus.speaker_ids) if s in chosen]
            parts.append(corpus.subset(idx))
        return tuple(parts)

    if len(corpus) < len(fractions):
        raise ConfigError(
            f"{len(corpus)} items cannot fill {len(fractions)} parts")
    order = rng.permutation(len(corpus))
    bounds = _boundaries(len(corpus), fractions)
    return tuple(corpus.subset(np.sort(order[lo:hi]))
                 for lo, hi in zip(bounds[:-1], bounds[1:]))


def _boundaries(n: int, fractions) -> list:
    cum = np.cumsum(fractions)
    bounds = [0] + [int(round(c * n)) for c in cum]
    bounds[-1] = n
    if any(hi - lo < 1 for lo, hi in zip(bounds[:-1], bounds[1:])):
        raise ConfigError("a partition came out empty; adjust fractions")
    return bounds
