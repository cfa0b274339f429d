"""Isotonic (pool-adjacent-violators) score calibration and score files.

`pav_fit` turns raw scores with 0/1 labels into a monotone piecewise-
constant map onto oracle posteriors. `posterior_to_llr` converts those
posteriors to finite natural-log LLRs by clamping endpoint posteriors
into [1/(2N), 1 - 1/(2N)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from . import backend
from .errors import DataError, ParseError


@dataclass(frozen=True)
class ScoreSet:
    """Scores split into target (label 1) and non-target (label 0) sides."""

    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target_scores",
                           np.asarray(self.target_scores, dtype=np.float64))
        object.__setattr__(self, "nontarget_scores",
                           np.asarray(self.nontarget_scores, dtype=np.float64))

    def require_both_sides(self):
        if len(self.target_scores) == 0 or len(self.nontarget_scores) == 0:
            raise DataError("score set needs both target and non-target scores")

    def pooled(self):
        """(scores, labels) with targets labelled 1."""
        scores = np.concatenate([self.target_scores, self.nontarget_scores])
        labels = np.concatenate([np.ones(len(self.target_scores), dtype=np.int64),
                                 np.zeros(len(self.nontarget_scores), dtype=np.int64)])
        return scores, labels


@dataclass(frozen=True)
class CalibrationMap:
    """Monotone step map: block upper raw boundaries -> block posteriors."""

    breakpoints: np.ndarray
    block_posterior: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "breakpoints",
                           np.asarray(self.breakpoints, dtype=np.float64))
        object.__setattr__(self, "block_posterior",
                           np.asarray(self.block_posterior, dtype=np.float64))
        if self.breakpoints.shape != self.block_posterior.shape:
            raise DataError("breakpoints and posteriors differ in length")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise DataError("breakpoints must be strictly ascending")
        if np.any(np.diff(self.block_posterior) < 0):
            raise DataError("block posteriors must be non-decreasing")
        if np.any((self.block_posterior < 0) | (self.block_posterior > 1)):
            raise DataError("block posteriors must lie in [0,1]")


def tie_pooled(scores, labels):
    """Ascending unique scores with per-group label mean and count."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be 1-D of equal length")
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    uniq, start = np.unique(s, return_index=True)
    counts = np.diff(np.append(start, len(s)))
    sums = np.add.reduceat(y, start)
    return uniq, sums / counts, counts.astype(np.float64)


def pav_fit(scores, labels) -> CalibrationMap:
    """Isotonic regression of labels on scores under squared loss.

    Equal raw scores share one block; the fitted block values are pooled
    label means, non-decreasing by construction.
    """
    labels = np.asarray(labels)
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise DataError("calibration needs both classes present")
    uniq, means, counts = tie_pooled(scores, labels)
    fitted = backend.pav_pool(means, counts)
    # group consecutive equal fitted values into blocks
    change = np.flatnonzero(np.diff(fitted) != 0.0)
    ends = np.append(change, len(fitted) - 1)
    return CalibrationMap(uniq[ends], fitted[ends])


def apply(cal_map: CalibrationMap, raw) -> np.ndarray:
    """Piecewise-constant lookup; raw outside the fitted range saturates."""
    raw = np.asarray(raw, dtype=np.float64)
    idx = np.searchsorted(cal_map.breakpoints, raw, side="left")
    idx = np.minimum(idx, len(cal_map.breakpoints) - 1)
    out = cal_map.block_posterior[idx]
    return float(out) if np.isscalar(raw) or raw.ndim == 0 else out


def posterior_to_llr(posterior, empirical_prior: float, n_total: int):
    """Natural-log LLR of a posterior against an empirical prior.

    Posteriors are clamped into [1/(2N), 1 - 1/(2N)] before the logit so
    endpoint blocks map to finite evidence.
    """
    if not 0.0 < empirical_prior < 1.0:
        raise DataError("prior must lie strictly inside (0,1)")
    if n_total < 1:
        raise DataError("n_total must be >= 1")
    lo = 1.0 / (2.0 * n_total)
    p = np.clip(posterior, lo, 1.0 - lo)
    out = logit(p) - logit(empirical_prior)
    return float(out) if np.ndim(posterior) == 0 else out


def calibration_plot(scores, labels, bin_width: float = 0.02):
    """Per-bin empirical label-1 proportion for scores in [0,1].

    Returns a list of (bin_center, proportion, count); empty bins are
    omitted. The top edge is inclusive so a score of exactly 1 lands in
    the last bin.
    """
    if not 0.0 < bin_width <= 1.0:
        raise DataError("bin_width must lie in (0,1]")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_bins = int(np.ceil(1.0 / bin_width))
    idx = np.minimum((scores / bin_width).astype(np.intp), n_bins - 1)
    out = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        # midpoint of the bin, with the last bin truncated at 1
        center = (b * bin_width + min((b + 1) * bin_width, 1.0)) / 2.0
        out.append((center, float(labels[mask].mean()), count))
    return out


def save_map(cal_map: CalibrationMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("veilvec-pav v1\n")
        for b, p in zip(cal_map.breakpoints, cal_map.block_posterior):
            fh.write(f"{b:.17g} {p:.17g}\n")


def load_map(path) -> CalibrationMap:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "veilvec-pav v1":
        raise ParseError("expected 'veilvec-pav v1' header", line=1, path=path)
    bounds, posts = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected '<boundary> <posterior>'",
                             line=lineno, path=path)
        bounds.append(float(parts[0]))
        posts.append(float(parts[1]))
    return CalibrationMap(np.asarray(bounds), np.asarray(posts))


def save_scores(path, segment_ids, labels, raw, calibrated=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("veilvec-scores v1\n")
        for i, seg in enumerate(segment_ids):
            line = f"{seg} {int(labels[i])} {raw[i]:.17g}"
            if calibrated is not None:
                line += f" {calibrated[i]:.17g}"
            fh.write(line + "\n")


def load_scores(path):
    """Returns (segment_ids, labels, raw, calibrated-or-None)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "veilvec-scores v1":
        raise ParseError("expected 'veilvec-scores v1' header", line=1,
                         path=path)
    segs, labels, raw, cal = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ParseError("expected 3 or 4 fields", line=lineno, path=path)
        if parts[1] not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {parts[1]!r}",
                             line=lineno, path=path)
        segs.append(parts[0])
        labels.append(int(parts[1]))
        raw.append(float(parts[2]))
        cal.append(float(parts[3]) if len(parts) == 4 else np.nan)
    cal_arr = np.asarray(cal)
    return (segs, np.asarray(labels, dtype=np.int64), np.asarray(raw),
            None if np.isnan(cal_arr).all() else cal_arr)
