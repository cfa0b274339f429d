"""Binary-detection and privacy metrics over score sets.

Discrimination: AUC (Mann-Whitney), interpolated EER, Cllr / Cllr_min and
the prior-weighted empirical cross-entropy (ECE, bits). Privacy: the
zero-evidence report (expected disclosure D_ECE, worst-case log10 LLR and
its categorical tag) and a discrete-label kNN mutual-information estimate
per vector dimension. Polarity canonicalization picks the score direction
with the lower Cllr_min, since an adversarial transform may flip the
label-to-score association.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import digamma, logit
from scipy.stats import rankdata

from . import backend
from .calibration import ScoreSet, apply, pav_fit, posterior_to_llr, tie_pooled
from .errors import DataError

LN2 = float(np.log(2.0))
LN10 = float(np.log(10.0))
DECE_MAX = 1.0 / (2.0 * LN2)

_TAG_THRESHOLDS = ((1.0, "A"), (2.0, "B"), (4.0, "C"), (5.0, "D"), (6.0, "E"))


@dataclass(frozen=True)
class ZebraReport:
    """Expected disclosure (bits), worst-case |log10 LLR| and its tag."""

    d_ece: float
    log10_lw: float
    tag: str

    def __post_init__(self):
        if not -1e-9 <= self.d_ece <= DECE_MAX + 1e-6:
            raise DataError(f"d_ece out of range: {self.d_ece}")
        if self.log10_lw < 0:
            raise DataError("log10_lw must be >= 0")
        if self.tag != zebra_tag(self.log10_lw):
            raise DataError("tag inconsistent with log10_lw")


class CanonicalResult(NamedTuple):
    scores: ScoreSet
    swapped: bool


def auc(scores: ScoreSet) -> float:
    """P(target > non-target) + 0.5 P(tie), the Mann-Whitney statistic."""
    scores.require_both_sides()
    tar, non = scores.target_scores, scores.nontarget_scores
    ranks = rankdata(np.concatenate([tar, non]))
    u = ranks[:len(tar)].sum() - len(tar) * (len(tar) + 1) / 2.0
    return float(u / (len(tar) * len(non)))


def eer(scores: ScoreSet) -> float:
    """Equal error rate by linear interpolation between ROC vertices.

    Scores are 'accept if >= threshold'. The crossing of false-negative
    and false-positive rates is located where their difference changes
    sign; anti-separated inputs are capped at 0.5 (polarity convention).
    """
    scores.require_both_sides()
    tar = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    nt, nn = len(tar), len(non)
    thresholds = np.unique(np.concatenate([tar, non]))[::-1]
    # vertex 0 is threshold +inf: nothing accepted
    fnr = np.concatenate([[1.0], np.searchsorted(tar, thresholds, "left") / nt])
    fpr = np.concatenate([[0.0], (nn - np.searchsorted(non, thresholds, "left")) / nn])
    diff = fnr - fpr  # non-increasing along the sweep, starts at +1
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        value = fpr[k]
    else:
        t = diff[k - 1] / (diff[k - 1] - diff[k])
        value = fpr[k - 1] + t * (fpr[k] - fpr[k - 1])
    return float(min(value, 0.5))


def ece(tar_llr, non_llr, prior: float) -> float:
    """Empirical cross-entropy of natural-log LLRs at the given prior, bits."""
    tar_llr = np.asarray(tar_llr, dtype=np.float64)
    non_llr = np.asarray(non_llr, dtype=np.float64)
    if len(tar_llr) == 0 or len(non_llr) == 0:
        raise DataError("ece needs both LLR sides non-empty")
    if not 0.0 < prior < 1.0:
        raise DataError("prior must lie strictly inside (0,1)")
    log_odds = float(logit(prior))
    tar_term = np.logaddexp(0.0, -(tar_llr + log_odds)).mean()
    non_term = np.logaddexp(0.0, non_llr + log_odds).mean()
    return float((prior * tar_term + (1.0 - prior) * non_term) / LN2)


def cllr(tar_llr, non_llr) -> float:
    """Proper-scoring-rule cost of LLRs in bits; 1.0 for all-zero LLRs."""
    return ece(tar_llr, non_llr, 0.5)


def cllr_min(scores: ScoreSet) -> float:
    """Cllr after oracle (PAV) calibration of the pooled scores."""
    scores.require_both_sides()
    pooled, labels = scores.pooled()
    cal = pav_fit(pooled, labels)
    llrs = posterior_to_llr(apply(cal, pooled),
                            len(scores.target_scores) / len(pooled),
                            len(pooled))
    return cllr(llrs[labels == 1], llrs[labels == 0])


def zebra_tag(log10_lw: float) -> str:
    """Categorical grade of the worst-case |log10 LLR|."""
    if log10_lw == 0.0:
        return "0"
    for bound, tag in _TAG_THRESHOLDS:
        if log10_lw <= bound:
            return tag
    return "F"


def _laplace_pav_llrs(scores: ScoreSet):
    """Oracle LLRs with one virtual (target, non-target) pair per extreme.

    The virtual items bound every block posterior strictly inside (0,1),
    so the worst-case LLR reflects the longest pure run of one label
    rather than the raw corpus size; constant scores come out at exactly
    zero evidence. Returns (tar_llrs, non_llrs) for the real items only.
    """
    pooled, labels = scores.pooled()
    uniq, means, counts = tie_pooled(pooled, labels)
    values = np.concatenate([[1.0, 0.0], means, [1.0, 0.0]])
    weights = np.concatenate([[1.0, 1.0], counts, [1.0, 1.0]])
    fitted = backend.pav_pool(values, weights)[2:-2]
    n_tar = len(scores.target_scores)
    prior_aug = (n_tar + 1.0) / (len(pooled) + 2.0)
    block_llr = logit(fitted) - logit(prior_aug)
    tar_per_group = np.round(means * counts).astype(np.intp)
    non_per_group = counts.astype(np.intp) - tar_per_group
    return (np.repeat(block_llr, tar_per_group),
            np.repeat(block_llr, non_per_group))


def _binary_entropy(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    inner = (p > 0.0) & (p < 1.0)
    q = p[inner]
    out[inner] = -(q * np.log2(q) + (1.0 - q) * np.log2(1.0 - q))
    return out


def zebra(scores: ScoreSet, grid_points: int = 1000) -> ZebraReport:
    """Zero-evidence assessment of a score set.

    D_ECE integrates the gap between the prior entropy and the oracle
    ECE over a uniform prior grid (trapezoidal rule); the worst case is
    the largest |log10 LLR| across the oracle-calibrated scores.
    """
    scores.require_both_sides()
    tar_llr, non_llr = _laplace_pav_llrs(scores)
    grid = np.linspace(0.0, 1.0, grid_points)
    entropy = _binary_entropy(grid)

    log_odds = logit(grid[1:-1])
    tar_terms = np.logaddexp(0.0, -np.add.outer(log_odds, tar_llr)).mean(axis=1)
    non_terms = np.logaddexp(0.0, np.add.outer(log_odds, non_llr)).mean(axis=1)
    ece_grid = np.zeros_like(grid)
    ece_grid[1:-1] = (grid[1:-1] * tar_terms
                      + (1.0 - grid[1:-1]) * non_terms) / LN2

    integrand = np.maximum(entropy - ece_grid, 0.0)
    d_ece = float(np.trapezoid(integrand, grid))
    all_llr = np.concatenate([tar_llr, non_llr])
    log10_lw = float(np.max(np.abs(all_llr)) / LN10)
    return ZebraReport(d_ece, log10_lw, zebra_tag(log10_lw))


def mutual_information(vectors, labels, k: int = 3) -> float:
    """Average per-dimension mutual information with a binary label, bits.

    Nearest-neighbour estimate for a continuous variable against a
    discrete one: psi(N) - <psi(N_y)> + psi(k) - <psi(m)>, where the
    radius is the k-th same-label neighbour distance and m counts all
    samples within it (ties count as inside). Negative per-dimension
    estimates are clamped to zero before averaging.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if vectors.ndim != 2 or vectors.shape[0] != labels.shape[0]:
        raise DataError("vectors must be (n, d) aligned with labels")
    n, d = vectors.shape
    class_idx = [np.flatnonzero(labels == c) for c in (0, 1)]
    for c, idx in zip((0, 1), class_idx):
        if len(idx) <= k:
            raise DataError(f"class {c} has {len(idx)} samples, need > k={k}")
    n_y = np.where(labels == 1, len(class_idx[1]), len(class_idx[0]))
    base = digamma(n) - np.mean(digamma(n_y)) + digamma(k)

    total = 0.0
    for j in range(d):
        col = vectors[:, j]
        radius = np.empty(n)
        for idx in class_idx:
            vals = col[idx]
            order = np.argsort(vals, kind="stable")
            radius[idx[order]] = _kth_neighbor_distance(vals[order], k)
        all_sorted = np.sort(col)
        hi = np.searchsorted(all_sorted, col + radius, side="right")
        lo = np.searchsorted(all_sorted, col - radius, side="left")
        m = hi - lo - 1  # exclude self
        mi_nats = base - np.mean(digamma(np.maximum(m, 1)))
        total += max(mi_nats / LN2, 0.0)
    return total / d


def _kth_neighbor_distance(sorted_vals: np.ndarray, k: int) -> np.ndarray:
    """k-th nearest-neighbour distance for each entry of a sorted 1-D array."""
    n = len(sorted_vals)
    padded = np.concatenate([np.full(k, -np.inf), sorted_vals, np.full(k, np.inf)])
    best = np.full(n, np.inf)
    pos = np.arange(n) + k
    for t in range(k + 1):
        right = padded[pos + t] - sorted_vals
        left = sorted_vals - padded[pos - (k - t)]
        np.minimum(best, np.maximum(left, right), out=best)
    return best


def canonical_polarity(scores: ScoreSet) -> CanonicalResult:
    """Pick the score direction (identity or negated) with lower Cllr_min.

    All reported discrimination metrics use the returned polarity; the
    flag records whether the direction was swapped.
    """
    flipped = ScoreSet(-scores.target_scores, -scores.nontarget_scores)
    if cllr_min(flipped) < cllr_min(scores):
        return CanonicalResult(flipped, True)
    return CanonicalResult(scores, False)


def score_histogram(scores: ScoreSet, bin_width: float):
    """Aligned per-class counts over [0,1] for score-distribution plots.

    Returns (bin_centers, target_counts, nontarget_counts); scores outside
    [0,1] land in the end bins.
    """
    if bin_width <= 0:
        raise DataError("bin_width must be > 0")
    n_bins = int(np.ceil(1.0 / bin_width))
    lower = np.arange(n_bins) * bin_width
    centers = (lower + np.minimum(lower + bin_width, 1.0)) / 2.0

    def counts(side):
        idx = np.clip((np.asarray(side) / bin_width).astype(np.intp), 0, n_bins - 1)
        return np.bincount(idx, minlength=n_bins)

    return centers, counts(scores.target_scores), counts(scores.nontarget_scores)
