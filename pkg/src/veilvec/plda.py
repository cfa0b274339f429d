"""Speaker-verification backend: LDA reduction, two-covariance PLDA, trials.

The generative model is x = mu + s + eps with s ~ N(0, B) shared by a
speaker's segments and eps ~ N(0, W) per segment. Fitting is EM over
(B, W) with mu pinned at the data mean; scoring compares the joint
same-speaker Gaussian against independent marginals, yielding a
natural-log LLR per trial.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg

from .calibration import ScoreSet
from .corpus import Corpus
from .errors import ConfigError, DataError, NumericalError, ParseError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LdaProjection:
    matrix: np.ndarray  # (k, d) rows = discriminant directions
    mean: np.ndarray    # (d,)

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.matrix.ndim != 2 or self.mean.shape != (self.matrix.shape[1],):
            raise DataError("projection matrix and mean disagree on dimension")

    def project(self, vectors: np.ndarray) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.matrix.T


@dataclass(frozen=True)
class PldaModel:
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray

    def __post_init__(self):
        for name in ("mu", "between_cov", "within_cov"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64))
        k = self.mu.shape[0]
        for name in ("between_cov", "within_cov"):
            mat = getattr(self, name)
            if mat.shape != (k, k):
                raise DataError(f"{name} must be ({k},{k})")
            if np.max(np.abs(mat - mat.T)) > 1e-10:
                raise DataError(f"{name} must be symmetric within 1e-10")
        if np.linalg.eigvalsh(self.within_cov)[0] <= 0:
            raise NumericalError("within covariance must be positive definite")


@dataclass(frozen=True)
class TrialList:
    trials: Tuple[Tuple[str, str, bool], ...]

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)


def _speaker_groups(corpus: Corpus):
    groups = {}
    for i, spk in enumerate(corpus.speaker_ids):
        groups.setdefault(spk, []).append(i)
    return groups


def _ridge(mat: np.ndarray) -> np.ndarray:
    d = mat.shape[0]
    return mat + (1e-6 * np.trace(mat) / d) * np.eye(d)


def lda_fit(corpus: Corpus, k: int) -> LdaProjection:
    """Top-k directions maximizing between- over within-speaker scatter.

    Solves the generalized symmetric eigenproblem; eigenvectors come out
    within-scatter-orthogonal, ordered by descending eigenvalue, with the
    sign fixed so each row's first non-zero component is positive.
    """
    groups = _speaker_groups(corpus)
    if len(groups) < 2:
        raise DataError("LDA needs at least 2 speakers")
    if any(len(idx) < 2 for idx in groups.values()):
        raise DataError("LDA needs >= 2 segments per speaker")
    if k > len(groups) - 1:
        raise ConfigError(f"k={k} exceeds n_speakers-1={len(groups) - 1}")
    if k > corpus.dim:
        raise ConfigError(f"k={k} exceeds dimension {corpus.dim}")

    X = corpus.vectors
    gm = X.mean(axis=0)
    n = len(corpus)
    d = corpus.dim
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for idx in groups.values():
        block = X[idx]
        mean = block.mean(axis=0)
        dev = block - mean
        s_w += dev.T @ dev
        centered = mean - gm
        s_b += len(idx) * np.outer(centered, centered)
    s_w /= n
    s_b /= n

    try:
        eigvals, eigvecs = scipy.linalg.eigh(s_b, s_w)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = scipy.linalg.eigh(s_b, _ridge(s_w))
    top = eigvecs[:, ::-1][:, :k].T  # rows, descending eigenvalue
    for row in top:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return LdaProjection(top, gm)


def project_corpus(lda: LdaProjection, corpus: Corpus) -> Corpus:
    """Corpus in LDA space, metadata preserved."""
    projected = lda.project(corpus.vectors)
    return Corpus(projected.shape[1], corpus.segment_ids, corpus.speaker_ids,
                  corpus.labels, projected, corpus.posteriors)


def _ensure_pd(mat: np.ndarray) -> np.ndarray:
    mat = 0.5 * (mat + mat.T)
    if np.linalg.eigvalsh(mat)[0] <= 1e-12 * max(np.trace(mat), 1.0):
        mat = _ridge(mat)
    return mat


def _log_likelihood(X, groups, mu, B, W):
    """Marginal log-likelihood of all speakers under (mu, B, W).

    Each speaker's block decomposes orthonormally into the scaled mean
    (covariance W + nB, i.e. n times B + W/n) and n-1 deviation
    directions with covariance W; the d*log(n) term is the Jacobian-free
    bookkeeping of that split.
    """
    sign_w, logdet_w = np.linalg.slogdet(W)
    if sign_w <= 0:
        raise NumericalError("within covariance lost positive definiteness")
    w_inv = np.linalg.inv(W)
    total = 0.0
    d = X.shape[1]
    for idx in groups.values():
        block = X[idx] - mu
        n = len(idx)
        xbar = block.mean(axis=0)
        dev = block - xbar
        cov_mean = B + W / n
        sign_m, logdet_m = np.linalg.slogdet(cov_mean)
        if sign_m <= 0:
            raise NumericalError("B + W/n lost positive definiteness")
        quad_dev = float(np.einsum("ij,jk,ik->", dev, w_inv, dev))
        quad_mean = float(xbar @ np.linalg.solve(cov_mean, xbar))
        total += -0.5 * (n * d * LOG_2PI + (n - 1) * logdet_w + quad_dev
                         + d * np.log(n) + logdet_m + quad_mean)
    return total


def plda_fit(corpus: Corpus, iters: int = 10) -> PldaModel:
    """EM for the two-covariance model on an (LDA-projected) corpus.

    The log-likelihood is checked to be non-decreasing at every
    iteration (1e-8 relative tolerance); degenerate covariances are
    ridge-regularized before use.
    """
    groups = _speaker_groups(corpus)
    if len(groups) < 2:
        raise DataError("PLDA needs at least 2 speakers")
    if any(len(idx) < 2 for idx in groups.values()):
        raise DataError("PLDA needs >= 2 segments per speaker")

    X = corpus.vectors
    mu = X.mean(axis=0)
    k = X.shape[1]
    means = np.stack([X[idx].mean(axis=0) for idx in groups.values()])
    B = _ensure_pd(np.cov(means.T, bias=True).reshape(k, k))
    W = np.zeros((k, k))
    for idx in groups.values():
        dev = X[idx] - X[idx].mean(axis=0)
        W += dev.T @ dev
    W = _ensure_pd(W / len(corpus))

    prev_ll = None
    for _ in range(iters):
        ll = _log_likelihood(X, groups, mu, B, W)
        if prev_ll is not None and ll < prev_ll - 1e-8 * max(1.0, abs(prev_ll)):
            raise NumericalError(
                f"EM log-likelihood decreased: {prev_ll} -> {ll}")
        prev_ll = ll

        # E-step: posterior of the speaker factor, grouped by segment count
        b_acc = np.zeros((k, k))
        w_acc = np.zeros((k, k))
        post_cov_cache = {}
        for idx in groups.values():
            n = len(idx)
            if n not in post_cov_cache:
                gain = np.linalg.solve((B + W / n).T, B.T).T  # B (B + W/n)^-1
                post_cov_cache[n] = (gain, B - gain @ B)
            gain, post_cov = post_cov_cache[n]
            block = X[idx] - mu
            xbar = block.mean(axis=0)
            m = gain @ xbar
            b_acc += np.outer(m, m) + post_cov
            resid = block - m
            w_acc += resid.T @ resid + n * post_cov
        B = _ensure_pd(b_acc / len(groups))
        W = _ensure_pd(w_acc / len(corpus))
    return PldaModel(mu, B, W)


def _score_terms(model: PldaModel):
    """Quadratic forms and constant of the verification LLR."""
    sigma = model.between_cov + model.within_cov
    sigma_inv = np.linalg.inv(sigma)
    schur = sigma - model.between_cov @ sigma_inv @ model.between_cov
    sign, logdet_schur = np.linalg.slogdet(schur)
    if sign <= 0:
        raise NumericalError("total covariance is not positive definite")
    _, logdet_sigma = np.linalg.slogdet(sigma)
    a = np.linalg.inv(schur)
    g = a - sigma_inv
    c = -a @ model.between_cov @ sigma_inv
    const = -0.5 * (logdet_schur - logdet_sigma)
    return g, 0.5 * (c + c.T), const


def plda_score(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    """log p(e,t | same speaker) - log p(e) - log p(t), natural log."""
    g, c, const = _score_terms(model)
    e = np.asarray(enroll, dtype=np.float64) - model.mu
    t = np.asarray(test, dtype=np.float64) - model.mu
    return float(-0.5 * (e @ g @ e + t @ g @ t + 2.0 * e @ c @ t) + const)


def build_trials(corpus: Corpus, seed: int, n_nontarget: int = 3) -> TrialList:
    """One same-speaker and `n_nontarget` cross-speaker trials per segment."""
    groups = _speaker_groups(corpus)
    if any(len(idx) < 2 for idx in groups.values()):
        raise DataError("trial building needs >= 2 segments per speaker")
    rng = np.random.default_rng(np.random.PCG64(seed))
    segs = corpus.segment_ids
    spk_arr = np.asarray(corpus.speaker_ids, dtype=object)
    others_by_spk = {spk: np.flatnonzero(spk_arr != spk) for spk in groups}
    trials = []
    for i, spk in enumerate(corpus.speaker_ids):
        same = [j for j in groups[spk] if j != i]
        trials.append((segs[same[rng.integers(len(same))]], segs[i], True))
        others = others_by_spk[spk]
        for j in rng.choice(others, size=min(n_nontarget, len(others)),
                            replace=False):
            trials.append((segs[j], segs[i], False))
    return TrialList(tuple(trials))


def run_trials(model: PldaModel, lda: LdaProjection, corpus: Corpus,
               trials: TrialList) -> ScoreSet:
    """Score every trial after LDA projection; returns the split LLRs."""
    if len(trials) == 0:
        raise DataError("empty trial list")
    index = {seg: i for i, seg in enumerate(corpus.segment_ids)}
    for enroll, test, _ in trials:
        if enroll not in index or test not in index:
            raise DataError(f"trial ({enroll}, {test}) references an unknown segment")
    Y = lda.project(corpus.vectors) - model.mu
    g, c, const = _score_terms(model)
    quad = np.einsum("ij,jk,ik->i", Y, g, Y)
    cross_mat = Y @ c
    e_idx = np.fromiter((index[e] for e, _, _ in trials), dtype=np.intp)
    t_idx = np.fromiter((index[t] for _, t, _ in trials), dtype=np.intp)
    is_tar = np.fromiter((tar for _, _, tar in trials), dtype=bool)
    llrs = -0.5 * (quad[e_idx] + quad[t_idx]
                   + 2.0 * np.einsum("ij,ij->i", Y[e_idx], cross_mat[t_idx])) + const
    return ScoreSet(llrs[is_tar], llrs[~is_tar])


def save_trials(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("veilvec-trials v1\n")
        for enroll, test, is_target in trials:
            kind = "target" if is_target else "nontarget"
            fh.write(f"{enroll} {test} {kind}\n")


def load_trials(path) -> TrialList:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "veilvec-trials v1":
        raise ParseError("expected 'veilvec-trials v1' header", line=1, path=path)
    trials = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ParseError("expected '<enroll> <test> <target|nontarget>'",
                             line=lineno, path=path)
        trials.append((parts[0], parts[1], parts[2] == "target"))
    return TrialList(tuple(trials))
