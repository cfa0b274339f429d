import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import corpus_from_arrays
from veilvec import plda
from veilvec.corpus import Corpus
from veilvec.errors import ConfigError, DataError
from veilvec.plda import (LdaProjection, PldaModel, TrialList, build_trials,
                          lda_fit, plda_fit, plda_score, project_corpus,
                          run_trials)


def speaker_corpus(rng, n_speakers=20, segs=6, dim=5, between=1.0, within=0.3,
                   B=None, W=None, mu=None):
    """Draw from the two-covariance model, optionally with given matrices."""
    if B is None:
        B = between ** 2 * np.eye(dim)
    if W is None:
        W = within ** 2 * np.eye(dim)
    if mu is None:
        mu = np.zeros(dim)
    lb = np.linalg.cholesky(B + 1e-12 * np.eye(dim))
    lw = np.linalg.cholesky(W)
    vectors, speakers = [], []
    for s in range(n_speakers):
        center = mu + lb @ rng.standard_normal(dim)
        for _ in range(segs):
            vectors.append(center + lw @ rng.standard_normal(dim))
            speakers.append(f"spk{s:03d}")
    labels = [i % 2 for i, _ in enumerate(speakers)]
    return corpus_from_arrays(np.asarray(vectors), labels, speakers)


class TestLda:
    def test_axis_aligned_two_speakers(self, rng):
        a = rng.normal([5.0, 0.0], [0.2, 2.0], size=(30, 2))
        b = rng.normal([-5.0, 0.0], [0.2, 2.0], size=(30, 2))
        c = corpus_from_arrays(np.vstack([a, b]), [0] * 30 + [1] * 30,
                               ["a"] * 30 + ["b"] * 30)
        proj = lda_fit(c, k=1)
        direction = proj.matrix[0] / np.linalg.norm(proj.matrix[0])
        assert abs(direction[0]) >= 0.99

    def test_k_bounds(self, rng):
        c = speaker_corpus(rng, n_speakers=6)
        assert lda_fit(c, k=5).matrix.shape == (5, 5)
        with pytest.raises(ConfigError):
            lda_fit(c, k=6)

    def test_needs_multiple_segments(self, rng):
        c = speaker_corpus(rng, n_speakers=4, segs=1)
        with pytest.raises(DataError):
            lda_fit(c, k=2)

    def test_within_scatter_orthogonality(self, rng):
        c = speaker_corpus(rng, n_speakers=15, segs=8, dim=6)
        proj = lda_fit(c, k=4)
        X = c.vectors
        s_w = np.zeros((6, 6))
        for spk in set(c.speaker_ids):
            block = X[np.asarray(c.speaker_ids, dtype=object) == spk]
            dev = block - block.mean(axis=0)
            s_w += dev.T @ dev
        s_w /= len(c)
        gram = proj.matrix @ s_w @ proj.matrix.T
        off = gram - np.diag(np.diag(gram))
        assert np.max(np.abs(off)) <= 1e-8 * np.max(np.abs(np.diag(gram)))

    def test_projection_reduces_within_share(self, rng):
        c = speaker_corpus(rng, n_speakers=12, segs=8, dim=8,
                           between=2.0, within=0.5)
        proj = lda_fit(c, k=3)
        projected = project_corpus(proj, c)

        def within_total_ratio(corpus):
            X = corpus.vectors
            total = X.var(axis=0).sum()
            within = 0.0
            for spk in set(corpus.speaker_ids):
                block = X[np.asarray(corpus.speaker_ids, dtype=object) == spk]
                within += ((block - block.mean(axis=0)) ** 2).sum()
            return (within / len(X)) / total

        assert within_total_ratio(projected) <= within_total_ratio(c)

    def test_deterministic_sign_convention(self, rng):
        c = speaker_corpus(rng, n_speakers=10, segs=5, dim=4)
        a = lda_fit(c, k=3)
        b = lda_fit(c, k=3)
        np.testing.assert_array_equal(a.matrix, b.matrix)
        for row in a.matrix:
            nz = row[np.abs(row) > 1e-12]
            assert nz[0] > 0


class TestPldaFit:
    def test_parameter_recovery(self, rng):
        dim = 4
        q = rng.standard_normal((dim, dim))
        B_true = q @ q.T / dim + 0.5 * np.eye(dim)
        r = rng.standard_normal((dim, dim))
        W_true = 0.2 * (r @ r.T / dim + np.eye(dim))
        c = speaker_corpus(rng, n_speakers=500, segs=10, dim=dim,
                           B=B_true, W=W_true)
        model = plda_fit(c, iters=25)
        rel_b = np.linalg.norm(model.between_cov - B_true) / np.linalg.norm(B_true)
        rel_w = np.linalg.norm(model.within_cov - W_true) / np.linalg.norm(W_true)
        assert rel_b <= 0.10
        assert rel_w <= 0.10

    def test_loglik_monotone_is_enforced(self, rng):
        # plda_fit raises on any decrease; surviving many iterations on
        # awkward data is the property under test
        c = speaker_corpus(rng, n_speakers=8, segs=3, dim=6,
                           between=0.1, within=2.0)
        plda_fit(c, iters=40)

    def test_no_speaker_effect_shrinks_between(self, rng):
        dim = 4
        c = speaker_corpus(rng, n_speakers=150, segs=8, dim=dim,
                           B=1e-12 * np.eye(dim), W=np.eye(dim))
        model = plda_fit(c, iters=15)
        assert np.trace(model.between_cov) <= 0.05 * np.trace(model.within_cov)

    def test_needs_two_speakers(self, rng):
        c = speaker_corpus(rng, n_speakers=2, segs=4)
        plda_fit(c, iters=2)
        single = c.subset([i for i, s in enumerate(c.speaker_ids)
                           if s == "spk000"])
        with pytest.raises(DataError):
            plda_fit(single, iters=2)


def brute_force_loglik(X_by_speaker, mu, B, W):
    """Joint-Gaussian evaluation with the explicit stacked covariance."""
    total = 0.0
    for block in X_by_speaker:
        n, d = block.shape
        cov = np.kron(np.eye(n), W) + np.kron(np.ones((n, n)), B)
        total += multivariate_normal.logpdf(
            block.reshape(-1), mean=np.tile(mu, n), cov=cov)
    return total


def test_loglik_matches_joint_gaussian_oracle(rng):
    dim = 3
    c = speaker_corpus(rng, n_speakers=5, segs=4, dim=dim,
                       between=0.8, within=0.4)
    X = c.vectors
    groups = {}
    for i, s in enumerate(c.speaker_ids):
        groups.setdefault(s, []).append(i)
    mu = X.mean(axis=0)
    B = 0.6 * np.eye(dim) + 0.1
    W = 0.2 * np.eye(dim)
    ours = plda._log_likelihood(X, groups, mu, B, W)
    oracle = brute_force_loglik([X[idx] for idx in groups.values()], mu, B, W)
    assert ours == pytest.approx(oracle, rel=1e-10)


class TestPldaScore:
    def test_no_speaker_factor_means_zero_llr(self, rng):
        model = PldaModel(np.zeros(3), np.zeros((3, 3)), np.eye(3))
        for _ in range(5):
            assert plda_score(model, rng.standard_normal(3),
                              rng.standard_normal(3)) == pytest.approx(0.0,
                                                                       abs=1e-12)

    def test_one_dimensional_density_oracle(self):
        model = PldaModel(np.zeros(1), np.eye(1), np.eye(1))
        e = np.array([1.0])
        t = np.array([1.0])
        # same-speaker: joint Gaussian, cov [[2,1],[1,2]]; different: product
        joint = multivariate_normal.logpdf([1.0, 1.0], mean=[0, 0],
                                           cov=[[2.0, 1.0], [1.0, 2.0]])
        marg = multivariate_normal.logpdf(1.0, mean=0.0, cov=2.0)
        expected = joint - 2 * marg
        assert plda_score(model, e, t) == pytest.approx(expected, abs=1e-10)

    def test_random_model_matches_density_oracle(self, rng):
        for _ in range(5):
            k = 3
            qb = rng.standard_normal((k, k))
            qw = rng.standard_normal((k, k))
            B = qb @ qb.T / k + 0.1 * np.eye(k)
            W = qw @ qw.T / k + 0.3 * np.eye(k)
            mu = rng.standard_normal(k)
            model = PldaModel(mu, B, W)
            e = rng.standard_normal(k)
            t = rng.standard_normal(k)
            sigma = B + W
            joint_cov = np.block([[sigma, B], [B, sigma]])
            expected = (multivariate_normal.logpdf(
                np.concatenate([e, t]), mean=np.tile(mu, 2), cov=joint_cov)
                - multivariate_normal.logpdf(e, mean=mu, cov=sigma)
                - multivariate_normal.logpdf(t, mean=mu, cov=sigma))
            assert plda_score(model, e, t) == pytest.approx(expected,
                                                            abs=1e-10)

    def test_symmetry(self, rng):
        k = 4
        qb = rng.standard_normal((k, k))
        B = qb @ qb.T / k
        model = PldaModel(np.zeros(k), B, np.eye(k))
        e, t = rng.standard_normal(k), rng.standard_normal(k)
        assert plda_score(model, e, t) == pytest.approx(
            plda_score(model, t, e), abs=1e-10)

    def test_affine_invariance_of_trial_llrs(self, rng):
        dim = 4
        c = speaker_corpus(rng, n_speakers=40, segs=6, dim=dim)
        trials = build_trials(c, seed=3, n_nontarget=2)
        eye = LdaProjection(np.eye(dim), np.zeros(dim))
        base = run_trials(plda_fit(c, iters=8), eye, c, trials)

        A = rng.standard_normal((dim, dim)) + 3 * np.eye(dim)
        shift = rng.standard_normal(dim)
        mapped = c.with_vectors(c.vectors @ A.T + shift)
        remapped = run_trials(plda_fit(mapped, iters=8), eye, mapped, trials)
        np.testing.assert_allclose(remapped.target_scores, base.target_scores,
                                   rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(remapped.nontarget_scores,
                                   base.nontarget_scores, rtol=1e-6, atol=1e-6)


class TestTrials:
    def test_build_trials_structure(self, rng):
        c = speaker_corpus(rng, n_speakers=6, segs=4)
        trials = build_trials(c, seed=1, n_nontarget=3)
        assert len(trials) == len(c) * 4
        index = dict(zip(c.segment_ids, c.speaker_ids))
        for enroll, test, is_target in trials:
            assert enroll != test or not is_target
            assert (index[enroll] == index[test]) == is_target

    def test_run_trials_empty_rejected(self, rng):
        c = speaker_corpus(rng, n_speakers=4, segs=3, dim=3)
        model = plda_fit(c, iters=3)
        eye = LdaProjection(np.eye(3), np.zeros(3))
        with pytest.raises(DataError):
            run_trials(model, eye, c, TrialList(()))

    def test_unresolved_id_names_trial(self, rng):
        c = speaker_corpus(rng, n_speakers=4, segs=3, dim=3)
        model = plda_fit(c, iters=3)
        eye = LdaProjection(np.eye(3), np.zeros(3))
        with pytest.raises(DataError) as exc:
            run_trials(model, eye, c, TrialList((("ghost", c.segment_ids[0],
                                                  True),)))
        assert "ghost" in str(exc.value)

    def test_all_target_list_breaks_downstream_metrics(self, rng):
        from veilvec.metrics import eer
        c = speaker_corpus(rng, n_speakers=4, segs=3, dim=3)
        model = plda_fit(c, iters=3)
        eye = LdaProjection(np.eye(3), np.zeros(3))
        trials = TrialList(tuple(
            (c.segment_ids[0], seg, True) for seg in c.segment_ids[1:3]))
        scores = run_trials(model, eye, c, trials)
        assert len(scores.nontarget_scores) == 0
        with pytest.raises(DataError):
            eer(scores)

    def test_trial_file_round_trip(self, tmp_path, rng):
        c = speaker_corpus(rng, n_speakers=5, segs=3)
        trials = build_trials(c, seed=9)
        path = tmp_path / "trials.txt"
        plda.save_trials(trials, path)
        assert plda.load_trials(path).trials == trials.trials

    def test_separable_speakers_give_discriminative_llrs(self, rng):
        from veilvec.metrics import auc
        from veilvec.calibration import ScoreSet
        c = speaker_corpus(rng, n_speakers=25, segs=6, dim=6,
                           between=2.0, within=0.3)
        lda = lda_fit(c, k=5)
        model = plda_fit(project_corpus(lda, c), iters=8)
        scores = run_trials(model, lda, c, build_trials(c, seed=2))
        assert auc(ScoreSet(scores.target_scores,
                            scores.nontarget_scores)) > 0.95


def test_plda_model_invariants():
    with pytest.raises(DataError):
        PldaModel(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]), np.eye(2))
    from veilvec.errors import NumericalError
    with pytest.raises(NumericalError):
        PldaModel(np.zeros(2), np.eye(2), np.zeros((2, 2)))