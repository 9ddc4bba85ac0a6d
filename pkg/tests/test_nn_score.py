import numpy as np
import pytest

from mmsold.errors import DegenerateDenominator, InvalidBudget
from mmsold.gmm import SmoothingConfig, TrainingSet, score, smoothed_score
from mmsold.nn_score import (build_index, corrected_sums, nn_smoothed_score,
                             select_local_subset)
from mmsold.rng import SubstreamKey


def brute_force_knn(points, z, k):
    """Independent reference: sort (distance, index) tuples."""
    dists = [(float(np.linalg.norm(p - z)), i) for i, p in enumerate(points)]
    dists.sort()
    return np.array([i for _, i in dists[:k]])


class TestNeighborIndex:
    def test_colinear_self_query(self):
        ts = TrainingSet(np.array([[0.0, 0], [1, 0], [2, 0.0]]))
        idx = build_index(ts)
        assert idx.query(np.array([1.0, 0.0]), 1)[0] == 1

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        ts = TrainingSet(rng.standard_normal((1000, 10)))
        idx = build_index(ts)
        for _ in range(25):
            z = rng.standard_normal(10)
            got = idx.query(z, 50)
            want = brute_force_knn(ts.points, z, 50)
            np.testing.assert_array_equal(got, want)

    def test_duplicates_returned_before_farther_points(self):
        pts = np.array([[0.0, 0], [0, 0], [5, 5], [0.1, 0]])
        idx = build_index(TrainingSet(pts))
        got = idx.query(np.zeros(2), 3)
        np.testing.assert_array_equal(got, [0, 1, 3])

    def test_tie_break_ascending_index(self):
        pts = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
        idx = build_index(TrainingSet(pts))
        np.testing.assert_array_equal(idx.query(np.zeros(2), 4), [0, 1, 2, 3])


class TestSelectLocalSubset:
    def test_full_budget_unit_weights(self):
        rng = np.random.default_rng(0)
        ts = TrainingSet(rng.standard_normal((20, 2)))
        idx = build_index(ts)
        sub = select_local_subset(idx, np.zeros(2), 20, 0, rng)
        np.testing.assert_array_equal(sub.indices, np.arange(20))
        np.testing.assert_array_equal(sub.weights, np.ones(20))

    def test_l_equals_complement_gives_unit_weights(self):
        rng = np.random.default_rng(1)
        ts = TrainingSet(rng.standard_normal((15, 2)))
        idx = build_index(ts)
        sub = select_local_subset(idx, np.zeros(2), 5, 10, rng)
        np.testing.assert_array_equal(sub.indices, np.arange(15))
        np.testing.assert_array_equal(sub.weights, np.ones(15))

    def test_inclusion_frequency_uniform(self):
        n, k, l = 20, 5, 3
        rng = np.random.default_rng(7)
        ts = TrainingSet(rng.standard_normal((n, 2)))
        idx = build_index(ts)
        z = np.zeros(2)
        a_k = set(idx.query(z, k).tolist())
        counts = np.zeros(n)
        draws = 100_000
        for _ in range(draws):
            sub = select_local_subset(idx, z, k, l, rng)
            mask = ~np.isin(sub.indices, list(a_k))
            counts[sub.indices[mask]] += 1
        p = l / (n - k)
        se = np.sqrt(p * (1 - p) / draws)
        freq = counts[[i for i in range(n) if i not in a_k]] / draws
        assert np.all(np.abs(freq - p) <= 3 * se)

    def test_invalid_budget(self):
        rng = np.random.default_rng(0)
        ts = TrainingSet(rng.standard_normal((10, 2)))
        idx = build_index(ts)
        with pytest.raises(InvalidBudget):
            select_local_subset(idx, np.zeros(2), 8, 5, rng)

    def test_gram_attached_in_projected_regime(self):
        rng = np.random.default_rng(0)
        ts = TrainingSet(rng.standard_normal((30, 8)))
        idx = build_index(ts)
        sub = select_local_subset(idx, np.zeros(8), 2, 2, rng)
        assert sub.gram is not None and sub.gram.shape == (4, 4)
        pts = ts.points[sub.indices]
        np.testing.assert_allclose(sub.gram, pts @ pts.T, atol=1e-12)


class TestEstimator:
    def test_full_subset_sigma_zero_equals_closed_form(self):
        rng = np.random.default_rng(3)
        ts = TrainingSet(rng.standard_normal((12, 2)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=0.4, sigma=0.0, mc_samples=2)
        z = np.array([0.2, -0.1])
        got = nn_smoothed_score(ts, idx, cfg, 12, 0, z, np.random.default_rng(0))
        np.testing.assert_array_equal(got, -score(ts, 0.4, z))

    def test_full_subset_shared_noise_bit_identical(self):
        rng = np.random.default_rng(4)
        ts = TrainingSet(rng.standard_normal((10, 2)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=0.5, sigma=0.3, mc_samples=8)
        noise = np.random.default_rng(5).standard_normal((4, 2))
        z = np.array([0.4, 0.7])
        got = nn_smoothed_score(ts, idx, cfg, 10, 0, z,
                                np.random.default_rng(0), noise=noise)
        want = smoothed_score(ts, cfg, z, noise=noise)
        np.testing.assert_array_equal(got, want)

    def test_l_equals_complement_matches_full_estimator(self):
        rng = np.random.default_rng(6)
        ts = TrainingSet(rng.standard_normal((14, 2)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=0.5, sigma=0.25, mc_samples=4)
        noise = np.random.default_rng(7).standard_normal((2, 2))
        z = np.array([-0.3, 0.2])
        got = nn_smoothed_score(ts, idx, cfg, 4, 10, z,
                                np.random.default_rng(0), noise=noise)
        want = smoothed_score(ts, cfg, z, noise=noise)
        np.testing.assert_array_equal(got, want)

    def test_corrected_sums_unbiased(self):
        rng = np.random.default_rng(10)
        ts = TrainingSet(rng.standard_normal((200, 2)))
        idx = build_index(ts)
        delta = 0.6
        z = np.array([0.1, 0.2])
        y = z + 0.3 * np.array([1.0, -0.5])
        diff = y[None, :] - ts.points
        e_full = np.exp(-(diff * diff).sum(axis=1) / (2 * delta * delta))
        t0_full = e_full.sum()
        t1_full = e_full @ ts.points
        draws = 10_000
        t0s = np.empty(draws)
        t1s = np.empty((draws, 2))
        for r in range(draws):
            sub = select_local_subset(idx, z, 10, 20, rng)
            t0s[r], t1s[r] = corrected_sums(ts, sub, y, delta)
        se0 = t0s.std(ddof=1) / np.sqrt(draws)
        assert abs(t0s.mean() - t0_full) <= 3 * se0
        se1 = t1s.std(axis=0, ddof=1) / np.sqrt(draws)
        assert np.all(np.abs(t1s.mean(axis=0) - t1_full) <= 3 * se1)

    def test_variance_scales_inverse_m(self):
        rng = np.random.default_rng(11)
        ts = TrainingSet(rng.standard_normal((60, 2)))
        idx = build_index(ts)
        z = np.array([0.3, 0.3])
        reps = 400
        variances = {}
        for m in (4, 16, 64, 256):
            cfg = SmoothingConfig(delta=0.5, sigma=0.4, mc_samples=m)
            vals = np.array([
                nn_smoothed_score(ts, idx, cfg, 60, 0, z,
                                  np.random.default_rng(1000 * m + r))
                for r in range(reps)
            ])
            variances[m] = vals.var(axis=0, ddof=1).sum()
        for m_small, m_big in [(4, 16), (16, 64), (64, 256)]:
            ratio = variances[m_small] / variances[m_big]
            ideal = m_big / m_small
            assert ideal / 2 <= ratio <= ideal * 2

    def test_projected_regime_logit_law_matches_ambient(self):
        rng = np.random.default_rng(12)
        d, n = 8, 12
        ts = TrainingSet(rng.standard_normal((n, d)))
        idx = build_index(ts)
        sub = select_local_subset(idx, np.zeros(d), 2, 2,
                                  np.random.default_rng(0))
        pts = ts.points[sub.indices]
        sigma, delta = 0.7, 0.4
        scale = sigma / delta ** 2
        draws = 100_000
        amb = scale * (rng.standard_normal((draws, d)) @ pts.T)
        chol = np.linalg.cholesky(sub.gram + 1e-10 * np.trace(sub.gram) / 4 * np.eye(4))
        proj = scale * (rng.standard_normal((draws, 4)) @ chol.T)
        cov_amb = np.cov(amb.T)
        cov_proj = np.cov(proj.T)
        target = scale ** 2 * sub.gram
        # moment SE of a covariance entry ~ sqrt((C_ii C_jj + C_ij^2)/n)
        dd = np.diag(target)
        se = np.sqrt((np.outer(dd, dd) + target ** 2) / draws)
        assert np.all(np.abs(amb.mean(0)) <= 3 * np.sqrt(np.diag(target) / draws))
        assert np.all(np.abs(proj.mean(0)) <= 3 * np.sqrt(np.diag(target) / draws))
        assert np.all(np.abs(cov_amb - target) <= 4 * se)
        assert np.all(np.abs(cov_proj - target) <= 4 * se)

    def test_projected_regime_runs_and_is_sane(self):
        rng = np.random.default_rng(13)
        d = 10
        ts = TrainingSet(rng.standard_normal((40, d)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=0.8, sigma=0.3, mc_samples=64)
        z = ts.points[0] + 0.1
        est = nn_smoothed_score(ts, idx, cfg, 3, 3, z, np.random.default_rng(1))
        assert est.shape == (d,)
        assert np.isfinite(est).all()

    def test_projected_matches_ambient_in_mean(self):
        # same (K, L) subset, many reps: estimator means agree across regimes
        rng = np.random.default_rng(14)
        d, n = 6, 30
        ts = TrainingSet(rng.standard_normal((n, d)))
        idx = build_index(ts)
        z = 0.25 * np.ones(d)
        sub = select_local_subset(idx, z, 2, 2, np.random.default_rng(0))
        cfg = SmoothingConfig(delta=0.7, sigma=0.4, mc_samples=32)
        reps = 300
        proj_vals = np.array([
            nn_smoothed_score(ts, idx, cfg, 2, 2, z,
                              np.random.default_rng(20_000 + r), subset=sub)
            for r in range(reps)
        ])
        # ambient construction forced by passing explicit ambient noise
        amb_vals = np.empty((reps, d))
        for r in range(reps):
            gen = np.random.default_rng(50_000 + r)
            eps = gen.standard_normal((cfg.n_pairs, d))
            pts = ts.points[sub.indices]
            from mmsold.gmm import _antithetic_center_mean
            cbar = _antithetic_center_mean(pts, z[None, :], cfg.sigma,
                                           eps[None], cfg.delta,
                                           sub.weights)[0]
            amb_vals[r] = (z - cbar) / cfg.delta ** 2
        se = np.sqrt(proj_vals.var(0, ddof=1) / reps + amb_vals.var(0, ddof=1) / reps)
        assert np.all(np.abs(proj_vals.mean(0) - amb_vals.mean(0)) <= 4 * se)

    def test_degenerate_denominator(self):
        ts = TrainingSet(np.zeros((5, 2)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=1e-2, sigma=0.0, mc_samples=2)
        z = np.array([1e3, 1e3])
        with pytest.raises(DegenerateDenominator):
            nn_smoothed_score(ts, idx, cfg, 5, 0, z, np.random.default_rng(0))

    def test_substream_key_accepted(self):
        rng = np.random.default_rng(15)
        ts = TrainingSet(rng.standard_normal((20, 2)))
        idx = build_index(ts)
        cfg = SmoothingConfig(delta=0.5, sigma=0.2, mc_samples=4)
        z = np.zeros(2)
        a = nn_smoothed_score(ts, idx, cfg, 5, 5, z, SubstreamKey(3).child(0))
        b = nn_smoothed_score(ts, idx, cfg, 5, 5, z, SubstreamKey(3).child(0))
        np.testing.assert_array_equal(a, b)
