import numpy as np
import pytest

from gphawkes.gp import (
    dedupe_points,
    gp_condition,
    gp_predict,
    kernel_block,
    sparse_predict,
    sparse_update,
)
from gphawkes.kernels import AggregatedKernel, DecayParam, RbfParams

JIT = 1e-4


def make_kernel(with_history=True, seed=0):
    rng = np.random.default_rng(seed)
    s = RbfParams(1.0, 0.5)
    if not with_history:
        return AggregatedKernel(s, [])
    hist = np.sort(rng.uniform(0, 1, 4))
    return AggregatedKernel(s, [(hist, RbfParams(1.0, 0.1), DecayParam(15.0))])


def jittered(kernel, pts):
    return kernel.matrix(pts) + JIT * np.eye(len(pts))


class TestGpCondition:
    def test_zero_precision_recovers_prior(self):
        kernel = make_kernel()
        pts = np.linspace(0.1, 0.9, 5)
        post = gp_condition(kernel, pts, np.zeros(5), np.zeros(5))
        np.testing.assert_allclose(post.mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(post.cov, jittered(kernel, pts), atol=1e-10)

    def test_single_point_closed_form(self):
        kernel = make_kernel(with_history=False)
        w = 2.0
        pts = np.array([0.4])
        post = gp_condition(kernel, pts, np.array([1 / (2 * w)]), np.array([w]))
        k = kernel.matrix(pts)[0, 0] + JIT
        expected = k / (k + 1 / w) * (1 / (2 * w))
        np.testing.assert_allclose(post.mean[0], expected, rtol=1e-10)
        np.testing.assert_allclose(post.cov[0, 0], 1 / (1 / k + w), rtol=1e-10)

    def test_four_point_dense_inverse_oracle(self):
        kernel = make_kernel(seed=3)
        rng = np.random.default_rng(5)
        pts = np.sort(rng.uniform(0, 1, 4))
        m = rng.normal(0, 1, 4)
        w = rng.uniform(0.1, 3, 4)
        post = gp_condition(kernel, pts, m, w)
        kj = jittered(kernel, pts)
        cov_ref = np.linalg.inv(np.linalg.inv(kj) + np.diag(w))
        mean_ref = cov_ref @ (w * m)
        np.testing.assert_allclose(post.cov, cov_ref, atol=1e-10)
        np.testing.assert_allclose(post.mean, mean_ref, rtol=1e-8)

    def test_posterior_variance_never_exceeds_prior(self):
        kernel = make_kernel(seed=4)
        rng = np.random.default_rng(6)
        pts = np.sort(rng.uniform(0, 1, 8))
        w = rng.uniform(0, 5, 8)
        post = gp_condition(kernel, pts, rng.normal(size=8), w)
        prior_diag = np.diag(jittered(kernel, pts))
        assert np.all(np.diag(post.cov) <= prior_diag + 1e-10)

    def test_joint_sample_moments(self):
        kernel = make_kernel(seed=7)
        pts = np.array([0.2, 0.5, 0.8])
        m = np.array([0.5, -0.3, 1.0])
        w = np.array([1.5, 0.8, 2.0])
        post = gp_condition(kernel, pts, m, w)
        rng = np.random.default_rng(81)
        draws = np.array([post.sample(rng) for _ in range(10**4)])
        emp_cov = np.cov(draws.T)
        assert np.abs(emp_cov - post.cov).max() / np.abs(post.cov).max() < 0.05
        se = np.sqrt(np.diag(post.cov) / len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - post.mean) < 4 * se)

    def test_negative_precision_rejected(self):
        with pytest.raises(ValueError):
            gp_condition(make_kernel(), np.array([0.5]), np.array([0.0]),
                         np.array([-1.0]))

    def test_deterministic(self):
        kernel = make_kernel(seed=9)
        pts = np.linspace(0.1, 0.9, 6)
        m = np.sin(pts)
        w = np.full(6, 1.3)
        a = gp_condition(kernel, pts, m, w)
        b = gp_condition(kernel, pts, m, w)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)


class TestGpPredict:
    def test_interpolates_noiseless_evidence(self):
        kernel = make_kernel(seed=10)
        pts = np.array([0.25, 0.6])
        vals = np.array([1.2, -0.7])
        post = gp_condition(kernel, pts, vals, np.full(2, 1e12))
        mean, cov = gp_predict(post, pts)
        np.testing.assert_allclose(mean, vals, atol=1e-8)
        assert np.abs(np.diag(cov)).max() < 1e-8

    def test_far_query_reverts_to_prior(self):
        kernel = AggregatedKernel(RbfParams(1.7, 0.05), [])
        post = gp_condition(kernel, np.array([0.1]), np.array([5.0]),
                            np.array([1e10]))
        mean, cov = gp_predict(post, np.array([0.9]))
        assert abs(mean[0]) < 1e-6
        np.testing.assert_allclose(cov[0, 0], 1.7 + JIT, rtol=1e-6)

    def test_dense_reference_three_anchors_two_queries(self):
        kernel = make_kernel(seed=11)
        rng = np.random.default_rng(12)
        anchors = np.sort(rng.uniform(0, 1, 3))
        query = np.sort(rng.uniform(0, 1, 2))
        m = rng.normal(size=3)
        w = rng.uniform(0.5, 2, 3)
        post = gp_condition(kernel, anchors, m, w)
        mean, cov = gp_predict(post, query)
        kaa = jittered(kernel, anchors)
        kqa = kernel.matrix(query, anchors)
        kqq = kernel.matrix(query) + JIT * np.eye(2)
        kinv = np.linalg.inv(kaa)
        mean_ref = kqa @ kinv @ post.mean
        cov_ref = (kqq - kqa @ kinv @ kqa.T
                   + kqa @ kinv @ post.cov @ kinv @ kqa.T)
        np.testing.assert_allclose(mean, mean_ref, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(cov, cov_ref, atol=1e-8)

    def test_degenerate_posterior_conditions_on_values(self):
        kernel = make_kernel(seed=13)
        from gphawkes.gp import GpPosterior
        anchors = np.array([0.3, 0.7])
        vals = np.array([0.9, -0.4])
        post = GpPosterior(points=anchors, mean=vals, cov=None, kernel=kernel)
        mean, var = gp_predict(post, np.array([0.3, 0.5]), full_cov=False)
        np.testing.assert_allclose(mean[0], vals[0], atol=1e-8)
        assert var[0] < 1e-8
        assert var[1] > 0

    def test_marginals_match_full_cov_diagonal(self):
        kernel = make_kernel(seed=14)
        rng = np.random.default_rng(15)
        anchors = np.sort(rng.uniform(0, 1, 4))
        post = gp_condition(kernel, anchors, rng.normal(size=4),
                            rng.uniform(0.5, 2, 4))
        query = np.linspace(0.05, 0.95, 7)
        mean_f, cov_f = gp_predict(post, query)
        mean_d, var_d = gp_predict(post, query, full_cov=False)
        np.testing.assert_allclose(mean_d, mean_f, rtol=1e-12)
        np.testing.assert_allclose(var_d, np.diag(cov_f), rtol=1e-8, atol=1e-12)


class TestSparseUpdate:
    def test_no_evidence_recovers_prior(self):
        kernel = make_kernel(seed=20)
        c = np.linspace(0.1, 0.9, 5)
        t = np.linspace(0.05, 0.95, 8)
        sgp = sparse_update(kernel, c, np.zeros(8), np.zeros(8), t, np.ones(8))
        np.testing.assert_allclose(sgp.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(sgp.Sigma, jittered(kernel, c), atol=1e-9)

    def test_single_delta_at_inducing_location(self):
        kernel = make_kernel(with_history=False)
        c = np.array([0.5])
        a, b = 1.7, 0.5
        sgp = sparse_update(kernel, c, np.array([a]), np.array([b]), c,
                            np.ones(1))
        k = kernel.matrix(c)[0, 0] + JIT
        sigma_ref = 1 / (1 / k + a)
        np.testing.assert_allclose(sgp.Sigma[0, 0], sigma_ref, rtol=1e-10)
        np.testing.assert_allclose(sgp.mu[0], sigma_ref * b, rtol=1e-10)

    def test_dense_inverse_oracle(self):
        kernel = make_kernel(seed=21)
        rng = np.random.default_rng(22)
        c = np.linspace(0.12, 0.93, 5)
        t = np.sort(rng.uniform(0, 1, 12))
        a = rng.uniform(0, 2, 12)
        b = rng.normal(0, 1, 12)
        qw = rng.uniform(0.01, 1, 12)
        sgp = sparse_update(kernel, c, a, b, t, qw)
        kc = jittered(kernel, c)
        kinv = np.linalg.inv(kc)
        kappa = kernel.matrix(t, c) @ kinv
        sigma_ref = np.linalg.inv(kinv + kappa.T @ np.diag(qw * a) @ kappa)
        mu_ref = sigma_ref @ (kappa.T @ (qw * b))
        np.testing.assert_allclose(sgp.Sigma, sigma_ref, atol=1e-9)
        np.testing.assert_allclose(sgp.mu, mu_ref, rtol=1e-7, atol=1e-10)

    def test_agrees_with_dense_condition_at_same_points(self):
        kernel = make_kernel(seed=23)
        rng = np.random.default_rng(24)
        pts = np.sort(rng.uniform(0.05, 0.95, 6))
        m = rng.normal(size=6)
        w = rng.uniform(0.3, 2.5, 6)
        dense = gp_condition(kernel, pts, m, w)
        sparse = sparse_update(kernel, pts, w, w * m, pts, np.ones(6))
        scale = np.abs(dense.mean).max()
        assert np.abs(sparse.mu - dense.mean).max() / scale < 1e-6
        np.testing.assert_allclose(sparse.Sigma, dense.cov, atol=1e-8)

    def test_negative_a_weights_rejected(self):
        kernel = make_kernel()
        with pytest.raises(ValueError):
            sparse_update(kernel, np.array([0.5]), np.array([-0.5]),
                          np.array([0.0]), np.array([0.3]), np.ones(1))


class TestSparsePredict:
    def test_prior_recovery_at_inducing_point(self):
        kernel = make_kernel(seed=30)
        c = np.linspace(0.1, 0.9, 4)
        sgp = sparse_update(kernel, c, np.zeros(2), np.zeros(2),
                            np.array([0.2, 0.8]), np.ones(2))
        mean, var = sparse_predict(sgp, c)
        np.testing.assert_allclose(mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(var, kernel.diag(c) + JIT, rtol=1e-6)

    def test_variance_bounds(self):
        kernel = make_kernel(seed=31)
        rng = np.random.default_rng(32)
        c = np.linspace(0.1, 0.9, 5)
        t_ev = np.sort(rng.uniform(0, 1, 9))
        sgp = sparse_update(kernel, c, rng.uniform(0, 2, 9),
                            rng.normal(size=9), t_ev, np.ones(9))
        q = np.linspace(0.02, 0.98, 11)
        _, var = sparse_predict(sgp, q)
        k_tc = kernel_block(kernel, q, c, sgp.jitter)
        kappa = np.linalg.solve(jittered(kernel, c), k_tc.T).T
        lower = np.einsum("ij,jk,ik->i", kappa, sgp.Sigma, kappa)
        upper = kernel.diag(q) + JIT + lower
        assert np.all(var >= lower - 1e-10)
        assert np.all(var <= upper + 1e-10)
        assert np.all(var > 0)

    def test_three_point_dense_conditional_check(self):
        kernel = make_kernel(seed=33)
        rng = np.random.default_rng(34)
        c = np.array([0.2, 0.5, 0.8])
        t_ev = np.sort(rng.uniform(0, 1, 6))
        a = rng.uniform(0.1, 1.5, 6)
        b = rng.normal(size=6)
        sgp = sparse_update(kernel, c, a, b, t_ev, np.ones(6))
        q = np.array([0.15, 0.45, 0.75])
        mean, var = sparse_predict(sgp, q)
        kc = jittered(kernel, c)
        kinv = np.linalg.inv(kc)
        kqc = kernel.matrix(q, c)
        kappa = kqc @ kinv
        mean_ref = kappa @ sgp.mu
        var_ref = (kernel.diag(q) + JIT - np.einsum("ij,ij->i", kappa, kqc)
                   + np.einsum("ij,jk,ik->i", kappa, sgp.Sigma, kappa))
        np.testing.assert_allclose(mean, mean_ref, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(var, var_ref, rtol=1e-8)


class TestDedupe:
    def test_exact_duplicates_perturbed(self):
        pts = dedupe_points(np.array([0.3, 0.3, 0.7]), 1.0)
        assert len(np.unique(pts)) == 3
        np.testing.assert_allclose(pts[1], 0.3 + 1e-9, rtol=1e-6)

    def test_distinct_points_untouched(self):
        pts = np.array([0.1, 0.4, 0.9])
        np.testing.assert_array_equal(dedupe_points(pts, 1.0), pts)
