"""Gaussian-process linear algebra shared by the samplers and the VI loop.

Conventions used throughout:

* The model covariance is the kernel closure plus iid noise ``jitter`` on
  exactly coincident points, so every square block passed to a solver is the
  jittered matrix and cross blocks pick up the noise only where a row point
  equals a column point.  This keeps the dense and sparse paths consistent to
  solver precision instead of O(jitter).
* All solves go through Cholesky; explicit inverses live only in test oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import JITTER_START, chol_with_jitter

logger = logging.getLogger(__name__)

__all__ = ["GpPosterior", "SparseGp", "gp_condition", "gp_predict",
           "sparse_update", "sparse_predict"]


def _as_points(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def kernel_block(kernel, rows, cols, jitter):
    """Kernel matrix with the noise term added at exactly coincident points."""
    mat = kernel.matrix(rows, None if cols is rows else cols)
    if jitter:
        mat[np.equal.outer(rows, cols)] += jitter
    return mat


def dedupe_points(points, scale):
    """Shift exact duplicates forward by 1e-9 * scale, preserving order."""
    pts = _as_points(points).copy()
    order = np.argsort(pts, kind="stable")
    sorted_pts = pts[order]
    bumped = False
    for i in range(1, sorted_pts.size):
        if sorted_pts[i] <= sorted_pts[i - 1]:
            sorted_pts[i] = sorted_pts[i - 1] + 1e-9 * scale
            bumped = True
    if bumped:
        logger.info("duplicate evaluation points perturbed by %.1e", 1e-9 * scale)
        pts[order] = sorted_pts
    return pts


@dataclass
class GpPosterior:
    """Gaussian posterior over phi at a fixed set of anchor points.

    ``cov=None`` marks a degenerate posterior (exact function values at the
    anchors), used when conditioning on an already-drawn phi vector.
    """

    points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray | None
    kernel: object
    jitter: float = JITTER_START
    _chol_prior: np.ndarray | None = field(default=None, repr=False)
    _sqrt_prec: np.ndarray | None = field(default=None, repr=False)
    _chol_b: np.ndarray | None = field(default=None, repr=False)
    _evidence_mean: np.ndarray | None = field(default=None, repr=False)

    def prior_chol(self):
        if self._chol_prior is None:
            self._chol_prior, self.jitter = chol_with_jitter(
                self.kernel.matrix(self.points))
        return self._chol_prior

    def sample(self, rng) -> np.ndarray:
        """One joint draw from the posterior (Matheron update of a prior draw)."""
        if self.cov is None:
            return self.mean.copy()
        if self._sqrt_prec is None:
            raise ValueError("posterior was not built by gp_condition; "
                             "sample from its covariance directly")
        L = self.prior_chol()
        n = self.points.size
        prior_draw = L @ rng.standard_normal(n)
        noise = np.where(self._sqrt_prec > 0, rng.standard_normal(n), 0.0)
        v = self._sqrt_prec * (self._evidence_mean - prior_draw) - noise
        w = cho_solve((self._chol_b, True), v)
        return prior_draw + (L @ (L.T @ (self._sqrt_prec * w)))


@dataclass
class SparseGp:
    """Inducing-point Gaussian q(phi_c) = N(mu, Sigma) under a kernel closure."""

    inducing: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    chol_kc: np.ndarray
    kernel: object
    jitter: float = JITTER_START


def gp_condition(prior_kernel, evidence_points, evidence_mean,
                 evidence_precision_diag) -> GpPosterior:
    """Combine the GP prior with diagonal-precision Gaussian pseudo-evidence.

    Posterior covariance (K^-1 + W)^-1 and mean (K^-1 + W)^-1 W m, computed
    through B = I + W^1/2 K W^1/2 so that zero precisions are harmless.
    """
    pts = _as_points(evidence_points)
    scale = max(float(pts.max(initial=0.0)), 1.0)
    pts = dedupe_points(pts, scale)
    m = np.asarray(evidence_mean, dtype=np.float64)
    w = np.asarray(evidence_precision_diag, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("evidence precisions must be non-negative")
    if not (pts.shape == m.shape == w.shape):
        raise ValueError("points, means and precisions must share a shape")
    L, jitter = chol_with_jitter(prior_kernel.matrix(pts))
    kj = L @ L.T
    sw = np.sqrt(w)
    b = np.eye(pts.size) + sw[:, None] * kj * sw[None, :]
    lb = np.linalg.cholesky(b)
    half = solve_triangular(lb, sw[:, None] * kj, lower=True)
    cov = kj - half.T @ half
    m_safe = np.where(w > 0, m, 0.0)
    # mean = Sigma W m, in the cancellation-free form K W^1/2 B^-1 W^1/2 m
    mean = kj @ (sw * cho_solve((lb, True), sw * m_safe))
    return GpPosterior(points=pts, mean=mean, cov=cov, kernel=prior_kernel,
                       jitter=jitter, _chol_prior=L, _sqrt_prec=sw,
                       _chol_b=lb, _evidence_mean=np.where(w > 0, m, 0.0))


def gp_predict(post: GpPosterior, query_points, full_cov=True):
    """Predictive Gaussian at query points given a posterior at anchors.

    Returns ``(mean, cov)`` or ``(mean, var)`` when ``full_cov=False``.
    A degenerate posterior (``cov=None``) conditions on exact anchor values.
    """
    q = _as_points(query_points)
    L = post.prior_chol()
    k_qa = kernel_block(post.kernel, q, post.points, post.jitter)
    alpha = cho_solve((L, True), post.mean)
    mean = k_qa @ alpha
    s1 = solve_triangular(L, k_qa.T, lower=True)
    if post.cov is not None:
        t2 = solve_triangular(L.T, s1, lower=False)
    if full_cov:
        k_qq = kernel_block(post.kernel, q, q, post.jitter)
        cov = k_qq - s1.T @ s1
        if post.cov is not None:
            cov = cov + t2.T @ post.cov @ t2
        return mean, cov
    var = post.kernel.diag(q) + post.jitter - np.einsum("aq,aq->q", s1, s1)
    if post.cov is not None:
        var = var + np.einsum("aq,ab,bq->q", t2, post.cov, t2, optimize=True)
    return mean, _clamp_variances(var)


def _clamp_variances(var):
    floor = var.min(initial=0.0)
    if floor < -1e-10:
        raise FloatingPointError(f"negative predictive variance {floor}")
    if floor < 0:
        logger.warning("clamping tiny negative predictive variances (%.2e)", floor)
        var = np.maximum(var, 0.0)
    return var


def sparse_update(kernel, inducing, A_weights, b_weights, eval_points,
                  quad_weights) -> SparseGp:
    """Inducing-point update from weighted evidence accumulated over a grid.

    Sigma_c = [sum_p q_p A_p kappa(t_p)^T kappa(t_p) + K_c^-1]^-1 and
    mu_c = Sigma_c sum_p q_p b_p kappa(t_p)^T, with kappa(t) = k_c(t)^T K_c^-1.
    Delta terms carry quadrature weight 1; grid terms carry trapezoid weights.
    """
    c = _as_points(inducing)
    t = _as_points(eval_points)
    a = np.asarray(A_weights, dtype=np.float64)
    b = np.asarray(b_weights, dtype=np.float64)
    qw = np.asarray(quad_weights, dtype=np.float64)
    if a.min(initial=0.0) < -1e-12:
        raise ValueError("A weights must be non-negative")
    a = np.maximum(a, 0.0)
    L, jitter = chol_with_jitter(kernel.matrix(c))
    k_tc = kernel_block(kernel, t, c, jitter)
    kappa = cho_solve((L, True), k_tc.T).T
    wa = qw * a
    p_mat = kappa.T @ (wa[:, None] * kappa)
    m = np.eye(c.size) + L.T @ p_mat @ L
    lm = np.linalg.cholesky(m)
    x = solve_triangular(lm, L.T, lower=True)
    sigma = x.T @ x
    mu = sigma @ (kappa.T @ (qw * b))
    return SparseGp(inducing=c, mu=mu, Sigma=sigma, chol_kc=L, kernel=kernel,
                    jitter=jitter)


def sparse_predict(sgp: SparseGp, t):
    """Marginal mean and variance of phi at each query time.

    mean = kappa mu_c and var = K(t,t) - kappa k_c + kappa Sigma_c kappa^T,
    evaluated pointwise.
    """
    q = _as_points(t)
    k_tc = kernel_block(sgp.kernel, q, sgp.inducing, sgp.jitter)
    kappa = cho_solve((sgp.chol_kc, True), k_tc.T).T
    mean = kappa @ sgp.mu
    var = (sgp.kernel.diag(q) + sgp.jitter
           - np.einsum("ij,ij->i", kappa, k_tc)
           + np.einsum("ij,jk,ik->i", kappa, sgp.Sigma, kappa, optimize=True))
    return mean, _clamp_variances(var)
