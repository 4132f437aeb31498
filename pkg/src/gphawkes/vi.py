"""Mean-field variational inference with a sparse-GP factor for phi.

The factorization is q1(lambda) q1(phi) q2(marks) q2(latent process):
Gamma for the bound, inducing-point Gaussian for phi, tilted PG for the
event marks, and an inhomogeneous Poisson intensity on an integration grid
for the latent events.  All factor updates are closed-form; kernel
hyperparameters follow adaptive gradient ascent on the ELBO.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import digamma, gammaln

from .gp import SparseGp, kernel_block, sparse_predict, sparse_update
from .kernels import AggregatedKernel, chol_with_jitter
from .model import EventSequence, ModelHyper
from .optim import AdamOptimizer
from .polya_gamma import pg_mean

logger = logging.getLogger(__name__)

__all__ = ["ViConfig", "VariationalState", "init_vi_state", "update_q_lambda",
           "update_q_pg", "update_q_latent", "update_q_phi", "elbo",
           "elbo_hypergrads", "hyper_step_vi", "fit"]

_FACTORS = ("phi", "lambda", "pg", "latent")
_HYPER_NAMES = ("a_s", "sigma_s", "a_g", "sigma_g", "alpha")


@dataclass
class ViConfig:
    """Knobs for :func:`fit`."""

    inducing_count: int = 100
    grid_count: int = 1000
    max_rounds: int = 200
    tol: float = 1e-6
    seed: int = 0
    learn_hypers: bool = True
    hyper_lr: float = 1e-2
    update_order: tuple = _FACTORS

    def __post_init__(self):
        self.update_order = tuple(self.update_order)
        if sorted(self.update_order) != sorted(_FACTORS):
            raise ValueError(f"update_order must permute {_FACTORS}")
        if self.inducing_count < 1 or self.grid_count < 2:
            raise ValueError("need at least 1 inducing and 2 grid points")
        if self.max_rounds < 0 or self.tol <= 0:
            raise ValueError("max_rounds must be >= 0 and tol positive")


@dataclass
class VariationalState:
    """All variational parameters plus cached phi moments."""

    events: EventSequence
    hyper: ModelHyper
    config: ViConfig
    sgp: SparseGp
    alpha: float
    beta: float
    tilts: np.ndarray          # c_n at events
    grid: np.ndarray
    quad_w: np.ndarray         # trapezoid weights on the grid
    lambda_q2: np.ndarray      # latent marginal intensity on the grid
    grid_tilts: np.ndarray     # c(t) on the grid
    mu_ev: np.ndarray = field(default=None, repr=False)
    var_ev: np.ndarray = field(default=None, repr=False)
    mu_grid: np.ndarray = field(default=None, repr=False)
    var_grid: np.ndarray = field(default=None, repr=False)
    elbo_trace: list = field(default_factory=list)
    hyper_trajectory: list = field(default_factory=list)
    rounds_run: int = 0

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def window(self) -> float:
        return self.events.window

    @property
    def lam_mean(self) -> float:
        return self.alpha / self.beta

    @property
    def log_lam_mean(self) -> float:
        return float(digamma(self.alpha) - np.log(self.beta))

    @property
    def obs_pg_means(self) -> np.ndarray:
        return pg_mean(self.tilts)

    @property
    def grid_pg_means(self) -> np.ndarray:
        return pg_mean(self.grid_tilts)

    def predict_phi(self, times):
        """Marginal (mean, var) of phi at arbitrary times."""
        return sparse_predict(self.sgp, times)

    def draw_phi(self, times, rng):
        """Joint posterior function draw of phi at arbitrary times."""
        t = np.asarray(times, dtype=np.float64)
        sgp = self.sgp
        k_tc = kernel_block(sgp.kernel, t, sgp.inducing, sgp.jitter)
        kappa = cho_solve((sgp.chol_kc, True), k_tc.T).T
        mean = kappa @ sgp.mu
        cov = (kernel_block(sgp.kernel, t, t, sgp.jitter)
               - kappa @ k_tc.T + kappa @ sgp.Sigma @ kappa.T)
        chol, _ = chol_with_jitter(0.5 * (cov + cov.T))
        return mean + chol @ rng.standard_normal(t.size)


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.full(grid.size, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _refresh_moments(state: VariationalState):
    pts = np.concatenate([state.events.times, state.grid])
    mu, var = sparse_predict(state.sgp, pts)
    n = state.n_events
    state.mu_ev, state.var_ev = mu[:n], var[:n]
    state.mu_grid, state.var_grid = mu[n:], var[n:]


def _rebuild_kernel(state: VariationalState):
    """Reattach the kernel closure after a hyperparameter change, keeping the
    variational parameters (mu_c, Sigma_c) fixed."""
    kern = AggregatedKernel.univariate(state.events, state.hyper)
    chol, jitter = chol_with_jitter(kern.matrix(state.sgp.inducing))
    state.sgp = SparseGp(inducing=state.sgp.inducing, mu=state.sgp.mu,
                         Sigma=state.sgp.Sigma, chol_kc=chol, kernel=kern,
                         jitter=jitter)
    _refresh_moments(state)


def init_vi_state(events: EventSequence, hyper: ModelHyper,
                  config: ViConfig,
                  kernel=None) -> VariationalState:
    """Initial state: q(phi) = prior at the inducing points, flat tilts,
    one latent-intensity pass, and (alpha, beta) = (alpha0 + N, beta0 + T).

    ``kernel`` substitutes the default single-history kernel closure, which
    is how one dimension of a multivariate model is fitted: its closure
    aggregates every dimension's history while ``events`` holds only the
    target dimension's times.
    """
    t_max = events.window
    inducing = np.linspace(0.0, t_max, config.inducing_count + 2)[1:-1]
    grid = np.linspace(0.0, t_max, config.grid_count)
    kern = (AggregatedKernel.univariate(events, hyper) if kernel is None
            else kernel)
    chol, jitter = chol_with_jitter(kern.matrix(inducing))
    sgp = SparseGp(inducing=inducing, mu=np.zeros(inducing.size),
                   Sigma=chol @ chol.T, chol_kc=chol, kernel=kern,
                   jitter=jitter)
    prior = hyper.lambda_prior
    state = VariationalState(
        events=events, hyper=hyper, config=config, sgp=sgp,
        alpha=prior.alpha0 + len(events), beta=prior.beta0 + t_max,
        tilts=np.zeros(len(events)), grid=grid,
        quad_w=_trapezoid_weights(grid),
        lambda_q2=np.zeros(grid.size), grid_tilts=np.zeros(grid.size))
    _refresh_moments(state)
    update_q_latent(state)
    return state


def update_q_lambda(state: VariationalState):
    """Closed-form Gamma update: alpha = alpha0 + N + integral of the latent
    intensity, beta = beta0 + T."""
    integral = float(np.dot(state.quad_w, state.lambda_q2))
    if integral < 0:
        logger.warning("negative latent-intensity quadrature %g clamped to 0",
                       integral)
        integral = 0.0
    prior = state.hyper.lambda_prior
    state.alpha = prior.alpha0 + state.n_events + integral
    state.beta = prior.beta0 + state.window
    return state.alpha, state.beta


def update_q_pg(state: VariationalState) -> np.ndarray:
    """Tilted-PG update at the events: c_n = sqrt(<phi_n^2>)."""
    state.tilts = np.sqrt(state.mu_ev ** 2 + state.var_ev)
    return state.tilts


def _log_2cosh(x: np.ndarray) -> np.ndarray:
    """log(2 cosh(x)) for x >= 0 without overflow."""
    return x + np.log1p(np.exp(-2.0 * x))


def update_q_latent(state: VariationalState) -> np.ndarray:
    """Latent Poisson intensity on the grid:
    Lambda(t) = exp(<ln lambda>) exp(-<phi>/2) / (2 cosh(c/2))."""
    c = np.sqrt(state.mu_grid ** 2 + state.var_grid)
    log_lam = (state.log_lam_mean - 0.5 * state.mu_grid
               - _log_2cosh(0.5 * c))
    state.grid_tilts = c
    state.lambda_q2 = np.exp(log_lam)
    return state.lambda_q2


def update_q_phi(state: VariationalState) -> SparseGp:
    """Sparse-GP update from the accumulated evidence functions
    A(t) = sum_n <w_n> delta + <w(t)> Lambda(t) and
    b(t) = sum_n 1/2 delta - Lambda(t)/2."""
    ev = state.events.times
    a_weights = np.concatenate([state.obs_pg_means,
                                state.grid_pg_means * state.lambda_q2])
    b_weights = np.concatenate([np.full(ev.size, 0.5),
                                -0.5 * state.lambda_q2])
    eval_pts = np.concatenate([ev, state.grid])
    quad_w = np.concatenate([np.ones(ev.size), state.quad_w])
    state.sgp = sparse_update(state.sgp.kernel, state.sgp.inducing,
                              a_weights, b_weights, eval_pts, quad_w)
    _refresh_moments(state)
    return state.sgp


def _kl_gamma(alpha, beta, alpha0, beta0) -> float:
    return float((alpha - alpha0) * digamma(alpha) - gammaln(alpha)
                 + gammaln(alpha0) + alpha0 * (np.log(beta) - np.log(beta0))
                 + alpha * (beta0 - beta) / beta)


def _kl_gp(state: VariationalState) -> float:
    """KL(q(phi_c) || prior) at the inducing points, on the jittered kernel."""
    chol = state.sgp.chol_kc
    mu, sigma = state.sgp.mu, state.sgp.Sigma
    q = mu.size
    kinv_sigma = cho_solve((chol, True), sigma)
    maha = float(mu @ cho_solve((chol, True), mu))
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(chol))))
    sign, logdet_s = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise FloatingPointError("variational covariance not positive definite")
    return 0.5 * (np.trace(kinv_sigma) + maha - q + logdet_k - logdet_s)


def elbo(state: VariationalState) -> float:
    """Evidence lower bound at the current variational parameters.

    Event terms are exact; latent-process terms are trapezoid quadrature of
    Lambda(t) [ <ln lambda> - <w> <phi^2>/2 - <phi>/2 - ln 2
                - ln cosh(c/2) + c^2 <w>/2 - ln Lambda(t) + 1 ].
    """
    e_loglam = state.log_lam_mean
    # observed events: likelihood + PG-tilt correction
    w_ev = state.obs_pg_means
    phi2_ev = state.mu_ev ** 2 + state.var_ev
    ev_terms = (e_loglam - np.log(2.0) + 0.5 * state.mu_ev
                - 0.5 * w_ev * phi2_ev
                - (_log_2cosh(0.5 * state.tilts) - np.log(2.0))
                + 0.5 * state.tilts ** 2 * w_ev)
    # latent process on the grid
    w_g = state.grid_pg_means
    phi2_g = state.mu_grid ** 2 + state.var_grid
    lam1 = state.lambda_q2
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam1 = np.where(lam1 > 0, np.log(np.where(lam1 > 0, lam1, 1.0)),
                            0.0)
    bracket = (e_loglam - np.log(2.0) - 0.5 * state.mu_grid
               - 0.5 * w_g * phi2_g
               - (_log_2cosh(0.5 * state.grid_tilts) - np.log(2.0))
               + 0.5 * state.grid_tilts ** 2 * w_g
               - log_lam1 + 1.0)
    latent_term = float(np.dot(state.quad_w, lam1 * bracket))
    prior = state.hyper.lambda_prior
    return (float(np.sum(ev_terms)) + latent_term
            - state.lam_mean * state.window
            - _kl_gamma(state.alpha, state.beta, prior.alpha0, prior.beta0)
            - _kl_gp(state))


def elbo_hypergrads(state: VariationalState) -> dict:
    """d ELBO / d theta for the 5 kernel hyperparameters, at fixed
    variational parameters.

    Only the phi moments and the GP KL depend on the kernel:
    d ELBO = sum_ev [dm/2 - (<w>/2) d<phi^2>]
           + sum_grid q Lambda [-dm/2 - (<w>/2) d<phi^2>]
           + 1/2 tr[(K_c^-1 (Sigma + mu mu^T) K_c^-1 - K_c^-1) dK_c].
    """
    sgp = state.sgp
    kern = sgp.kernel
    ind = sgp.inducing
    pts = np.concatenate([state.events.times, state.grid])
    n = state.n_events

    chol = sgp.chol_kc
    k_xc = kernel_block(kern, pts, ind, sgp.jitter)
    kappa = cho_solve((chol, True), k_xc.T).T          # P x Q
    kinv_mu = cho_solve((chol, True), sgp.mu)
    sig_kinv = cho_solve((chol, True), sgp.Sigma).T    # Sigma K_c^-1
    w2 = kappa @ sig_kinv                              # kappa Sigma K_c^-1
    m = kappa @ sgp.mu

    # coefficient of dm and of d<phi^2> at each evaluation point
    coef_m = np.concatenate([np.full(n, 0.5),
                             -0.5 * state.quad_w * state.lambda_q2])
    coef_p2 = np.concatenate([
        -0.5 * state.obs_pg_means,
        -0.5 * state.quad_w * state.lambda_q2 * state.grid_pg_means])

    kinv = cho_solve((chol, True), np.eye(ind.size))
    a_kl = kinv @ (sgp.Sigma + np.outer(sgp.mu, sgp.mu)) @ kinv - kinv

    s_gc, mem_gc = kern.grads(ind)
    s_gx, mem_gx = kern.grads(pts, ind)
    sd_g, memd_g = kern.grads_diag(pts)
    per_theta = {}
    for name in _HYPER_NAMES:
        if name in ("a_s", "sigma_s"):
            dkc, dkx, dkd = s_gc[name], s_gx[name], sd_g[name]
        else:
            dkc, dkx, dkd = (mem_gc[0][name], mem_gx[0][name],
                             memd_g[0][name])
        t1 = dkx - kappa @ dkc                          # P x Q
        dm = t1 @ kinv_mu
        dvar = (dkd - 2.0 * np.einsum("pq,pq->p", kappa, dkx)
                + np.einsum("pq,qr,pr->p", kappa, dkc, kappa, optimize=True)
                + 2.0 * np.einsum("pq,pq->p", t1, w2))
        dphi2 = 2.0 * m * dm + dvar
        per_theta[name] = (float(np.dot(coef_m, dm))
                           + float(np.dot(coef_p2, dphi2))
                           + 0.5 * float(np.sum(a_kl * dkc)))
    return per_theta


def hyper_step_vi(state: VariationalState, optimizer: AdamOptimizer,
                  grads: dict | None = None) -> ModelHyper:
    """One ascent step on the kernel hyperparameters; skips on non-finite
    gradients.  The kernel closure is rebuilt around the new values."""
    if grads is None:
        grads = elbo_hypergrads(state)
    if not all(np.isfinite(v) for v in grads.values()):
        logger.warning("skipping VI hyperparameter step: non-finite gradient "
                       "%s", grads)
        return state.hyper
    params = {k: v for k, v in state.hyper.to_dict().items()
              if k in _HYPER_NAMES}
    new = optimizer.ascend(params, grads)
    state.hyper = state.hyper.with_kernel_params(**new)
    _rebuild_kernel(state)
    return state.hyper


_UPDATES = {
    "phi": update_q_phi,
    "lambda": update_q_lambda,
    "pg": update_q_pg,
    "latent": update_q_latent,
}


def fit(events: EventSequence, hyper: ModelHyper,
        config: ViConfig | None = None, kernel=None) -> VariationalState:
    """Coordinate-ascent VI until the relative ELBO change drops below tol.

    Factor updates run in ``config.update_order`` each round, optionally
    followed by one hyperparameter ascent step; the ELBO trace is recorded
    per round.
    """
    config = ViConfig() if config is None else config
    if (kernel is not None and config.learn_hypers
            and len(kernel.contributions) > 1):
        raise ValueError(
            "hyperparameter learning is not supported for coupled "
            "multivariate kernels; set learn_hypers=False")
    state = init_vi_state(events, hyper, config, kernel=kernel)
    optimizer = AdamOptimizer(lr=config.hyper_lr)
    previous = None
    for _ in range(config.max_rounds):
        for factor in config.update_order:
            _UPDATES[factor](state)
        if config.learn_hypers:
            hyper_step_vi(state, optimizer)
            state.hyper_trajectory.append(
                [state.hyper.to_dict()[k] for k in _HYPER_NAMES])
        value = elbo(state)
        state.elbo_trace.append(value)
        state.rounds_run += 1
        if previous is not None and abs(value - previous) < config.tol * abs(value):
            break
        previous = value
    return state


def fit_multivariate(events: EventSequence, model,
                     config: ViConfig | None = None) -> list:
    """Mean-field fit of every dimension of a multivariate model.

    Conditioned on the observed histories the dimensions factorize, so
    each is an independent univariate problem whose kernel closure
    aggregates all R histories; element r of the returned list is the
    fitted state for dimension r.
    """
    config = ViConfig() if config is None else config
    states = []
    for r in range(model.n_dims):
        sub = EventSequence(events.label_times(r), window=events.window)
        states.append(fit(sub, model.dimension_hyper(r), config,
                          kernel=model.dimension_kernel(r, events)))
    return states
