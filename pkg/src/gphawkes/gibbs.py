"""Blocked Gibbs sampler over the augmented posterior.

Each sweep resamples, in order: the PG marks at all observed and latent
points, the intensity bound lambda, the joint phi vector, and the latent
thinned events (wholesale replacement).  Kernel hyperparameters follow
adaptive gradient ascent on the GP prior density of phi, every second sweep
by default.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .gp import GpPosterior, gp_condition, gp_predict
from .kernels import (JITTER_START, AggregatedKernel, chol_with_jitter,
                      kernel_hypergrads, log_gp_prior_grad)
from .model import EventSequence, ModelHyper
from .optim import AdamOptimizer
from .polya_gamma import pg_sample, sigmoid

logger = logging.getLogger(__name__)

__all__ = ["GibbsConfig", "GibbsState", "ChainOutput", "init_state",
           "sample_lambda", "sample_pg_marks", "sample_phi",
           "sample_latent_events", "hyper_gradient_step", "run_chain",
           "autocorrelation"]

_HYPER_NAMES = ("a_s", "sigma_s", "a_g", "sigma_g", "alpha")


@dataclass
class GibbsConfig:
    """Chain length and schedule knobs for :func:`run_chain`."""

    iterations: int
    burn_in: int | None = None
    thin: int = 1
    seed: int = 0
    grid_count: int = 100
    learn_hypers: bool = True
    hyper_every: int = 2
    hyper_lr: float = 1e-2
    grad_average_window: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.burn_in is None:
            self.burn_in = self.iterations // 2
        if not 0 <= self.burn_in <= self.iterations:
            raise ValueError("burn_in must lie in [0, iterations]")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.hyper_every < 1 or self.grad_average_window < 1:
            raise ValueError("schedule intervals must be at least 1")
        if self.grid_count < 2:
            raise ValueError("grid_count must be at least 2")


@dataclass
class GibbsState:
    """Current augmented-model variables of one chain."""

    events: EventSequence
    lam: float
    phi: np.ndarray
    obs_marks: np.ndarray
    latent_marks: np.ndarray
    latent_times: np.ndarray
    hyper: ModelHyper
    iteration: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_obs(self) -> int:
        return len(self.events)

    @property
    def n_latent(self) -> int:
        return self.latent_times.size

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.events.times, self.latent_times])

    @property
    def marks(self) -> np.ndarray:
        return np.concatenate([self.obs_marks, self.latent_marks])

    def validate(self):
        if not self.lam > 0:
            raise ValueError("intensity bound must be positive")
        if self.phi.size != self.n_obs + self.n_latent:
            raise ValueError("phi must cover all observed and latent points")
        if (self.obs_marks.size and self.obs_marks.min() <= 0) or \
                (self.latent_marks.size and self.latent_marks.min() <= 0):
            raise ValueError("PG marks must be positive")
        if self.latent_times.size and (
                self.latent_times.min() < 0
                or self.latent_times.max() > self.events.window):
            raise ValueError("latent times must lie inside the window")


def init_state(events: EventSequence, hyper: ModelHyper, rng) -> GibbsState:
    """Initial augmented state: latent count from the prior-mean intensity,
    latent times uniform, phi from the GP prior, flat marks."""
    t_max = events.window
    lam0 = hyper.lambda_prior.mean
    m0 = int(rng.poisson(lam0 * t_max / 2.0))
    latent_times = np.sort(rng.uniform(0.0, t_max, m0))
    pts = np.concatenate([events.times, latent_times])
    if pts.size:
        kern = AggregatedKernel.univariate(events, hyper)
        chol, _ = chol_with_jitter(kern.matrix(pts))
        phi = chol @ rng.standard_normal(pts.size)
    else:
        phi = np.empty(0)
    return GibbsState(events=events, lam=lam0, phi=phi,
                      obs_marks=np.full(len(events), 0.25),
                      latent_marks=np.full(m0, 0.25),
                      latent_times=latent_times, hyper=hyper)


def sample_lambda(state: GibbsState, rng) -> float:
    """Conditional draw of the bound: Gamma(alpha0 + N + M, beta0 + T)."""
    prior = state.hyper.lambda_prior
    shape = prior.alpha0 + state.n_obs + state.n_latent
    rate = prior.beta0 + state.events.window
    return float(rng.gamma(shape, 1.0 / rate))


def sample_pg_marks(state: GibbsState, rng):
    """Fresh PG(1, |phi|) marks at every observed and latent point."""
    n = state.n_obs
    if state.phi.size == 0:
        return np.empty(0), np.empty(0)
    marks = pg_sample(np.abs(state.phi), rng)
    marks = np.atleast_1d(np.asarray(marks, dtype=np.float64))
    return marks[:n], marks[n:]


def _phi_posterior(state: GibbsState) -> GpPosterior:
    """Gaussian conditional of phi given marks, as diagonal pseudo-evidence.

    Observed points carry evidence mean +1/(2w), latent points -1/(2w), each
    with precision equal to its mark.
    """
    kern = AggregatedKernel.univariate(state.events, state.hyper)
    mean = np.concatenate([+0.5 / state.obs_marks, -0.5 / state.latent_marks])
    return gp_condition(kern, state.points, mean, state.marks)


def sample_phi(state: GibbsState, rng) -> np.ndarray:
    """Joint conditional draw of phi at all observed + latent points."""
    if state.phi.size == 0:
        return np.empty(0)
    return _phi_posterior(state).sample(rng)


def _conditional_draw(anchor: GpPosterior, query, rng):
    """Joint draw of phi at query points given exact values at anchors."""
    query = np.asarray(query, dtype=np.float64)
    if anchor.points.size:
        mu, cov = gp_predict(anchor, query, full_cov=True)
    else:
        mu = np.zeros(query.size)
        cov = anchor.kernel.matrix(query)
    chol, _ = chol_with_jitter(cov)
    return mu + chol @ rng.standard_normal(query.size)


def sample_latent_events(state: GibbsState, rng, _anchor=None):
    """Wholesale replacement of the latent thinned events.

    Candidates arrive as Poisson(lam T) uniform points; phi there is a joint
    GP draw conditioned on phi at the observed + current latent points; each
    candidate is kept with probability sigmoid(-phi) and, if kept, receives a
    fresh PG(1, |phi|) mark.  Returns (times, phi, marks, n_candidates).
    """
    t_max = state.events.window
    n_cand = int(rng.poisson(state.lam * t_max))
    if n_cand == 0:
        return np.empty(0), np.empty(0), np.empty(0), 0
    cand = np.sort(rng.uniform(0.0, t_max, n_cand))
    if _anchor is None:
        _anchor = GpPosterior(
            points=state.points, mean=state.phi, cov=None,
            kernel=AggregatedKernel.univariate(state.events, state.hyper),
            jitter=JITTER_START)
    phi_cand = _conditional_draw(_anchor, cand, rng)
    keep = rng.uniform(size=n_cand) < sigmoid(-phi_cand)
    kept_phi = phi_cand[keep]
    if kept_phi.size:
        marks = np.atleast_1d(np.asarray(
            pg_sample(np.abs(kept_phi), rng), dtype=np.float64))
    else:
        marks = np.empty(0)
    return cand[keep], kept_phi, marks, n_cand


def _hyper_grads(state: GibbsState) -> dict:
    """Gradient of the GP prior log-density of phi w.r.t. the 5 kernel
    hyperparameters, at the current points."""
    hyper = state.hyper
    grads = kernel_hypergrads(state.points, state.events, hyper.s_params,
                              hyper.g_params, hyper.decay)
    ktilde = AggregatedKernel.univariate(state.events, hyper).matrix(
        state.points)
    return log_gp_prior_grad(state.phi, ktilde, grads)


def hyper_gradient_step(state: GibbsState, optimizer: AdamOptimizer,
                        grads: dict | None = None) -> ModelHyper:
    """One ascent step on the kernel hyperparameters; skips on non-finite
    gradients."""
    if grads is None:
        grads = _hyper_grads(state)
    if not all(np.isfinite(v) for v in grads.values()):
        logger.warning("skipping hyperparameter step: non-finite gradient %s",
                       grads)
        return state.hyper
    params = {k: v for k, v in state.hyper.to_dict().items()
              if k in _HYPER_NAMES}
    new = optimizer.ascend(params, grads)
    return state.hyper.with_kernel_params(**new)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation of a scalar sample path (FFT estimator)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        return np.empty(0)
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


@dataclass
class ChainOutput:
    """Retained post-burn-in samples plus diagnostics of one chain."""

    grid: np.ndarray
    lam_samples: np.ndarray
    m_samples: np.ndarray
    phi_grid_samples: np.ndarray
    accept_counts: np.ndarray
    candidate_counts: np.ndarray
    lam_autocorr: np.ndarray
    hyper_iterations: np.ndarray
    hyper_trajectory: np.ndarray
    final_hyper: ModelHyper
    events: EventSequence
    config: GibbsConfig
    _post: GpPosterior | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.lam_samples.size

    @property
    def window(self) -> float:
        return self.events.window

    @property
    def lam_mean(self) -> float:
        return float(self.lam_samples.mean())

    def lambda_interval(self, level: float = 0.9):
        lo = (1.0 - level) / 2.0
        return tuple(np.quantile(self.lam_samples, [lo, 1.0 - lo]))

    def phi_summary(self):
        """Moment-matched Gaussian summary (mean, var) of phi on the grid."""
        mu = self.phi_grid_samples.mean(axis=0)
        ddof = 1 if self.n_samples > 1 else 0
        var = np.maximum(self.phi_grid_samples.var(axis=0, ddof=ddof), 1e-10)
        return mu, var

    def predictor(self, events: EventSequence | None = None) -> GpPosterior:
        """GP posterior anchored on the grid summary, for prediction at new
        times.  Passing an extended event sequence lets the memory part of
        the kernel see events beyond the training window."""
        events = self.events if events is None else events
        kern = AggregatedKernel.univariate(events, self.final_hyper)
        mu, var = self.phi_summary()
        return gp_condition(kern, self.grid, mu, 1.0 / var)

    def predict_phi(self, times):
        """Marginal (mean, var) of phi at arbitrary times."""
        if self._post is None:
            self._post = self.predictor()
        return gp_predict(self._post, times, full_cov=False)

    def draw_phi(self, times, rng):
        """Joint phi draw at arbitrary times from one retained sample."""
        j = int(rng.integers(self.n_samples))
        anchor = GpPosterior(
            points=self.grid, mean=self.phi_grid_samples[j], cov=None,
            kernel=AggregatedKernel.univariate(self.events, self.final_hyper),
            jitter=JITTER_START)
        return _conditional_draw(anchor, np.asarray(times, dtype=np.float64),
                                 rng)


def run_chain(events: EventSequence, hyper: ModelHyper,
              config: GibbsConfig) -> ChainOutput:
    """Run one Gibbs chain: PG marks -> lambda -> phi -> latent events, with
    scheduled hyperparameter ascent, returning retained samples."""
    rng = np.random.default_rng(config.seed)
    state = init_state(events, hyper, rng)
    grid = np.linspace(0.0, events.window, config.grid_count)
    optimizer = AdamOptimizer(lr=config.hyper_lr)
    grad_buffer: deque = deque(maxlen=config.grad_average_window)
    n_obs = len(events)

    lam_out, m_out, phi_out = [], [], []
    accepts = np.zeros(config.iterations, dtype=np.int64)
    cands = np.zeros(config.iterations, dtype=np.int64)
    hyper_iters, hyper_rows = [], []

    for it in range(config.iterations):
        state.iteration = it
        state.obs_marks, state.latent_marks = sample_pg_marks(state, rng)
        state.lam = sample_lambda(state, rng)

        anchor = None
        if state.phi.size:
            post = _phi_posterior(state)
            state.phi = post.sample(rng)
            anchor = GpPosterior(points=post.points, mean=state.phi, cov=None,
                                 kernel=post.kernel, jitter=post.jitter,
                                 _chol_prior=post._chol_prior)
        else:
            anchor = GpPosterior(
                points=np.empty(0), mean=np.empty(0), cov=None,
                kernel=AggregatedKernel.univariate(events, state.hyper),
                jitter=JITTER_START)

        retain = (it >= config.burn_in
                  and (it - config.burn_in) % config.thin == 0)
        if retain:
            phi_out.append(_conditional_draw(anchor, grid, rng))

        new_t, new_phi, new_marks, n_cand = sample_latent_events(
            state, rng, _anchor=anchor)
        state.latent_times = new_t
        state.latent_marks = new_marks
        state.phi = np.concatenate([state.phi[:n_obs], new_phi])
        accepts[it] = new_t.size
        cands[it] = n_cand

        if retain:
            lam_out.append(state.lam)
            m_out.append(state.n_latent)

        if config.learn_hypers and state.phi.size:
            due = (it + 1) % config.hyper_every == 0
            if due or config.grad_average_window > 1:
                grad_buffer.append(_hyper_grads(state))
            if due and grad_buffer:
                avg = {k: float(np.mean([g[k] for g in grad_buffer]))
                       for k in grad_buffer[0]}
                state.hyper = hyper_gradient_step(state, optimizer, grads=avg)
                hyper_iters.append(it)
                hyper_rows.append([state.hyper.to_dict()[k]
                                   for k in _HYPER_NAMES])

    lam_samples = np.asarray(lam_out)
    return ChainOutput(
        grid=grid,
        lam_samples=lam_samples,
        m_samples=np.asarray(m_out, dtype=np.int64),
        phi_grid_samples=(np.asarray(phi_out) if phi_out
                          else np.empty((0, config.grid_count))),
        accept_counts=accepts,
        candidate_counts=cands,
        lam_autocorr=autocorrelation(lam_samples),
        hyper_iterations=np.asarray(hyper_iters, dtype=np.int64),
        hyper_trajectory=(np.asarray(hyper_rows) if hyper_rows
                          else np.empty((0, len(_HYPER_NAMES)))),
        final_hyper=state.hyper,
        events=events,
        config=config)
