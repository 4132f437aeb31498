"""Event simulation by Poisson thinning.

Ground truth is built by drawing the background and memory functions from
their GP priors on dense grids; events then come from thinning a rate-lambda
homogeneous process with acceptance probability sigmoid(phi).  The same
thinning loop also simulates from a fitted posterior's predictive intensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import RbfParams, chol_with_jitter, rbf_matrix
from .model import EventSequence, ModelHyper, phi_eval
from .polya_gamma import sigmoid

__all__ = ["GroundTruth", "draw_gp_function", "make_ground_truth",
           "thinning_simulate", "posterior_predictive_simulate",
           "function_grid"]


def function_grid(window: float, lengthscale: float) -> np.ndarray:
    """Dense grid on [0, window] with spacing min(lengthscale/5, window/2000)."""
    spacing = min(lengthscale / 5.0, window / 2000.0)
    n = int(np.ceil(window / spacing)) + 1
    return np.linspace(0.0, window, n)


def draw_gp_function(kernel: RbfParams, grid, rng) -> np.ndarray:
    """One joint zero-mean Gaussian draw with RBF covariance at grid points.

    The grid must be sorted with spacing at most lengthscale/5 so that linear
    interpolation between grid values stays faithful to the drawn function.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be a 1-d array with at least two points")
    gaps = np.diff(grid)
    if np.any(gaps <= 0):
        raise ValueError("grid must be strictly increasing")
    if gaps.max() > kernel.lengthscale / 5.0 + 1e-12:
        raise ValueError(
            f"grid spacing {gaps.max():.3g} too coarse for lengthscale "
            f"{kernel.lengthscale:.3g} (need <= lengthscale/5)")
    cov = rbf_matrix(grid, grid, kernel)
    chol, _ = chol_with_jitter(cov)
    return chol @ rng.standard_normal(grid.size)


@dataclass
class GroundTruth:
    """Grid-sampled background and memory functions plus the intensity bound.

    Function values between grid points are linearly interpolated; memory
    lags beyond ``g_grid`` evaluate to zero.
    """

    s_grid: np.ndarray
    s_values: np.ndarray
    g_grid: np.ndarray
    g_values: np.ndarray
    lam: float
    hyper: ModelHyper
    window: float
    seed: int | None = None

    def __post_init__(self):
        for name in ("s_grid", "s_values", "g_grid", "g_values"):
            setattr(self, name, np.asarray(getattr(self, name),
                                           dtype=np.float64))
        if self.s_values.shape != self.s_grid.shape:
            raise ValueError("s_values must align with s_grid")
        if self.g_values.shape != self.g_grid.shape:
            raise ValueError("g_values must align with g_grid")
        if not self.lam > 0:
            raise ValueError("intensity bound must be positive")
        if self.s_grid[0] > 0 or self.s_grid[-1] < self.window:
            raise ValueError("s grid must cover [0, window]")
        if self.g_grid[0] > 0 or self.g_grid[-1] < self.window:
            raise ValueError("g grid must cover lags up to the window length")

    def s_at(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=np.float64),
                         self.s_grid, self.s_values)

    def g_at(self, lag) -> np.ndarray:
        return np.interp(np.asarray(lag, dtype=np.float64),
                         self.g_grid, self.g_values, right=0.0)

    def phi(self, query, history) -> np.ndarray:
        """phi(t) given a (possibly partial) event history."""
        q = np.atleast_1d(np.asarray(query, dtype=np.float64))
        return phi_eval(self.s_at(q), self.g_at, history, self.hyper.decay, q)

    def intensity(self, query, history) -> np.ndarray:
        return self.lam * sigmoid(self.phi(query, history))


def make_ground_truth(hyper: ModelHyper, lam: float, window: float,
                      rng=None, seed: int | None = None) -> GroundTruth:
    """Draw s and g from their GP priors on dense grids."""
    if rng is None:
        rng = np.random.default_rng(seed)
    s_grid = function_grid(window, hyper.s_params.lengthscale)
    g_grid = function_grid(window, hyper.g_params.lengthscale)
    return GroundTruth(
        s_grid=s_grid,
        s_values=draw_gp_function(hyper.s_params, s_grid, rng),
        g_grid=g_grid,
        g_values=draw_gp_function(hyper.g_params, g_grid, rng),
        lam=float(lam), hyper=hyper, window=float(window), seed=seed)


def _thin(window: float, lam: float, accept_prob_fn, rng) -> np.ndarray:
    """Chronological thinning of a rate-lam homogeneous candidate process.

    ``accept_prob_fn(t, accepted_so_far)`` returns the acceptance probability
    sigma(phi) at candidate time t.
    """
    n_cand = rng.poisson(lam * window)
    candidates = np.sort(rng.uniform(0.0, window, n_cand))
    coins = rng.uniform(size=n_cand)
    accepted: list[float] = []
    for j in range(n_cand):
        p = accept_prob_fn(candidates[j], accepted)
        if coins[j] < p:
            accepted.append(candidates[j])
    return np.asarray(accepted, dtype=np.float64)


def thinning_simulate(gt: GroundTruth, rng) -> EventSequence:
    """Simulate one event sequence from ground-truth functions.

    Candidates arrive as Poisson(lam * window) uniform points, visited in
    time order; each is accepted with probability sigmoid(phi) given the
    events accepted so far.  Rejected candidates leave no trace.
    """

    def accept_prob(t, accepted):
        return sigmoid(gt.phi(t, np.asarray(accepted))[0])

    times = _thin(gt.window, gt.lam, accept_prob, rng)
    return EventSequence(times=times, window=gt.window)


def posterior_predictive_simulate(fitted, rng, window: float | None = None,
                                  function_draw: bool = False,
                                  grid_count: int = 800) -> EventSequence:
    """Simulate events from a fitted posterior's predictive intensity.

    ``fitted`` must expose ``lam_mean``, ``window`` and ``predict_phi(times)
    -> (mean, var)``; with ``function_draw`` it must also provide
    ``draw_phi(times, rng)`` for a joint posterior function draw.  phi is
    evaluated on a dense grid and interpolated at candidate times, so the
    simulated process is doubly-stochastic with a fixed (not self-exciting)
    intensity.
    """
    window = float(fitted.window if window is None else window)
    lam = float(fitted.lam_mean)
    grid = np.linspace(0.0, window, grid_count)
    if function_draw:
        phi_grid = fitted.draw_phi(grid, rng)
    else:
        phi_grid, _ = fitted.predict_phi(grid)

    def accept_prob(t, _accepted):
        return sigmoid(np.interp(t, grid, phi_grid))

    times = _thin(window, lam, accept_prob, rng)
    return EventSequence(times=times, window=window)
