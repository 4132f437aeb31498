"""Model definition: event sequences, hyperparameters, intensities, likelihood.

The observed process has bounded intensity Lambda(t) = lambda * sigmoid(phi(t))
with linear intensity phi(t) = s(t) + sum_{t_n < t} g(t - t_n) e^{-alpha (t - t_n)}.
An event influences only strictly later times.  In the multivariate model each
dimension r has its own background s^r and bound lambda^r, and sums memory
terms over all source dimensions m with pairwise (g_{r,m}, alpha_{r,m}).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .kernels import AggregatedKernel, DecayParam, RbfParams
from .polya_gamma import sigmoid

logger = logging.getLogger(__name__)

__all__ = ["EventSequence", "GammaPrior", "ModelHyper", "MultivariateModel",
           "phi_eval", "intensity", "log_likelihood", "multivariate_phi",
           "gauss_hermite_sigmoid_mean", "predictive_intensity",
           "heldout_log_likelihood"]


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(alpha0, beta0) prior on the intensity bound."""

    alpha0: float
    beta0: float

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("Gamma prior parameters must be positive")

    @property
    def mean(self) -> float:
        return self.alpha0 / self.beta0


@dataclass(frozen=True)
class ModelHyper:
    """All hyperparameters of the univariate model."""

    s_params: RbfParams
    g_params: RbfParams
    decay: DecayParam
    lambda_prior: GammaPrior

    def to_dict(self) -> dict:
        return {
            "a_s": self.s_params.amplitude,
            "sigma_s": self.s_params.lengthscale,
            "a_g": self.g_params.amplitude,
            "sigma_g": self.g_params.lengthscale,
            "alpha": self.decay.alpha,
            "alpha0": self.lambda_prior.alpha0,
            "beta0": self.lambda_prior.beta0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHyper":
        return cls(
            s_params=RbfParams(float(d["a_s"]), float(d["sigma_s"])),
            g_params=RbfParams(float(d["a_g"]), float(d["sigma_g"])),
            decay=DecayParam(float(d["alpha"])),
            lambda_prior=GammaPrior(float(d["alpha0"]), float(d["beta0"])),
        )

    def with_kernel_params(self, a_s=None, sigma_s=None, a_g=None,
                           sigma_g=None, alpha=None) -> "ModelHyper":
        return ModelHyper(
            s_params=RbfParams(a_s if a_s is not None else self.s_params.amplitude,
                               sigma_s if sigma_s is not None else self.s_params.lengthscale),
            g_params=RbfParams(a_g if a_g is not None else self.g_params.amplitude,
                               sigma_g if sigma_g is not None else self.g_params.lengthscale),
            decay=DecayParam(alpha if alpha is not None else self.decay.alpha),
            lambda_prior=self.lambda_prior,
        )


@dataclass
class EventSequence:
    """Sorted event times in [0, window], with optional integer type labels."""

    times: np.ndarray
    window: float
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.ascontiguousarray(self.times, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.times.shape:
                raise ValueError("labels must align with times")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative integers")
        if not (self.window > 0):
            raise ValueError(f"window must be positive, got {self.window}")
        if self.times.size:
            if self.times.min() < 0:
                raise ValueError("event times must be non-negative")
            if self.times.max() > self.window:
                raise ValueError(
                    f"event time {self.times.max()} exceeds window {self.window}")
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("event times must be strictly increasing; "
                                 "use EventSequence.from_raw to canonicalize")

    @classmethod
    def from_raw(cls, times, window, labels=None) -> "EventSequence":
        """Sort, validate and deduplicate raw event times.

        Exact duplicates are shifted forward by 1e-9 * window (logged), so
        coincident rows in real data do not produce a singular kernel.
        """
        times = np.asarray(times, dtype=np.float64).ravel()
        order = np.argsort(times, kind="stable")
        times = times[order].copy()
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).ravel()[order].copy()
        bumped = 0
        for i in range(1, times.size):
            if times[i] <= times[i - 1]:
                times[i] = times[i - 1] + 1e-9 * window
                bumped += 1
        if bumped:
            logger.info("perturbed %d duplicate event times by %.1e",
                        bumped, 1e-9 * window)
        return cls(times=times, window=float(window), labels=labels)

    def __len__(self) -> int:
        return self.times.size

    @property
    def n_dims(self) -> int:
        if self.labels is None:
            return 1
        return int(self.labels.max(initial=-1)) + 1

    def label_times(self, r: int) -> np.ndarray:
        if self.labels is None:
            if r != 0:
                raise ValueError("unlabeled sequence has only dimension 0")
            return self.times
        return self.times[self.labels == r]

    def restricted(self, t_start: float, t_end: float) -> "EventSequence":
        """Events in (t_start, t_end], re-windowed to t_end."""
        keep = (self.times > t_start) & (self.times <= t_end)
        return EventSequence(times=self.times[keep], window=float(t_end),
                            labels=None if self.labels is None
                            else self.labels[keep])


@dataclass
class MultivariateModel:
    """Per-dimension hyperparameters of the R-dimensional model.

    ``memory[r][m]`` holds the (RbfParams, DecayParam) pair for the influence
    of source dimension m on target dimension r.
    """

    s_params: list
    lambda_priors: list
    memory: list  # R x R nested list of (RbfParams, DecayParam)

    def __post_init__(self):
        r = len(self.s_params)
        if not (len(self.lambda_priors) == len(self.memory) == r):
            raise ValueError("per-dimension parameter lists must agree in length")
        for row in self.memory:
            if len(row) != r:
                raise ValueError("memory grid must be R x R")
        if r < 1:
            raise ValueError("need at least one dimension")

    @property
    def n_dims(self) -> int:
        return len(self.s_params)

    def dimension_hyper(self, r: int) -> ModelHyper:
        """ModelHyper view of dimension r's own-dimension parameters."""
        g, d = self.memory[r][r]
        return ModelHyper(s_params=self.s_params[r], g_params=g, decay=d,
                          lambda_prior=self.lambda_priors[r])

    def dimension_kernel(self, r: int, events: EventSequence) -> AggregatedKernel:
        """Aggregated kernel of phi^r given every dimension's history."""
        contribs = [(events.label_times(m),) + tuple(self.memory[r][m])
                    for m in range(self.n_dims)]
        return AggregatedKernel(self.s_params[r], contribs,
                                window=events.window)

    @classmethod
    def univariate(cls, hyper: ModelHyper) -> "MultivariateModel":
        return cls(s_params=[hyper.s_params],
                   lambda_priors=[hyper.lambda_prior],
                   memory=[[(hyper.g_params, hyper.decay)]])


def phi_eval(s_values, g_function, history, decay: DecayParam, query) -> np.ndarray:
    """Linear intensity at query times: s plus the decayed memory sum.

    ``s_values`` are the background values at the query times; ``g_function``
    maps an array of lags to memory-function values.
    """
    q = np.asarray(query, dtype=np.float64)
    s_values = np.asarray(s_values, dtype=np.float64)
    if s_values.shape != q.shape:
        raise ValueError("s_values must align with query times")
    hist = np.asarray(getattr(history, "times", history), dtype=np.float64)
    out = s_values.copy()
    if hist.size:
        lag = q[:, None] - hist[None, :]
        active = lag > 0
        safe = np.where(active, lag, 0.0)
        g = np.asarray(g_function(safe), dtype=np.float64)
        if np.any(~np.isfinite(g[active])):
            raise ValueError("memory function returned non-finite values at "
                             "required lags")
        out += np.sum(np.where(active, g * np.exp(-decay.alpha * safe), 0.0),
                      axis=1)
    return out


def intensity(phi, lam: float) -> np.ndarray:
    """Bounded intensity lambda * sigmoid(phi), elementwise."""
    if not lam > 0:
        raise ValueError("intensity bound must be positive")
    return lam * sigmoid(np.asarray(phi, dtype=np.float64))


def log_likelihood(events: EventSequence, intensity_fn, quad_grid) -> float:
    """Point-process log-likelihood sum log Lambda(t_n) - integral of Lambda.

    The integral is a quadrature estimate on the supplied (points, weights)
    grid.  Returns -inf (with a logged diagnostic) if the intensity is not
    strictly positive at some event.
    """
    pts, wts = quad_grid
    lam_ev = np.asarray(intensity_fn(events.times), dtype=np.float64)
    if events.times.size and lam_ev.min() <= 0:
        bad = events.times[int(np.argmin(lam_ev))]
        logger.warning("nonpositive intensity at event time %g", bad)
        return -np.inf
    integral = float(np.dot(np.asarray(intensity_fn(pts)), wts))
    return float(np.sum(np.log(lam_ev)) - integral)


def multivariate_phi(r: int, events: EventSequence, memory_functions,
                     decays, s_values, query) -> np.ndarray:
    """Linear intensity of dimension r with memory summed over all sources.

    ``memory_functions[m]`` and ``decays[m]`` give the lag response and
    forgetting rate of source dimension m acting on target r.
    """
    if events.labels is None and r != 0:
        raise ValueError("labeled events required for multivariate evaluation")
    n_dims = events.n_dims
    if len(memory_functions) != n_dims or len(decays) != n_dims:
        raise ValueError(f"need one (g, alpha) pair per source dimension "
                         f"({n_dims}), got {len(memory_functions)}")
    out = np.asarray(s_values, dtype=np.float64).copy()
    for m in range(n_dims):
        out = phi_eval(out, memory_functions[m], events.label_times(m),
                       decays[m], query)
        out = np.asarray(out)
    return out


_GH_NODES = {}


def _gh(n):
    if n not in _GH_NODES:
        _GH_NODES[n] = hermgauss(n)
    return _GH_NODES[n]


def gauss_hermite_sigmoid_mean(mu, var, n_nodes: int = 20) -> np.ndarray:
    """E[sigmoid(phi)] for phi ~ N(mu, var), by Gauss-Hermite quadrature."""
    x, w = _gh(n_nodes)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sd = np.sqrt(np.maximum(np.atleast_1d(np.asarray(var, dtype=np.float64)),
                            0.0))
    vals = sigmoid(mu[:, None] + np.sqrt(2.0) * sd[:, None] * x[None, :])
    return vals @ w / np.sqrt(np.pi)


def predictive_intensity(lam_mean: float, mu, var, n_nodes: int = 20):
    """Plug-in predictive intensity E[lambda] * E[sigmoid(phi)] pointwise."""
    return lam_mean * gauss_hermite_sigmoid_mean(mu, var, n_nodes)


def heldout_log_likelihood(test_events: EventSequence, t_start: float,
                        t_end: float, lam_mean: float, predict_fn,
                        n_quad: int = 400):
    """Held-out log-likelihood under the plug-in predictive intensity.

    ``predict_fn(times) -> (mean, var)`` supplies Gaussian marginals of phi.
    Returns (total, per_event) over events in (t_start, t_end].
    """
    inside = test_events.times[(test_events.times > t_start)
                               & (test_events.times <= t_end)]
    if inside.size == 0:
        raise ValueError("no test events inside the evaluation window")
    grid = np.linspace(t_start, t_end, n_quad)
    wts = np.full(n_quad, (t_end - t_start) / (n_quad - 1))
    wts[0] *= 0.5
    wts[-1] *= 0.5
    mu_g, var_g = predict_fn(grid)
    integral = float(np.dot(predictive_intensity(lam_mean, mu_g, var_g), wts))
    mu_e, var_e = predict_fn(inside)
    lam_at_events = predictive_intensity(lam_mean, mu_e, var_e)
    total = float(np.sum(np.log(lam_at_events)) - integral)
    return total, total / inside.size
