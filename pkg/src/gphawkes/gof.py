"""Goodness-of-fit via the random time change.

Rescaling a point process by its (inferred) intensity turns the event
times into a unit-rate Poisson process; the exponential inter-event
times map onto Uniform(0, 1) through ``z = 1 - exp(-tau)``, where they
can be checked with a one-sample Kolmogorov-Smirnov test and a QQ plot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from .model import EventSequence

__all__ = [
    "GofReport",
    "rescale",
    "ks_uniform_test",
    "qq_data",
    "gof_report",
    "report_from_taus",
    "multivariate_gof",
]

#: 95% confidence band half-width for a uniform QQ plot, scaled by 1/sqrt(n).
BAND_COEFFICIENT = 1.36


@dataclass(frozen=True)
class GofReport:
    """KS test result plus the data needed to draw a QQ plot."""

    taus: np.ndarray
    z: np.ndarray
    statistic: float
    p_value: float
    qq: np.ndarray  # (n, 2) sorted (theoretical, empirical) pairs
    band: float

    def __post_init__(self):
        if np.any((self.z < 0.0) | (self.z > 1.0)):
            raise ValueError("uniform-transformed values must lie in [0, 1]")
        if not 0.0 <= self.statistic <= 1.0:
            raise ValueError("KS statistic must lie in [0, 1]")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value must lie in [0, 1]")
        if np.any(np.diff(self.qq[:, 0]) < 0):
            raise ValueError("QQ pairs must be sorted")

    @property
    def n(self) -> int:
        return self.z.size

    def qq_rows(self) -> np.ndarray:
        """QQ pairs with the confidence band: columns (theoretical,
        empirical, band_lo, band_hi)."""
        theo = self.qq[:, 0]
        return np.column_stack([
            theo, self.qq[:, 1], theo - self.band, theo + self.band,
        ])

    def summary(self) -> str:
        lines = [
            "goodness-of-fit (time-rescaling + KS)",
            f"n_intervals      {self.n}",
            f"ks_statistic     {self.statistic:.6f}",
            f"p_value          {self.p_value:.6f}",
            f"qq_band_halfwidth {self.band:.6f}",
        ]
        return "\n".join(lines)


def rescale(events: EventSequence,
            intensity_fn: Callable[[np.ndarray], np.ndarray],
            quad_resolution: int = 50) -> np.ndarray:
    """Rescaled inter-event times tau_i = integral of the intensity over
    (t_{i-1}, t_i], with t_0 = 0.

    The integral uses a composite trapezoid rule whose node count scales
    with ``quad_resolution`` points per expected event; event times are
    always included as nodes.  The residual interval beyond the last
    event is not returned.
    """
    if quad_resolution < 1:
        raise ValueError("quad_resolution must be positive")
    window = events.window
    times = events.times
    coarse = np.linspace(0.0, window, 1001)
    coarse_vals = np.asarray(intensity_fn(coarse), dtype=np.float64)
    _check_positive(coarse_vals, coarse)
    total = np.trapezoid(coarse_vals, coarse)

    n_pts = max(101, math.ceil(quad_resolution * max(total, 1.0)),
                4 * times.size)
    grid = np.union1d(np.linspace(0.0, window, n_pts), times)
    vals = np.asarray(intensity_fn(grid), dtype=np.float64)
    _check_positive(vals, grid)

    cum = np.concatenate([
        [0.0],
        np.cumsum(0.5 * np.diff(grid) * (vals[1:] + vals[:-1])),
    ])
    idx = np.searchsorted(grid, times)
    cum_at_events = cum[idx]
    return np.diff(cum_at_events, prepend=0.0)


def _check_positive(vals: np.ndarray, grid: np.ndarray) -> None:
    bad = ~(vals > 0.0)
    if np.any(bad):
        where = grid[bad][0]
        raise ValueError(
            f"nonpositive intensity {vals[bad][0]:g} at t={where:g}")


def uniform_transform(taus: np.ndarray) -> np.ndarray:
    """Map unit-rate exponential waiting times onto Uniform(0, 1)."""
    return -np.expm1(-np.asarray(taus, dtype=np.float64))


def _kolmogorov_sf(x: float, terms: int = 100) -> float:
    """Asymptotic Kolmogorov survival function, alternating series."""
    if x <= 0.0:
        return 1.0
    k = np.arange(1, terms + 1)
    signs = np.where(k % 2 == 1, 1.0, -1.0)
    s = 2.0 * np.sum(signs * np.exp(-2.0 * (k * x) ** 2))
    return float(min(1.0, max(0.0, s)))


def ks_uniform_test(z: np.ndarray) -> Tuple[float, float]:
    """One-sample KS statistic and asymptotic p-value against
    Uniform(0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 5:
        raise ValueError("KS test needs at least 5 values")
    if np.any((z <= 0.0) | (z >= 1.0)):
        raise ValueError("KS input values must lie strictly in (0, 1)")
    n = z.size
    order = np.sort(z)
    steps = np.arange(1, n + 1) / n
    d_plus = np.max(steps - order)
    d_minus = np.max(order - (steps - 1.0 / n))
    d = float(max(d_plus, d_minus))
    return d, _kolmogorov_sf(math.sqrt(n) * d)


def qq_data(z: np.ndarray) -> Tuple[np.ndarray, float]:
    """Sorted (theoretical, empirical) quantile pairs and the 95% band
    half-width 1.36/sqrt(n)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 2:
        raise ValueError("QQ data needs at least 2 values")
    n = z.size
    theo = (np.arange(1, n + 1) - 0.5) / n
    pairs = np.column_stack([theo, np.sort(z)])
    return pairs, BAND_COEFFICIENT / math.sqrt(n)


def report_from_taus(taus: np.ndarray) -> GofReport:
    """Assemble a report from rescaled intervals (possibly pooled across
    recordings)."""
    taus = np.asarray(taus, dtype=np.float64)
    z = uniform_transform(taus)
    d, p = ks_uniform_test(z)
    pairs, band = qq_data(z)
    return GofReport(taus=taus, z=z, statistic=d, p_value=p, qq=pairs,
                     band=band)


def gof_report(events: EventSequence,
               intensity_fn: Callable[[np.ndarray], np.ndarray],
               quad_resolution: int = 50) -> GofReport:
    """Full univariate pipeline: rescale, transform, test, QQ data."""
    return report_from_taus(rescale(events, intensity_fn, quad_resolution))


@dataclass(frozen=True)
class MultivariateGof:
    """Per-dimension reports; dimensions with too few events are listed
    in ``skipped`` with a reason instead of failing the run."""

    reports: Dict[int, GofReport] = field(default_factory=dict)
    skipped: Dict[int, str] = field(default_factory=dict)


def multivariate_gof(events: EventSequence,
                     intensity_fns: Sequence[Callable],
                     quad_resolution: int = 50,
                     min_events: int = 5) -> MultivariateGof:
    """Apply the time change independently per event type."""
    reports: Dict[int, GofReport] = {}
    skipped: Dict[int, str] = {}
    for r, fn in enumerate(intensity_fns):
        times = events.label_times(r)
        if times.size < min_events:
            skipped[r] = (f"dimension {r} has {times.size} events; "
                          f"needs {min_events}")
            continue
        sub = EventSequence(times, window=events.window)
        reports[r] = gof_report(sub, fn, quad_resolution)
    return MultivariateGof(reports=reports, skipped=skipped)
