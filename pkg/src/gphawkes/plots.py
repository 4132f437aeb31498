"""File-only figure rendering for the CLI (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def intensity_figure(path, grid, curves: dict, events=None):
    """Overlay intensity curves with an optional event rug."""
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    for name, values in curves.items():
        ax.plot(grid, values, label=name)
    if events is not None and len(events):
        ymax = max(np.max(v) for v in curves.values())
        ax.plot(events, np.full(len(events), -0.03 * ymax), "|", color="k",
                markersize=6, label=f"events (n={len(events)})")
    ax.set_xlabel("t")
    ax.set_ylabel("intensity")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def phi_band_figure(path, grid, mu, sd, events=None):
    """Posterior mean of phi with a 95% band."""
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    ax.plot(grid, mu, color="C0", label="posterior mean")
    ax.fill_between(grid, mu - 1.96 * sd, mu + 1.96 * sd, color="C0",
                    alpha=0.25, label="95% band")
    if events is not None and len(events):
        lo = np.min(mu - 1.96 * sd)
        ax.plot(events, np.full(len(events), lo), "|", color="k",
                markersize=6)
    ax.set_xlabel("t")
    ax.set_ylabel("phi")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def qq_figure(path, report):
    """Uniform QQ plot with the 1.36/sqrt(n) confidence band."""
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    theo, emp = report.qq[:, 0], report.qq[:, 1]
    ax.plot([0, 1], [0, 1], color="k", linewidth=0.8)
    ax.plot([0, 1], [report.band, 1 + report.band], "k--", linewidth=0.8)
    ax.plot([0, 1], [-report.band, 1 - report.band], "k--", linewidth=0.8)
    ax.plot(theo, emp, ".", color="C1")
    ax.set_xlim(0, 1)
    ax.set_ylim(-report.band, 1 + report.band)
    ax.set_xlabel("theoretical quantile")
    ax.set_ylabel("empirical quantile")
    ax.set_title(f"KS p = {report.p_value:.3f}", fontsize=9)
    return _finish(fig, path)


def elbo_figure(path, trace):
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.plot(np.arange(1, len(trace) + 1), trace)
    ax.set_xlabel("round")
    ax.set_ylabel("ELBO")
    return _finish(fig, path)


def chain_figure(path, lam_samples, autocorr):
    """Base-rate trace and its autocorrelation."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
    ax1.plot(lam_samples, linewidth=0.7)
    ax1.set_xlabel("retained sweep")
    ax1.set_ylabel("lambda")
    n = min(len(autocorr), 200)
    ax2.bar(np.arange(n), autocorr[:n], width=1.0)
    ax2.set_xlabel("lag")
    ax2.set_ylabel("autocorrelation")
    return _finish(fig, path)
