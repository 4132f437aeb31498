"""Exact Polya-Gamma sampling and moments for the sigmoid augmentation.

Draws PG(1, c) by the alternating-series rejection method (tilted-Jacobi
proposal split at 0.64 into a truncated inverse-Gaussian body and an
exponential tail), vectorized over numpy masks so the Gibbs sweeps can refresh
every mark in one call.  Also provides the closed-form mean tanh(c/2)/(2c)
and the Monte-Carlo check of the identity

    sigmoid(phi) = int_0^inf exp(f(w, phi)) PG(w; 1, 0) dw,
    f(w, phi) = -phi^2 w / 2 + phi / 2 - ln 2,

which is what makes the whole augmentation tick.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_ndtr

__all__ = ["pg_sample", "pg_mean", "sigmoid", "log_f", "sigmoid_identity_check"]

_TRUNC = 0.64
_LOG2 = np.log(2.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    return expit(x)


def log_f(w, phi):
    """The Gaussian-in-phi exponent of the augmentation: -phi^2 w/2 + phi/2 - ln 2."""
    return -0.5 * phi * phi * w + 0.5 * phi - _LOG2


def pg_mean(c):
    """E[w] for w ~ PG(1, c): tanh(c/2) / (2c), with the c -> 0 limit 1/4.

    Below |c| = 1e-6 the Taylor expansion 1/4 - c^2/48 + c^4/480 is used to
    avoid 0/0; the truncation error there is below 1e-13.
    """
    c_arr = np.asarray(c, dtype=np.float64)
    scalar = c_arr.ndim == 0
    c_arr = np.atleast_1d(c_arr)
    out = np.empty_like(c_arr)
    small = np.abs(c_arr) < 1e-6
    cs = c_arr[small]
    out[small] = 0.25 - cs * cs / 48.0 + cs**4 / 480.0
    cb = c_arr[~small]
    out[~small] = np.tanh(0.5 * cb) / (2.0 * cb)
    return float(out[0]) if scalar else out


def _series_coef(n, x):
    """n-th coefficient of the alternating density series, piecewise in x."""
    half = n + 0.5
    left = x <= _TRUNC
    out = np.empty_like(x)
    xl = x[left]
    out[left] = np.pi * half * (2.0 / (np.pi * xl)) ** 1.5 * np.exp(
        -2.0 * half * half / xl)
    xr = x[~left]
    out[~left] = np.pi * half * np.exp(-0.5 * half * half * np.pi**2 * xr)
    return out


def _series_accept(x, rng):
    """Alternating-series squeeze: True where the proposal x is accepted."""
    s = _series_coef(0, x)
    y = rng.random(x.size) * s
    accept = np.zeros(x.size, dtype=bool)
    undecided = np.ones(x.size, dtype=bool)
    n = 0
    while undecided.any():
        n += 1
        idx = np.flatnonzero(undecided)
        coef = _series_coef(n, x[idx])
        if n % 2 == 1:
            s[idx] -= coef
            hit = y[idx] <= s[idx]
            accept[idx[hit]] = True
        else:
            s[idx] += coef
            hit = y[idx] > s[idx]
        undecided[idx[hit]] = False
    return accept


def _trunc_inv_gauss(z, rng):
    """Inverse-Gaussian(mu=1/z, lambda=1) truncated to (0, _TRUNC], vectorized."""
    t = _TRUNC
    x = np.empty(z.size)
    small = z < 1.0 / t
    # mu > t: one-sided stable proposal with an exp(-z^2 x / 2) thinning
    pending = np.flatnonzero(small)
    while pending.size:
        m = pending.size
        e1 = rng.exponential(size=m)
        e2 = rng.exponential(size=m)
        ok = e1 * e1 <= 2.0 * e2 / t
        cand = t / (1.0 + t * e1) ** 2
        zp = z[pending]
        ok &= rng.random(m) <= np.exp(-0.5 * zp * zp * cand)
        x[pending[ok]] = cand[ok]
        pending = pending[~ok]
    # mu <= t: plain inverse-Gaussian draws, retried until inside the window
    pending = np.flatnonzero(~small)
    while pending.size:
        m = pending.size
        mu = 1.0 / z[pending]
        y = rng.normal(size=m) ** 2
        muy = mu * y
        cand = mu + 0.5 * mu * muy - 0.5 * mu * np.sqrt(4.0 * muy + muy * muy)
        flip = rng.random(m) > mu / (mu + cand)
        cand[flip] = mu[flip] ** 2 / cand[flip]
        ok = cand <= t
        x[pending[ok]] = cand[ok]
        pending = pending[~ok]
    return x


def _sample_jacobi(z, rng):
    """Draw from the tilted Jacobi law J*(1, z); PG(1, 2z) = J*(1, z)/4."""
    t = _TRUNC
    rate = np.pi**2 / 8.0 + 0.5 * z * z
    log_tail = np.log(np.pi / (2.0 * rate)) - rate * t
    sqrt_t = np.sqrt(t)
    log_body = _LOG2 - z + np.logaddexp(
        log_ndtr((z * t - 1.0) / sqrt_t),
        2.0 * z + log_ndtr(-(z * t + 1.0) / sqrt_t))
    p_tail = np.exp(log_tail - np.logaddexp(log_tail, log_body))
    out = np.empty(z.size)
    pending = np.arange(z.size)
    while pending.size:
        m = pending.size
        cand = np.empty(m)
        tail = rng.random(m) < p_tail[pending]
        cand[tail] = t + rng.exponential(size=int(tail.sum())) / rate[pending][tail]
        cand[~tail] = _trunc_inv_gauss(z[pending][~tail], rng)
        ok = _series_accept(cand, rng)
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
    return out


def pg_sample(c, rng, size=None):
    """Exact draw(s) from PG(1, c).

    Parameters
    ----------
    c : float or array-like
        Tilt(s); only |c| matters since PG(1, c) depends on c^2.
    rng : numpy.random.Generator
        Caller-owned random source.
    size : int, optional
        Number of i.i.d. draws for scalar ``c``; ignored when ``c`` is an
        array (one draw per entry).

    Returns
    -------
    float or ndarray of strictly positive samples.
    """
    c_arr = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c_arr)):
        raise ValueError("PG tilt must be finite")
    scalar = c_arr.ndim == 0 and size is None
    if c_arr.ndim == 0:
        n = 1 if size is None else int(size)
        z = np.full(n, 0.5 * abs(float(c_arr)))
        shape = (n,)
    else:
        z = 0.5 * np.abs(c_arr).ravel()
        shape = c_arr.shape
    x = _sample_jacobi(z, rng) / 4.0
    if scalar:
        return float(x[0])
    return x.reshape(shape)


def sigmoid_identity_check(phi, n_mc, rng):
    """Monte-Carlo check of the sigmoid augmentation identity.

    Returns (sigmoid(phi), MC estimate of int exp(f(w, phi)) PG(w;1,0) dw)
    using ``n_mc`` untilted PG draws.  Testing aid, not used in inference.
    """
    if n_mc < 10**4:
        raise ValueError("need at least 1e4 Monte-Carlo draws")
    w = pg_sample(0.0, rng, size=n_mc)
    estimate = float(np.mean(np.exp(log_f(w, phi))))
    return float(sigmoid(phi)), estimate
