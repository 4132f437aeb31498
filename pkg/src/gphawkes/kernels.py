"""Covariance machinery for the sigmoidal GP point-process model.

The linear intensity phi(t) = s(t) + sum_{t_i < t} g(t - t_i) exp(-alpha (t - t_i))
is a sum of two GPs pushed through a fixed event history, so it is itself a GP
with the history-aggregated covariance

    K(t, t') = Ks(t, t') + a_g * sum_{t_i < t} sum_{t_j < t'}
                   exp(-(d_i - d'_j)^2 / sg^2) * exp(-alpha (d_i + d'_j)),

where d_i = t - t_i, d'_j = t' - t_j and Ks is an RBF in the evaluation times.
This module provides the RBF building blocks, the aggregated kernel (square,
rectangular and diagonal variants), analytic hyperparameter gradients, and the
jittered-Cholesky policy shared by every solver in the package.

The double sum is the hot loop of the whole package and is compiled with
numba.  Terms whose squared scaled distance exceeds ``_ARG_CUTOFF`` are
dropped; they are below exp(-45) ~ 3e-20, ten orders of magnitude under any
tolerance used in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.linalg import cho_solve

__all__ = [
    "RbfParams",
    "DecayParam",
    "KernelMatrix",
    "AggregatedKernel",
    "SingularKernelError",
    "rbf",
    "rbf_matrix",
    "aggregated_kernel",
    "kernel_hypergrads",
    "log_gp_prior_grad",
    "chol_with_jitter",
]

JITTER_START = 1e-4
JITTER_CAP = 1e-1

_ARG_CUTOFF = 45.0

# Cody-Waite style constants for the inlined exp: x = k*ln2 + r, e^x = 2^k e^r.
_LN2_INV = 1.4426950408889634
_LN2_HI = 0.6931471805599453
_LN2_LO = 2.3190468138462996e-17
_POW2 = np.array([2.0**k for k in range(-80, 3)])


class SingularKernelError(RuntimeError):
    """Raised when a kernel matrix stays non-positive-definite at maximum jitter."""


@dataclass(frozen=True)
class RbfParams:
    """Amplitude and lengthscale of an RBF kernel a * exp(-d^2 / sigma^2)."""

    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if not (self.amplitude > 0):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not (self.lengthscale > 0):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")


@dataclass(frozen=True)
class DecayParam:
    """Exponential forgetting rate of the memory terms, alpha > 0."""

    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class KernelMatrix:
    """A grid of kernel evaluations plus the anchor points that produced it."""

    values: np.ndarray
    row_points: np.ndarray
    col_points: np.ndarray
    jitter: float | None = None

    @property
    def is_square(self) -> bool:
        return self.values.shape[0] == self.values.shape[1]

    def cholesky(self):
        """Lower Cholesky factor under the escalating jitter policy.

        Returns (L, jitter_used) and records the jitter on the instance.
        """
        L, jit = chol_with_jitter(self.values)
        self.jitter = jit
        return L, jit


# ---------------------------------------------------------------------------
# compiled inner loops


@nb.njit(inline="always", fastmath=True)
def _expm(x, pow2):
    # e^x for x in [-80, 0]; |rel err| < 1e-14.  Inlined so LLVM can keep the
    # whole accumulation loop in registers instead of calling libm.
    kf = np.rint(x * _LN2_INV)
    r = x - kf * _LN2_HI - kf * _LN2_LO
    p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (
        1.0 / 120 + r * (1.0 / 720 + r * (1.0 / 5040 + r * (1.0 / 40320 + r * (
            1.0 / 362880 + r * (1.0 / 3628800 + r * (1.0 / 39916800)))))))))))
    return p * pow2[np.int64(kf) + 80]


@nb.njit(cache=True, fastmath=True)
def _build_rect(tr, tc, nr, nc, dr, dc, ur, uc, a_s, iss2, a_g, isg2, pow2, out, accumulate):
    L = tr.shape[0]
    K = tc.shape[0]
    for l in range(L):
        nl = nr[l]
        for k in range(K):
            acc = 0.0
            for i in range(nl):
                dli = dr[l, i]
                si = 0.0
                for j in range(nc[k]):
                    d = dli - dc[k, j]
                    a = d * d * isg2
                    if a < _ARG_CUTOFF:
                        si += _expm(-a, pow2) * uc[k, j]
                acc += si * ur[l, i]
            ds = tr[l] - tc[k]
            v = a_g * acc
            if a_s > 0.0:
                v += a_s * _expm(-ds * ds * iss2, pow2)
            if accumulate:
                out[l, k] += v
            else:
                out[l, k] = v


@nb.njit(cache=True, fastmath=True)
def _build_sym(t, n, d, u, a_s, iss2, a_g, isg2, pow2, out, accumulate):
    P = t.shape[0]
    for l in range(P):
        nl = n[l]
        for k in range(l, P):
            acc = 0.0
            for i in range(nl):
                dli = d[l, i]
                si = 0.0
                for j in range(n[k]):
                    dd = dli - d[k, j]
                    a = dd * dd * isg2
                    if a < _ARG_CUTOFF:
                        si += _expm(-a, pow2) * u[k, j]
                acc += si * u[l, i]
            ds = t[l] - t[k]
            v = a_g * acc
            if a_s > 0.0:
                v += a_s * _expm(-ds * ds * iss2, pow2)
            if accumulate:
                out[l, k] += v
                if k > l:
                    out[k, l] += v
            else:
                out[l, k] = v
                out[k, l] = v


@nb.njit(cache=True, fastmath=True)
def _build_diag(n, d, u, a_g, isg2, pow2, out, accumulate):
    P = n.shape[0]
    for l in range(P):
        nl = n[l]
        acc = 0.0
        for i in range(nl):
            dli = d[l, i]
            si = 0.0
            for j in range(nl):
                dd = dli - d[l, j]
                a = dd * dd * isg2
                if a < _ARG_CUTOFF:
                    si += _expm(-a, pow2) * u[l, j]
            acc += si * u[l, i]
        if accumulate:
            out[l] += a_g * acc
        else:
            out[l] = a_g * acc


@nb.njit(cache=True, fastmath=True)
def _grads_rect(nr, nc, dr, dc, ur, uc, a_g, sg, isg2, pow2, g_a, g_s, g_al):
    # Fused accumulation of the three memory-term gradients:
    #   d/da_g   = sum e * u_i u_j
    #   d/dsg    = a_g * sum e * u_i u_j * 2 D^2 / sg^3
    #   d/dalpha = -a_g * sum e * u_i u_j * S
    # with D = d_i - d_j, S = d_i + d_j, e = exp(-D^2/sg^2).
    L = nr.shape[0]
    K = nc.shape[0]
    two_isg3 = 2.0 / (sg * sg * sg)
    for l in range(L):
        nl = nr[l]
        for k in range(K):
            acc = 0.0
            acc_d2 = 0.0
            acc_s = 0.0
            for i in range(nl):
                dli = dr[l, i]
                wi = ur[l, i]
                for j in range(nc[k]):
                    dd = dli - dc[k, j]
                    a = dd * dd * isg2
                    if a < _ARG_CUTOFF:
                        e = _expm(-a, pow2) * uc[k, j] * wi
                        acc += e
                        acc_d2 += e * dd * dd
                        acc_s += e * (dli + dc[k, j])
            g_a[l, k] = acc
            g_s[l, k] = a_g * two_isg3 * acc_d2
            g_al[l, k] = -a_g * acc_s


def _lag_tables(times, hist, alpha):
    times = np.ascontiguousarray(times, dtype=np.float64)
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    n = np.searchsorted(hist, times, side="left").astype(np.int64)
    if hist.size:
        lag = times[:, None] - hist[None, :]
        np.maximum(lag, 0.0, out=lag)
        wts = np.exp(-alpha * lag)
    else:
        lag = np.zeros((times.size, 0))
        wts = np.zeros((times.size, 0))
    return n, lag, wts


# ---------------------------------------------------------------------------
# public API


def rbf(t1: float, t2: float, p: RbfParams) -> float:
    """RBF kernel a * exp(-(t1 - t2)^2 / sigma^2) at a pair of scalars."""
    d = t1 - t2
    return p.amplitude * math.exp(-(d * d) / (p.lengthscale * p.lengthscale))


def rbf_matrix(x, y, p: RbfParams) -> np.ndarray:
    """RBF Gram matrix between two point sets (vectorized)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x[:, None] - y[None, :]
    return p.amplitude * np.exp(-(d * d) / (p.lengthscale * p.lengthscale))


def _history_times(history):
    times = getattr(history, "times", history)
    return np.ascontiguousarray(times, dtype=np.float64)


def _check_points(pts, window):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if pts.size and pts.min() < 0:
        raise ValueError("evaluation times must be non-negative")
    if window is not None and pts.size and pts.max() > window + 1e-12:
        raise ValueError(
            f"evaluation time {pts.max()} exceeds the observation window {window}")
    return pts


class AggregatedKernel:
    """Covariance closure of the linear intensity over fixed event histories.

    ``contributions`` is a list of (history_times, g_params, decay) triples,
    one per source process; the univariate model has exactly one.  The
    background RBF may be disabled by passing ``s_params=None`` (used by
    memory-only covariances such as the lag-domain kernel of g itself).
    """

    def __init__(self, s_params, contributions, window=None):
        self.s_params = s_params
        self.window = window
        self.contributions = []
        for hist, g_params, decay in contributions:
            hist = _history_times(hist)
            if hist.size > 1 and np.any(np.diff(hist) < 0):
                raise ValueError("history times must be sorted")
            self.contributions.append((hist, g_params, decay))

    @classmethod
    def univariate(cls, history, hyper) -> "AggregatedKernel":
        window = getattr(history, "window", None)
        return cls(hyper.s_params,
                   [(history, hyper.g_params, hyper.decay)],
                   window=window)

    def _tables(self, pts, contribution_index):
        hist, _, decay = self.contributions[contribution_index]
        return _lag_tables(pts, hist, decay.alpha)

    def matrix(self, row_points, col_points=None) -> np.ndarray:
        """Kernel matrix; symmetric fast path when ``col_points`` is omitted."""
        row = _check_points(row_points, self.window)
        square = col_points is None
        col = row if square else _check_points(col_points, self.window)
        out = np.empty((row.size, col.size))
        if self.s_params is None:
            out[:] = 0.0
            a_s, iss2 = 0.0, 0.0
        else:
            a_s = self.s_params.amplitude
            iss2 = 1.0 / self.s_params.lengthscale**2
        first = True
        for idx, (hist, g_params, decay) in enumerate(self.contributions):
            a_g = g_params.amplitude
            isg2 = 1.0 / g_params.lengthscale**2
            nr, dr, ur = self._tables(row, idx)
            if square:
                _build_sym(row, nr, dr, ur, a_s if first else 0.0, iss2,
                           a_g, isg2, _POW2, out, not first)
            else:
                nc, dc, uc = self._tables(col, idx)
                _build_rect(row, col, nr, nc, dr, dc, ur, uc,
                            a_s if first else 0.0, iss2, a_g, isg2, _POW2,
                            out, not first)
            first = False
        if not self.contributions and self.s_params is not None:
            out[:] = rbf_matrix(row, col, self.s_params)
        elif not self.contributions:
            out[:] = 0.0
        return out

    def diag(self, points) -> np.ndarray:
        """Marginal variances K(t, t)."""
        pts = _check_points(points, self.window)
        out = np.zeros(pts.size)
        for idx, (hist, g_params, decay) in enumerate(self.contributions):
            n, d, u = self._tables(pts, idx)
            _build_diag(n, d, u, g_params.amplitude,
                        1.0 / g_params.lengthscale**2, _POW2, out, idx > 0)
        if self.s_params is not None:
            out += self.s_params.amplitude
        return out

    def grads(self, row_points, col_points=None):
        """Per-hyperparameter gradient matrices.

        Returns ``(s_grads, mem_grads)`` where ``s_grads`` maps
        ``{"a_s", "sigma_s"}`` and ``mem_grads`` is a list (one entry per
        contribution) of dicts mapping ``{"a_g", "sigma_g", "alpha"}``.
        """
        row = _check_points(row_points, self.window)
        col = row if col_points is None else _check_points(col_points, self.window)
        s_grads = {}
        if self.s_params is not None:
            ds = row[:, None] - col[None, :]
            d2 = ds * ds
            e_s = np.exp(-d2 / self.s_params.lengthscale**2)
            s_grads["a_s"] = e_s
            s_grads["sigma_s"] = (self.s_params.amplitude * e_s * 2.0 * d2
                                  / self.s_params.lengthscale**3)
        mem_grads = []
        for idx, (hist, g_params, decay) in enumerate(self.contributions):
            nr, dr, ur = self._tables(row, idx)
            nc, dc, uc = (nr, dr, ur) if col is row else self._tables(col, idx)
            g_a = np.empty((row.size, col.size))
            g_s = np.empty_like(g_a)
            g_al = np.empty_like(g_a)
            _grads_rect(nr, nc, dr, dc, ur, uc, g_params.amplitude,
                        g_params.lengthscale, 1.0 / g_params.lengthscale**2,
                        _POW2, g_a, g_s, g_al)
            mem_grads.append({"a_g": g_a, "sigma_g": g_s, "alpha": g_al})
        return s_grads, mem_grads

    def grads_diag(self, points):
        """Gradients of the marginal variances, same structure as grads()."""
        pts = _check_points(points, self.window)
        s_grads = {}
        if self.s_params is not None:
            s_grads["a_s"] = np.ones(pts.size)
            s_grads["sigma_s"] = np.zeros(pts.size)
        mem_grads = []
        for idx, (hist, g_params, decay) in enumerate(self.contributions):
            n, d, u = self._tables(pts, idx)
            out_a = np.empty(pts.size)
            out_s = np.empty(pts.size)
            out_al = np.empty(pts.size)
            for p in range(pts.size):
                ga = np.empty((1, 1))
                gs = np.empty((1, 1))
                gal = np.empty((1, 1))
                _grads_rect(n[p:p + 1], n[p:p + 1], d[p:p + 1], d[p:p + 1],
                            u[p:p + 1], u[p:p + 1], g_params.amplitude,
                            g_params.lengthscale,
                            1.0 / g_params.lengthscale**2, _POW2, ga, gs, gal)
                out_a[p] = ga[0, 0]
                out_s[p] = gs[0, 0]
                out_al[p] = gal[0, 0]
            mem_grads.append({"a_g": out_a, "sigma_g": out_s, "alpha": out_al})
        return s_grads, mem_grads


def aggregated_kernel(times_row, times_col, history, s_params: RbfParams,
                      g_params: RbfParams, decay: DecayParam,
                      window=None) -> KernelMatrix:
    """History-aggregated covariance of the linear intensity.

    Entry (l, k) is the background RBF at (t_l, t_k) plus the decayed memory
    double sum over history events strictly before t_l and t_k respectively.

    Parameters
    ----------
    times_row, times_col : array-like
        Evaluation times; pass the same object (or ``times_col=None``) for the
        symmetric square case.
    history : EventSequence or array-like
        Sorted event times driving the memory terms.
    window : float, optional
        Observation window; defaults to ``history.window`` when available.
        Evaluation times outside [0, window] are rejected.
    """
    if window is None:
        window = getattr(history, "window", None)
    closure = AggregatedKernel(s_params, [(history, g_params, decay)],
                               window=window)
    row = np.ascontiguousarray(times_row, dtype=np.float64)
    if times_col is None or times_col is times_row:
        values = closure.matrix(row)
        col = row
    else:
        col = np.ascontiguousarray(times_col, dtype=np.float64)
        if col.shape == row.shape and np.array_equal(col, row):
            values = closure.matrix(row)
        else:
            values = closure.matrix(row, col)
    return KernelMatrix(values=values, row_points=row, col_points=col)


def kernel_hypergrads(times, history, s_params: RbfParams,
                      g_params: RbfParams, decay: DecayParam,
                      window=None) -> dict:
    """Gradient of the aggregated kernel matrix per hyperparameter.

    Returns a dict with keys ``a_s, sigma_s, a_g, sigma_g, alpha``, each a
    square matrix over ``times`` matching central finite differences of
    :func:`aggregated_kernel`.
    """
    if window is None:
        window = getattr(history, "window", None)
    closure = AggregatedKernel(s_params, [(history, g_params, decay)],
                               window=window)
    s_grads, mem_grads = closure.grads(np.asarray(times, dtype=np.float64))
    out = dict(s_grads)
    out.update(mem_grads[0])
    return out


def chol_with_jitter(mat: np.ndarray, start: float = JITTER_START,
                     cap: float = JITTER_CAP):
    """Lower Cholesky factor of ``mat`` + jitter*I, escalating jitter x10.

    Starts at ``start`` and raises :class:`SingularKernelError` once the
    jitter would exceed ``cap``.
    Returns ``(L, jitter_used)``.
    """
    mat = np.asarray(mat, dtype=np.float64)
    eye = np.eye(mat.shape[0])
    jitter = start
    while jitter <= cap * (1 + 1e-12):
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularKernelError(
        f"kernel matrix not positive definite at maximum jitter {cap}")


def log_gp_prior_grad(phi, ktilde, grads: dict) -> dict:
    """Gradient of the zero-mean GP log-density w.r.t. kernel hyperparameters.

    Implements d/dtheta [-1/2 log det K - 1/2 phi^T K^-1 phi]
    = -1/2 tr(K^-1 dK) + 1/2 (K^-1 phi)^T dK (K^-1 phi)
    for each gradient matrix in ``grads``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    values = ktilde.values if isinstance(ktilde, KernelMatrix) else np.asarray(ktilde)
    L, jit = chol_with_jitter(values)
    if isinstance(ktilde, KernelMatrix):
        ktilde.jitter = jit
    u = cho_solve((L, True), phi)
    kinv = cho_solve((L, True), np.eye(values.shape[0]))
    out = {}
    for name, g in grads.items():
        g = np.asarray(g)
        out[name] = 0.5 * (u @ g @ u) - 0.5 * float(np.sum(kinv * g))
    return out
