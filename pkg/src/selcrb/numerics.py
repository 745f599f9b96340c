"""Special functions and small dense matrix utilities used by every other module.

All functions here are pure: no hidden state, safe to call from any thread.
The Marcum Q-function is evaluated through its noncentral chi-squared
representation with a Poisson-mixture series, so the half-integer orders
needed elsewhere (1/2, 3/2, 5/2) share a single code path that is also
well-behaved in the a -> 0 limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

# Condition number beyond which a FIM inverse is numerically meaningless
# in double precision.
COND_LIMIT = 1e12

# Poisson-mixture truncation: stop once the remaining tail mass is below
# this, hard cap on the number of series terms.
_SERIES_TAIL = 1e-14
_SERIES_CAP = 10**6

# Probabilities below this are treated as degenerate (denominators in
# truncated-Gaussian expressions, selection probabilities).
PROB_FLOOR = 1e-300


class SingularFim(Exception):
    """A (selective) Fisher information matrix is numerically singular.

    Carries the condition-number estimate and, when known, the index of the
    offending candidate model.
    """

    def __init__(self, message: str, condition: float | None = None,
                 model_index: int | None = None):
        super().__init__(message)
        self.condition = condition
        self.model_index = model_index


class DegenerateProbability(Exception):
    """A selection probability or truncation denominator underflowed."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class InsufficientConditionedSamples(Exception):
    """Too few Monte-Carlo draws landed in the conditioning event."""

    def __init__(self, message: str, got: int = 0, needed: int = 0):
        super().__init__(message)
        self.got = got
        self.needed = needed


@dataclass(frozen=True)
class Tolerance:
    """Absolute/relative tolerance pair; at least one must be positive."""

    abs: float = 0.0
    rel: float = 0.0

    def __post_init__(self):
        if self.abs < 0 or self.rel < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.abs == 0 and self.rel == 0:
            raise ValueError("abs and rel tolerance cannot both be zero")

    def ok(self, value: float, reference: float) -> bool:
        return abs(value - reference) <= self.abs + self.rel * abs(reference)


def std_normal_pdf(x):
    """Standard normal density phi(x) = exp(-x^2/2)/sqrt(2*pi).

    Accepts scalars or arrays; strictly positive for finite input.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("std_normal_pdf: input must be finite")
    out = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x):
    """Standard normal CDF Phi(x), computed via the scaled complementary
    error function so both tails keep full relative accuracy."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("std_normal_cdf: input must be finite")
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def _poisson_log_weights(rate: float, j: np.ndarray) -> np.ndarray:
    # log of exp(-rate) * rate**j / j!
    return -rate + j * math.log(rate) - special.gammaln(j + 1.0)


def _poisson_excluded_mass(rate: float, lo: int, hi: int) -> float:
    # Pr(J < lo) + Pr(J > hi) for J ~ Poisson(rate), via the gamma-tail
    # identity Pr(J <= k) = gammaincc(k+1, rate); exact, no summation.
    below = float(special.gammaincc(lo, rate)) if lo > 0 else 0.0
    above = float(special.gammainc(hi + 1.0, rate))
    return below + above


def noncentral_chi2_sf(dof: float, noncentrality: float, x: float) -> float:
    """Survival function Pr(X > x) for X ~ noncentral chi^2(dof, noncentrality).

    Poisson mixture of central chi-squared tails:

        Pr(X > x) = sum_j Pois(j; nc/2) * Pr(chi^2_{dof+2j} > x)

    The index window around the Poisson mode is widened until the excluded
    Poisson mass (computed exactly from gamma-tail identities, not by
    summing weights) is below 1e-14, with a hard cap of 1e6 terms.
    """
    if not (math.isfinite(dof) and math.isfinite(noncentrality) and math.isfinite(x)):
        raise ValueError("noncentral_chi2_sf: arguments must be finite")
    if dof <= 0:
        raise ValueError("noncentral_chi2_sf: dof must be positive")
    if noncentrality < 0 or x < 0:
        raise ValueError("noncentral_chi2_sf: noncentrality and x must be >= 0")
    if x == 0.0:
        return 1.0
    rate = 0.5 * noncentrality
    if rate == 0.0:
        return float(special.gammaincc(0.5 * dof, 0.5 * x))

    mode = int(rate)
    half = int(math.ceil(10.0 * math.sqrt(rate + 1.0))) + 20
    while True:
        lo = max(0, mode - half)
        hi = mode + half
        if hi - lo + 1 > _SERIES_CAP:
            raise RuntimeError(
                "noncentral_chi2_sf: series cap of {} terms exceeded "
                "(noncentrality={})".format(_SERIES_CAP, noncentrality))
        if _poisson_excluded_mass(rate, lo, hi) < _SERIES_TAIL:
            break
        half *= 2

    j = np.arange(lo, hi + 1, dtype=float)
    w = np.exp(_poisson_log_weights(rate, j))
    tails = special.gammaincc(0.5 * dof + j, 0.5 * x)
    return float(min(1.0, max(0.0, float(np.dot(w, tails)))))


_MARCUM_ORDERS = (0.5, 1.5, 2.5)


def marcum_q_half(order: float, a: float, b: float) -> float:
    """Marcum Q-function Q_m(a, b) for half-integer order m in {1/2, 3/2, 5/2}.

    Uses the identity Q_m(a, b) = Pr(chi^2_{2m}(a^2) > b^2).
    """
    if order not in _MARCUM_ORDERS:
        raise ValueError(
            "marcum_q_half: order must be one of {}".format(_MARCUM_ORDERS))
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("marcum_q_half: arguments must be finite")
    if a < 0 or b < 0:
        raise ValueError("marcum_q_half: a and b must be >= 0")
    return noncentral_chi2_sf(2.0 * order, a * a, b * b)


def check_symmetric(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Validate that `mat` is a square symmetric matrix; returns the
    symmetrized float array."""
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix, got shape {}".format(m.shape))
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def sym_inverse(mat: np.ndarray, require_pd: bool = False) -> np.ndarray:
    """Inverse of a symmetric matrix via its eigendecomposition.

    Raises SingularFim when the condition-number estimate exceeds 1e12;
    beyond that the inverse carries no usable information in double
    precision.  With `require_pd` the matrix must additionally be positive
    definite — the right demand for anything used as an information matrix,
    where a negative eigenvalue means the model for the conditioning is
    invalid rather than merely ill-scaled.  The result is symmetric by
    construction.
    """
    m = check_symmetric(mat)
    w, v = np.linalg.eigh(m)
    absw = np.abs(w)
    wmax = float(absw.max())
    wmin = float(absw.min())
    cond = math.inf if wmin == 0.0 else wmax / wmin
    if cond > COND_LIMIT:
        raise SingularFim(
            "matrix is numerically singular (condition estimate {:.3e})".format(cond),
            condition=cond)
    if require_pd and float(w.min()) <= 0.0:
        raise SingularFim(
            "matrix is not positive definite (min eigenvalue {:.3e})".format(
                float(w.min())),
            condition=cond)
    inv = (v / w) @ v.T
    return 0.5 * (inv + inv.T)


def finite_diff(f: Callable, theta, step: float = 1e-5):
    """Central-difference gradient and Hessian of a scalar function.

    Test-oracle utility: O(step^2) accurate, one gradient entry and one
    Hessian entry per parameter pair.  `theta` may be a scalar or a 1-D
    vector; `f` is called with the same kind it was given.

    Returns (gradient, hessian) as ndarrays of shape (n,) and (n, n).
    """
    scalar_input = np.isscalar(theta) or (
        isinstance(theta, np.ndarray) and theta.ndim == 0)
    t0 = np.atleast_1d(np.asarray(theta, dtype=float)).copy()
    n = t0.size

    def call(vec: np.ndarray) -> float:
        val = f(float(vec[0])) if scalar_input else f(vec)
        val = float(val)
        if not math.isfinite(val):
            raise ValueError("finite_diff: f returned a non-finite value")
        return val

    h = float(step)
    if h <= 0:
        raise ValueError("finite_diff: step must be positive")
    f0 = call(t0)
    grad = np.empty(n)
    hess = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        fp = call(t0 + ei)
        fm = call(t0 - ei)
        grad[i] = (fp - fm) / (2.0 * h)
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h * h)
    for i in range(n):
        for k in range(i + 1, n):
            ei = np.zeros(n)
            ek = np.zeros(n)
            ei[i] = h
            ek[k] = h
            fpp = call(t0 + ei + ek)
            fpm = call(t0 + ei - ek)
            fmp = call(t0 - ei + ek)
            fmm = call(t0 - ei - ek)
            hess[i, k] = hess[k, i] = (fpp - fpm - fmp + fmm) / (4.0 * h * h)
    return grad, hess


def derived_rng(seed: int, *path) -> np.random.Generator:
    """Random generator for one unit of Monte-Carlo work.

    The stream is a pure function of (seed, path), typically
    (seed, trial index), so results never depend on how trials are
    scheduled across workers.  Path elements may be integers or short
    strings; strings are folded into integers by their UTF-8 bytes, so
    ("fim",) and ("bias",) name disjoint streams deterministically.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for p in path:
        if isinstance(p, str):
            keys.append(int.from_bytes(p.encode("utf-8"), "big"))
        else:
            keys.append(int(p))
    return np.random.default_rng(keys)
