"""Support sets, zero-padding algebra, candidate enumeration, and the two
Gaussian observation models (sparse dictionary and per-candidate linear).

Indices are 0-based everywhere inside the library; the 1-based convention
of config files and CSV output is applied only at the serialization layer
(see cli).
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics


@dataclass(frozen=True, order=True)
class SupportSet:
    """A sorted, duplicate-free, nonempty set of parameter indices.

    `indices` are 0-based positions in an ambient parameter vector of
    length `ambient_dim`.
    """

    indices: tuple
    ambient_dim: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) == 0:
            raise ValueError("support set must be nonempty")
        if len(set(idx)) != len(idx):
            raise ValueError("support set has duplicate indices")
        if list(idx) != sorted(idx):
            raise ValueError("support set indices must be sorted")
        if idx[0] < 0 or idx[-1] >= self.ambient_dim:
            raise ValueError(
                "indices out of range for ambient dimension {}".format(self.ambient_dim))

    def __len__(self):
        return len(self.indices)

    def __contains__(self, m):
        return m in self.indices

    def __iter__(self):
        return iter(self.indices)

    def position_of(self, m: int) -> int:
        """Position l such that the l-th support element equals m."""
        return self.indices.index(m)

    def complement(self) -> tuple:
        members = set(self.indices)
        return tuple(m for m in range(self.ambient_dim) if m not in members)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.ambient_dim, dtype=bool)
        out[list(self.indices)] = True
        return out

    def one_based(self) -> list:
        """Serialized form: sorted 1-based integer list."""
        return [i + 1 for i in self.indices]

    @classmethod
    def from_one_based(cls, indices: Iterable[int], ambient_dim: int) -> "SupportSet":
        return cls(tuple(sorted(int(i) - 1 for i in indices)), ambient_dim)


@dataclass(frozen=True)
class CandidateSet:
    """Ordered list of distinct candidate supports over one ambient space."""

    models: tuple
    ambient_dim: int

    def __post_init__(self):
        models = tuple(self.models)
        object.__setattr__(self, "models", models)
        if not models:
            raise ValueError("candidate set must contain at least one model")
        for s in models:
            if not isinstance(s, SupportSet):
                raise TypeError("candidate models must be SupportSet instances")
            if s.ambient_dim != self.ambient_dim:
                raise ValueError("candidate ambient dimension mismatch")
        if len(set(models)) != len(models):
            raise ValueError("candidate models must be pairwise distinct")

    def __len__(self):
        return len(self.models)

    def __getitem__(self, k) -> SupportSet:
        return self.models[k]

    def __iter__(self):
        return iter(self.models)

    def index_of(self, support: SupportSet) -> int:
        """Index of `support` in the candidate list; KeyError if absent."""
        for k, s in enumerate(self.models):
            if s == support:
                return k
        raise KeyError("support {} is not a candidate".format(support.one_based()))


@dataclass(eq=False)
class ZeroPadded:
    """An ambient-length vector that is exactly zero off its support."""

    values: np.ndarray
    support: SupportSet

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.support.ambient_dim,):
            raise ValueError("zero-padded vector has wrong length")
        off = np.flatnonzero(~self.support.mask())
        if np.any(v[off] != 0.0):
            raise ValueError("nonzero entries outside the support")
        self.values = v

    def restrict(self) -> np.ndarray:
        """The dense coefficients on the support (inverse of zero_pad)."""
        return self.values[list(self.support.indices)].copy()


def zero_pad(values: Sequence[float], support: SupportSet) -> ZeroPadded:
    """Embed coefficients given on `support` into the ambient space.

    ([v1, v3, v5], {1,3,5} of 5) -> [v1, 0, v3, 0, v5].
    """
    v = np.asarray(values, dtype=float)
    if v.shape != (len(support),):
        raise ValueError(
            "expected {} values for support of that size, got {}".format(
                len(support), v.shape))
    out = np.zeros(support.ambient_dim)
    out[list(support.indices)] = v
    return ZeroPadded(out, support)


def selection_matrix_D(candidate: SupportSet, truth: SupportSet) -> np.ndarray:
    """The 0/1 matrix D_k with entry (m, l) = 1 iff coordinate m is in the
    candidate support and is also the l-th element of the true support.

    Shape (M, |truth|).  Row and column sums are 0 or 1; for a candidate
    containing the whole truth this is the identity embedding.
    """
    if candidate.ambient_dim != truth.ambient_dim:
        raise ValueError("candidate and truth live in different ambient spaces")
    big_m = truth.ambient_dim
    d = np.zeros((big_m, len(truth)))
    for l, m in enumerate(truth.indices):
        if m in candidate:
            d[m, l] = 1.0
    return d


def _unit_column_check(a: np.ndarray, tol: float = 1e-12):
    norms = np.linalg.norm(a, axis=0)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(
            "dictionary column {} has norm {:.12g}; unit norm required".format(
                worst + 1, norms[worst]))


@dataclass(eq=False)
class SparseModel:
    """Observation x = A theta + w with w ~ N(0, sigma^2 I) and theta
    supported on `true_support`.

    Columns of A must be unit-norm; the true-support columns must be
    linearly independent.
    """

    A: np.ndarray
    sigma: float
    true_support: SupportSet
    theta_true: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        if a.ndim != 2:
            raise ValueError("A must be a 2-D matrix")
        self.A = a
        if self.sigma <= 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be a positive finite number")
        if self.true_support.ambient_dim != a.shape[1]:
            raise ValueError("true support ambient dim must equal the number of columns")
        _unit_column_check(a)
        th = np.asarray(self.theta_true, dtype=float)
        if th.shape != (len(self.true_support),):
            raise ValueError("theta_true must have one entry per true-support index")
        self.theta_true = th
        s = len(self.true_support)
        if s > a.shape[0]:
            warnings.warn("support size exceeds the number of observations",
                          stacklevel=2)
        if np.linalg.matrix_rank(self.A_true) < s:
            raise ValueError("true-support columns of A are rank deficient")

    @property
    def num_observations(self) -> int:
        return self.A.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.A.shape[1]

    @property
    def A_true(self) -> np.ndarray:
        return self.A[:, list(self.true_support.indices)]

    def noiseless_mean(self) -> np.ndarray:
        """A_Lambda theta_Lambda, the mean of the observation vector."""
        return self.A_true @ self.theta_true

    def theta_padded(self) -> np.ndarray:
        return zero_pad(self.theta_true, self.true_support).values

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.noiseless_mean() + self.sigma * rng.standard_normal(
            self.num_observations)


@dataclass(eq=False)
class GlmModel:
    """Per-candidate linear model: under candidate k the observation is
    x = H_k theta_k + w.  The truth is candidate `true_index`.
    """

    candidates: CandidateSet
    H: list
    sigma: float
    true_index: int
    theta_true: np.ndarray

    def __post_init__(self):
        if len(self.H) != len(self.candidates):
            raise ValueError("need one design matrix per candidate model")
        mats = [np.asarray(h, dtype=float) for h in self.H]
        n = mats[0].shape[0]
        for k, (h, s) in enumerate(zip(mats, self.candidates)):
            if h.ndim != 2 or h.shape[0] != n:
                raise ValueError("design matrix {} has inconsistent rows".format(k + 1))
            if h.shape[1] != len(s):
                raise ValueError(
                    "design matrix {} has {} columns but the candidate support "
                    "has {} indices".format(k + 1, h.shape[1], len(s)))
            if np.linalg.matrix_rank(h) < h.shape[1]:
                raise ValueError("design matrix {} is rank deficient".format(k + 1))
        self.H = mats
        if self.sigma <= 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be a positive finite number")
        if not (0 <= self.true_index < len(self.candidates)):
            raise ValueError("true_index out of range")
        th = np.asarray(self.theta_true, dtype=float)
        if th.shape != (len(self.true_support),):
            raise ValueError("theta_true must match the true support size")
        self.theta_true = th

    @property
    def num_observations(self) -> int:
        return self.H[0].shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.candidates.ambient_dim

    @property
    def true_support(self) -> SupportSet:
        return self.candidates[self.true_index]

    @property
    def H_true(self) -> np.ndarray:
        return self.H[self.true_index]

    def noiseless_mean(self) -> np.ndarray:
        return self.H_true @ self.theta_true

    def theta_padded(self) -> np.ndarray:
        return zero_pad(self.theta_true, self.true_support).values

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.noiseless_mean() + self.sigma * rng.standard_normal(
            self.num_observations)


def alpha_beta(model: SparseModel, m: int, c: float):
    """Standardized threshold offsets for coordinate m of the correlator
    a_m^T x: alpha = (c - a_m^T A theta)/sigma, beta = (-c - a_m^T A theta)/sigma.
    """
    if c <= 0:
        raise ValueError("threshold c must be positive")
    mean_m = float(model.A[:, m] @ model.noiseless_mean())
    return (c - mean_m) / model.sigma, (-c - mean_m) / model.sigma


def alpha_beta_all(model: SparseModel, c: float):
    """Vectorized alpha_beta over every coordinate; returns (alpha, beta)."""
    if c <= 0:
        raise ValueError("threshold c must be positive")
    means = model.A.T @ model.noiseless_mean()
    return (c - means) / model.sigma, (-c - means) / model.sigma


def _all_subsets(big_m: int, s_max: int):
    for size in range(1, s_max + 1):
        for combo in itertools.combinations(range(big_m), size):
            yield combo


def enumerate_candidates(big_m: int, s_max: int, ranking=None, k_max: int | None = None,
                         mass_target: float | None = None) -> CandidateSet:
    """All nonempty supports of size <= s_max, or — when that collection
    exceeds `k_max` — the highest-probability supports under a one-step
    thresholding rule.

    `ranking` is a (SparseModel, threshold) pair; it is required whenever
    truncation kicks in, because the ranking key is the analytic selection
    probability of each support.  Ranked output stops early once the
    cumulative probability mass reaches `mass_target`, always keeps the
    model's true support, and breaks probability ties lexicographically.
    """
    if not (1 <= s_max <= big_m):
        raise ValueError("s_max must be in [1, ambient_dim]")
    total = sum(math.comb(big_m, s) for s in range(1, s_max + 1))
    cap = total if k_max is None else int(k_max)
    if cap < 1:
        raise ValueError("k_max must be at least 1")

    if total <= cap and mass_target is None:
        models = tuple(SupportSet(combo, big_m) for combo in _all_subsets(big_m, s_max))
        return CandidateSet(models, big_m)

    if ranking is None:
        raise ValueError(
            "{} supports exceed the cap of {}; a (SparseModel, threshold) "
            "ranking is required to truncate".format(total, cap))
    model, c = ranking
    alpha, beta = alpha_beta_all(model, c)
    # per-coordinate crossing probabilities of the independent-decision rule
    p_cross = 1.0 - numerics.std_normal_cdf(alpha) + numerics.std_normal_cdf(beta)
    logp = np.log(np.maximum(p_cross, numerics.PROB_FLOOR))
    logq = np.log(np.maximum(1.0 - p_cross, numerics.PROB_FLOOR))
    base = float(np.sum(logq))

    scored = []
    for combo in _all_subsets(big_m, s_max):
        lp = base + float(np.sum(logp[list(combo)] - logq[list(combo)]))
        scored.append((-lp, combo))
    scored.sort()

    kept = []
    mass = 0.0
    for neg_lp, combo in scored:
        if len(kept) >= cap:
            break
        kept.append(combo)
        mass += math.exp(-neg_lp)
        if mass_target is not None and mass >= mass_target:
            break
    truth = model.true_support.indices
    if truth not in kept and len(truth) <= s_max:
        kept.append(truth)
    models = tuple(SupportSet(combo, big_m) for combo in kept)
    return CandidateSet(models, big_m)
