"""Selection rules (one-step thresholding, GIC-family penalties, fixed) and
their selection probabilities.

Probabilities come in two flavors: closed forms where the model admits them
(per-index product for thresholding, a Marcum-Q expression for the
two-candidate linear family) and a Monte-Carlo estimator that works for any
rule.  Both report through the same SelectionProbabilities container.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics
from .model import CandidateSet, GlmModel, SparseModel, SupportSet
from .numerics import (DegenerateProbability, derived_rng, marcum_q_half,
                       std_normal_cdf)


class EmptySelection(Exception):
    """The rule selected no index at all (every statistic below threshold)."""


@dataclass(frozen=True)
class OstRule:
    """Keep index m iff |a_m^T x| > c."""

    c: float
    analytic_prob = True

    def __post_init__(self):
        if self.c <= 0 or not math.isfinite(self.c):
            raise ValueError("OST threshold must be positive and finite")


@dataclass(frozen=True)
class GicRule:
    """Generalized information criterion: minimize
    (1/sigma^2)||residual_k||^2 + tau(N, |support_k|) * |support_k|."""

    tau: Callable[[int, int], float]
    name: str = "gic"
    analytic_prob = True


def aic_rule() -> GicRule:
    return GicRule(tau=lambda n, size: 2.0, name="aic")


def mdl_rule() -> GicRule:
    return GicRule(tau=lambda n, size: math.log(n), name="mdl")


@dataclass(frozen=True)
class FixedRule:
    """Data-independent rule: always pick candidate k (0-based)."""

    k: int
    analytic_prob = True


@dataclass(eq=False)
class SelectionProbabilities:
    """Per-candidate selection probabilities plus per-index marginals.

    `method` is "analytic" or "monte-carlo"; MC results carry binomial
    standard errors, the trial count/seed, and the probability mass that
    fell outside the candidate list (including empty selections).

    `other_truncation`, when present, is the ambient-dim square matrix
    sum_k pi_k t_k t_k^T over the outcomes *outside* the candidate list
    (t_k = true parameters zero-masked to the outcome's support).  Every
    coherent estimator's MSE matrix is at least that on those events, so
    the bound pipeline can keep the MSE-form matrix full-mass even when
    most outcomes are too rare to carry a Fisher term.
    """

    pi: np.ndarray
    p_marginal: np.ndarray
    method: str
    stderr: Optional[np.ndarray] = None
    trials: Optional[int] = None
    seed: Optional[int] = None
    other_mass: float = 0.0
    empty_mass: float = 0.0
    other_truncation: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.p_marginal = np.asarray(self.p_marginal, dtype=float)
        if np.any(self.pi < -1e-12) or np.any(self.pi > 1 + 1e-12):
            raise ValueError("selection probabilities must lie in [0, 1]")
        if np.any(self.p_marginal < -1e-12) or np.any(self.p_marginal > 1 + 1e-12):
            raise ValueError("marginal probabilities must lie in [0, 1]")

    @property
    def outside_candidates(self) -> bool:
        return self.other_mass > 0.0


def ost_select(x: np.ndarray, a: np.ndarray, c: float) -> SupportSet:
    """Support chosen by one-step thresholding of the correlations a_m^T x."""
    if c <= 0:
        raise ValueError("threshold c must be positive")
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    if a.shape[0] != x.shape[0]:
        raise ValueError("observation length does not match the dictionary rows")
    hits = np.flatnonzero(np.abs(a.T @ x) > c)
    if hits.size == 0:
        raise EmptySelection("no correlation magnitude exceeded c={}".format(c))
    return SupportSet(tuple(int(i) for i in hits), a.shape[1])


def _orthonormal_bases(model: GlmModel):
    return [np.linalg.qr(h)[0] for h in model.H]


def gic_select(x: np.ndarray, model: GlmModel, tau: Callable[[int, int], float],
               bases=None) -> int:
    """Index (0-based) of the candidate minimizing the penalized residual.

    Ties go to the smaller model, then to the smaller index.  `bases` may
    carry precomputed orthonormal column bases of the design matrices.
    """
    x = np.asarray(x, dtype=float)
    n = model.num_observations
    if x.shape != (n,):
        raise ValueError("observation has wrong length")
    if bases is None:
        bases = _orthonormal_bases(model)
    xx = float(x @ x)
    inv_var = 1.0 / (model.sigma ** 2)
    best = None
    for k, (q, sup) in enumerate(zip(bases, model.candidates)):
        proj = q.T @ x
        resid = max(xx - float(proj @ proj), 0.0)
        size = len(sup)
        score = inv_var * resid + tau(n, size) * size
        key = (score, size, k)
        if best is None or key < best:
            best = key
    return best[2]


def ost_selection_prob(model: SparseModel, c: float,
                       candidates: CandidateSet) -> SelectionProbabilities:
    """Closed-form selection probabilities of the thresholding rule.

    Each candidate probability is the product over indices of the
    per-index crossing/non-crossing probabilities.  The product is exact
    when the dictionary columns are orthonormal and is otherwise the
    printed closed form, which ignores correlations between correlator
    outputs (the Monte-Carlo estimator is the ground truth there).
    """
    from .model import alpha_beta_all

    alpha, beta = alpha_beta_all(model, c)
    p_cross = 1.0 - std_normal_cdf(alpha) + std_normal_cdf(beta)
    stay = 1.0 - p_cross
    pi = np.empty(len(candidates))
    for k, sup in enumerate(candidates):
        msk = sup.mask()
        pi[k] = float(np.prod(np.where(msk, p_cross, stay)))
    empty = float(np.prod(stay))
    return SelectionProbabilities(pi=pi, p_marginal=p_cross, method="analytic",
                                  empty_mass=empty)


def _glm2_geometry(model: GlmModel, tau: Callable[[int, int], float]):
    """Validate the two-candidate nested structure and return (lam, gamma).

    lam is the noncentrality (theta_2^2/sigma^2) * ||P_perp_h1 h2||^2 and
    gamma = 2*tau(N,2) - tau(N,1) is the decision threshold.
    """
    if len(model.candidates) != 2:
        raise ValueError("closed-form probabilities need exactly two candidates")
    s1, s2 = model.candidates[0], model.candidates[1]
    if len(s1) != 1 or len(s2) != 2 or not set(s1.indices) <= set(s2.indices):
        raise ValueError("candidates must be nested: {first} inside {first, second}")
    if model.true_index != 1:
        raise ValueError("the two-parameter candidate must be the true model")
    h1 = model.H[0][:, 0]
    h2mat = model.H[1]
    if not np.allclose(h2mat[:, 0], h1, rtol=0, atol=1e-12):
        raise ValueError("first column of the large design must equal the small design")
    h2 = h2mat[:, 1]
    n = model.num_observations
    gamma = 2.0 * tau(n, 2) - tau(n, 1)
    if gamma <= 0:
        raise ValueError(
            "penalty gives nonpositive decision threshold gamma={}".format(gamma))
    h1h1 = float(h1 @ h1)
    h2h2 = float(h2 @ h2)
    h1h2 = float(h1 @ h2)
    gram = h1h1 * h2h2 - h1h2 * h1h2
    theta2 = float(model.theta_true[1])
    lam = (theta2 ** 2 / model.sigma ** 2) * gram / h1h1
    return lam, gamma


def glm2_selection_prob(model: GlmModel,
                        tau: Callable[[int, int], float]) -> SelectionProbabilities:
    """Probability that the penalized criterion keeps the larger of two
    nested linear models: a Marcum-Q tail of a noncentral chi-squared with
    one degree of freedom."""
    lam, gamma = _glm2_geometry(model, tau)
    pi2 = marcum_q_half(0.5, math.sqrt(lam), math.sqrt(gamma))
    pi = np.array([1.0 - pi2, pi2])
    # index 1 is always estimated; index 2 only under the larger model
    p_marginal = np.array([1.0, pi2])
    return SelectionProbabilities(pi=pi, p_marginal=p_marginal, method="analytic")


def glm2_prob_derivs(model: GlmModel, tau: Callable[[int, int], float]):
    """First and second derivatives of pi_2 with respect to theta_2.

    d pi2/d theta2   = (lam/theta2) (Q_{3/2} - Q_{1/2})
    d2 pi2/d theta2^2 = (lam/theta2^2)(Q_{3/2} - Q_{1/2})
                        + (lam^2/theta2^2)(Q_{5/2} - 2 Q_{3/2} + Q_{1/2}),
    all Marcum Qs evaluated at (sqrt(lam), sqrt(gamma)).  At theta2 = 0 the
    lam/theta2 factors have removable singularities: the first derivative
    vanishes and the second tends to a*(Q_{3/2}-Q_{1/2})(0, sqrt(gamma))
    with a = lam/theta2^2 fixed by the model geometry.
    """
    lam, gamma = _glm2_geometry(model, tau)
    theta2 = float(model.theta_true[1])
    sa, sb = math.sqrt(lam), math.sqrt(gamma)
    q12 = marcum_q_half(0.5, sa, sb)
    q32 = marcum_q_half(1.5, sa, sb)
    q52 = marcum_q_half(2.5, sa, sb)
    if theta2 == 0.0:
        # lam = a * theta2^2, so lam/theta2 -> 0 and lam/theta2^2 -> a
        sig1 = model.sigma
        h1 = model.H[0][:, 0]
        h2 = model.H[1][:, 1]
        h1h1 = float(h1 @ h1)
        a = (float(h1 @ h1) * float(h2 @ h2) - float(h1 @ h2) ** 2) / (
            h1h1 * sig1 ** 2)
        d1 = 0.0
        d2 = a * (q32 - q12)
    else:
        d1 = (lam / theta2) * (q32 - q12)
        d2 = (lam / theta2 ** 2) * (q32 - q12) \
            + (lam ** 2 / theta2 ** 2) * (q52 - 2.0 * q32 + q12)
    return q12, d1, d2


def glm2_logprob_derivs(model: GlmModel, tau: Callable[[int, int], float]):
    """(d log pi_k / d theta_2, d^2 log pi_k / d theta_2^2) for k = 1, 2.

    Returns two length-2 arrays (first derivatives, second derivatives).
    Raises DegenerateProbability when either candidate probability is at
    the boundary, where log derivatives blow up.
    """
    pi2, dp, ddp = glm2_prob_derivs(model, tau)
    pi1 = 1.0 - pi2
    if pi2 <= numerics.PROB_FLOOR or pi1 <= numerics.PROB_FLOOR:
        raise DegenerateProbability(
            "candidate probability at the boundary: pi2={}".format(pi2))
    d1 = np.array([-dp / pi1, dp / pi2])
    d2 = np.array([-ddp / pi1 - (dp / pi1) ** 2,
                   ddp / pi2 - (dp / pi2) ** 2])
    return d1, d2


def _select_once(model, rule, x):
    """Apply `rule` to one observation; returns a SupportSet or raises
    EmptySelection."""
    if isinstance(rule, OstRule):
        return ost_select(x, model.A, rule.c)
    if isinstance(rule, GicRule):
        k = gic_select(x, model, rule.tau)
        return model.candidates[k]
    if isinstance(rule, FixedRule):
        if isinstance(model, GlmModel):
            return model.candidates[rule.k]
        raise ValueError("Fixed rule needs a candidate list to index into")
    raise TypeError("unknown selection rule {!r}".format(rule))


def mc_selection_prob(model, rule, candidates: CandidateSet, trials: int,
                      seed: int) -> SelectionProbabilities:
    """Empirical selection probabilities over `trials` independent draws.

    Each trial uses a random stream derived from (seed, trial), so the
    result is reproducible and independent of any parallel schedule.
    Outcomes matching no candidate (including empty selections) are
    accumulated in `other_mass`.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lookup = {sup.indices: k for k, sup in enumerate(candidates)}
    counts = np.zeros(len(candidates), dtype=np.int64)
    marg = np.zeros(candidates.ambient_dim, dtype=np.int64)
    empty = 0
    other = 0
    if isinstance(rule, GicRule) and isinstance(model, GlmModel):
        bases = _orthonormal_bases(model)
    else:
        bases = None
    for t in range(trials):
        x = model.draw(derived_rng(seed, t))
        try:
            if bases is not None:
                sup = model.candidates[gic_select(x, model, rule.tau, bases=bases)]
            else:
                sup = _select_once(model, rule, x)
        except EmptySelection:
            empty += 1
            continue
        marg[list(sup.indices)] += 1
        k = lookup.get(sup.indices)
        if k is None:
            other += 1
        else:
            counts[k] += 1
    pi = counts / trials
    stderr = np.sqrt(pi * (1.0 - pi) / trials)
    return SelectionProbabilities(
        pi=pi, p_marginal=marg / trials, method="monte-carlo", stderr=stderr,
        trials=trials, seed=seed, other_mass=(other + empty) / trials,
        empty_mass=empty / trials)
