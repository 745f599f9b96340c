"""Coherent post-selection estimators and their selective bias.

The estimators here are coherent in the sense that the estimate is exactly
zero off the selected support.  For the thresholding rule with an identity
dictionary the selective bias of the maximum selected likelihood (MSL)
estimator and its gradient have closed forms (doubly truncated Gaussian
moments); for everything else the bias is estimated by conditional Monte
Carlo, with common random numbers across the finite-difference stencil for
the gradient.

When a selection rule returns nothing at all (EmptySelection) the coherent
convention is the all-zero estimate; the Monte-Carlo drivers apply it, the
estimator functions themselves always receive a nonempty support.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .numerics import (DegenerateProbability, InsufficientConditionedSamples,
                       SingularFim, derived_rng, std_normal_cdf,
                       std_normal_pdf)
from .model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                    ZeroPadded, alpha_beta, zero_pad)
from .selection import FixedRule, GicRule, OstRule
from .bounds import PI_CUTOFF, BiasModel


@dataclass(eq=False)
class CoherentEstimate:
    """An estimate that vanishes exactly off its selected support."""

    theta_hat: ZeroPadded
    selected: SupportSet

    def __post_init__(self):
        if self.theta_hat.support != self.selected:
            raise ValueError("estimate support does not match the selection")


def msl_glm(x, model: GlmModel, k: int) -> CoherentEstimate:
    """MSL estimate under candidate model k: the least-squares fit
    (H_k^T H_k)^{-1} H_k^T x on the candidate support, zeros elsewhere.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.num_observations,):
        raise ValueError("observation has wrong length")
    h = model.H[k]
    coef, _, rank, sv = np.linalg.lstsq(h, x, rcond=None)
    if rank < h.shape[1]:
        raise SingularFim(
            "design matrix of candidate {} is rank deficient".format(k + 1),
            condition=_sv_condition(sv), model_index=k)
    sup = model.candidates[k]
    return CoherentEstimate(zero_pad(coef, sup), sup)


def msl_sparse(x, model: SparseModel, selected: SupportSet) -> CoherentEstimate:
    """MSL estimate on an estimated support: least squares on the columns
    A_m, m in `selected`, zeros elsewhere.

    Raises SingularFim when the Gram matrix of the selected columns is
    singular (in particular whenever more atoms are selected than there are
    observations); the message names the offending support.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.num_observations,):
        raise ValueError("observation has wrong length")
    cols = model.A[:, list(selected.indices)]
    coef, _, rank, sv = np.linalg.lstsq(cols, x, rcond=None)
    if rank < len(selected):
        raise SingularFim(
            "Gram matrix of the selected support {} is singular".format(
                selected.one_based()),
            condition=_sv_condition(sv))
    return CoherentEstimate(zero_pad(coef, selected), selected)


def _sv_condition(sv):
    sv = np.asarray(sv, dtype=float)
    if sv.size == 0 or sv[0] == 0.0:
        return math.inf
    small = sv[sv > 0]
    return math.inf if small.size < sv.size else float(sv[0] / sv[-1])


# ---------------------------------------------------------------------------
# closed-form selective bias for the identity dictionary


def _identity_alpha_beta_z(model: SparseModel, c: float, m: int):
    alpha, beta = alpha_beta(model, m, c)
    z = 1.0 - std_normal_cdf(alpha) + std_normal_cdf(beta)
    if z < numerics.PROB_FLOOR:
        raise DegenerateProbability(
            "crossing probability of index {} is below the floor".format(m + 1),
            index=m)
    return alpha, beta, z


def _require_identity(model: SparseModel):
    big_m = model.ambient_dim
    if model.num_observations != big_m or not np.array_equal(
            model.A, np.eye(big_m)):
        raise ValueError("closed-form selective bias requires A = I")


def msl_bias_identity(model: SparseModel, c: float, m: int,
                      k: SupportSet) -> float:
    """Element m of the selective bias of the MSL estimator for A = I:

        b_m = -sigma (phi(beta_m) - phi(alpha_m)) / (1 - Phi(alpha_m) + Phi(beta_m))

    for m in the candidate support, 0 otherwise.  This is the mean shift of
    a Gaussian truncated to |x_m| > c.
    """
    _require_identity(model)
    if m not in k:
        return 0.0
    alpha, beta, z = _identity_alpha_beta_z(model, c, m)
    return -model.sigma * (std_normal_pdf(beta) - std_normal_pdf(alpha)) / z


def msl_bias_gradient_identity(model: SparseModel, c: float, m: int,
                               k: SupportSet) -> float:
    """Derivative of the bias element above with respect to theta_m:

        -(beta phi(beta) - alpha phi(alpha)) / Z - b_m^2 / sigma^2.

    This is the diagonal entry of the bias gradient G_k at the position of
    m; for A = I every off-diagonal entry is zero because the coordinates
    are independent.
    """
    _require_identity(model)
    if m not in k:
        return 0.0
    alpha, beta, z = _identity_alpha_beta_z(model, c, m)
    pa, pb = std_normal_pdf(alpha), std_normal_pdf(beta)
    b = -model.sigma * (pb - pa) / z
    return -(beta * pb - alpha * pa) / z - b * b / model.sigma ** 2


def identity_bias_model(model: SparseModel, c: float,
                        candidates: CandidateSet) -> BiasModel:
    """Assemble the closed-form MSL bias model for every candidate.

    Null-support indices inside a candidate get an exactly zero bias entry
    (phi(alpha) = phi(beta) when theta_m = 0) and carry no gradient row.
    """
    _require_identity(model)
    truth = model.true_support
    big_m = model.ambient_dim
    b_list, g_list = [], []
    for sup in candidates:
        b = np.zeros(big_m)
        g = np.zeros((big_m, len(truth)))
        for m in sup:
            b[m] = msl_bias_identity(model, c, m, sup)
            if m in truth:
                g[m, truth.position_of(m)] = msl_bias_gradient_identity(
                    model, c, m, sup)
        b_list.append(b)
        g_list.append(g)
    return BiasModel(b=b_list, G=g_list, source="analytic-identity-ost")


# ---------------------------------------------------------------------------
# Monte-Carlo selective bias

_MC_BIAS_BATCH = 1 << 12


@dataclass(eq=False)
class McBias:
    """Monte-Carlo selective bias of one candidate: the conditional mean of
    the on-support estimation error (zero off the candidate support), its
    gradient with respect to the true parameters, and the standard error of
    the bias estimate."""

    b: np.ndarray
    G: np.ndarray
    stderr: np.ndarray
    conditioned: int
    trials: int


def mc_selective_bias(model, rule, estimator, k, trials: int, seed: int,
                      step: float = 0.05, min_conditioned: int = 50,
                      gradient: bool = True) -> McBias:
    """Estimate (b_k, G_k) for one candidate by conditional Monte Carlo.

    `k` names the candidate: an index into model.candidates for the
    per-candidate linear family, a SupportSet for the sparse family.  The
    estimator is any callable (x, model, k) -> CoherentEstimate; the MSL
    estimators of this module are dispatched to a vectorized path.

    The gradient is a central difference of the conditional-mean map
    theta -> b_k(theta), evaluated with common random numbers: every
    stencil point reuses the same noise draws, so only trials whose
    selection flips contribute variance to the difference.

    Raises InsufficientConditionedSamples unless every stencil point
    conditions at least `min_conditioned` trials.  `gradient=False` skips
    the stencil entirely and returns a zero G (cheaper when only the bias
    vector is needed).
    """
    out = _mc_bias_sweep(model, rule, estimator, [k], trials, seed, step,
                         min_conditioned, gradient=gradient)
    return out[0]


def mc_bias_model(model, rule, estimator, candidates, trials: int, seed: int,
                  step: float = 0.05, min_conditioned: int = 50,
                  cutoff: float = PI_CUTOFF, gradient: bool = True) -> BiasModel:
    """Monte-Carlo bias model over a whole candidate list in one pass.

    Candidates whose empirical selection probability does not exceed
    `cutoff` get a zero (b, G) pair: the bound pipeline drops them anyway.
    A candidate that is hit, but fewer than `min_conditioned` times, raises
    InsufficientConditionedSamples.
    """
    if isinstance(model, GlmModel):
        ks = list(range(len(model.candidates)))
        if len(candidates) != len(model.candidates):
            raise ValueError("candidate list must match the model's candidates")
    else:
        ks = list(candidates)
    results = _mc_bias_sweep(model, rule, estimator, ks, trials, seed, step,
                             min_conditioned, cutoff=cutoff, gradient=gradient)
    big_m = model.ambient_dim
    s = len(_truth_of(model))
    b_list, g_list = [], []
    for res in results:
        if res is None:
            b_list.append(np.zeros(big_m))
            g_list.append(np.zeros((big_m, s)))
        else:
            b_list.append(res.b)
            g_list.append(res.G)
    return BiasModel(b=b_list, G=g_list, source="mc-msl")


def _truth_of(model):
    return model.true_support


def _mc_bias_sweep(model, rule, estimator, ks, trials, seed, step,
                   min_conditioned, cutoff=None, gradient=True):
    """Shared driver: one pass over the noise draws accumulates the
    conditional error moments of every requested candidate at every
    stencil point."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    truth = _truth_of(model)
    s = len(truth)
    big_m = model.ambient_dim
    theta0 = np.asarray(model.theta_true, dtype=float)
    # stencil: center, then +/- step along each true coordinate
    stencil = [theta0.copy()]
    if gradient:
        for l in range(s):
            for sgn in (1.0, -1.0):
                th = theta0.copy()
                th[l] += sgn * step
                stencil.append(th)
    n_pts = len(stencil)
    sup_list, match_fn, apply_fn = _dispatch_family(model, rule, estimator, ks)
    n_k = len(ks)
    counts = np.zeros((n_k, n_pts), dtype=np.int64)
    err_sum = np.zeros((n_k, n_pts, big_m))
    err_sq = np.zeros((n_k, big_m))          # center point only
    means = [_mean_map(model, th) for th in stencil]
    theta_zp = [zero_pad(th, truth).values for th in stencil]
    rng = derived_rng(seed, "bias")
    n_obs = model.num_observations
    done = 0
    while done < trials:
        n_b = min(_MC_BIAS_BATCH, trials - done)
        z = rng.standard_normal((n_b, n_obs))
        for j in range(n_pts):
            x = means[j][None, :] + model.sigma * z
            matched = match_fn(x)            # (n_k, n_b) bool
            for i in range(n_k):
                rows = np.flatnonzero(matched[i])
                if rows.size == 0:
                    continue
                est = apply_fn(i, x[rows])   # (n_rows, big_m) zero-padded
                err = est - theta_zp[j][None, :]
                mask = sup_list[i].mask()
                err[:, ~mask] = 0.0          # on-support error only
                counts[i, j] += rows.size
                err_sum[i, j] += err.sum(axis=0)
                if j == 0:
                    err_sq[i] += (err * err).sum(axis=0)
        done += n_b
    results = []
    for i, k in enumerate(ks):
        if cutoff is not None and counts[i, 0] <= cutoff * trials:
            results.append(None)
            continue
        got = int(counts[i].min())
        if got < min_conditioned:
            raise InsufficientConditionedSamples(
                "candidate {} conditioned only {} draws on some stencil "
                "point (need >= {})".format(_candidate_name(k), got,
                                            min_conditioned),
                got=got, needed=min_conditioned)
        n0 = counts[i, 0]
        b = err_sum[i, 0] / n0
        var = np.maximum(err_sq[i] / n0 - b * b, 0.0)
        stderr = np.sqrt(var / n0)
        g = np.zeros((big_m, s))
        if gradient:
            for l in range(s):
                plus = err_sum[i, 1 + 2 * l] / counts[i, 1 + 2 * l]
                minus = err_sum[i, 2 + 2 * l] / counts[i, 2 + 2 * l]
                g[:, l] = (plus - minus) / (2.0 * step)
            mask = sup_list[i].mask()
            g[~mask, :] = 0.0
        results.append(McBias(b=b, G=g, stderr=stderr,
                              conditioned=int(n0), trials=trials))
    return results


def _candidate_name(k):
    if isinstance(k, SupportSet):
        return str(k.one_based())
    return str(int(k) + 1)


def _mean_map(model, theta):
    if isinstance(model, SparseModel):
        return model.A_true @ theta
    return model.H_true @ theta


def _dispatch_family(model, rule, estimator, ks):
    """Resolve (candidate supports, batched match function, batched
    estimator application) for one model/rule pair."""
    if isinstance(model, SparseModel):
        if not all(isinstance(k, SupportSet) for k in ks):
            raise TypeError("sparse candidates must be SupportSets")
        sup_list = list(ks)
        match_fn = _sparse_match_fn(model, rule, sup_list)
        apply_fn = _sparse_apply_fn(model, estimator, sup_list)
        return sup_list, match_fn, apply_fn
    if isinstance(model, GlmModel):
        if not all(isinstance(k, (int, np.integer)) for k in ks):
            raise TypeError("per-candidate linear family takes candidate indices")
        sup_list = [model.candidates[int(k)] for k in ks]
        match_fn = _glm_match_fn(model, rule, [int(k) for k in ks])
        apply_fn = _glm_apply_fn(model, estimator, [int(k) for k in ks])
        return sup_list, match_fn, apply_fn
    raise TypeError("unsupported model type {!r}".format(type(model).__name__))


def _sparse_match_fn(model, rule, sup_list):
    masks = np.stack([sup.mask() for sup in sup_list])
    if isinstance(rule, OstRule):
        c = rule.c

        def match(x):
            crossed = np.abs(x @ model.A) > c
            return np.all(crossed[None, :, :] == masks[:, None, :], axis=2)

        return match
    if isinstance(rule, FixedRule):
        # a data-independent rule conditions on nothing: every draw counts
        def match(x):
            return np.ones((len(sup_list), x.shape[0]), dtype=bool)

        return match
    raise TypeError("unsupported rule {!r} for the sparse family".format(
        type(rule).__name__))


def _sparse_apply_fn(model, estimator, sup_list):
    if estimator is msl_sparse:
        solves = []
        for sup in sup_list:
            cols = model.A[:, list(sup.indices)]
            gram = cols.T @ cols
            if np.linalg.matrix_rank(gram) < len(sup):
                raise SingularFim(
                    "Gram matrix of the selected support {} is singular".format(
                        sup.one_based()))
            solves.append((cols, np.linalg.inv(gram)))

        def apply(i, x_rows):
            cols, gram_inv = solves[i]
            coef = x_rows @ cols @ gram_inv
            out = np.zeros((x_rows.shape[0], model.ambient_dim))
            out[:, list(sup_list[i].indices)] = coef
            return out

        return apply
    return _generic_apply_fn(model, estimator, sup_list, sup_list)


def _glm_match_fn(model, rule, k_idx):
    if isinstance(rule, FixedRule):
        def match(x):
            out = np.zeros((len(k_idx), x.shape[0]), dtype=bool)
            for i, k in enumerate(k_idx):
                out[i] = (k == rule.k)
            return out

        return match
    if not isinstance(rule, GicRule):
        raise TypeError("unsupported rule {!r} for the per-candidate linear "
                        "family".format(type(rule).__name__))
    tau = rule.tau
    n_obs = model.num_observations
    sigma_sq = model.sigma ** 2
    bases = [np.linalg.qr(h)[0] for h in model.H]
    sizes = [len(sup) for sup in model.candidates]
    visit = sorted(range(len(model.candidates)), key=lambda k: (sizes[k], k))

    def match(x):
        xx = (x * x).sum(axis=1)
        best_score = np.full(x.shape[0], np.inf)
        best_k = np.zeros(x.shape[0], dtype=np.int64)
        for k in visit:
            proj = x @ bases[k]
            resid = np.maximum(xx - (proj * proj).sum(axis=1), 0.0)
            score = resid / sigma_sq + tau(n_obs, sizes[k]) * sizes[k]
            better = score < best_score
            best_score[better] = score[better]
            best_k[better] = k
        return best_k[None, :] == np.asarray(k_idx)[:, None]

    return match


def _glm_apply_fn(model, estimator, k_idx):
    sup_list = [model.candidates[k] for k in k_idx]
    if estimator is msl_glm:
        solves = []
        for k in k_idx:
            h = model.H[k]
            solves.append((h, np.linalg.inv(h.T @ h)))

        def apply(i, x_rows):
            h, gram_inv = solves[i]
            coef = x_rows @ h @ gram_inv
            out = np.zeros((x_rows.shape[0], model.ambient_dim))
            out[:, list(sup_list[i].indices)] = coef
            return out

        return apply
    return _generic_apply_fn(model, estimator, sup_list, k_idx)


def _generic_apply_fn(model, estimator, sup_list, call_keys):
    """Row-by-row fallback for plug-in estimators (the CML hook): any
    callable (x, model, k) -> CoherentEstimate can be benchmarked."""

    def apply(i, x_rows):
        out = np.zeros((x_rows.shape[0], model.ambient_dim))
        for r in range(x_rows.shape[0]):
            est = estimator(x_rows[r], model, call_keys[i])
            if not isinstance(est, CoherentEstimate):
                raise TypeError("estimator must return a CoherentEstimate")
            if est.selected != sup_list[i]:
                raise ValueError("estimator returned a different support than "
                                 "the one conditioned on")
            out[r] = est.theta_hat.values
        return out

    return apply
