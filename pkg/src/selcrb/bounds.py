"""Selective Fisher information matrices and every bound variant built on
them: the selective CRB (biased and unbiased), its marginal and trace
forms, the induced MSE bound, the oracle CRB, and the model-averaged
SMS-CRB benchmark.

Conventions.  The true support has size S = |Lambda|; every selective FIM
J_k is an S x S matrix in the coordinates of the true support, regardless
of which candidate k it belongs to.  Bound matrices live in the ambient
M x M space through the 0/1 embedding D_k and the zero-padded bias terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics
from .model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                    alpha_beta_all, selection_matrix_D, zero_pad)
from .numerics import (DegenerateProbability, InsufficientConditionedSamples,
                       SingularFim, derived_rng, std_normal_cdf,
                       std_normal_pdf, sym_inverse)
from .selection import (EmptySelection, GicRule, SelectionProbabilities,
                        _orthonormal_bases, _select_once,
                        glm2_logprob_derivs, glm2_selection_prob)

# candidates with analytic probability at or below this contribute nothing
# to bound sums; every dropped term is PSD so the bound stays valid
PI_CUTOFF = 1e-12


@dataclass(eq=False)
class SelectiveFim:
    """Per-candidate selective FIMs (S x S, true-support coordinates) plus
    the oracle FIM.  An entry of `per_model` may be None for a candidate
    that was skipped because its selection probability is negligible, or a
    SingularFim instance recording why that candidate's FIM is unusable
    (raised later if a bound actually needs it)."""

    per_model: list
    oracle: np.ndarray
    method: str

    def __post_init__(self):
        self.oracle = numerics.check_symmetric(self.oracle)
        checked = []
        for j in self.per_model:
            if j is None or isinstance(j, Exception):
                checked.append(j)
            else:
                checked.append(numerics.check_symmetric(j))
        self.per_model = checked


@dataclass(eq=False)
class BiasModel:
    """Selective bias vectors b_k (ambient length, supported on candidate k)
    and their gradients G_k (M x S) with respect to the true parameters."""

    b: list
    G: list
    source: str

    @classmethod
    def zero(cls, candidates: CandidateSet, truth: SupportSet) -> "BiasModel":
        big_m = candidates.ambient_dim
        s = len(truth)
        return cls(b=[np.zeros(big_m) for _ in candidates],
                   G=[np.zeros((big_m, s)) for _ in candidates],
                   source="zero")

    def validate(self, candidates: CandidateSet):
        if len(self.b) != len(candidates) or len(self.G) != len(candidates):
            raise ValueError("bias model must carry one (b, G) pair per candidate")
        for k, sup in enumerate(candidates):
            off = list(sup.complement())
            if np.any(self.b[k][off] != 0.0):
                raise ValueError(
                    "bias vector {} has mass outside its support".format(k + 1))
            if np.any(self.G[k][off, :] != 0.0):
                raise ValueError(
                    "bias gradient {} has rows outside its support".format(k + 1))


@dataclass(eq=False)
class BoundReport:
    """Everything the bound pipeline produces for one configuration."""

    scrb_matrix: np.ndarray
    mse_matrix: np.ndarray
    msse_trace_bound: float
    mse_trace_bound: float
    marginal_msse: np.ndarray
    marginal_mse: np.ndarray
    oracle_trace: float
    pi: SelectionProbabilities
    dropped_mass: float
    sms_trace: Optional[float] = None

    def __post_init__(self):
        scale = max(1.0, float(np.max(np.abs(self.scrb_matrix))))
        min_eig = float(np.linalg.eigvalsh(self.scrb_matrix).min())
        if min_eig < -1e-10 * scale:
            raise ValueError(
                "selective CRB matrix is not PSD (min eigenvalue {:.3e})".format(min_eig))
        if self.msse_trace_bound < -1e-12 or self.mse_trace_bound < -1e-12:
            raise ValueError("trace bounds must be nonnegative")


def _sparse_q_factors(model: SparseModel, c: float):
    """Per-index Q factors of the thresholding rule.

    Returns (q_selected, q_unselected, stay_prob, cross_prob): the scalar
    multiplying a_m a_m^T when index m is selected resp. not selected, and
    the per-index probabilities used in the guards.
    """
    alpha, beta = alpha_beta_all(model, c)
    pa, pb = std_normal_pdf(alpha), std_normal_pdf(beta)
    ca, cb = std_normal_cdf(alpha), std_normal_cdf(beta)
    cross = 1.0 - ca + cb          # Pr(|a_m^T x| > c)
    stay = ca - cb                 # Pr(|a_m^T x| <= c)
    diff = pa - pb
    q_sel = np.empty(model.ambient_dim)
    q_uns = np.empty(model.ambient_dim)
    for m in range(model.ambient_dim):
        if cross[m] < numerics.PROB_FLOOR:
            q_sel[m] = np.nan
        else:
            q_sel[m] = (pa[m] * alpha[m] - pb[m] * beta[m]) / cross[m] \
                - diff[m] ** 2 / cross[m] ** 2
        if stay[m] < numerics.PROB_FLOOR:
            q_uns[m] = np.nan
        else:
            q_uns[m] = (-pa[m] * alpha[m] + pb[m] * beta[m]) / stay[m] \
                - diff[m] ** 2 / stay[m] ** 2
    return q_sel, q_uns, stay, cross


def sparse_selective_fim(model: SparseModel, c: float,
                         candidate: SupportSet) -> np.ndarray:
    """Selective FIM of one candidate support under the thresholding rule:

        J_k = (1/sigma^2) A_Lambda^T (I + Q_k) A_Lambda,

    where Q_k weights each dictionary column by a truncated-Gaussian factor
    whose branch depends on whether the index was selected.  Coordinates
    are those of the true support.
    """
    q_sel, q_uns, stay, cross = _sparse_q_factors(model, c)
    factors = np.empty(model.ambient_dim)
    for m in range(model.ambient_dim):
        f = q_sel[m] if m in candidate else q_uns[m]
        if np.isnan(f):
            which = "crossing" if m in candidate else "staying"
            raise DegenerateProbability(
                "index {} has vanishing {} probability under c={}".format(
                    m + 1, which, c), index=m)
        factors[m] = f
    a_t = model.A_true
    # A_Lambda^T Q_k A_Lambda with Q_k = sum_m factors[m] a_m a_m^T
    proj = model.A.T @ a_t  # (M, S): row m is a_m^T A_Lambda
    middle = proj.T @ (factors[:, None] * proj)
    gram = a_t.T @ a_t
    j = (gram + middle) / model.sigma ** 2
    return 0.5 * (j + j.T)


def sparse_selective_fims(model: SparseModel, c: float, candidates: CandidateSet,
                          pi: SelectionProbabilities,
                          cutoff: float = PI_CUTOFF) -> SelectiveFim:
    """Selective FIMs for every candidate with non-negligible probability.

    The product-form conditioning treats the per-index threshold events as
    independent, which is exact for orthogonal dictionary columns.  For
    coherent dictionaries at low SNR the resulting curvature correction can
    push a candidate's matrix outside the positive-definite cone; such an
    entry is recorded as a SingularFim diagnostic rather than a usable FIM,
    and any bound that needs that candidate raises it.  The Monte-Carlo
    route (mc_selective_fims) is always positive semidefinite and is the
    appropriate one in that regime.
    """
    gram = model.A_true.T @ model.A_true
    oracle = gram / model.sigma ** 2
    per_model = []
    for k, sup in enumerate(candidates):
        if pi.pi[k] <= cutoff:
            per_model.append(None)
            continue
        j_k = sparse_selective_fim(model, c, sup)
        w = np.linalg.eigvalsh(j_k)
        wmin = float(w.min())
        if wmin <= 0.0:
            absw = np.abs(w)
            cond = math.inf if absw.min() == 0 else float(absw.max() / absw.min())
            per_model.append(SingularFim(
                "selective FIM of candidate {} is not positive definite "
                "(min eigenvalue {:.3e}); the independence approximation of "
                "the threshold events is invalid here".format(k + 1, wmin),
                condition=cond, model_index=k))
        else:
            per_model.append(j_k)
    return SelectiveFim(per_model=per_model, oracle=oracle, method="analytic-sparse")


def glm2_selective_fims(model: GlmModel, tau,
                        cutoff: float = PI_CUTOFF) -> SelectiveFim:
    """Selective FIMs of the two-candidate nested linear family:

        J_k = (1/sigma^2) H2^T H2 + diag(0, d^2 log pi_k / d theta_2^2).

    Candidates whose probability is below `cutoff` are skipped (their
    log-probability curvature is numerically meaningless there and they
    contribute nothing to the bounds).
    """
    pi = glm2_selection_prob(model, tau)
    h2 = model.H[1]
    oracle = (h2.T @ h2) / model.sigma ** 2
    keep = pi.pi > cutoff
    if not np.all(keep):
        per = [None, None]
        k_live = int(np.flatnonzero(keep)[0])
        # curvature of the kept candidate's log probability tends to 0 at
        # saturation, so its selective FIM is the oracle FIM
        per[k_live] = oracle.copy()
        return SelectiveFim(per_model=per, oracle=oracle, method="analytic-glm2")
    _, d2 = glm2_logprob_derivs(model, tau)
    per_model = []
    for k in range(2):
        j = oracle + np.diag([0.0, d2[k]])
        w = np.linalg.eigvalsh(j)
        wmin, wmax = float(np.min(np.abs(w))), float(np.max(np.abs(w)))
        cond = math.inf if wmin == 0 else wmax / wmin
        if np.min(w) <= 0 or cond > numerics.COND_LIMIT:
            raise SingularFim(
                "selective FIM of candidate {} is not positive definite "
                "(condition {:.3e})".format(k + 1, cond),
                condition=cond, model_index=k)
        per_model.append(j)
    return SelectiveFim(per_model=per_model, oracle=oracle, method="analytic-glm2")


@dataclass(eq=False)
class McFim:
    """Monte-Carlo estimate of one selective FIM with batch-means errors."""

    matrix: np.ndarray
    stderr: np.ndarray
    conditioned: int
    trials: int
    method: str = "monte-carlo"


def mc_selective_fim(model, rule, candidate: SupportSet, trials: int,
                     seed: int, min_conditioned: int = 50) -> McFim:
    """Estimate J_k = E[s s^T | selected] - E[s | selected] E[s | selected]^T
    with s the score of the true parameters, by conditioning raw draws on
    the selection event.

    Draw t uses the stream derived from (seed, t).  Raises
    InsufficientConditionedSamples when fewer than `min_conditioned` draws
    land on the candidate.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if isinstance(model, SparseModel):
        score_map = model.A_true.T / model.sigma  # times standardized noise
    elif isinstance(model, GlmModel):
        score_map = model.H_true.T / model.sigma
    else:
        raise TypeError("unsupported model type {!r}".format(type(model)))
    mean = model.noiseless_mean()
    bases = _orthonormal_bases(model) if isinstance(rule, GicRule) else None
    want = candidate.indices
    scores = []
    for t in range(trials):
        w = derived_rng(seed, t).standard_normal(model.num_observations)
        x = mean + model.sigma * w
        try:
            if bases is not None:
                from .selection import gic_select
                sup = model.candidates[gic_select(x, model, rule.tau, bases=bases)]
            else:
                sup = _select_once(model, rule, x)
        except EmptySelection:
            continue
        if sup.indices == want:
            # score of the true parameters: (1/sigma^2) A^T (x - mean)
            scores.append(score_map @ w)
    n = len(scores)
    if n < min_conditioned:
        raise InsufficientConditionedSamples(
            "only {} of {} draws selected the candidate (need >= {})".format(
                n, trials, min_conditioned), got=n, needed=min_conditioned)
    s = np.asarray(scores)
    mean_s = s.mean(axis=0)
    second = (s.T @ s) / n
    fim = second - np.outer(mean_s, mean_s)
    fim = 0.5 * (fim + fim.T)
    # batch-means standard errors on each entry
    n_batches = min(100, max(2, n // 50))
    idx = np.array_split(np.arange(n), n_batches)
    per_batch = []
    for rows in idx:
        sb = s[rows]
        mb = sb.mean(axis=0)
        per_batch.append((sb.T @ sb) / len(rows) - np.outer(mb, mb))
    pb = np.asarray(per_batch)
    stderr = pb.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return McFim(matrix=fim, stderr=stderr, conditioned=n, trials=trials)


_MC_FIM_BATCH = 1 << 15


def _merge_group_moments(store, keys, scores):
    """Accumulate per-key counts and first/second score moments."""
    uniq, inv = np.unique(keys, return_inverse=True)
    n_u = len(uniq)
    s_dim = scores.shape[1]
    counts = np.bincount(inv, minlength=n_u)
    sums = np.zeros((n_u, s_dim))
    np.add.at(sums, inv, scores)
    outers = np.zeros((n_u, s_dim, s_dim))
    np.add.at(outers, inv, scores[:, :, None] * scores[:, None, :])
    for i, key in enumerate(uniq):
        entry = store.get(int(key))
        if entry is None:
            store[int(key)] = [int(counts[i]), sums[i].copy(), outers[i].copy()]
        else:
            entry[0] += int(counts[i])
            entry[1] += sums[i]
            entry[2] += outers[i]


def _moments_to_fim(count, s_sum, ss_sum):
    mean = s_sum / count
    fim = ss_sum / count - np.outer(mean, mean)
    return 0.5 * (fim + fim.T)


def mc_selective_fims(model, rule, trials: int, seed: int,
                      min_conditioned: int = 50):
    """One-pass Monte-Carlo selective FIMs for every selectable support.

    Draws `trials` datasets from the model, classifies each by the support
    the rule selects, and assembles J_k = E[s s^T | k] - E[s|k] E[s|k]^T for
    every support hit at least `min_conditioned` times.  This is the route
    of choice when the analytic per-candidate FIMs are unavailable or
    invalid (coherent dictionaries at low SNR): every estimate here is a
    conditional covariance and therefore positive semidefinite up to MC
    noise.

    Returns (candidates, pi, fims):
      * sparse/OST: `candidates` lists the discovered supports in (size,
        lexicographic) order; supports hit fewer than `min_conditioned`
        times are not candidates and their empirical mass goes to
        `pi.other_mass`.
      * GLM/GIC: `candidates` is the model's own candidate set; an
        under-sampled candidate keeps its empirical probability but carries
        an InsufficientConditionedSamples diagnostic instead of a FIM.

    Deterministic for fixed (seed, trials): draws come from the stream
    derived from `seed` in fixed-size batches, single-threaded.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = derived_rng(seed, "fim")
    if isinstance(model, SparseModel) and hasattr(rule, "c"):
        return _mc_fims_sparse_ost(model, float(rule.c), trials, rng, seed,
                                   min_conditioned)
    if isinstance(model, GlmModel) and isinstance(rule, GicRule):
        return _mc_fims_glm_gic(model, rule.tau, trials, rng, seed,
                                min_conditioned)
    raise TypeError(
        "unsupported model/rule combination for the one-pass MC FIM: "
        "{!r} with {!r}".format(type(model).__name__, type(rule).__name__))


def _mc_fims_sparse_ost(model: SparseModel, c: float, trials: int, rng,
                        seed: int, min_conditioned: int):
    big_m = model.ambient_dim
    if big_m > 63:
        raise ValueError("one-pass MC FIM supports at most 63 dictionary atoms")
    mean = model.noiseless_mean()
    a_t = model.A_true
    bit_values = (np.int64(1) << np.arange(big_m, dtype=np.int64))
    store = {}
    marg_counts = np.zeros(big_m, dtype=np.int64)
    n_empty = 0
    done = 0
    while done < trials:
        n_b = min(_MC_FIM_BATCH, trials - done)
        z = rng.standard_normal((n_b, model.num_observations))
        x = mean[None, :] + model.sigma * z
        crossed = np.abs(x @ model.A) > c
        marg_counts += crossed.sum(axis=0)
        keys = crossed @ bit_values
        nonempty = keys != 0
        n_empty += int(n_b - nonempty.sum())
        if np.any(nonempty):
            scores = (z[nonempty] @ a_t) / model.sigma
            _merge_group_moments(store, keys[nonempty], scores)
        done += n_b
    kept = [(key, entry) for key, entry in store.items()
            if entry[0] >= min_conditioned]
    if not kept:
        raise InsufficientConditionedSamples(
            "no support reached {} conditioned draws in {} trials".format(
                min_conditioned, trials), got=0, needed=min_conditioned)

    def key_support(key):
        return tuple(int(m) for m in range(big_m) if key >> m & 1)

    kept.sort(key=lambda item: (bin(item[0]).count("1"), key_support(item[0])))
    supports = tuple(SupportSet(key_support(key), big_m) for key, _ in kept)
    candidates = CandidateSet(supports, big_m)
    counts = np.array([entry[0] for _, entry in kept], dtype=float)
    pi_hat = counts / trials
    stderr = np.sqrt(pi_hat * (1.0 - pi_hat) / trials)
    other = 1.0 - pi_hat.sum() - n_empty / trials
    # Truncation floor of the outcomes that did not make the candidate
    # list: on each such event any coherent estimator's error is at least
    # the true parameters it cannot touch, so pi * t t^T is banked here
    # and the bound pipeline adds it to the MSE-form matrix.
    theta_pad = zero_pad(model.theta_true, model.true_support).values
    bit_index = np.arange(big_m, dtype=np.int64)
    trunc = (n_empty / trials) * np.outer(theta_pad, theta_pad)
    for key, entry in store.items():
        if entry[0] >= min_conditioned:
            continue
        in_support = (key >> bit_index) & 1
        t = np.where(in_support.astype(bool), 0.0, theta_pad)
        trunc += (entry[0] / trials) * np.outer(t, t)
    pi = SelectionProbabilities(
        pi=pi_hat, p_marginal=marg_counts / trials, method="monte-carlo",
        stderr=stderr, trials=trials, seed=seed,
        other_mass=max(0.0, float(other)), empty_mass=n_empty / trials,
        other_truncation=trunc)
    per_model = [_moments_to_fim(*entry) for _, entry in kept]
    oracle = (a_t.T @ a_t) / model.sigma ** 2
    fims = SelectiveFim(per_model=per_model, oracle=oracle, method="monte-carlo")
    return candidates, pi, fims


def _mc_fims_glm_gic(model: GlmModel, tau, trials: int, rng, seed: int,
                     min_conditioned: int):
    n_obs = model.num_observations
    sigma = model.sigma
    hcat = np.hstack(model.H)
    u, sv, _ = np.linalg.svd(hcat, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-12))
    q = u[:, :rank]
    mean = model.noiseless_mean()
    q_mu = q.T @ mean
    mu_sq = float(mean @ mean)
    # per-candidate orthonormal bases expressed in the common column space
    maps = []
    for h in model.H:
        b_k, _ = np.linalg.qr(h)
        maps.append(q.T @ b_k)
    score_half = q.T @ model.H_true  # s = score_half^T g / sigma
    sizes = [len(sup) for sup in model.candidates]
    n_cand = len(model.candidates)
    # visit order implementing the (score, size, index) tie-break
    visit = sorted(range(n_cand), key=lambda k: (sizes[k], k))
    store = {}
    counts = np.zeros(n_cand, dtype=np.int64)
    done = 0
    while done < trials:
        n_b = min(_MC_FIM_BATCH, trials - done)
        g = rng.standard_normal((n_b, rank))
        chi = rng.chisquare(n_obs - rank, n_b) if n_obs > rank else np.zeros(n_b)
        y = q_mu[None, :] + sigma * g
        x_sq = mu_sq + 2.0 * sigma * (g @ q_mu) + sigma ** 2 * (
            (g * g).sum(axis=1) + chi)
        best_score = np.full(n_b, np.inf)
        best_k = np.zeros(n_b, dtype=np.int64)
        for k in visit:
            proj = y @ maps[k]
            resid = np.maximum(x_sq - (proj * proj).sum(axis=1), 0.0)
            score = resid / sigma ** 2 + tau(n_obs, sizes[k]) * sizes[k]
            better = score < best_score
            best_score[better] = score[better]
            best_k[better] = k
        scores = (g @ score_half) / sigma
        _merge_group_moments(store, best_k, scores)
        np.add.at(counts, best_k, 1)
        done += n_b
    pi_hat = counts / trials
    stderr = np.sqrt(pi_hat * (1.0 - pi_hat) / trials)
    p_marg = np.zeros(model.ambient_dim)
    for k, sup in enumerate(model.candidates):
        p_marg[list(sup.indices)] += pi_hat[k]
    pi = SelectionProbabilities(
        pi=pi_hat, p_marginal=np.minimum(p_marg, 1.0), method="monte-carlo",
        stderr=stderr, trials=trials, seed=seed)
    per_model = []
    for k in range(n_cand):
        if counts[k] == 0:
            per_model.append(None)
        elif counts[k] < min_conditioned:
            per_model.append(InsufficientConditionedSamples(
                "candidate {} was selected only {} times (need >= {})".format(
                    k + 1, int(counts[k]), min_conditioned),
                got=int(counts[k]), needed=min_conditioned))
        else:
            per_model.append(_moments_to_fim(*store[k]))
    oracle = (model.H_true.T @ model.H_true) / sigma ** 2
    fims = SelectiveFim(per_model=per_model, oracle=oracle, method="monte-carlo")
    return model.candidates, pi, fims


def oracle_crb(model) -> np.ndarray:
    """CRB of a known-support estimator: sigma^2 times the inverse Gram of
    the true-support regressors."""
    if isinstance(model, SparseModel):
        gram = model.A_true.T @ model.A_true
    elif isinstance(model, GlmModel):
        gram = model.H_true.T @ model.H_true
    else:
        raise TypeError("unsupported model type {!r}".format(type(model)))
    return model.sigma ** 2 * sym_inverse(gram)


def sms_crb(model: GlmModel, pi: SelectionProbabilities) -> np.ndarray:
    """Model-averaged bound over the candidates that contain the truth:

        sum_{k: candidate_k >= truth} pi_k * zero-padded((per-model FIM_k)^-1)

    Underestimating candidates carry no term.  Only defined for the
    per-candidate linear family: in the sparse setting the per-model FIM of
    a candidate is the Gram of its dictionary columns, which is singular
    whenever a candidate has more columns than observations, so no
    analogous bound exists there.
    """
    if isinstance(model, SparseModel):
        raise ValueError(
            "the model-averaged bound is not defined for the sparse family; "
            "per-model FIMs are singular once supports exceed the number of "
            "observations")
    if not isinstance(model, GlmModel):
        raise TypeError("unsupported model type {!r}".format(type(model)))
    truth = model.true_support
    big_m = model.ambient_dim
    out = np.zeros((big_m, big_m))
    truth_members = set(truth.indices)
    for k, sup in enumerate(model.candidates):
        if not truth_members <= set(sup.indices):
            continue
        if pi.pi[k] <= PI_CUTOFF:
            continue
        h = model.H[k]
        fim_k = (h.T @ h) / model.sigma ** 2
        try:
            inv = sym_inverse(fim_k)
        except SingularFim as exc:
            raise SingularFim(
                "per-model FIM of candidate {} is singular".format(k + 1),
                condition=exc.condition, model_index=k) from exc
        rows = list(sup.indices)
        out[np.ix_(rows, rows)] += pi.pi[k] * inv
    return 0.5 * (out + out.T)


def _kept_indices(pi: SelectionProbabilities, fims: SelectiveFim,
                  cutoff: float) -> list:
    kept = []
    for k, p in enumerate(pi.pi):
        if p <= cutoff:
            continue
        entry = fims.per_model[k]
        if entry is None:
            raise ValueError(
                "candidate {} has probability {:.3g} but no FIM".format(k + 1, p))
        if isinstance(entry, Exception):
            raise entry
        kept.append(k)
    return kept


def selective_crb(candidates: CandidateSet, truth: SupportSet,
                  pi: SelectionProbabilities, fims: SelectiveFim,
                  bias: BiasModel, theta: np.ndarray,
                  cutoff: float = PI_CUTOFF) -> BoundReport:
    """Assemble the selective CRB and the derived MSE bound.

    MSSE:  B = sum_k pi_k [ (D_k + G_k) J_k^{-1} (D_k + G_k)^T + b_k b_k^T ]
    MSE :  adds, per candidate, the outer square of (b_k - t_k) in place of
           b_k b_k^T, where t_k zero-pads the true parameters missed by
           candidate k; the trace and marginal forms charge each missed
           index its full marginal miss probability (1 - p_m).  When `pi`
           carries the truncation floor of outcomes outside the candidate
           list (Monte-Carlo discovery), the MSE matrix includes it, so its
           diagonal stays full-mass.

    With a zero bias model the MSSE form reduces to
    sum_k pi_k D_k J_k^{-1} D_k^T.
    """
    bias.validate(candidates)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(truth),):
        raise ValueError("theta must have one entry per true-support index")
    big_m = candidates.ambient_dim
    kept = _kept_indices(pi, fims, cutoff)
    theta_pad = zero_pad(theta, truth).values

    scrb = np.zeros((big_m, big_m))
    mse = np.zeros((big_m, big_m))
    for k in kept:
        sup = candidates[k]
        p_k = float(pi.pi[k])
        try:
            j_inv = sym_inverse(fims.per_model[k], require_pd=True)
        except SingularFim as exc:
            raise SingularFim(
                "selective FIM of candidate {} is singular".format(k + 1),
                condition=exc.condition, model_index=k) from exc
        w = selection_matrix_D(sup, truth) + bias.G[k]
        psi = w @ j_inv @ w.T
        b_k = bias.b[k]
        scrb += p_k * (psi + np.outer(b_k, b_k))
        # parameters the candidate cannot estimate (true support minus it)
        t_k = np.where(sup.mask(), 0.0, theta_pad)
        resid = b_k - t_k
        mse += p_k * (psi + np.outer(resid, resid))
    scrb = 0.5 * (scrb + scrb.T)
    mse = 0.5 * (mse + mse.T)
    if pi.other_truncation is not None:
        extra = np.asarray(pi.other_truncation, dtype=float)
        mse = mse + 0.5 * (extra + extra.T)

    marginal_msse = np.diag(scrb).copy()
    miss = (1.0 - pi.p_marginal) * theta_pad ** 2
    marginal_mse = marginal_msse + miss
    dropped = max(0.0, 1.0 - float(sum(pi.pi[k] for k in kept)))
    oracle_trace = float(np.trace(sym_inverse(fims.oracle)))
    return BoundReport(
        scrb_matrix=scrb,
        mse_matrix=mse,
        msse_trace_bound=float(np.trace(scrb)),
        mse_trace_bound=float(np.trace(scrb) + miss.sum()),
        marginal_msse=marginal_msse,
        marginal_mse=marginal_mse,
        oracle_trace=oracle_trace,
        pi=pi,
        dropped_mass=dropped)


def marginal_bounds(candidates: CandidateSet, truth: SupportSet,
                    pi: SelectionProbabilities, fims: SelectiveFim,
                    bias: BiasModel, theta: np.ndarray):
    """Per-index MSSE and MSE bounds (the diagonals of the matrix bounds)."""
    report = selective_crb(candidates, truth, pi, fims, bias, theta)
    return report.marginal_msse, report.marginal_mse


def sparse_trace_bound(model: SparseModel, c: float,
                       candidates: CandidateSet,
                       cutoff: float = PI_CUTOFF) -> float:
    """Trace bound of the thresholding family, written directly from the
    per-candidate FIM diagonals:

        sigma^2 sum_l sum_{k owning index l} pi_k [(A^T (I+Q_k) A)^{-1}]_{ll}
        + sum_{m in support} Pr(index m not selected) * theta_m^2
    """
    from .selection import ost_selection_prob

    pi = ost_selection_prob(model, c, candidates)
    truth = model.true_support
    total = 0.0
    for k, sup in enumerate(candidates):
        if pi.pi[k] <= cutoff:
            continue
        j_k = sparse_selective_fim(model, c, sup)
        try:
            j_inv = sym_inverse(j_k, require_pd=True)
        except SingularFim as exc:
            raise SingularFim(
                "selective FIM of candidate {} is singular".format(k + 1),
                condition=exc.condition, model_index=k) from exc
        for l, m in enumerate(truth.indices):
            if m in sup:
                total += pi.pi[k] * j_inv[l, l]
    stay = 1.0 - pi.p_marginal
    for l, m in enumerate(truth.indices):
        total += stay[m] * model.theta_true[l] ** 2
    return float(total)
