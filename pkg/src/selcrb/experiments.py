"""Seeded Monte-Carlo harness for the post-selection estimators.

run_mc measures the MSSE/MSE of a coherent estimator under a selection
rule; sweep joins those measurements with the bound pipeline along an SNR,
threshold, penalty, or selection-probability axis, one row per grid point.

Determinism contract: every trial belongs to a fixed-size compute block,
each block draws from the stream derived from (seed, "mc", block index),
and workers write into disjoint per-trial slots that are reduced in fixed
order afterwards — so the results are bitwise identical for any worker
count.
"""

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import (DegenerateProbability, InsufficientConditionedSamples,
                       SingularFim, derived_rng, marcum_q_half, sym_inverse)
from .model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                    enumerate_candidates, zero_pad)
from .selection import (FixedRule, GicRule, OstRule, glm2_selection_prob,
                        ost_selection_prob)
from .bounds import (PI_CUTOFF, BiasModel, glm2_selective_fims,
                     mc_selective_fims, oracle_crb, selective_crb, sms_crb,
                     sparse_selective_fims)
from .estimators import identity_bias_model, mc_bias_model, msl_glm, msl_sparse

_BLOCK = 2048          # compute block; fixed, never a function of threads
_FAMILIES = ("glm2", "sparse-ost")
_AXES = ("snr", "threshold", "penalty", "pi2")
_FIM_METHODS = ("analytic", "mc")
_BIAS_SOURCES = ("zero", "identity", "mc-msl")

# per-trial selection codes below candidate indices
_CODE_EMPTY = -1
_CODE_OTHER = -2
_CODE_ERROR = -3


@dataclass(eq=False)
class ExperimentConfig:
    """One experiment: a model/rule pair, Monte-Carlo budget, candidate
    policy, the bound-side knobs, and optionally a sweep axis with grid."""

    family: str
    model: object
    rule: object
    trials: int = 20000
    seed: int = 0
    sweep_axis: Optional[str] = None
    grid: Optional[tuple] = None
    s_max: Optional[int] = None
    k_max: Optional[int] = None
    mass_target: Optional[float] = None
    fim_method: str = "analytic"
    fim_trials: Optional[int] = None
    bias_source: str = "zero"
    bias_trials: Optional[int] = None
    bias_step: float = 0.05
    min_conditioned: int = 50
    threads: int = 1
    output: Optional[str] = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError("family must be one of {}".format(_FAMILIES))
        if self.family == "glm2" and not isinstance(self.model, GlmModel):
            raise ValueError("family glm2 needs a GlmModel")
        if self.family == "sparse-ost" and not isinstance(self.model, SparseModel):
            raise ValueError("family sparse-ost needs a SparseModel")
        if self.family == "glm2" and not isinstance(self.rule, (GicRule, FixedRule)):
            raise ValueError("family glm2 takes a GIC or fixed rule")
        if self.family == "sparse-ost" and not isinstance(self.rule, (OstRule, FixedRule)):
            raise ValueError("family sparse-ost takes a thresholding or fixed rule")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.fim_method not in _FIM_METHODS:
            raise ValueError("fim_method must be one of {}".format(_FIM_METHODS))
        if self.bias_source not in _BIAS_SOURCES:
            raise ValueError("bias_source must be one of {}".format(_BIAS_SOURCES))
        if self.bias_source == "identity" and self.family != "sparse-ost":
            raise ValueError("the closed-form bias model exists only for the "
                             "sparse family with A = I")
        if self.sweep_axis is not None:
            if self.sweep_axis not in _AXES:
                raise ValueError("sweep axis must be one of {}".format(_AXES))
            if self.sweep_axis == "threshold" and self.family != "sparse-ost":
                raise ValueError("a threshold sweep needs the sparse family")
            if self.sweep_axis in ("penalty", "pi2") and self.family != "glm2":
                raise ValueError("penalty and pi2 sweeps need the glm2 family")
            if self.grid is None or len(self.grid) == 0:
                raise ValueError("a sweep needs a nonempty grid")
            g = np.asarray(self.grid, dtype=float)
            if not np.all(np.isfinite(g)):
                raise ValueError("grid values must be finite")
            d = np.diff(g)
            if d.size and not (np.all(d > 0) or np.all(d < 0)):
                raise ValueError("grid must be strictly monotone")
            self.grid = tuple(float(v) for v in g)


def snr_db(model) -> float:
    """10 log10(||mean||^2 / (N sigma^2)), the per-sample SNR."""
    mu = model.noiseless_mean()
    return 10.0 * math.log10(float(mu @ mu) /
                             (model.num_observations * model.sigma ** 2))


def sigma_for_snr(model, snr: float) -> float:
    """Noise level placing the model at a requested per-sample SNR."""
    mu = model.noiseless_mean()
    return math.sqrt(float(mu @ mu) /
                     (model.num_observations * 10.0 ** (snr / 10.0)))


@dataclass(eq=False)
class McRunResult:
    """Monte-Carlo error moments of one coherent-estimation pipeline.

    Selected errors zero the coordinates outside the selected support;
    full errors charge every missed coordinate its parameter value.  The
    moment matrices average over the trials that produced an estimate;
    failed trials are counted, never silently dropped.
    """

    msse_matrix: np.ndarray
    mse_matrix: np.ndarray
    marginal_msse: np.ndarray
    marginal_mse: np.ndarray
    second_moments: list
    bias: list
    frequencies: np.ndarray
    empty_freq: float
    other_freq: float
    error_freq: float
    error_count: int
    error_detail: Optional[str]
    trials: int
    seed: int
    batch_msse: np.ndarray
    batch_mse: np.ndarray

    def __post_init__(self):
        total = float(self.frequencies.sum()) + self.empty_freq \
            + self.other_freq + self.error_freq
        if abs(total - 1.0) > 1e-12:
            raise ValueError("selection frequencies must sum to 1")

    def trace(self, kind: str = "mse", indices=None) -> float:
        marg = self.marginal_mse if kind == "mse" else self.marginal_msse
        if indices is None:
            return float(marg.sum())
        return float(marg[list(indices)].sum())

    def trace_stderr(self, kind: str = "mse", indices=None) -> float:
        """Batch-means standard error of trace(kind) over `indices`."""
        batches = self.batch_mse if kind == "mse" else self.batch_msse
        if batches.shape[0] < 2:
            return math.inf
        vals = batches.sum(axis=1) if indices is None \
            else batches[:, list(indices)].sum(axis=1)
        return float(vals.std(ddof=1) / math.sqrt(len(vals)))


def _candidate_list(config) -> CandidateSet:
    model = config.model
    if isinstance(model, GlmModel):
        return model.candidates
    s_max = config.s_max
    if s_max is None:
        s_max = min(model.ambient_dim, len(model.true_support) + 1)
    ranking = None
    if isinstance(config.rule, OstRule) and (config.k_max is not None or
                                             config.mass_target is not None):
        ranking = (model, config.rule.c)
    return enumerate_candidates(model.ambient_dim, s_max, ranking=ranking,
                                k_max=config.k_max,
                                mass_target=config.mass_target)


def run_mc(config: ExperimentConfig) -> McRunResult:
    """Estimate the MSSE/MSE matrices of the coherent MSL pipeline.

    Per trial: draw noise, select a support, fit the MSL estimate on it,
    and record the selected-error and full-error vectors.  An empty
    selection contributes the all-zero estimate; a selection whose fit is
    impossible (rank-deficient columns) is counted as a per-trial error.
    """
    model, rule = config.model, config.rule
    n = config.trials
    big_m = model.ambient_dim
    candidates = _candidate_list(config)
    theta_zp = model.theta_padded()
    code = np.empty(n, dtype=np.int32)
    e_sel = np.empty((n, big_m))
    e_full = np.empty((n, big_m))
    block_mats = _block_precompute(model, rule, candidates)
    block_errors = {}

    def work(b0):
        nb = min(_BLOCK, n - b0)
        rng = derived_rng(config.seed, "mc", b0 // _BLOCK)
        z = rng.standard_normal((nb, model.num_observations))
        x = model.noiseless_mean()[None, :] + model.sigma * z
        c_b, es_b, ef_b, err = _simulate_block(x, model, rule, candidates,
                                               theta_zp, block_mats)
        code[b0:b0 + nb] = c_b
        e_sel[b0:b0 + nb] = es_b
        e_full[b0:b0 + nb] = ef_b
        if err is not None:
            block_errors[b0] = err

    starts = list(range(0, n, _BLOCK))
    if config.threads == 1:
        for b0 in starts:
            work(b0)
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(work, starts))

    return _reduce_trials(code, e_sel, e_full, candidates, config,
                          block_errors)


def _block_precompute(model, rule, candidates):
    """Per-candidate least-squares operators reused across blocks."""
    mats = {}
    if isinstance(model, GlmModel):
        for k, h in enumerate(model.H):
            mats[k] = (h, np.linalg.inv(h.T @ h))
    return mats


def _ls_fit(cols, x_rows):
    """Least-squares coefficients for a fixed column set; None when the
    Gram matrix is singular."""
    gram = cols.T @ cols
    if cols.shape[1] > cols.shape[0] or \
            np.linalg.matrix_rank(gram) < cols.shape[1]:
        return None
    return x_rows @ cols @ np.linalg.inv(gram)


def _simulate_block(x, model, rule, candidates, theta_zp, mats):
    nb = x.shape[0]
    big_m = model.ambient_dim
    code = np.full(nb, _CODE_OTHER, dtype=np.int32)
    e_sel = np.zeros((nb, big_m))
    e_full = np.tile(-theta_zp, (nb, 1))
    first_error = None

    if isinstance(rule, FixedRule):
        sel_idx = np.full(nb, rule.k, dtype=np.int64)
        groups = [(rule.k, np.arange(nb))]
    elif isinstance(rule, OstRule):
        crossed = np.abs(x @ model.A) > rule.c
        bits = (np.int64(1) << np.arange(big_m, dtype=np.int64))
        keys = crossed @ bits
        lookup = {int(sup.mask() @ bits): k for k, sup in enumerate(candidates)}
        empty = keys == 0
        code[empty] = _CODE_EMPTY          # zero estimate, full error = -theta
        groups = []
        for key in np.unique(keys[~empty]):
            rows = np.flatnonzero(keys == key)
            sup = tuple(int(m) for m in range(big_m) if int(key) >> m & 1)
            groups.append((lookup.get(int(key), (_CODE_OTHER, sup)), rows))
    elif isinstance(rule, GicRule):
        best_k = _gic_argmin(x, model, rule.tau)
        groups = [(int(k), np.flatnonzero(best_k == k))
                  for k in np.unique(best_k)]
    else:
        raise TypeError("unsupported rule {!r}".format(type(rule).__name__))

    for tag, rows in groups:
        if rows.size == 0:
            continue
        if isinstance(tag, tuple):          # support outside the candidate list
            k, sup_idx = tag
        else:
            k, sup_idx = tag, list(candidates[tag].indices)
        if isinstance(model, GlmModel):
            h, gram_inv = mats[k]
            coef = x[rows] @ h @ gram_inv
        else:
            cols = model.A[:, list(sup_idx)]
            coef = _ls_fit(cols, x[rows])
        if coef is None:
            code[rows] = _CODE_ERROR
            if first_error is None:
                first_error = ("selected support {} has a singular Gram "
                               "matrix".format([m + 1 for m in sup_idx]))
            continue
        code[rows] = k if not isinstance(tag, tuple) else _CODE_OTHER
        err = coef - theta_zp[list(sup_idx)][None, :]
        e_sel[rows[:, None], list(sup_idx)] = err
        e_full[rows[:, None], list(sup_idx)] = err
    return code, e_sel, e_full, first_error


def _gic_argmin(x, model, tau):
    """Vectorized penalized-residual argmin with the (score, size, index)
    tie-break of gic_select."""
    xx = (x * x).sum(axis=1)
    sizes = [len(sup) for sup in model.candidates]
    visit = sorted(range(len(model.candidates)), key=lambda k: (sizes[k], k))
    inv_var = 1.0 / model.sigma ** 2
    best_score = np.full(x.shape[0], np.inf)
    best_k = np.zeros(x.shape[0], dtype=np.int64)
    for k in visit:
        q, _ = np.linalg.qr(model.H[k])
        proj = x @ q
        resid = np.maximum(xx - (proj * proj).sum(axis=1), 0.0)
        score = inv_var * resid + tau(model.num_observations, sizes[k]) * sizes[k]
        better = score < best_score
        best_score[better] = score[better]
        best_k[better] = k
    return best_k


def _reduce_trials(code, e_sel, e_full, candidates, config, block_errors):
    n = len(code)
    ok = code != _CODE_ERROR
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise InsufficientConditionedSamples(
            "every trial failed during estimation", got=0,
            needed=1)
    es, ef = e_sel[ok], e_full[ok]
    msse = es.T @ es / n_ok
    mse = ef.T @ ef / n_ok
    counts = np.array([(code == k).sum() for k in range(len(candidates))])
    second, bias = [], []
    for k in range(len(candidates)):
        rows = e_sel[code == k]
        if rows.shape[0] == 0:
            second.append(None)
            bias.append(None)
        else:
            second.append(rows.T @ rows / rows.shape[0])
            bias.append(rows.mean(axis=0))
    n_batches = min(100, n)
    batch_id = (np.arange(n) * n_batches) // n
    b_msse, b_mse = [], []
    for b in range(n_batches):
        rows = ok & (batch_id == b)
        if not rows.any():
            continue
        b_msse.append((e_sel[rows] ** 2).mean(axis=0))
        b_mse.append((e_full[rows] ** 2).mean(axis=0))
    error_detail = None
    for b0 in sorted(block_errors):
        error_detail = block_errors[b0]
        break
    return McRunResult(
        msse_matrix=0.5 * (msse + msse.T),
        mse_matrix=0.5 * (mse + mse.T),
        marginal_msse=(es * es).mean(axis=0),
        marginal_mse=(ef * ef).mean(axis=0),
        second_moments=second,
        bias=bias,
        frequencies=counts / n,
        empty_freq=float((code == _CODE_EMPTY).sum()) / n,
        other_freq=float((code == _CODE_OTHER).sum()) / n,
        error_freq=float((~ok).sum()) / n,
        error_count=int((~ok).sum()),
        error_detail=error_detail,
        trials=n,
        seed=config.seed,
        batch_msse=np.asarray(b_msse),
        batch_mse=np.asarray(b_mse))


# ---------------------------------------------------------------------------
# sweeps

_ROW_FIELDS = ("value", "mse_msl", "msse_msl", "scrb", "scrb_msse", "sms_crb",
               "oracle", "pi_true", "stderr_mse", "stderr_msse", "error")


@dataclass(eq=False)
class SweepRow:
    """One grid point: MC traces, bound traces, and an error column that is
    empty on success.  For the sparse family every trace is restricted to
    the true-parameter coordinates; sms_crb is NaN where undefined."""

    axis: str
    value: float
    mse_msl: float = math.nan
    msse_msl: float = math.nan
    scrb: float = math.nan
    scrb_msse: float = math.nan
    sms_crb: float = math.nan
    oracle: float = math.nan
    pi_true: float = math.nan
    stderr_mse: float = math.nan
    stderr_msse: float = math.nan
    error: str = ""

    def as_dict(self):
        out = {self.axis: self.value}
        for name in _ROW_FIELDS[1:]:
            out[name] = getattr(self, name)
        return out


def _config_at(config: ExperimentConfig, value: float) -> ExperimentConfig:
    """Instantiate the model/rule at one grid point of the sweep axis."""
    model, rule = config.model, config.rule
    axis = config.sweep_axis
    if axis == "snr":
        model = dataclasses.replace(model, sigma=sigma_for_snr(model, value))
    elif axis == "threshold":
        if value <= 0:
            raise ValueError("threshold grid values must be positive")
        rule = OstRule(float(value))
    elif axis == "penalty":
        rule = GicRule(tau=lambda n, size, v=float(value): v, name="penalty")
    elif axis == "pi2":
        model = dataclasses.replace(
            model, sigma=_sigma_for_pi2(model, config.rule, value))
    return dataclasses.replace(config, model=model, rule=rule,
                               sweep_axis=None, grid=None)


def _sigma_for_pi2(model: GlmModel, rule: GicRule, target: float) -> float:
    """Invert sigma -> pi_2 by bisection; pi_2 falls monotonically with
    noise, from 1 down to the pure-penalty floor."""
    if not isinstance(rule, GicRule):
        raise ValueError("a pi2 sweep needs a GIC rule")
    gamma = 2.0 * rule.tau(model.num_observations, 2) \
        - rule.tau(model.num_observations, 1)
    floor = marcum_q_half(0.5, 0.0, math.sqrt(max(gamma, 0.0)))
    if not (floor < target < 1.0):
        raise ValueError(
            "pi2 target {:.4g} is outside the attainable range ({:.4g}, 1)"
            .format(target, floor))

    def pi2_at(sigma):
        m = dataclasses.replace(model, sigma=sigma)
        return float(glm2_selection_prob(m, rule.tau).pi[1])

    lo, hi = model.sigma, model.sigma
    while pi2_at(lo) < target:
        lo /= 8.0
        if lo < 1e-12 * model.sigma:
            raise ValueError("bisection failed to bracket the pi2 target")
    while pi2_at(hi) > target:
        hi *= 8.0
        if hi > 1e12 * model.sigma:
            raise ValueError("bisection failed to bracket the pi2 target")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pi2_at(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _bound_side(config: ExperimentConfig):
    """Candidates, selection probabilities, FIMs and bias model for one
    fully instantiated (no sweep) configuration."""
    model, rule = config.model, config.rule
    fim_trials = config.fim_trials or config.trials
    if config.fim_method == "mc":
        candidates, pi, fims = mc_selective_fims(
            model, rule, fim_trials, config.seed,
            min_conditioned=config.min_conditioned)
    elif isinstance(model, GlmModel):
        candidates = model.candidates
        if not isinstance(rule, GicRule) or len(candidates) != 2:
            raise ValueError("the analytic FIM route needs the two-candidate "
                             "nested family under a GIC rule")
        pi = glm2_selection_prob(model, rule.tau)
        fims = glm2_selective_fims(model, rule.tau)
    else:
        if not isinstance(rule, OstRule):
            raise ValueError("the analytic sparse FIM route needs the "
                             "thresholding rule")
        candidates = _candidate_list(config)
        pi = ost_selection_prob(model, rule.c, candidates)
        fims = sparse_selective_fims(model, rule.c, candidates, pi)

    if config.bias_source == "zero":
        bias = BiasModel.zero(candidates, model.true_support)
    elif config.bias_source == "identity":
        bias = identity_bias_model(model, rule.c, candidates)
    else:
        estimator = msl_glm if isinstance(model, GlmModel) else msl_sparse
        n_bias = config.bias_trials or config.trials
        # Candidates too rare to condition min_conditioned draws at this
        # budget get a zero (b, G) pair instead of failing the whole sweep
        # point: their probability mass (< 2 * min_conditioned / n_bias)
        # makes their bias term negligible in the bound.  The factor 2
        # keeps the skip threshold well clear of the raise threshold, so
        # near-boundary candidates behave deterministically.
        rare = max(PI_CUTOFF, 2.0 * config.min_conditioned / n_bias)
        bias = mc_bias_model(model, rule, estimator, candidates,
                             n_bias, config.seed, step=config.bias_step,
                             min_conditioned=config.min_conditioned,
                             cutoff=rare)
    return candidates, pi, fims, bias


def compute_bound(config: ExperimentConfig):
    """Bound pipeline only (no Monte-Carlo error run): the BoundReport of
    the configured model/rule, with the model-averaged trace filled in for
    the per-candidate linear family."""
    model = config.model
    candidates, pi, fims, bias = _bound_side(config)
    report = selective_crb(candidates, model.true_support, pi, fims, bias,
                           model.theta_true)
    if isinstance(model, GlmModel):
        report.sms_trace = float(np.trace(sms_crb(model, pi)))
    return report


def evaluate_point(config: ExperimentConfig, axis: str = "",
                   value: float = math.nan) -> SweepRow:
    """Join one Monte-Carlo run with the bound pipeline."""
    model = config.model
    truth = model.true_support
    restrict = list(truth.indices) if isinstance(model, SparseModel) \
        else list(range(model.ambient_dim))
    mc = run_mc(config)
    candidates, pi, fims, bias = _bound_side(config)
    report = selective_crb(candidates, truth, pi, fims, bias,
                           model.theta_true)
    row = SweepRow(axis=axis or (config.sweep_axis or "value"), value=value)
    row.mse_msl = mc.trace("mse", restrict)
    row.msse_msl = mc.trace("msse", restrict)
    row.stderr_mse = mc.trace_stderr("mse", restrict)
    row.stderr_msse = mc.trace_stderr("msse", restrict)
    row.scrb = float(report.marginal_mse[restrict].sum())
    row.scrb_msse = float(report.marginal_msse[restrict].sum())
    row.oracle = float(np.trace(oracle_crb(model)))
    if isinstance(model, GlmModel):
        sms = sms_crb(model, pi)
        row.sms_crb = float(np.trace(sms[np.ix_(restrict, restrict)]))
    try:
        k_true = candidates.index_of(truth)
        row.pi_true = float(pi.pi[k_true])
    except (KeyError, ValueError):
        row.pi_true = math.nan
    return row


def sweep(config: ExperimentConfig) -> list:
    """One SweepRow per grid point; failures land in the row's error
    column and the sweep continues."""
    if config.sweep_axis is None or config.grid is None:
        raise ValueError("sweep needs a configured axis and grid")
    rows = []
    for value in config.grid:
        try:
            point = _config_at(config, value)
            rows.append(evaluate_point(point, config.sweep_axis, value))
        except (SingularFim, DegenerateProbability,
                InsufficientConditionedSamples, ValueError) as exc:
            rows.append(SweepRow(axis=config.sweep_axis, value=value,
                                 error=str(exc)))
    return rows
