"""Acceptance suite: one test per advertised guarantee of the package.

Each test checks a single end-to-end property at its stated tolerance and
prints one PASS line on success (pytest -v shows the same verdict per
test).  The Monte-Carlo experiments are seeded, so the suite is
deterministic; total runtime is a few minutes.
"""

import dataclasses
import json
import math

import numpy as np
import pytest

from selcrb.bounds import (BiasModel, SelectiveFim, glm2_selective_fims,
                           mc_selective_fim, oracle_crb, selective_crb,
                           sparse_selective_fim, sparse_selective_fims)
from selcrb.cli import main as cli_main
from selcrb.estimators import identity_bias_model
from selcrb.experiments import (ExperimentConfig, compute_bound, run_mc,
                                sigma_for_snr, sweep)
from selcrb.model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                          alpha_beta_all, enumerate_candidates,
                          selection_matrix_D, zero_pad)
from selcrb.numerics import finite_diff, std_normal_cdf, std_normal_pdf
from selcrb.selection import (GicRule, OstRule, SelectionProbabilities,
                              aic_rule, gic_select, glm2_logprob_derivs,
                              glm2_prob_derivs, glm2_selection_prob,
                              mc_selection_prob, ost_selection_prob)


def _passed(text):
    print("[PASS] {}".format(text))


# ---------------------------------------------------------------------------
# shared scenario builders


def glm2_model(n=1500, seed=41, theta=(4.0, -3.0), sigma=1.0):
    rng = np.random.default_rng(seed)
    h1 = np.ones((n, 1))
    h2 = rng.uniform(0, 10, size=(n, 1))
    cands = CandidateSet((SupportSet((0,), 2), SupportSet((0, 1), 2)), 2)
    return GlmModel(candidates=cands, H=[h1, np.hstack([h1, h2])],
                    sigma=sigma, true_index=1,
                    theta_true=np.asarray(theta, dtype=float))


def glm2_informative(n=1500, seed=41, theta2=1.0):
    """Fig.-2 design rescaled so the selection statistic is theta_2^2:
    sigma^2 equals the projected energy of the extra regressor, keeping
    pi_2 informative over the whole derivative grid."""
    model = glm2_model(n=n, seed=seed, theta=(4.0, theta2))
    h2 = model.H[1][:, 1]
    sigma = float(np.sqrt(np.sum((h2 - h2.mean()) ** 2)))
    return dataclasses.replace(model, sigma=sigma)


def coherent_7x14(sigma, seed=212):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((7, 14))
    a /= np.linalg.norm(a, axis=0)
    return SparseModel(A=a, sigma=sigma, true_support=SupportSet((0, 5, 9), 14),
                       theta_true=np.ones(3))


def identity_model(m, theta, sigma, support=None):
    support = tuple(range(m)) if support is None else tuple(support)
    theta = np.full(len(support), theta) if np.isscalar(theta) \
        else np.asarray(theta, dtype=float)
    return SparseModel(A=np.eye(m), sigma=sigma,
                       true_support=SupportSet(support, m), theta_true=theta)


# ---------------------------------------------------------------------------
# expensive shared sweeps (criteria 6/7, 8, 9)


@pytest.fixture(scope="module")
def fig2_rows():
    # The grid must straddle the breakdown region: above roughly -28 dB the
    # MSL estimator's MSE sits on (or above) the oracle CRB, and the
    # below-oracle dip that the selective bound is built to track only
    # becomes 3-sigma significant a few dB lower.  The bias side gets a
    # larger draw budget than the error side: the bias gradient enters the
    # bound quadratically, so its Monte-Carlo noise dominates the bound's
    # uncertainty in the deep-breakdown rows.
    config = ExperimentConfig(
        family="glm2", model=glm2_model(), rule=aic_rule(), trials=20000,
        seed=606, sweep_axis="snr",
        grid=tuple(float(v) for v in np.linspace(-40.0, 0.0, 12)),
        bias_source="mc-msl", bias_trials=150000)
    rows = sweep(config)
    assert all(r.error == "" for r in rows), \
        [r.error for r in rows if r.error]
    return rows


@pytest.fixture(scope="module")
def fig4_setup():
    # The grid's low end sits at the bottom of the breakdown region.  Below
    # ~1 dB the thresholding is noise-dominated (most outcome mass falls on
    # supports too rare to carry a Fisher term) and the bound matrix
    # degenerates to the truncation floor, whose off-diagonals cannot
    # dominate the coherent oracle's correlations.
    model = coherent_7x14(sigma=1.0)
    config = ExperimentConfig(
        family="sparse-ost", model=model, rule=OstRule(0.95), trials=20000,
        seed=707, sweep_axis="snr", grid=(2.0, 6.0, 10.0, 15.0, 20.0, 25.0),
        fim_method="mc", bias_source="zero")
    rows = sweep(config)
    assert all(r.error == "" for r in rows), \
        [r.error for r in rows if r.error]
    return model, config, rows


FIG5_GRID = (0.2, 0.5, 0.8, 1.1, 1.4, 1.7, 2.0)


def _fig5_rows(theta, sigma, bias_source):
    model = identity_model(8, theta, sigma)
    config = ExperimentConfig(
        family="sparse-ost", model=model, rule=OstRule(0.5), trials=20000,
        seed=909, sweep_axis="threshold", grid=FIG5_GRID, s_max=8,
        bias_source=bias_source)
    rows = sweep(config)
    assert all(r.error == "" for r in rows), \
        [r.error for r in rows if r.error]
    return rows


@pytest.fixture(scope="module")
def fig5_rows():
    return {
        ("sc1", "identity"): _fig5_rows(1.0, 0.4, "identity"),
        ("sc1", "zero"): _fig5_rows(1.0, 0.4, "zero"),
        ("sc2", "identity"): _fig5_rows(0.5, 1.2, "identity"),
        ("sc2", "zero"): _fig5_rows(0.5, 1.2, "zero"),
    }


# ---------------------------------------------------------------------------
# criterion 1: selection-probability derivatives


def test_criterion_01_glm2_derivatives_match_finite_differences():
    # the probability itself is accurate to ~1e-14, so a direct second
    # difference of pi2 drowns in function noise; the second derivative is
    # checked against the central difference of the (already validated)
    # first derivative instead
    rule = aic_rule()
    grid = np.linspace(0.1, 5.0, 20)
    step = 1e-4

    def derivs_at(theta2):
        model = glm2_informative(theta2=float(theta2))
        return glm2_prob_derivs(model, rule.tau)

    for theta2 in grid:
        model = glm2_informative(theta2=float(theta2))
        _, d1, d2 = glm2_prob_derivs(model, rule.tau)

        def pi2(th):
            m = dataclasses.replace(
                model, theta_true=np.array([4.0, float(th[0])]))
            return glm2_selection_prob(m, rule.tau).pi[1]

        grad, _ = finite_diff(pi2, np.array([float(theta2)]), step=step)
        assert abs(d1 - grad[0]) < 1e-6 * abs(grad[0]), \
            "first derivative at theta2={}: {} vs FD {}".format(
                theta2, d1, grad[0])
        _, d1_hi, _ = derivs_at(theta2 + step)
        _, d1_lo, _ = derivs_at(theta2 - step)
        fd2 = (d1_hi - d1_lo) / (2 * step)
        assert abs(d2 - fd2) < 1e-5 * abs(fd2), \
            "second derivative at theta2={}: {} vs FD {}".format(
                theta2, d2, fd2)
    _passed("criterion 1: d pi2/d theta2 and d2 pi2/d theta2^2 match "
            "central finite differences (rel 1e-6 / 1e-5, 20-point grid)")


# ---------------------------------------------------------------------------
# criterion 2: product-form log-probability Hessian identity


def test_criterion_02_sparse_fim_matches_logprob_hessian():
    model = coherent_7x14(sigma=0.3)
    c = 0.95
    base = model.A_true.T @ model.A_true / model.sigma ** 2
    rng = np.random.default_rng(5150)
    picks = [SupportSet(tuple(sorted(rng.choice(14, size=3, replace=False))),
                        14) for _ in range(5)]
    for cand in picks:
        j = sparse_selective_fim(model, c, cand)
        single = CandidateSet((cand,), 14)

        def logpi(th):
            m = dataclasses.replace(model,
                                    theta_true=np.asarray(th, dtype=float))
            return math.log(ost_selection_prob(m, c, single).pi[0])

        _, hess = finite_diff(logpi, np.ones(3), step=1e-4)
        analytic = j - base
        scale = np.maximum(np.abs(analytic), 1e-2 * np.abs(analytic).max())
        worst = float((np.abs(analytic - hess) / scale).max())
        assert worst < 1e-5, \
            "candidate {}: worst relative error {:.2e}".format(
                tuple(cand.indices), worst)
    _passed("criterion 2: selective-FIM correction equals the FD Hessian "
            "of log pi_k (5 random 3-subsets of the 7x14 dictionary, "
            "rel 1e-5)")


# ---------------------------------------------------------------------------
# criterion 3: MC selective FIM vs analytic selective FIM


def test_criterion_03_mc_fim_matches_analytic_both_families():
    # sparse family at A = I, where the product-form FIM is exact
    model = identity_model(4, (1.5, 1.0), 0.4, support=(0, 1))
    truth = model.true_support
    mc = mc_selective_fim(model, OstRule(0.9), truth, trials=200000, seed=33)
    assert mc.conditioned >= 100000, mc.conditioned
    analytic = sparse_selective_fim(model, 0.9, truth)
    assert np.all(np.abs(mc.matrix - analytic) <= 3 * mc.stderr), \
        "sparse: |MC - analytic| exceeds 3 sigma somewhere"

    # two-candidate linear family under the AIC rule
    glm = glm2_informative(n=200, seed=7, theta2=3.0)
    rule = aic_rule()
    cand = glm.candidates[1]
    mc2 = mc_selective_fim(glm, rule, cand, trials=110000, seed=34)
    assert mc2.conditioned >= 100000, mc2.conditioned
    analytic2 = glm2_selective_fims(glm, rule.tau).per_model[1]
    assert np.all(np.abs(mc2.matrix - analytic2) <= 3 * mc2.stderr), \
        "glm2: |MC - analytic| exceeds 3 sigma somewhere"
    _passed("criterion 3: conditioned-draw MC selective FIMs match the "
            "analytic ones entrywise within 3 sigma (1e5 conditioned "
            "draws, both families)")


# ---------------------------------------------------------------------------
# criterion 4: probability partition and conditional-score identity


def test_criterion_04_partition_and_score_identity():
    model = identity_model(6, (1.2, 0.8), 0.5, support=(0, 1))
    c = 0.9
    cands = enumerate_candidates(6, 6)
    pi = ost_selection_prob(model, c, cands)
    total = float(pi.pi.sum()) + pi.empty_mass
    assert abs(total - 1.0) < 1e-10, total

    trials = 30000
    hat = mc_selection_prob(model, OstRule(c), cands, trials, seed=44)
    sigma3 = 3.0 * np.sqrt(pi.pi * (1.0 - pi.pi) / trials)
    assert np.all(np.abs(hat.pi - pi.pi) <= sigma3 + 1e-12), \
        "MC selection frequencies leave the 3-sigma binomial band"

    # conditional score mean vs the gradient of log pi_k (sparse family)
    n = 40000
    rng = np.random.default_rng(45)
    z = rng.standard_normal((n, 6))
    x = model.theta_padded() + model.sigma * z
    crossed = np.abs(x) > c
    keys = crossed @ (1 << np.arange(6))
    score = z[:, [0, 1]] / model.sigma  # d log p / d theta on the support
    watch = [SupportSet((0, 1), 6), SupportSet((0,), 6),
             SupportSet((0, 1, 2), 6)]
    for sup in watch:
        match = keys == int(sum(1 << i for i in sup.indices))
        n_k = int(match.sum())
        assert n_k > 200, "support {} undersampled".format(sup.indices)
        mean = score[match].mean(axis=0)
        spread = score[match].std(axis=0, ddof=1) / math.sqrt(n_k)
        single = CandidateSet((sup,), 6)

        def logpi(th):
            m = dataclasses.replace(model,
                                    theta_true=np.asarray(th, dtype=float))
            return math.log(ost_selection_prob(m, c, single).pi[0])

        grad, _ = finite_diff(logpi, model.theta_true.copy(), step=1e-6)
        assert np.all(np.abs(mean - grad) <= 3 * spread), \
            "score mean vs grad log pi for support {}".format(sup.indices)

    # same identity for the two-candidate linear family
    glm = glm2_informative(n=200, seed=7, theta2=1.0)
    rule = aic_rule()
    d1, _ = glm2_logprob_derivs(glm, rule.tau)
    m_trials = 30000
    rng = np.random.default_rng(46)
    mean_x = glm.noiseless_mean()
    sums = np.zeros((2, 2))
    sq = np.zeros((2, 2))
    counts = np.zeros(2, dtype=int)
    for _ in range(m_trials):
        w = rng.standard_normal(glm.num_observations)
        k = gic_select(mean_x + glm.sigma * w, glm, rule.tau)
        s = glm.H_true.T @ w / glm.sigma
        sums[k] += s
        sq[k] += s ** 2
        counts[k] += 1
    for k in range(2):
        n_k = counts[k]
        assert n_k > 1000
        mean = sums[k] / n_k
        spread = np.sqrt((sq[k] / n_k - mean ** 2) / n_k)
        target = np.array([0.0, d1[k]])  # pi_k depends on theta_2 only
        assert np.all(np.abs(mean - target) <= 3 * spread), \
            "glm2 score mean, candidate {}".format(k + 1)
    _passed("criterion 4: probabilities partition to one (1e-10), MC "
            "frequencies within 3 binomial sigma, conditional score "
            "means match grad log pi_k within 3 sigma")


# ---------------------------------------------------------------------------
# criterion 5: exact reduction identities


def test_criterion_05_reduction_identities():
    model = identity_model(4, (1.5, 1.0), 0.4, support=(0, 1))
    truth = model.true_support
    theta = model.theta_true
    j_oracle = model.A_true.T @ model.A_true / model.sigma ** 2

    # single-model rule: the bound is the oracle CRB
    single = CandidateSet((truth,), 4)
    pi1 = SelectionProbabilities(pi=np.array([1.0]),
                                 p_marginal=truth.mask().astype(float),
                                 method="analytic")
    fims1 = SelectiveFim(per_model=[j_oracle], oracle=j_oracle,
                         method="manual")
    rep1 = selective_crb(single, truth, pi1, fims1,
                         BiasModel.zero(single, truth), theta)
    restricted = rep1.scrb_matrix[np.ix_(truth.indices, truth.indices)]
    assert np.max(np.abs(restricted - oracle_crb(model))) < 1e-12
    assert abs(rep1.msse_trace_bound - rep1.oracle_trace) < 1e-12

    # data-independent rule: pi-weighted zero-padded oracle blocks
    pair = CandidateSet((SupportSet((0,), 4), truth), 4)
    weights = np.array([0.4, 0.6])
    marg = np.zeros(4)
    for w, sup in zip(weights, pair):
        marg[list(sup.indices)] += w
    pi2 = SelectionProbabilities(pi=weights, p_marginal=marg,
                                 method="analytic")
    fims2 = SelectiveFim(per_model=[j_oracle, j_oracle], oracle=j_oracle,
                         method="manual")
    rep2 = selective_crb(pair, truth, pi2, fims2,
                         BiasModel.zero(pair, truth), theta)
    inv = np.linalg.inv(j_oracle)
    expected = np.zeros((4, 4))
    for w, sup in zip(weights, pair):
        d = selection_matrix_D(sup, truth)
        expected += w * (d @ inv @ d.T)
    assert np.max(np.abs(rep2.scrb_matrix - expected)) < 1e-12

    # zero-bias general form reduces to the unbiased form
    cands = enumerate_candidates(4, 4)
    pi = ost_selection_prob(model, 0.9, cands)
    fims = sparse_selective_fims(model, 0.9, cands, pi)
    rep3 = selective_crb(cands, truth, pi, fims,
                         BiasModel.zero(cands, truth), theta)
    unbiased = np.zeros((4, 4))
    for k, sup in enumerate(cands):
        d = selection_matrix_D(sup, truth)
        unbiased += pi.pi[k] * (d @ np.linalg.inv(fims.per_model[k]) @ d.T)
    assert np.max(np.abs(rep3.scrb_matrix - unbiased)) < 1e-12
    _passed("criterion 5: single-model, data-independent, and zero-bias "
            "reductions hold exactly (1e-12)")


# ---------------------------------------------------------------------------
# criteria 6 and 7: two-candidate linear family over the SNR grid


def test_criterion_06_glm2_snr_sweep_shape(fig2_rows):
    rows = fig2_rows
    crossover = [r for r in rows
                 if r.mse_msl < r.oracle - 3 * r.stderr_mse
                 and r.mse_msl >= r.scrb - 3 * r.stderr_mse]
    assert crossover, \
        "no low-SNR point with MSE below the oracle yet above the bound"
    top = rows[-1]
    assert abs(top.scrb - top.oracle) / top.oracle < 0.01, \
        "bound vs oracle at 0 dB: {} vs {}".format(top.scrb, top.oracle)
    assert abs(top.mse_msl - top.oracle) / top.oracle < 0.05, \
        "MSE vs oracle at 0 dB: {} vs {}".format(top.mse_msl, top.oracle)
    _passed("criterion 6: low SNR has MSE < oracle - 3 sigma with the "
            "selective bound still valid; at 0 dB bound and MSE are "
            "within 1% / 5% of the oracle")


def test_criterion_07_selective_bound_dominates_sms(fig2_rows):
    for row in fig2_rows:
        assert not math.isnan(row.sms_crb)
        assert row.scrb >= row.sms_crb - 1e-9, \
            "at snr={} dB: scrb {} < sms {}".format(
                row.value, row.scrb, row.sms_crb)
    _passed("criterion 7: selective bound >= model-averaged bound at "
            "every grid point")


# ---------------------------------------------------------------------------
# criterion 8: sparse dictionary over the SNR grid, MC FIM route


def test_criterion_08_sparse_snr_sweep_shape(fig4_setup):
    model, config, rows = fig4_setup
    top = rows[-1]
    sigma_hi = sigma_for_snr(model, 25.0)
    hi_model = dataclasses.replace(model, sigma=sigma_hi)
    cands = enumerate_candidates(14, 4, ranking=(hi_model, 0.95), k_max=40,
                                 mass_target=0.999)
    pi = ost_selection_prob(hi_model, 0.95, cands)
    assert pi.pi[cands.index_of(model.true_support)] > 0.999
    assert abs(top.scrb - top.oracle) / top.oracle < 0.01, \
        "bound vs oracle at 25 dB: {} vs {}".format(top.scrb, top.oracle)

    low = rows[0]
    assert low.mse_msl >= low.scrb - 3 * low.stderr_mse, \
        "restricted MSE below the bound at the low-SNR end"

    low_config = dataclasses.replace(
        config, model=dataclasses.replace(model,
                                          sigma=sigma_for_snr(model,
                                                              config.grid[0])),
        sweep_axis=None, grid=None)
    report = compute_bound(low_config)
    truth = list(model.true_support.indices)
    # The ordering claim is about the MSE-form bound (the form the sweep's
    # scrb column reports): candidates that miss a true coordinate carry
    # their truncation mass there, which is what lifts the bound above the
    # oracle at low SNR.
    gap = report.mse_matrix[np.ix_(truth, truth)] - oracle_crb(
        low_config.model)
    min_eig = float(np.linalg.eigvalsh(gap).min())
    scale = float(np.abs(gap).max())
    assert min_eig >= -1e-8 * max(scale, 1.0), \
        "bound minus oracle not PSD at the low-SNR end (min eig {})".format(
            min_eig)
    _passed("criterion 8: bound within 1% of the oracle once the true "
            "support is near-certain; at the low-SNR end the bound stays "
            "below the restricted MSE and dominates the oracle (PSD)")


# ---------------------------------------------------------------------------
# criterion 9: thresholding at A = I, biased vs unbiased bound


def test_criterion_09_identity_threshold_bounds(fig5_rows):
    for scenario in ("sc1", "sc2"):
        for row in fig5_rows[(scenario, "identity")]:
            slack = 3 * row.stderr_mse
            assert row.scrb <= row.mse_msl + slack, \
                "{} c={}: biased bound {} above MSE {}".format(
                    scenario, row.value, row.scrb, row.mse_msl)
            assert abs(row.scrb - row.mse_msl) <= 0.03 * row.mse_msl, \
                "{} c={}: biased bound {} not within 3% of MSE {}".format(
                    scenario, row.value, row.scrb, row.mse_msl)
    above = [row.scrb - row.mse_msl for row in fig5_rows[("sc1", "zero")]]
    assert max(above) > 0, \
        "unbiased bound never exceeds the MSE in scenario 1"
    for row in fig5_rows[("sc2", "zero")]:
        assert row.scrb < row.mse_msl, \
            "sc2 c={}: unbiased bound {} not below MSE {}".format(
                row.value, row.scrb, row.mse_msl)
    _passed("criterion 9: biased bound tracks the MSL risk within 3% "
            "from below; the unbiased bound overshoots in scenario 1 "
            "and undershoots in scenario 2")


# ---------------------------------------------------------------------------
# criterion 10: closed-form per-coordinate risk at A = I


def test_criterion_10_closed_form_risk_validates_mc_pipeline():
    model = identity_model(4, (1.5, 1.0), 0.4, support=(0, 1))
    c = 0.9
    config = ExperimentConfig(family="sparse-ost", model=model,
                              rule=OstRule(c), trials=100000, seed=55,
                              s_max=4)
    result = run_mc(config)
    assert result.other_freq == 0.0 and result.error_count == 0
    alpha, beta = alpha_beta_all(model, c)
    theta_zp = model.theta_padded()
    closed = (model.sigma ** 2
              * (1 - std_normal_cdf(alpha) + alpha * std_normal_pdf(alpha)
                 + std_normal_cdf(beta) - beta * std_normal_pdf(beta))
              + theta_zp ** 2 * (std_normal_cdf(alpha) - std_normal_cdf(beta)))
    for m in range(4):
        got = result.trace("mse", [m])
        tol = 3 * result.trace_stderr("mse", [m])
        assert abs(got - closed[m]) <= tol, \
            "coordinate {}: MC {} vs closed form {} (3 sigma {})".format(
                m + 1, got, closed[m], tol)
    _passed("criterion 10: per-coordinate MC risk of the thresholded "
            "refit matches the truncated-Gaussian closed form within "
            "3 sigma")


# ---------------------------------------------------------------------------
# criterion 11: byte-identical CSV under reruns and thread counts


def test_criterion_11_csv_byte_identical(tmp_path):
    sparse_doc = {
        "family": "sparse-ost",
        "model": {"A": [[float(i == j) for j in range(8)] for i in range(8)],
                  "sigma": 0.4, "support": list(range(1, 9)),
                  "theta": [1.0] * 8},
        "rule": {"type": "ost", "c": 0.5},
        "candidates": {"s_max": 8},
        "sweep": {"axis": "threshold", "grid": [0.8, 1.4]},
        "mc": {"trials": 3000, "seed": 909, "bias_source": "identity"},
    }
    rng = np.random.default_rng(41)
    h2 = rng.uniform(0, 10, size=(120, 1))
    glm_doc = {
        "family": "glm2",
        "model": {"H": [[[1.0]] * 120,
                        [[1.0, float(v)] for v in h2[:, 0]]],
                  "supports": [[1], [1, 2]],
                  "sigma": 40.0, "true_index": 2, "theta": [4.0, -3.0]},
        "rule": {"type": "gic", "name": "aic"},
        "sweep": {"axis": "snr", "grid": [-20.0, -5.0]},
        "mc": {"trials": 2000, "seed": 606, "bias_source": "mc-msl"},
    }
    for tag, doc in (("sparse", sparse_doc), ("glm", glm_doc)):
        path = tmp_path / "{}.json".format(tag)
        path.write_text(json.dumps(doc), encoding="utf-8")
        outputs = []
        for run, threads in (("a", 1), ("b", 4), ("c", 1)):
            out = tmp_path / "{}_{}.csv".format(tag, run)
            code = cli_main(["sweep", "--config", str(path),
                             "--threads", str(threads), "--out", str(out)])
            assert code == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1] == outputs[2], \
            "{} sweep CSV changed across reruns/threads".format(tag)
    _passed("criterion 11: sweep CSV is byte-identical across reruns "
            "and thread counts for both families")
