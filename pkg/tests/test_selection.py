import itertools
import math

import numpy as np
import pytest
from scipy import stats

from selcrb.model import CandidateSet, GlmModel, SparseModel, SupportSet, enumerate_candidates
from selcrb.numerics import DegenerateProbability, derived_rng, finite_diff
from selcrb.selection import (EmptySelection, FixedRule, GicRule, OstRule,
                              aic_rule, gic_select, glm2_logprob_derivs,
                              glm2_prob_derivs, glm2_selection_prob,
                              mc_selection_prob, mdl_rule, ost_select,
                              ost_selection_prob)


def identity_model(m=8, sup=(0, 1, 2), theta=1.0, sigma=0.4):
    return SparseModel(np.eye(m), sigma, SupportSet(sup, m), np.full(len(sup), theta))


def two_model_glm(n=40, theta=(4.0, -3.0), sigma=1.0, seed=11):
    # keep the noncentrality lam = theta2^2 * ||P_perp h2||^2 / sigma^2 at a
    # moderate scale so probabilities stay away from 0 and 1
    rng = np.random.default_rng(seed)
    h1 = np.ones((n, 1))
    h2 = np.column_stack([h1[:, 0], rng.uniform(0, 10, n)])
    cands = CandidateSet((SupportSet((0,), 2), SupportSet((0, 1), 2)), 2)
    return GlmModel(cands, [h1, h2], sigma, 1, np.asarray(theta, dtype=float))


class TestOstSelect:
    def test_single_strong_coordinate(self):
        a = np.eye(4)
        x = 10.0 * a[:, 0]
        assert ost_select(x, a, 0.95).indices == (0,)

    def test_direct_comparison(self):
        x = np.array([1.2, 0.3, -1.0])
        assert ost_select(x, np.eye(3), 0.95).indices == (0, 2)

    def test_huge_threshold_is_empty(self):
        with pytest.raises(EmptySelection):
            ost_select(np.array([1.0, -1.0]), np.eye(2), 1e9)

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            OstRule(0.0)
        with pytest.raises(ValueError):
            ost_select(np.ones(3), np.eye(3), -1.0)


class TestGicSelect:
    def test_noiseless_nested_prefers_small(self):
        g = two_model_glm()
        x = g.H[0][:, 0] * 2.5  # exactly in the span of the small design
        assert gic_select(x, g, aic_rule().tau) == 0

    def test_zero_penalty_prefers_large(self):
        g = two_model_glm()
        x = g.draw(np.random.default_rng(5))
        assert gic_select(x, g, lambda n, s: 0.0) == 1

    def test_constant_score_shift_is_irrelevant(self):
        g = two_model_glm()
        tau = aic_rule().tau
        shifted = lambda n, s: tau(n, s) + 13.0 / s  # adds 13 to every score
        for t in range(25):
            x = g.draw(derived_rng(99, t))
            assert gic_select(x, g, tau) == gic_select(x, g, shifted)

    def test_mc_frequency_matches_analytic(self):
        g = two_model_glm(n=40, theta=(4.0, -0.25), sigma=1.0)
        pi2 = glm2_selection_prob(g, aic_rule().tau).pi[1]
        trials = 4000
        hits = sum(gic_select(g.draw(derived_rng(7, t)), g, aic_rule().tau) == 1
                   for t in range(trials))
        freq = hits / trials
        se = math.sqrt(pi2 * (1 - pi2) / trials)
        assert abs(freq - pi2) < 3 * se


class TestOstSelectionProb:
    def test_partition_with_empty_mass(self):
        m = identity_model(m=6, sup=(0, 1), theta=0.8, sigma=0.5)
        cands = enumerate_candidates(6, 6)
        probs = ost_selection_prob(m, 0.95, cands)
        total = probs.pi.sum() + probs.empty_mass
        assert abs(total - 1.0) < 1e-12

    def test_small_threshold_concentrates_on_full_support(self):
        m = identity_model(m=4, sup=(0, 1, 2, 3), theta=2.0, sigma=0.3)
        cands = enumerate_candidates(4, 4)
        probs = ost_selection_prob(m, 1e-8, cands)
        full = cands.index_of(SupportSet((0, 1, 2, 3), 4))
        assert probs.pi[full] == pytest.approx(1.0, abs=1e-10)

    def test_marginal_matches_direct_formula(self):
        # 1 - Phi(-0.125) + Phi(-4.875), via an independent normal CDF
        m = identity_model()
        probs = ost_selection_prob(m, 0.95, enumerate_candidates(8, 3))
        expected = 1 - stats.norm.cdf(-0.125) + stats.norm.cdf(-4.875)
        assert probs.p_marginal[0] == pytest.approx(expected, abs=1e-14)

    def test_marginal_consistent_with_candidate_sums(self):
        # summing pi_k over candidates containing m reproduces p_m exactly
        # when the candidate list is the whole power set (orthonormal A)
        m = identity_model(m=6, sup=(1, 3), theta=1.2, sigma=0.7)
        cands = enumerate_candidates(6, 6)
        probs = ost_selection_prob(m, 0.8, cands)
        for idx in range(6):
            mass = sum(float(probs.pi[k]) for k, sup in enumerate(cands)
                       if idx in sup)
            assert mass == pytest.approx(probs.p_marginal[idx], abs=1e-12)


class TestGlm2SelectionProb:
    def test_zero_theta2_central_case(self):
        g = two_model_glm(theta=(4.0, 0.0))
        probs = glm2_selection_prob(g, aic_rule().tau)
        gamma = 2.0 * 2.0 - 2.0
        expected = 2 * (1 - stats.norm.cdf(math.sqrt(gamma)))
        assert probs.pi[1] == pytest.approx(expected, abs=1e-13)
        assert probs.pi.sum() == pytest.approx(1.0, abs=1e-14)

    def test_large_signal_saturates(self):
        g = two_model_glm(theta=(4.0, 50.0))
        probs = glm2_selection_prob(g, aic_rule().tau)
        assert probs.pi[1] > 1 - 1e-12

    def test_marginals(self):
        g = two_model_glm(theta=(4.0, -0.2))
        probs = glm2_selection_prob(g, aic_rule().tau)
        assert probs.p_marginal[0] == 1.0
        assert probs.p_marginal[1] == probs.pi[1]

    def test_nonpositive_gamma_rejected(self):
        g = two_model_glm()
        bad_tau = lambda n, s: 1.0 if s == 2 else 3.0  # gamma = 2 - 3 < 0
        with pytest.raises(ValueError):
            glm2_selection_prob(g, bad_tau)

    def test_requires_nested_structure(self):
        g = two_model_glm()
        h2 = g.H[1].copy()
        h2[:, 0] += 0.5  # break the shared-column requirement
        bad = GlmModel(g.candidates, [g.H[0], h2], g.sigma, 1, g.theta_true)
        with pytest.raises(ValueError):
            glm2_selection_prob(bad, aic_rule().tau)

    def test_mdl_penalty_changes_gamma(self):
        g = two_model_glm(n=150, theta=(4.0, -0.25), sigma=15.0)
        pi_aic = glm2_selection_prob(g, aic_rule().tau).pi[1]
        pi_mdl = glm2_selection_prob(g, mdl_rule().tau).pi[1]
        # log(150) > 2 means a harsher penalty, so less probability on k=2
        assert pi_mdl < pi_aic


class TestGlm2Derivs:
    def _pi2_of_theta2(self, g, tau):
        def f(t2):
            g2 = GlmModel(g.candidates, g.H, g.sigma, 1,
                          np.array([g.theta_true[0], t2]))
            return glm2_selection_prob(g2, tau).pi[1]
        return f

    def test_first_derivative_against_finite_difference(self):
        g = two_model_glm(theta=(4.0, -0.35), sigma=1.3)
        tau = aic_rule().tau
        _, d1, _ = glm2_prob_derivs(g, tau)
        grad, _ = finite_diff(self._pi2_of_theta2(g, tau), float(g.theta_true[1]))
        assert abs(d1 - grad[0]) < 1e-6 * max(1e-12, abs(grad[0]))

    def test_second_derivative_against_finite_difference(self):
        tau = aic_rule().tau
        for t2 in (-0.8, 0.4, 1.5):
            g = two_model_glm(n=25, theta=(4.0, t2), sigma=15.0)
            _, _, d2 = glm2_prob_derivs(g, tau)
            _, hess = finite_diff(self._pi2_of_theta2(g, tau),
                                  float(g.theta_true[1]), step=1e-4)
            assert abs(d2 - hess[0, 0]) < 1e-5 * max(1e-8, abs(hess[0, 0]))

    def test_zero_theta2_removable_singularity(self):
        g = two_model_glm(theta=(4.0, 0.0))
        pi2, d1, d2 = glm2_prob_derivs(g, aic_rule().tau)
        assert d1 == 0.0
        assert d2 > 0.0
        # limit of the second derivative from nearby points
        tau = aic_rule().tau
        f = self._pi2_of_theta2(g, tau)
        h = 1e-4
        fd2 = (f(h) - 2 * f(0.0) + f(-h)) / h ** 2
        assert d2 == pytest.approx(fd2, rel=1e-4)

    def test_logprob_assembly(self):
        g = two_model_glm(n=25, theta=(4.0, 0.6), sigma=15.0)
        tau = aic_rule().tau
        pi2, dp, ddp = glm2_prob_derivs(g, tau)
        d1, d2 = glm2_logprob_derivs(g, tau)
        assert d1[1] == pytest.approx(dp / pi2, rel=1e-14)
        assert d1[0] == pytest.approx(-dp / (1 - pi2), rel=1e-14)
        assert d2[1] == pytest.approx(ddp / pi2 - (dp / pi2) ** 2, rel=1e-14)
        assert d2[0] == pytest.approx(-ddp / (1 - pi2) - (dp / (1 - pi2)) ** 2,
                                      rel=1e-14)

    def test_logprob_derivs_match_log_finite_difference(self):
        g = two_model_glm(n=25, theta=(4.0, 0.6), sigma=15.0)
        tau = aic_rule().tau
        d1, d2 = glm2_logprob_derivs(g, tau)
        for k, sign in ((0, -1.0), (1, 1.0)):
            def logpi(t2, k=k):
                g2 = GlmModel(g.candidates, g.H, g.sigma, 1,
                              np.array([g.theta_true[0], t2]))
                return math.log(glm2_selection_prob(g2, tau).pi[k])
            grad, hess = finite_diff(logpi, 0.6, step=1e-4)
            assert d1[k] == pytest.approx(grad[0], rel=1e-6)
            assert d2[k] == pytest.approx(hess[0, 0], rel=1e-4)

    def test_boundary_probability_raises(self):
        g = two_model_glm(theta=(4.0, 30.0), sigma=1.0)
        with pytest.raises(DegenerateProbability):
            glm2_logprob_derivs(g, aic_rule().tau)


class TestMcSelectionProb:
    def test_fixed_rule(self):
        g = two_model_glm()
        probs = mc_selection_prob(g, FixedRule(1), g.candidates, 200, seed=1)
        assert probs.pi[1] == 1.0
        assert probs.other_mass == 0.0

    def test_ost_matches_analytic_within_3_sigma(self):
        m = identity_model(m=5, sup=(0, 1), theta=1.0, sigma=0.5)
        cands = enumerate_candidates(5, 5)
        analytic = ost_selection_prob(m, 0.95, cands)
        mc = mc_selection_prob(m, OstRule(0.95), cands, 4000, seed=3)
        for k in range(len(cands)):
            se = math.sqrt(max(analytic.pi[k] * (1 - analytic.pi[k]) / 4000, 1e-12))
            assert abs(mc.pi[k] - analytic.pi[k]) <= 3 * se + 1e-9
        # empty outcomes are tracked, not silently dropped
        total = mc.pi.sum() + mc.other_mass
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_two_seeds_both_close(self):
        m = identity_model(m=4, sup=(0,), theta=1.0, sigma=0.5)
        cands = enumerate_candidates(4, 4)
        analytic = ost_selection_prob(m, 0.95, cands)
        for seed in (10, 20):
            mc = mc_selection_prob(m, OstRule(0.95), cands, 3000, seed=seed)
            k = cands.index_of(SupportSet((0,), 4))
            se = math.sqrt(analytic.pi[k] * (1 - analytic.pi[k]) / 3000)
            assert abs(mc.pi[k] - analytic.pi[k]) <= 3 * se

    def test_deterministic_given_seed(self):
        m = identity_model(m=4, sup=(0,), theta=1.0, sigma=0.5)
        cands = enumerate_candidates(4, 2)
        a = mc_selection_prob(m, OstRule(0.95), cands, 500, seed=8)
        b = mc_selection_prob(m, OstRule(0.95), cands, 500, seed=8)
        assert np.array_equal(a.pi, b.pi)
        assert np.array_equal(a.p_marginal, b.p_marginal)

    def test_non_candidate_outcomes_flagged(self):
        # candidate list deliberately missing most outcomes
        m = identity_model(m=4, sup=(0, 1), theta=1.0, sigma=1.0)
        cands = CandidateSet((SupportSet((3,), 4),), 4)
        mc = mc_selection_prob(m, OstRule(0.5), cands, 300, seed=2)
        assert mc.outside_candidates
        assert mc.other_mass > 0.5
