"""Cramer-Rao-type bounds and Monte-Carlo validation for estimation after
model selection.

Two estimation families are covered end to end: a linear model whose
regressor subset is chosen by a GIC-style criterion (AIC/MDL), and sparse
vector estimation whose support is chosen by one-step thresholding.  For
both, the package computes the selective CRB (biased and unbiased forms),
the oracle CRB, and the SMS-CRB, and validates them against the measured
performance of coherent post-selection estimators.
"""

from .numerics import (COND_LIMIT, PROB_FLOOR, DegenerateProbability,
                       InsufficientConditionedSamples, SingularFim, Tolerance,
                       derived_rng, finite_diff, marcum_q_half,
                       noncentral_chi2_sf, std_normal_cdf, std_normal_pdf,
                       sym_inverse)
from .model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                    alpha_beta, alpha_beta_all, enumerate_candidates,
                    selection_matrix_D, zero_pad)
from .selection import (EmptySelection, FixedRule, GicRule, OstRule,
                        SelectionProbabilities, aic_rule, gic_select,
                        glm2_logprob_derivs, glm2_prob_derivs,
                        glm2_selection_prob, mc_selection_prob, mdl_rule,
                        ost_select, ost_selection_prob)
from .bounds import (PI_CUTOFF, BiasModel, BoundReport, McFim, SelectiveFim,
                     glm2_selective_fims, marginal_bounds, mc_selective_fim,
                     mc_selective_fims, oracle_crb, selective_crb, sms_crb,
                     sparse_selective_fim, sparse_selective_fims,
                     sparse_trace_bound)
from .estimators import (CoherentEstimate, McBias, identity_bias_model,
                         mc_bias_model, mc_selective_bias, msl_bias_identity,
                         msl_bias_gradient_identity, msl_glm, msl_sparse)
from .experiments import (ExperimentConfig, McRunResult, SweepRow,
                          compute_bound, evaluate_point, run_mc, sigma_for_snr,
                          snr_db, sweep)

__version__ = "0.1.0"

__all__ = [
    "COND_LIMIT", "PROB_FLOOR", "PI_CUTOFF",
    "DegenerateProbability", "InsufficientConditionedSamples", "SingularFim",
    "EmptySelection", "Tolerance",
    "derived_rng", "finite_diff", "marcum_q_half", "noncentral_chi2_sf",
    "std_normal_cdf", "std_normal_pdf", "sym_inverse",
    "CandidateSet", "GlmModel", "SparseModel", "SupportSet",
    "alpha_beta", "alpha_beta_all", "enumerate_candidates",
    "selection_matrix_D", "zero_pad",
    "FixedRule", "GicRule", "OstRule", "SelectionProbabilities",
    "aic_rule", "mdl_rule", "gic_select", "ost_select",
    "glm2_logprob_derivs", "glm2_prob_derivs", "glm2_selection_prob",
    "mc_selection_prob", "ost_selection_prob",
    "BiasModel", "BoundReport", "McFim", "SelectiveFim",
    "glm2_selective_fims", "marginal_bounds", "mc_selective_fim",
    "mc_selective_fims", "oracle_crb", "selective_crb", "sms_crb",
    "sparse_selective_fim", "sparse_selective_fims", "sparse_trace_bound",
    "CoherentEstimate", "McBias", "identity_bias_model", "mc_bias_model",
    "mc_selective_bias", "msl_bias_identity", "msl_bias_gradient_identity",
    "msl_glm", "msl_sparse",
    "ExperimentConfig", "McRunResult", "SweepRow",
    "compute_bound", "evaluate_point", "run_mc", "sigma_for_snr", "snr_db",
    "sweep",
]
