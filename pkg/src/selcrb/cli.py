"""Command-line front end: config-driven bounds, Monte-Carlo runs, sweeps.

The tool reads a JSON experiment description and either evaluates the
bound pipeline once (``bound``), estimates estimator performance by
simulation (``mc``), walks a grid joining both sides (``sweep``), or runs
the built-in cross-check suite (``selftest``).  Results are written as
flat CSV records with 17-significant-digit floats so reruns with the same
seed are byte-identical.

Config document
---------------
Top-level keys: ``family``, ``model``, ``rule``, ``candidates``,
``sweep``, ``mc``, ``output``.  Matrices are given inline as a list of
rows or as a path (relative to the config file) to a headerless CSV of
reals.  Supports and candidate indices are one-based in the document;
everything inside the library is zero-based.

family "sparse-ost":
    model:      {"A": rows-or-path, "sigma": s, "support": [1-based...],
                 "theta": [...]}
    rule:       {"type": "ost", "c": c}  or  {"type": "fixed",
                 "support": [1-based...]}
    candidates: {"s_max": n, "k_max": n, "mass_target": p}   (all optional)

family "glm2":
    model:      {"H": [rows-or-path, ...], "supports": [[1-based...], ...],
                 "dim": M (optional), "sigma": s, "true_index": 1-based,
                 "theta": [...]}
    rule:       {"type": "gic", "name": "aic"|"mdl"}  or
                {"type": "gic", "tau": const}  or
                {"type": "fixed", "k": 1-based}

Common:
    sweep:  {"axis": "snr"|"threshold"|"penalty"|"pi2", "grid": [...]}
    mc:     {"trials", "seed", "threads", "fim_method", "fim_trials",
             "bias_source", "bias_trials", "bias_step", "min_conditioned"}
    output: "path.csv"  or  {"path": "path.csv"}

Exit status: 0 success, 2 config error (message names the offending
field), 3 numerical error (singular FIM, degenerate probability, or too
few conditioned Monte-Carlo draws).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import numerics
from .bounds import sparse_selective_fim
from .estimators import msl_bias_gradient_identity, msl_bias_identity
from .experiments import (_AXES, _BIAS_SOURCES, _FAMILIES, _FIM_METHODS,
                          _ROW_FIELDS, ExperimentConfig, compute_bound,
                          run_mc, sweep)
from .model import (CandidateSet, GlmModel, SparseModel, SupportSet,
                    enumerate_candidates)
from .numerics import (DegenerateProbability, InsufficientConditionedSamples,
                       SingularFim, finite_diff)
from .selection import (FixedRule, GicRule, OstRule, aic_rule,
                        glm2_prob_derivs, glm2_selection_prob, mdl_rule,
                        ost_selection_prob)

_NUMERICAL_ERRORS = (SingularFim, DegenerateProbability,
                     InsufficientConditionedSamples)


class ConfigError(ValueError):
    """Config document rejected; the message names the offending field."""


# ---------------------------------------------------------------------------
# document -> ExperimentConfig


def _at(path, key):
    return "{}.{}".format(path, key) if path else str(key)


def _reject_unknown(doc, path, allowed):
    for key in doc:
        if key not in allowed:
            raise ConfigError("{}: unknown key (allowed: {})".format(
                _at(path, key), ", ".join(sorted(allowed))))


def _section(doc, path, key, required=False):
    if key not in doc:
        if required:
            raise ConfigError("{}: missing required key".format(_at(path, key)))
        return None
    value = doc[key]
    if not isinstance(value, dict):
        raise ConfigError("{}: expected an object".format(_at(path, key)))
    return value


def _real(value, path, positive=False, nonnegative=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError("{}: expected a number".format(path))
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError("{}: must be finite".format(path))
    if positive and out <= 0:
        raise ConfigError("{}: must be a positive finite number".format(path))
    if nonnegative and out < 0:
        raise ConfigError("{}: must be nonnegative".format(path))
    return out


def _integer(value, path, minimum=None, maximum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError("{}: expected an integer".format(path))
    if minimum is not None and value < minimum:
        raise ConfigError("{}: must be at least {}".format(path, minimum))
    if maximum is not None and value > maximum:
        raise ConfigError("{}: must be at most {}".format(path, maximum))
    return int(value)


def _string(value, path, choices=None):
    if not isinstance(value, str):
        raise ConfigError("{}: expected a string".format(path))
    if choices is not None and value not in choices:
        raise ConfigError("{}: expected one of {}".format(
            path, ", ".join(choices)))
    return value


def _matrix(value, path, base_dir):
    if isinstance(value, str):
        full = os.path.join(base_dir, value)
        try:
            mat = np.loadtxt(full, delimiter=",", ndmin=2, dtype=float)
        except OSError as exc:
            raise ConfigError("{}: could not read {}: {}".format(
                path, full, exc)) from exc
        except ValueError as exc:
            raise ConfigError("{}: {} is not a headerless CSV of reals: "
                              "{}".format(path, full, exc)) from exc
    elif isinstance(value, list):
        try:
            mat = np.asarray(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError("{}: rows must be equal-length lists of "
                              "numbers".format(path)) from exc
        if mat.ndim != 2:
            raise ConfigError("{}: expected a list of rows".format(path))
    else:
        raise ConfigError("{}: expected inline rows or a CSV path".format(path))
    if not np.all(np.isfinite(mat)):
        raise ConfigError("{}: entries must be finite".format(path))
    return mat


def _vector(value, path, length=None):
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool)
            for v in value):
        raise ConfigError("{}: expected a list of numbers".format(path))
    out = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(out)):
        raise ConfigError("{}: entries must be finite".format(path))
    if length is not None and out.shape != (length,):
        raise ConfigError("{}: expected {} entries, got {}".format(
            path, length, out.size))
    return out


def _support_tuple(value, path, dim=None):
    if (not isinstance(value, list) or not value or
            any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
        raise ConfigError("{}: expected a nonempty list of one-based "
                          "integer indices".format(path))
    if len(set(value)) != len(value):
        raise ConfigError("{}: indices must be distinct".format(path))
    if min(value) < 1:
        raise ConfigError("{}: indices are one-based".format(path))
    if dim is not None and max(value) > dim:
        raise ConfigError("{}: index {} exceeds the dimension {}".format(
            path, max(value), dim))
    return tuple(sorted(v - 1 for v in value))


def _sparse_model(doc, base_dir):
    _reject_unknown(doc, "model", {"A", "sigma", "support", "theta"})
    for key in ("A", "sigma", "support", "theta"):
        if key not in doc:
            raise ConfigError("model.{}: missing required key".format(key))
    a = _matrix(doc["A"], "model.A", base_dir)
    sigma = _real(doc["sigma"], "model.sigma", positive=True)
    support = _support_tuple(doc["support"], "model.support", a.shape[1])
    theta = _vector(doc["theta"], "model.theta", len(support))
    try:
        return SparseModel(A=a, sigma=sigma,
                           true_support=SupportSet(support, a.shape[1]),
                           theta_true=theta)
    except ValueError as exc:
        raise ConfigError("model: {}".format(exc)) from exc


def _glm_model(doc, base_dir):
    _reject_unknown(doc, "model",
                    {"H", "supports", "dim", "sigma", "true_index", "theta"})
    for key in ("H", "supports", "sigma", "true_index", "theta"):
        if key not in doc:
            raise ConfigError("model.{}: missing required key".format(key))
    sups_doc = doc["supports"]
    if not isinstance(sups_doc, list) or not sups_doc:
        raise ConfigError("model.supports: expected a nonempty list of "
                          "index lists")
    raw = [_support_tuple(s, "model.supports[{}]".format(i + 1))
           for i, s in enumerate(sups_doc)]
    dim = 1 + max(max(s) for s in raw)
    if "dim" in doc:
        dim = _integer(doc["dim"], "model.dim", minimum=dim)
    supports = tuple(SupportSet(s, dim) for s in raw)
    h_doc = doc["H"]
    if not isinstance(h_doc, list) or len(h_doc) != len(supports):
        raise ConfigError("model.H: expected one design matrix per entry of "
                          "model.supports")
    mats = [_matrix(h, "model.H[{}]".format(i + 1), base_dir)
            for i, h in enumerate(h_doc)]
    sigma = _real(doc["sigma"], "model.sigma", positive=True)
    true_index = _integer(doc["true_index"], "model.true_index",
                          minimum=1, maximum=len(supports)) - 1
    theta = _vector(doc["theta"], "model.theta", len(supports[true_index]))
    try:
        return GlmModel(candidates=CandidateSet(supports, dim), H=mats,
                        sigma=sigma, true_index=true_index, theta_true=theta)
    except ValueError as exc:
        raise ConfigError("model: {}".format(exc)) from exc


def _candidate_block(doc):
    _reject_unknown(doc, "candidates", {"s_max", "k_max", "mass_target"})
    s_max = k_max = mass_target = None
    if "s_max" in doc:
        s_max = _integer(doc["s_max"], "candidates.s_max", minimum=1)
    if "k_max" in doc:
        k_max = _integer(doc["k_max"], "candidates.k_max", minimum=1)
    if "mass_target" in doc:
        mass_target = _real(doc["mass_target"], "candidates.mass_target")
        if not 0.0 < mass_target <= 1.0:
            raise ConfigError("candidates.mass_target: must lie in (0, 1]")
    return s_max, k_max, mass_target


def _default_s_max(model):
    return min(model.ambient_dim, len(model.true_support) + 1)


def _sparse_rule(doc, model, s_max, k_max, mass_target):
    kind = _string(doc.get("type"), "rule.type", choices=("ost", "fixed")) \
        if "type" in doc else None
    if kind is None:
        raise ConfigError("rule.type: missing required key")
    if kind == "ost":
        _reject_unknown(doc, "rule", {"type", "c"})
        if "c" not in doc:
            raise ConfigError("rule.c: missing required key")
        return OstRule(_real(doc["c"], "rule.c", positive=True))
    _reject_unknown(doc, "rule", {"type", "support"})
    if "support" not in doc:
        raise ConfigError("rule.support: missing required key")
    sup = _support_tuple(doc["support"], "rule.support", model.ambient_dim)
    if k_max is not None or mass_target is not None:
        raise ConfigError(
            "rule.support: a fixed-support run needs the full candidate "
            "enumeration; drop candidates.k_max / candidates.mass_target")
    cands = enumerate_candidates(model.ambient_dim,
                                 s_max if s_max is not None
                                 else _default_s_max(model))
    try:
        k = cands.index_of(SupportSet(sup, model.ambient_dim))
    except (KeyError, ValueError) as exc:
        raise ConfigError("rule.support: not in the candidate list "
                          "(check candidates.s_max)") from exc
    return FixedRule(k)


def _glm_rule(doc, model):
    kind = _string(doc.get("type"), "rule.type", choices=("gic", "fixed")) \
        if "type" in doc else None
    if kind is None:
        raise ConfigError("rule.type: missing required key")
    if kind == "fixed":
        _reject_unknown(doc, "rule", {"type", "k"})
        if "k" not in doc:
            raise ConfigError("rule.k: missing required key")
        k = _integer(doc["k"], "rule.k", minimum=1,
                     maximum=len(model.candidates))
        return FixedRule(k - 1)
    _reject_unknown(doc, "rule", {"type", "name", "tau"})
    if ("name" in doc) == ("tau" in doc):
        raise ConfigError("rule: give exactly one of rule.name, rule.tau")
    if "name" in doc:
        name = _string(doc["name"], "rule.name", choices=("aic", "mdl"))
        return aic_rule() if name == "aic" else mdl_rule()
    value = _real(doc["tau"], "rule.tau", positive=True)
    return GicRule(tau=lambda n, size, v=value: v,
                   name="tau={!r}".format(value))


def _sweep_block(doc):
    _reject_unknown(doc, "sweep", {"axis", "grid"})
    if "axis" not in doc:
        raise ConfigError("sweep.axis: missing required key")
    if "grid" not in doc:
        raise ConfigError("sweep.grid: missing required key")
    axis = _string(doc["axis"], "sweep.axis", choices=_AXES)
    grid_doc = doc["grid"]
    if not isinstance(grid_doc, list) or not grid_doc:
        raise ConfigError("sweep.grid: expected a nonempty list of numbers")
    grid = tuple(_real(v, "sweep.grid[{}]".format(i + 1))
                 for i, v in enumerate(grid_doc))
    if len(grid) > 1:
        steps = np.diff(grid)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ConfigError("sweep.grid: must be strictly monotone")
    return axis, grid


_MC_KEYS = ("trials", "seed", "threads", "fim_method", "fim_trials",
            "bias_source", "bias_trials", "bias_step", "min_conditioned")


def _mc_block(doc):
    _reject_unknown(doc, "mc", set(_MC_KEYS))
    out = {}
    if "trials" in doc:
        out["trials"] = _integer(doc["trials"], "mc.trials", minimum=1)
    if "seed" in doc:
        out["seed"] = _integer(doc["seed"], "mc.seed", minimum=0,
                               maximum=2 ** 64 - 1)
    if "threads" in doc:
        out["threads"] = _integer(doc["threads"], "mc.threads", minimum=1)
    if "fim_method" in doc:
        out["fim_method"] = _string(doc["fim_method"], "mc.fim_method",
                                    choices=_FIM_METHODS)
    if "fim_trials" in doc:
        out["fim_trials"] = _integer(doc["fim_trials"], "mc.fim_trials",
                                     minimum=1)
    if "bias_source" in doc:
        out["bias_source"] = _string(doc["bias_source"], "mc.bias_source",
                                     choices=_BIAS_SOURCES)
    if "bias_trials" in doc:
        out["bias_trials"] = _integer(doc["bias_trials"], "mc.bias_trials",
                                      minimum=1)
    if "bias_step" in doc:
        out["bias_step"] = _real(doc["bias_step"], "mc.bias_step",
                                 positive=True)
    if "min_conditioned" in doc:
        out["min_conditioned"] = _integer(doc["min_conditioned"],
                                          "mc.min_conditioned", minimum=2)
    return out


def _strip_nulls(doc):
    if isinstance(doc, dict):
        return {k: _strip_nulls(v) for k, v in doc.items() if v is not None}
    return doc


def validate_config(document, base_dir=".") -> ExperimentConfig:
    """Validate a JSON experiment document into an ExperimentConfig.

    Raises ConfigError with a path-qualified message on the first
    violation; no simulation or bound computation happens on the way.
    A null value anywhere means "not given": `--set sweep=null` removes
    the sweep block.
    """
    if not isinstance(document, dict):
        raise ConfigError("top level: expected a JSON object")
    document = _strip_nulls(document)
    _reject_unknown(document, "", {"family", "model", "rule", "candidates",
                                   "sweep", "mc", "output"})
    if "family" not in document:
        raise ConfigError("family: missing required key")
    family = _string(document["family"], "family", choices=_FAMILIES)
    model_doc = _section(document, "", "model", required=True)
    rule_doc = _section(document, "", "rule", required=True)

    cand_doc = _section(document, "", "candidates")
    if cand_doc is not None and family != "sparse-ost":
        raise ConfigError("candidates: only meaningful for family sparse-ost")
    s_max, k_max, mass_target = (None, None, None) if cand_doc is None \
        else _candidate_block(cand_doc)

    if family == "sparse-ost":
        model = _sparse_model(model_doc, base_dir)
        if s_max is not None and s_max > model.ambient_dim:
            raise ConfigError("candidates.s_max: exceeds the dimension "
                              "{}".format(model.ambient_dim))
        rule = _sparse_rule(rule_doc, model, s_max, k_max, mass_target)
    else:
        model = _glm_model(model_doc, base_dir)
        rule = _glm_rule(rule_doc, model)

    sweep_doc = _section(document, "", "sweep")
    axis, grid = (None, None) if sweep_doc is None else _sweep_block(sweep_doc)

    mc_doc = _section(document, "", "mc")
    mc_kwargs = {} if mc_doc is None else _mc_block(mc_doc)

    output = None
    if "output" in document:
        raw = document["output"]
        if isinstance(raw, dict):
            _reject_unknown(raw, "output", {"path"})
            if "path" not in raw:
                raise ConfigError("output.path: missing required key")
            raw = raw["path"]
        output = _string(raw, "output")

    try:
        return ExperimentConfig(family=family, model=model, rule=rule,
                                sweep_axis=axis, grid=grid, s_max=s_max,
                                k_max=k_max, mass_target=mass_target,
                                output=output, **mc_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# ExperimentConfig -> document (round-trip support)


def _rows(mat):
    return [[float(v) for v in row] for row in np.asarray(mat)]


def _one_based(support):
    return [int(i) + 1 for i in support]


def serialize_config(config: ExperimentConfig) -> dict:
    """Inverse of validate_config: a JSON-able document (matrices inline,
    one-based indices, every default written out) that revalidates to an
    equivalent config."""
    doc = {"family": config.family}
    model = config.model
    if isinstance(model, SparseModel):
        doc["model"] = {"A": _rows(model.A), "sigma": float(model.sigma),
                        "support": _one_based(model.true_support),
                        "theta": [float(v) for v in model.theta_true]}
        rule = config.rule
        if isinstance(rule, OstRule):
            doc["rule"] = {"type": "ost", "c": float(rule.c)}
        else:
            cands = enumerate_candidates(
                model.ambient_dim,
                config.s_max if config.s_max is not None
                else _default_s_max(model))
            doc["rule"] = {"type": "fixed",
                           "support": _one_based(cands[rule.k])}
        cand = {}
        if config.s_max is not None:
            cand["s_max"] = int(config.s_max)
        if config.k_max is not None:
            cand["k_max"] = int(config.k_max)
        if config.mass_target is not None:
            cand["mass_target"] = float(config.mass_target)
        if cand:
            doc["candidates"] = cand
    else:
        doc["model"] = {"H": [_rows(h) for h in model.H],
                        "supports": [_one_based(s) for s in model.candidates],
                        "dim": int(model.ambient_dim),
                        "sigma": float(model.sigma),
                        "true_index": int(model.true_index) + 1,
                        "theta": [float(v) for v in model.theta_true]}
        rule = config.rule
        if isinstance(rule, FixedRule):
            doc["rule"] = {"type": "fixed", "k": int(rule.k) + 1}
        elif rule.name in ("aic", "mdl"):
            doc["rule"] = {"type": "gic", "name": rule.name}
        elif rule.name.startswith("tau="):
            doc["rule"] = {"type": "gic", "tau": float(rule.name[4:])}
        else:
            raise ValueError(
                "rule {!r} did not come from a config document".format(
                    rule.name))
    if config.sweep_axis is not None:
        doc["sweep"] = {"axis": config.sweep_axis,
                        "grid": [float(v) for v in config.grid]}
    mc = {"trials": int(config.trials), "seed": int(config.seed),
          "threads": int(config.threads), "fim_method": config.fim_method,
          "bias_source": config.bias_source,
          "bias_step": float(config.bias_step),
          "min_conditioned": int(config.min_conditioned)}
    if config.fim_trials is not None:
        mc["fim_trials"] = int(config.fim_trials)
    if config.bias_trials is not None:
        mc["bias_trials"] = int(config.bias_trials)
    doc["mc"] = mc
    if config.output is not None:
        doc["output"] = config.output
    return doc


# ---------------------------------------------------------------------------
# CSV emission


def _fmt(value):
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def _write_csv(stream, header, rows):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])


def _emit_csv(out_path, header, rows):
    if out_path is None:
        _write_csv(sys.stdout, header, rows)
        return
    with io.open(out_path, "w", encoding="utf-8", newline="") as fh:
        _write_csv(fh, header, rows)


def sweep_table(rows):
    """Header and value rows for a sweep CSV (documented column order:
    the axis, then mse_msl, msse_msl, scrb, scrb_msse, sms_crb, oracle,
    pi_true, stderr_mse, stderr_msse, error)."""
    header = [rows[0].axis] + list(_ROW_FIELDS[1:])
    table = [[row.as_dict()[name] for name in header] for row in rows]
    return header, table


def bound_table(report):
    """Single-row flat record of a BoundReport: trace bounds, oracle,
    SMS-CRB (nan when undefined), dropped candidate mass, then the
    per-coordinate marginal bounds (one-based column names)."""
    big_m = report.marginal_msse.size
    header = ["msse_bound", "mse_bound", "oracle", "sms_crb", "dropped_mass"]
    row = [report.msse_trace_bound, report.mse_trace_bound,
           report.oracle_trace,
           math.nan if report.sms_trace is None else report.sms_trace,
           report.dropped_mass]
    for m in range(big_m):
        header.append("marginal_msse_{}".format(m + 1))
        row.append(report.marginal_msse[m])
    for m in range(big_m):
        header.append("marginal_mse_{}".format(m + 1))
        row.append(report.marginal_mse[m])
    return header, [row]


def mc_table(result):
    """Single-row flat record of a McRunResult: full-trace risks with
    batch-means standard errors, outcome frequencies, then per-candidate
    selection frequencies (one-based column names)."""
    header = ["trials", "mse", "msse", "stderr_mse", "stderr_msse",
              "empty_freq", "other_freq", "error_freq"]
    row = [result.trials, result.trace("mse"), result.trace("msse"),
           result.trace_stderr("mse"), result.trace_stderr("msse"),
           result.empty_freq, result.other_freq, result.error_freq]
    for k, freq in enumerate(result.frequencies):
        header.append("freq_{}".format(k + 1))
        row.append(freq)
    return header, [row]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_bound(config):
    report = compute_bound(config)
    print("msse trace bound : {:.6g}".format(report.msse_trace_bound))
    print("mse trace bound  : {:.6g}".format(report.mse_trace_bound))
    print("oracle trace     : {:.6g}".format(report.oracle_trace))
    if report.sms_trace is not None:
        print("sms-crb trace    : {:.6g}".format(report.sms_trace))
    print("dropped mass     : {:.3g}".format(report.dropped_mass))
    if config.output is not None:
        header, rows = bound_table(report)
        _emit_csv(config.output, header, rows)
        print("wrote {}".format(config.output))
    return 0


def _cmd_mc(config):
    result = run_mc(config)
    print("trials           : {}".format(result.trials))
    print("mse trace        : {:.6g} (stderr {:.2g})".format(
        result.trace("mse"), result.trace_stderr("mse")))
    print("msse trace       : {:.6g} (stderr {:.2g})".format(
        result.trace("msse"), result.trace_stderr("msse")))
    print("empty/other/error: {:.4g} / {:.4g} / {:.4g}".format(
        result.empty_freq, result.other_freq, result.error_freq))
    if result.error_count:
        print("first error      : {}".format(result.error_detail))
    if config.output is not None:
        header, rows = mc_table(result)
        _emit_csv(config.output, header, rows)
        print("wrote {}".format(config.output))
    return 0


def _cmd_sweep(config):
    rows = sweep(config)
    header, table = sweep_table(rows)
    _emit_csv(config.output, header, table)
    if config.output is not None:
        failed = sum(1 for r in rows if r.error)
        print("wrote {} ({} points, {} failed)".format(
            config.output, len(rows), failed))
    return 0


# ---------------------------------------------------------------------------
# selftest


def _selftest_model_glm(theta2=1.0):
    rng = np.random.default_rng(7)
    n = 200
    h1 = np.ones((n, 1))
    h2 = rng.uniform(0, 10, size=(n, 1))
    # sigma^2 = ||P_perp h2||^2 puts the selection statistic at
    # lambda = theta2^2, keeping pi_2 away from saturation on the grid
    sigma = float(np.sqrt(np.sum((h2 - h2.mean()) ** 2)))
    cands = CandidateSet((SupportSet((0,), 2), SupportSet((0, 1), 2)), 2)
    return GlmModel(candidates=cands, H=[h1, np.hstack([h1, h2])],
                    sigma=sigma, true_index=1,
                    theta_true=np.array([4.0, theta2]))


def _check_glm2_derivatives():
    rule = aic_rule()
    for theta2 in (0.3, 1.0, 2.5):
        model = _selftest_model_glm(theta2)
        _, d1, d2 = glm2_prob_derivs(model, rule.tau)

        def pi2(th):
            import dataclasses
            m = dataclasses.replace(model,
                                    theta_true=np.array([4.0, float(th[0])]))
            return glm2_selection_prob(m, rule.tau).pi[1]

        grad, hess = finite_diff(pi2, np.array([theta2]), step=1e-4)
        assert abs(d1 - grad[0]) <= 1e-6 * max(1e-12, abs(d1)), \
            "d pi2/d theta2 mismatch at theta2={}: {} vs {}".format(
                theta2, d1, grad[0])
        assert abs(d2 - hess[0, 0]) <= 1e-5 * max(1e-12, abs(d2)), \
            "d2 pi2/d theta2^2 mismatch at theta2={}: {} vs {}".format(
                theta2, d2, hess[0, 0])


def _check_sparse_hessian_identity():
    import dataclasses
    rng = np.random.default_rng(212)
    a = rng.standard_normal((7, 14))
    a /= np.linalg.norm(a, axis=0)
    truth = SupportSet((0, 5, 9), 14)
    model = SparseModel(A=a, sigma=0.12, true_support=truth,
                        theta_true=np.ones(3))
    c = 0.95
    j = sparse_selective_fim(model, c, truth)
    base = a[:, list(truth)].T @ a[:, list(truth)] / model.sigma ** 2
    single = CandidateSet((truth,), 14)

    def logpi(th):
        m = dataclasses.replace(model, theta_true=np.asarray(th, dtype=float))
        return math.log(ost_selection_prob(m, c, single).pi[0])

    _, hess = finite_diff(logpi, np.ones(3), step=1e-4)
    diff = np.abs((j - base) - hess)
    scale = np.maximum(np.abs(j - base), 1e-6)
    worst = float((diff / scale).max())
    assert worst < 1e-4, \
        "analytic log-probability Hessian off by rel {:.2e}".format(worst)


def _check_probability_partition():
    model = SparseModel(A=np.eye(6), sigma=0.5,
                        true_support=SupportSet((0, 1), 6),
                        theta_true=np.array([1.2, 0.8]))
    cands = enumerate_candidates(6, 6)
    pi = ost_selection_prob(model, 0.9, cands)
    total = float(pi.pi.sum()) + pi.empty_mass
    assert abs(total - 1.0) < 1e-10, \
        "probabilities sum to {} over all subsets".format(total)


def _check_identity_bias_derivative():
    model = SparseModel(A=np.eye(5), sigma=0.4,
                        true_support=SupportSet((0, 1, 2), 5),
                        theta_true=np.array([1.0, 1.0, 1.0]))
    import dataclasses
    c = 0.95
    truth = model.true_support
    for m in (0, 2):
        grad = msl_bias_gradient_identity(model, c, m, truth)

        def bias(th):
            mm = dataclasses.replace(model,
                                     theta_true=np.asarray(th, dtype=float))
            return msl_bias_identity(mm, c, m, truth)

        fd, _ = finite_diff(bias, model.theta_true.copy(), step=1e-5)
        pos = truth.position_of(m)
        assert abs(grad - fd[pos]) <= 1e-6 * max(1e-12, abs(grad)), \
            "bias gradient mismatch on coordinate {}: {} vs {}".format(
                m + 1, grad, fd[pos])


def _check_mc_pipeline():
    doc = {
        "family": "sparse-ost",
        "model": {"A": _rows(np.eye(4)), "sigma": 0.4,
                  "support": [1, 2], "theta": [1.5, 1.0]},
        "rule": {"type": "ost", "c": 0.9},
        "candidates": {"s_max": 4},
        "mc": {"trials": 20000, "seed": 99},
    }
    config = validate_config(doc)
    result = run_mc(config)
    from .model import alpha_beta_all
    alpha, beta = alpha_beta_all(config.model, 0.9)
    phi, cdf = numerics.std_normal_pdf, numerics.std_normal_cdf
    theta_zp = config.model.theta_padded()
    closed = (config.model.sigma ** 2
              * (1 - cdf(alpha) + alpha * phi(alpha)
                 + cdf(beta) - beta * phi(beta))
              + theta_zp ** 2 * (cdf(alpha) - cdf(beta)))
    ref = float(closed.sum())
    got = result.trace("mse")
    margin = 3 * result.trace_stderr("mse")
    assert abs(got - ref) <= margin, \
        "MC risk {} vs closed form {} (3 sigma = {})".format(got, ref, margin)


def _check_determinism():
    doc = {
        "family": "sparse-ost",
        "model": {"A": _rows(np.eye(4)), "sigma": 0.4,
                  "support": [1, 2], "theta": [1.5, 1.0]},
        "rule": {"type": "ost", "c": 0.9},
        "sweep": {"axis": "threshold", "grid": [0.7, 1.1]},
        "mc": {"trials": 2000, "seed": 5},
    }

    def render(threads):
        config = validate_config(dict(doc, mc=dict(doc["mc"],
                                                   threads=threads)))
        header, table = sweep_table(sweep(config))
        buf = io.StringIO()
        _write_csv(buf, header, table)
        return buf.getvalue()

    assert render(1) == render(3), \
        "sweep CSV changed with the thread count"


_SELFTEST = (
    ("glm2 selection-probability derivatives vs finite differences",
     _check_glm2_derivatives),
    ("sparse log-probability Hessian identity (7x14 dictionary)",
     _check_sparse_hessian_identity),
    ("threshold-rule probabilities partition to one",
     _check_probability_partition),
    ("analytic refit-bias derivative vs finite differences",
     _check_identity_bias_derivative),
    ("Monte-Carlo risk vs closed-form truncated-Gaussian risk",
     _check_mc_pipeline),
    ("sweep CSV byte-identical across thread counts",
     _check_determinism),
)


def _cmd_selftest():
    failures = 0
    t0 = time.time()
    for name, fn in _SELFTEST:
        try:
            fn()
        except AssertionError as exc:
            failures += 1
            print("FAIL - {}: {}".format(name, exc))
        except _NUMERICAL_ERRORS as exc:
            failures += 1
            print("FAIL - {}: {}: {}".format(name, type(exc).__name__, exc))
        else:
            print("PASS - {}".format(name))
    print("{} checks, {} failed, {:.1f}s".format(
        len(_SELFTEST), failures, time.time() - t0))
    return 0 if failures == 0 else 3


# ---------------------------------------------------------------------------
# argument handling


def _apply_override(doc, spec):
    if "=" not in spec:
        raise ConfigError("--set {}: expected key=value".format(spec))
    path, raw = spec.split("=", 1)
    keys = [k for k in path.split(".") if k]
    if not keys:
        raise ConfigError("--set {}: empty key path".format(spec))
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for key in keys[:-1]:
        if key not in node:
            node[key] = {}
        node = node[key]
        if not isinstance(node, dict):
            raise ConfigError("--set {}: {} is not an object".format(
                spec, key))
    node[keys[-1]] = value


def _load_document(args):
    try:
        with io.open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("could not read config {}: {}".format(
            args.config, exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config {} is not valid JSON: {}".format(
            args.config, exc)) from exc
    for spec in args.set or ():
        _apply_override(doc, spec)
    if args.seed is not None:
        _apply_override(doc, "mc.seed={}".format(args.seed))
    if args.trials is not None:
        _apply_override(doc, "mc.trials={}".format(args.trials))
    if args.threads is not None:
        _apply_override(doc, "mc.threads={}".format(args.threads))
    if args.out is not None:
        doc["output"] = args.out
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selcrb",
        description="Selective Cramer-Rao bounds for post-model-selection "
                    "estimation: bound evaluation, Monte-Carlo risk "
                    "estimation, and grid sweeps driven by a JSON config.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name, text in (("bound", "evaluate the bound pipeline once"),
                       ("mc", "run the Monte-Carlo estimator harness once"),
                       ("sweep", "join bounds and Monte-Carlo over a grid")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True,
                       help="path to the JSON experiment description")
        p.add_argument("--seed", type=int, default=None,
                       help="override mc.seed")
        p.add_argument("--trials", type=int, default=None,
                       help="override mc.trials")
        p.add_argument("--threads", type=int, default=None,
                       help="override mc.threads (speed only, never results)")
        p.add_argument("--out", default=None,
                       help="override the output CSV path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry by dotted path "
                            "(repeatable), e.g. --set rule.c=0.8")
    sub.add_parser("selftest",
                   help="run the built-in numerical cross-check suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "selftest":
        return _cmd_selftest()
    try:
        doc = _load_document(args)
        config = validate_config(doc,
                                 base_dir=os.path.dirname(
                                     os.path.abspath(args.config)))
    except ConfigError as exc:
        print("config error: {}".format(exc), file=sys.stderr)
        return 2
    handler = {"bound": _cmd_bound, "mc": _cmd_mc, "sweep": _cmd_sweep}[args.cmd]
    try:
        return handler(config)
    except _NUMERICAL_ERRORS as exc:
        print("numerical error ({}): {}".format(type(exc).__name__, exc),
              file=sys.stderr)
        return 3
    except ValueError as exc:
        print("numerical error: {}".format(exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
