"""Command-line front end over the estimation library and simulation lab.

Five subcommands: ``estimate`` fits the requested estimators for one task on
one dataset, ``simulate`` writes draws from a built-in generating process,
``truth`` runs the structural oracle, ``replicate`` drives the replication
harness over a (task, scenario, n) grid, and ``report`` combines two saved
results.  Configuration is a JSON file validated in full before any
computation starts; unknown keys are rejected so a typo fails loudly instead
of silently falling back to a default.

Policies, conditioning sets, and learners appear in configs as small tagged
objects, e.g. ``{"rule": "threshold_shift", "delta": -1, "comparator": ">=",
"threshold": 1}`` or ``{"set": "values", "values": [1]}``.  A single rule or
set object stands for "the same at every time"; a list must have one entry
per period.

Errors leave as one JSON object on stderr with a nonzero exit code: 2 for
configuration problems, 1 for runtime failures.  Every number written to an
output file is finite; a NaN anywhere is treated as a defect and refused.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from gattlab.core import (
    AdditiveShiftRule,
    AllValues,
    ConditioningSpec,
    ConstantRule,
    IdentityRule,
    Interval,
    LongitudinalFrame,
    MultiplicativeShiftRule,
    PolicySpec,
    TaskSpec,
    ThresholdShiftRule,
    ValueSet,
)
from gattlab.estimators import (
    estimate_ipw,
    estimate_substitution,
    estimate_tmle,
    fit_nuisances,
)
from gattlab.learners import LearnerSpec
from gattlab.simlab import (
    SIM1_N_GRID,
    SIM1_TRUTHS,
    DgpSpec,
    ReplicationReport,
    ScenarioSpec,
    TaskCell,
    compute_true_gatt,
    run_replications,
    sim1_task,
    sim2_analytic_truth,
    sim2_task,
    simulate,
)

__all__ = ["ConfigError", "main"]

THREADS_ENV = "GATTLAB_THREADS"

_ESTIMATE_FNS = {
    "sub": estimate_substitution,
    "ipw": estimate_ipw,
    "tmle": estimate_tmle,
}
_ESTIMATOR_NAMES = ("sub", "ipw", "tmle")

_DEFAULT_M = (LearnerSpec(kind="glm"),)
_DEFAULT_G = (LearnerSpec(kind="glm"),)
_DEFAULT_ALPHA = LearnerSpec(kind="glm", interaction_order=1)


class ConfigError(ValueError):
    """A configuration file violates the schema; reported with exit code 2."""


# --------------------------------------------------------------------------
# Schema helpers


def _require_keys(obj, where, allowed, required=()):
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"missing keys {missing} in {where}")


def _check_int(value, where, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where} must be >= {minimum}")
    return value


def _check_number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number")
    return float(value)


def _build(where, ctor, **kwargs):
    # funnel dataclass validation errors into the config error channel
    try:
        return ctor(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _load_json(path):
    try:
        raw = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        return json.loads(raw)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err


# --------------------------------------------------------------------------
# Tagged-object parsers


def _parse_rule(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a rule object")
    kind = obj.get("rule")
    if kind == "identity":
        _require_keys(obj, where, {"rule"})
        return IdentityRule()
    if kind == "constant":
        _require_keys(obj, where, {"rule", "value"}, {"value"})
        return _build(where, ConstantRule, value=_check_number(obj["value"], f"{where}.value"))
    if kind == "additive_shift":
        _require_keys(obj, where, {"rule", "delta", "bound", "direction"}, {"delta"})
        kwargs = {"delta": _check_number(obj["delta"], f"{where}.delta")}
        if obj.get("bound") is not None:
            kwargs["bound"] = _check_number(obj["bound"], f"{where}.bound")
        if "direction" in obj:
            kwargs["direction"] = obj["direction"]
        return _build(where, AdditiveShiftRule, **kwargs)
    if kind == "multiplicative_shift":
        _require_keys(obj, where, {"rule", "factor"}, {"factor"})
        return _build(where, MultiplicativeShiftRule, factor=_check_number(obj["factor"], f"{where}.factor"))
    if kind == "threshold_shift":
        _require_keys(obj, where, {"rule", "delta", "comparator", "threshold"}, {"delta", "comparator", "threshold"})
        return _build(
            where,
            ThresholdShiftRule,
            delta=_check_number(obj["delta"], f"{where}.delta"),
            comparator=obj["comparator"],
            threshold=_check_number(obj["threshold"], f"{where}.threshold"),
        )
    raise ConfigError(f"{where}: unknown rule {kind!r}")


def _parse_set(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a set object")
    kind = obj.get("set")
    if kind == "all":
        _require_keys(obj, where, {"set"})
        return AllValues()
    if kind == "values":
        _require_keys(obj, where, {"set", "values"}, {"values"})
        values = obj["values"]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{where}.values must be a nonempty list")
        return _build(
            where, ValueSet,
            values=tuple(_check_number(v, f"{where}.values") for v in values),
        )
    if kind == "interval":
        _require_keys(obj, where, {"set", "lower", "upper", "closed_lower", "closed_upper"})
        kwargs = {}
        for key in ("lower", "upper"):
            if key in obj:
                kwargs[key] = _check_number(obj[key], f"{where}.{key}")
        for key in ("closed_lower", "closed_upper"):
            if key in obj:
                if not isinstance(obj[key], bool):
                    raise ConfigError(f"{where}.{key} must be a boolean")
                kwargs[key] = obj[key]
        return _build(where, Interval, **kwargs)
    raise ConfigError(f"{where}: unknown set {kind!r}")


def _parse_policy(obj, tau, where="policy"):
    if isinstance(obj, dict):
        return PolicySpec.uniform(_parse_rule(obj, where), tau)
    if not isinstance(obj, list):
        raise ConfigError(f"{where} must be a rule object or a list of rule objects")
    if len(obj) != tau:
        raise ConfigError(f"{where} must list {tau} rules, got {len(obj)}")
    rules = tuple(_parse_rule(o, f"{where}[{i}]") for i, o in enumerate(obj))
    return _build(where, PolicySpec, rules=rules)


def _parse_conditioning(obj, tau, where="conditioning"):
    if isinstance(obj, dict):
        sets = (_parse_set(obj, where),) * tau
    elif isinstance(obj, list):
        if len(obj) != tau:
            raise ConfigError(f"{where} must list {tau} sets, got {len(obj)}")
        sets = tuple(_parse_set(o, f"{where}[{i}]") for i, o in enumerate(obj))
    else:
        raise ConfigError(f"{where} must be a set object or a list of set objects")
    return _build(where, ConditioningSpec, sets=sets)


_LEARNER_KEYS = {"kind", "interaction_order", "hidden_units", "epochs", "learning_rate", "l2_penalty"}


def _parse_learner(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a learner object")
    _require_keys(obj, where, _LEARNER_KEYS, {"kind"})
    return _build(where, LearnerSpec, **obj)


def _parse_learner_pool(obj, where):
    if not isinstance(obj, list) or not obj:
        raise ConfigError(f"{where} must be a nonempty list of learner objects")
    return tuple(_parse_learner(o, f"{where}[{i}]") for i, o in enumerate(obj))


def _parse_learner_block(cfg, tau, where):
    obj = cfg.get("learners", {})
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}.learners must be an object")
    _require_keys(obj, f"{where}.learners", {"m", "G", "alpha"})
    m_cfg = obj.get("m")
    if m_cfg is None:
        learners_m = _DEFAULT_M
    elif isinstance(m_cfg, list) and m_cfg and all(isinstance(e, list) for e in m_cfg):
        # one candidate pool per period
        if len(m_cfg) != tau:
            raise ConfigError(f"per-period {where}.learners.m must have {tau} entries")
        learners_m = tuple(
            _parse_learner_pool(pool, f"{where}.learners.m[{t}]")
            for t, pool in enumerate(m_cfg)
        )
    else:
        learners_m = _parse_learner_pool(m_cfg, f"{where}.learners.m")
    g_cfg = obj.get("G")
    learners_g = _DEFAULT_G if g_cfg is None else _parse_learner_pool(g_cfg, f"{where}.learners.G")
    alpha_cfg = obj.get("alpha")
    learner_alpha = _DEFAULT_ALPHA if alpha_cfg is None else _parse_learner(alpha_cfg, f"{where}.learners.alpha")
    return learners_m, learners_g, learner_alpha


# --------------------------------------------------------------------------
# Task and data configuration

_TASK_KEYS = {
    "data", "tau", "outcome_family", "policy", "conditioning",
    "estimators", "riesz_mode", "folds", "learners", "clip_alpha", "seed",
}
_CELL_TASK_KEYS = _TASK_KEYS - {"data", "outcome_family", "estimators"}
_DGP_KEYS = {"kind", "tau", "sigma", "seed"}


def _parse_task(cfg, where="task config", keys=_TASK_KEYS):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _require_keys(cfg, where, keys, {"tau", "policy", "conditioning"})
    tau = _check_int(cfg["tau"], f"{where}.tau", minimum=1)
    policy = _parse_policy(cfg["policy"], tau)
    conditioning = _parse_conditioning(cfg["conditioning"], tau)
    learners_m, learners_g, learner_alpha = _parse_learner_block(cfg, tau, where)
    clip = cfg.get("clip_alpha")
    if clip is not None:
        clip = _check_number(clip, f"{where}.clip_alpha")
    return _build(
        where,
        TaskSpec,
        policy=policy,
        conditioning=conditioning,
        folds=_check_int(cfg.get("folds", 5), f"{where}.folds", minimum=1),
        learners_m=learners_m,
        learners_g=learners_g,
        learner_alpha=learner_alpha,
        riesz_mode=cfg.get("riesz_mode", "loss_minimization"),
        clip_alpha=clip,
        seed=_check_int(cfg.get("seed", 0), f"{where}.seed"),
    )


def _parse_estimators(cfg, where):
    names = cfg.get("estimators", list(_ESTIMATOR_NAMES))
    if not isinstance(names, list) or not names:
        raise ConfigError(f"{where}.estimators must be a nonempty list")
    unknown = [e for e in names if e not in _ESTIMATOR_NAMES]
    if unknown:
        raise ConfigError(f"{where}.estimators: unknown names {unknown}")
    if len(set(names)) != len(names):
        raise ConfigError(f"{where}.estimators has duplicate entries")
    return tuple(names)


def _parse_outcome_family(cfg, where):
    family = cfg.get("outcome_family")
    if family is not None and family not in ("binomial", "gaussian"):
        raise ConfigError(f"{where}.outcome_family must be 'binomial' or 'gaussian'")
    return family


def _parse_dgp(obj, where="dgp"):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    _require_keys(obj, where, _DGP_KEYS, {"kind"})
    if obj.get("kind") == "custom":
        raise ConfigError(f"{where}: custom processes are not available from config files")
    return _build(where, DgpSpec, **obj)


def _load_frame(data, outcome_family, where="data"):
    if isinstance(data, str):
        if outcome_family is None:
            raise ConfigError("outcome_family is required when data is a CSV path")
        table = pd.read_csv(data)
        return LongitudinalFrame.from_table(
            table.to_numpy(dtype=np.float64), list(table.columns), outcome_family
        )
    if isinstance(data, dict):
        _require_keys(data, where, _DGP_KEYS | {"n"}, {"kind", "n"})
        n = _check_int(data["n"], f"{where}.n", minimum=1)
        dgp = _parse_dgp({k: v for k, v in data.items() if k != "n"}, where)
        frame = simulate(dgp, n)
        if outcome_family is not None and outcome_family != frame.outcome_family:
            raise ConfigError(
                f"outcome_family {outcome_family!r} does not match the "
                f"generating process ({frame.outcome_family!r})"
            )
        return frame
    raise ConfigError(f"{where} must be a CSV path or a generating-process object")


# --------------------------------------------------------------------------
# Output


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _dumps(payload):
    try:
        return json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n"
    except ValueError as err:
        raise ValueError("output contains a non-finite number, refusing to write") from err


def _write_output(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _result_payload(result):
    return {
        "estimator": result.estimator,
        "theta_hat": result.theta_hat,
        "se": result.se,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "n": result.n,
        "n_conditioning": result.n_conditioning,
        "diagnostics": dict(result.diagnostics),
    }


def _resolve_threads(args):
    value = getattr(args, "threads", None)
    if value is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("threads must be a positive integer")
    return value


# --------------------------------------------------------------------------
# Subcommands


def cmd_estimate(args):
    cfg = _load_json(args.config)
    task = _parse_task(cfg)
    estimators = _parse_estimators(cfg, "task config")
    family = _parse_outcome_family(cfg, "task config")
    if "data" not in cfg:
        raise ConfigError("estimate requires a 'data' entry")
    _resolve_threads(args)
    if args.seed is not None:
        task = replace(task, seed=args.seed)
    frame = _load_frame(cfg["data"], family)
    if frame.tau != task.policy.tau:
        raise ConfigError(f"tau {task.policy.tau} does not match the data (tau {frame.tau})")
    nuisances = fit_nuisances(frame, task)
    results = [_ESTIMATE_FNS[name](frame, task, nuisances) for name in estimators]
    payload = {
        "n": frame.n,
        "tau": frame.tau,
        "outcome_family": frame.outcome_family,
        "seed": task.seed,
        "results": [_result_payload(r) for r in results],
    }
    _write_output(_dumps(payload), args.out)
    return 0


def cmd_simulate(args):
    cfg = _load_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("simulate config must be a JSON object")
    _require_keys(cfg, "simulate config", {"dgp", "n"}, {"dgp", "n"})
    dgp = _parse_dgp(cfg["dgp"])
    n = _check_int(cfg["n"], "n", minimum=1)
    if args.seed is not None:
        dgp = replace(dgp, seed=args.seed)
    table, names = simulate(dgp, n).to_table()
    _write_output(pd.DataFrame(table, columns=names).to_csv(index=False), args.out)
    return 0


def cmd_truth(args):
    cfg = _load_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("truth config must be a JSON object")
    _require_keys(cfg, "truth config", {"dgp", "policy", "conditioning", "tau", "M", "seed"},
                  {"dgp", "policy", "conditioning"})
    dgp = _parse_dgp(cfg["dgp"])
    tau = dgp.resolve().tau
    if "tau" in cfg and _check_int(cfg["tau"], "tau", minimum=1) != tau:
        raise ConfigError(f"tau {cfg['tau']} does not match the process horizon ({tau})")
    policy = _parse_policy(cfg["policy"], tau)
    conditioning = _parse_conditioning(cfg["conditioning"], tau)
    M = _check_int(cfg.get("M", 10**6), "M", minimum=1)
    seed = args.seed if args.seed is not None else _check_int(cfg.get("seed", 0), "seed")
    oracle = compute_true_gatt(dgp, policy, conditioning, M=M, seed=seed)
    payload = {"theta_true": oracle["theta_true"], "mc_se": oracle["mc_se"], "M": M, "seed": seed}
    _write_output(_dumps(payload), args.out)
    return 0


_MODE_TAG = {"loss_minimization": "loss", "plugin_discrete": "plugin"}


def _parse_truths(obj, where="truths"):
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must map task labels to [theta, mc_se] pairs")
    out = {}
    for label, pair in obj.items():
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"{where}[{label!r}] must be a [theta, mc_se] pair")
        out[label] = (
            _check_number(pair[0], f"{where}[{label!r}]"),
            _check_number(pair[1], f"{where}[{label!r}]"),
        )
    return out


def _parse_scenarios(cfg, where):
    ids = cfg.get("scenarios", [1])
    if not isinstance(ids, list) or not ids:
        raise ConfigError(f"{where}.scenarios must be a nonempty list")
    return [
        _build(f"{where}.scenarios", ScenarioSpec, scenario=_check_int(s, f"{where}.scenarios"))
        for s in ids
    ]


def _parse_int_list(cfg, key, default, where, minimum=1):
    values = cfg.get(key, default)
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{where}.{key} must be a nonempty list")
    return [_check_int(v, f"{where}.{key}", minimum=minimum) for v in values]


def _preset_jobs(cfg):
    where = "replicate config"
    preset = cfg["preset"]
    if preset == "sim1":
        _require_keys(cfg, where,
                      {"preset", "levels", "scenarios", "n_grid", "replicates", "seed", "folds", "truths"},
                      {"preset", "replicates"})
        levels = _parse_int_list(cfg, "levels", [0, 1, 2, 3, 4, 5], where, minimum=0)
        if any(lvl > 5 for lvl in levels):
            raise ConfigError(f"{where}.levels must lie in 0..5")
        scenarios = _parse_scenarios(cfg, where)
        n_grid = _parse_int_list(cfg, "n_grid", list(SIM1_N_GRID), where)
        replicates = _check_int(cfg["replicates"], f"{where}.replicates", minimum=1)
        folds = _check_int(cfg.get("folds", 1), f"{where}.folds", minimum=1)
        seed = _check_int(cfg.get("seed", 0), f"{where}.seed")
        truths = {f"B4={lvl}": SIM1_TRUTHS[lvl] for lvl in levels}
        truths.update(_parse_truths(cfg.get("truths")))
        cells = [
            TaskCell(label=f"B4={lvl}", task=sim1_task(lvl, folds=folds))
            for lvl in levels
        ]
        return [(DgpSpec(kind="sim1"), cells, scenarios, n_grid, replicates, truths, 10**6)], seed
    if preset == "sim2":
        _require_keys(cfg, where,
                      {"preset", "taus", "riesz_modes", "n_grid", "replicates", "seed", "folds", "sigma"},
                      {"preset", "replicates"})
        taus = _parse_int_list(cfg, "taus", [2, 4, 6, 8, 10, 12, 14], where, minimum=2)
        modes = cfg.get("riesz_modes", list(_MODE_TAG))
        if not isinstance(modes, list) or not modes or any(m not in _MODE_TAG for m in modes):
            raise ConfigError(f"{where}.riesz_modes must be a subset of {sorted(_MODE_TAG)}")
        n_grid = _parse_int_list(cfg, "n_grid", [1000], where)
        replicates = _check_int(cfg["replicates"], f"{where}.replicates", minimum=1)
        folds = _check_int(cfg.get("folds", 1), f"{where}.folds", minimum=1)
        sigma = _check_number(cfg.get("sigma", 1.0), f"{where}.sigma")
        seed = _check_int(cfg.get("seed", 0), f"{where}.seed")
        jobs = []
        for tau in taus:
            cells = [
                TaskCell(
                    label=f"tau{tau}-{_MODE_TAG[mode]}",
                    task=sim2_task(tau, riesz_mode=mode, folds=folds),
                    estimators=("tmle",),
                    record_sd_alpha=True,
                )
                for mode in modes
            ]
            truths = {cell.label: (sim2_analytic_truth(tau), 0.0) for cell in cells}
            jobs.append(
                (DgpSpec(kind="sim2", tau=tau, sigma=sigma), cells, [ScenarioSpec(1)],
                 n_grid, replicates, truths, 10**6)
            )
        return jobs, seed
    raise ConfigError(f"unknown preset {preset!r}")


def _explicit_job(cfg):
    where = "replicate config"
    _require_keys(cfg, where,
                  {"dgp", "cells", "scenarios", "n_grid", "replicates", "seed", "truths", "truth_M"},
                  {"dgp", "cells", "n_grid", "replicates"})
    dgp = _parse_dgp(cfg["dgp"])
    tau = dgp.resolve().tau
    cells_cfg = cfg["cells"]
    if not isinstance(cells_cfg, list) or not cells_cfg:
        raise ConfigError(f"{where}.cells must be a nonempty list")
    cells = []
    for i, cell_cfg in enumerate(cells_cfg):
        cell_where = f"cells[{i}]"
        if not isinstance(cell_cfg, dict):
            raise ConfigError(f"{cell_where} must be an object")
        _require_keys(cell_cfg, cell_where,
                      {"label", "task", "estimators", "record_sd_alpha"}, {"label", "task"})
        label = cell_cfg["label"]
        if not isinstance(label, str) or not label:
            raise ConfigError(f"{cell_where}.label must be a nonempty string")
        task = _parse_task(cell_cfg["task"], where=f"{cell_where}.task", keys=_CELL_TASK_KEYS)
        if task.policy.tau != tau:
            raise ConfigError(
                f"{cell_where}: task tau {task.policy.tau} does not match "
                f"the process horizon ({tau})"
            )
        record = cell_cfg.get("record_sd_alpha", False)
        if not isinstance(record, bool):
            raise ConfigError(f"{cell_where}.record_sd_alpha must be a boolean")
        cells.append(TaskCell(
            label=label,
            task=task,
            estimators=_parse_estimators(cell_cfg, cell_where),
            record_sd_alpha=record,
        ))
    if len({c.label for c in cells}) != len(cells):
        raise ConfigError(f"{where}.cells has duplicate labels")
    scenarios = _parse_scenarios(cfg, where)
    n_grid = _parse_int_list(cfg, "n_grid", None, where)
    replicates = _check_int(cfg["replicates"], f"{where}.replicates", minimum=1)
    seed = _check_int(cfg.get("seed", 0), f"{where}.seed")
    truths = _parse_truths(cfg.get("truths"))
    truth_M = _check_int(cfg.get("truth_M", 10**6), f"{where}.truth_M", minimum=1)
    return [(dgp, cells, scenarios, n_grid, replicates, truths, truth_M)], seed


def cmd_replicate(args):
    cfg = _load_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("replicate config must be a JSON object")
    threads = _resolve_threads(args)
    jobs, seed = _preset_jobs(cfg) if "preset" in cfg else _explicit_job(cfg)
    if args.seed is not None:
        seed = args.seed
    rows = []
    for dgp, cells, scenarios, n_grid, replicates, truths, truth_M in jobs:
        report = run_replications(
            dgp, cells, scenarios, n_grid, replicates,
            seed=seed, truths=truths, truth_M=truth_M, threads=threads,
        )
        rows.extend(report.rows)
    report = ReplicationReport(rows=tuple(rows))
    dead = [r for r in report.rows if r["n_reps"] == 0]
    if dead:
        raise ValueError(
            f"every replicate failed for task {dead[0]['task']!r} at n={dead[0]['n']}"
        )
    if args.out:
        report.to_csv(args.out)
    sys.stdout.write(report.to_text())
    return 0


def _load_results(path):
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read result file {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"result file {path} is not valid JSON: {err}") from err
    rows = payload.get("results") if isinstance(payload, dict) else None
    if not isinstance(rows, list) or not rows:
        raise ConfigError(f"result file {path} has no results")
    return rows


def _pick_result(rows, estimator, path):
    if estimator is not None:
        for row in rows:
            if row.get("estimator") == estimator:
                return row
        raise ConfigError(f"{path} has no {estimator!r} result")
    if len(rows) == 1:
        return rows[0]
    for row in rows:
        if row.get("estimator") == "tmle":
            return row
    raise ConfigError(f"{path} has several results; pass --estimator")


def cmd_report(args):
    rows_a = _load_results(args.a)
    rows_b = _load_results(args.b)
    row_a = _pick_result(rows_a, args.estimator, args.a)
    row_b = _pick_result(rows_b, args.estimator, args.b)
    theta_a = float(row_a["theta_hat"])
    theta_b = float(row_b["theta_hat"])
    if theta_b == 0.0:
        raise ValueError("ratio is undefined: denominator estimate is zero")
    ratio = theta_a / theta_b
    payload = {
        "mode": "ratio",
        "estimator": row_a.get("estimator"),
        "theta_a": theta_a,
        "theta_b": theta_b,
        "ratio": ratio,
        "se": None,
    }
    se_a, se_b = row_a.get("se"), row_b.get("se")
    if se_a is not None and se_b is not None:
        if theta_a == 0.0:
            raise ValueError("ratio standard error is undefined: numerator estimate is zero")
        se = abs(ratio) * math.hypot(se_a / theta_a, se_b / theta_b)
        payload["se"] = se
        payload["ci_low"] = ratio - 1.96 * se
        payload["ci_high"] = ratio + 1.96 * se
    _write_output(_dumps(payload), args.out)
    return 0


# --------------------------------------------------------------------------
# Entry point


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gattlab",
        description="Estimate policy-conditioned treatment effects and run the simulation lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p, threads):
        p.add_argument("--config", required=True, help="path to a JSON configuration file")
        p.add_argument("--out", help="output file (stdout when omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if threads:
            p.add_argument("--threads", type=int,
                           help=f"worker threads (default: ${THREADS_ENV} or 1)")

    p = sub.add_parser("estimate", help="fit the estimators for one task on one dataset")
    config_flags(p, threads=True)
    p.set_defaults(func=cmd_estimate)
    p = sub.add_parser("simulate", help="draw observational data from a built-in process")
    config_flags(p, threads=False)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("truth", help="structural target value under the intervened process")
    config_flags(p, threads=False)
    p.set_defaults(func=cmd_truth)
    p = sub.add_parser("replicate", help="run a replication study over a grid")
    config_flags(p, threads=True)
    p.set_defaults(func=cmd_replicate)
    p = sub.add_parser("report", help="combine two saved estimate results")
    p.add_argument("--mode", choices=("ratio",), default="ratio")
    p.add_argument("--a", required=True, help="numerator result JSON")
    p.add_argument("--b", required=True, help="denominator result JSON")
    p.add_argument("--estimator", help="result row to use (default: the only row, else tmle)")
    p.add_argument("--out", help="output file (stdout when omitted)")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(message, code):
    sys.stderr.write(json.dumps({"error": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail(str(err), 2)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError, OSError) as err:
        return _fail(str(err), 1)


if __name__ == "__main__":
    raise SystemExit(main())
