"""Simulation laboratory: generating processes, truth oracle, harness.

Three built-in generating processes cover the bench tests.  ``sim1`` is a
four-period system with a count treatment (0..5) whose level feeds forward
into both the next covariate and the next treatment, a binary outcome, and a
step-down policy studied under conditioning on the final treatment level.
``sim2`` is a gaussian chain whose covariates never read the treatments, so
the always-treat value has the closed form 1 + 0.5 * 0.25^(tau-1); it exists
to stress weight estimation as the horizon grows.  ``att_toy`` is the
enumerable one-period law used by the exactness tests.

The truth oracle simulates the intervened system directly, carrying forward
policy-shifted treatments while recording the pre-shift draw at each time;
conditioning applies to the recorded draws.  The replication harness runs
seeded replicates over a (task, scenario, sample size) grid and aggregates
coverage and error metrics.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from gattlab.core import (
    ConditioningSpec,
    ConstantRule,
    LongitudinalFrame,
    PolicySpec,
    TaskSpec,
    ThresholdShiftRule,
    ValueSet,
    apply_policy,
)
from gattlab.estimators import (
    estimate_ipw,
    estimate_substitution,
    estimate_tmle,
    fit_nuisances,
)
from gattlab.learners import LearnerSpec

__all__ = [
    "DgpSpec",
    "ScenarioSpec",
    "ReplicationReport",
    "TaskCell",
    "simulate",
    "compute_true_gatt",
    "run_replications",
    "sim1_policy",
    "sim1_conditioning",
    "sim1_task",
    "sim2_task",
    "sim2_analytic_truth",
    "att_toy_task",
    "SIM1_TRUTHS",
    "SIM1_N_GRID",
    "SIM1_M_POOL",
    "SIM1_G_POOL",
    "SIM1_ALPHA_LEARNER",
    "SIM2_M_LEARNERS",
    "SIM2_ALPHA_LEARNER",
]

_KINDS = ("sim1", "sim2", "att_toy", "custom")

TRUTH_CHUNK = 250_000  # fixed so truth runs are deterministic and bounded in memory


@dataclass(frozen=True)
class DgpSpec:
    """A named generating process plus its parameters and sampling seed."""

    kind: str
    tau: int | None = None
    sigma: float = 1.0
    seed: int = 0
    structure: object | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown dgp kind {self.kind!r}")
        if self.kind == "sim2":
            if self.tau is None or self.tau < 2:
                raise ValueError("sim2 requires tau >= 2")
            if self.sigma <= 0:
                raise ValueError("sigma must be positive")
        if self.kind == "sim1" and self.tau not in (None, 4):
            raise ValueError("sim1 has a fixed horizon of 4")
        if self.kind == "att_toy" and self.tau not in (None, 1):
            raise ValueError("att_toy is a single-period law")
        if self.kind == "custom" and self.structure is None:
            raise ValueError("custom dgp requires a structure object")

    def resolve(self):
        if self.kind == "sim1":
            return _Sim1Structure()
        if self.kind == "sim2":
            return _Sim2Structure(self.tau, self.sigma)
        if self.kind == "att_toy":
            return _AttToyStructure()
        return self.structure


class _Sim1Structure:
    """Count-treatment feedback system over four periods, binary outcome."""

    tau = 4
    outcome_family = "binomial"

    def draw_covariates(self, t, rng, covs, trts):
        if t == 1:
            vals = rng.choice(
                np.array([1.0, 2.0, 3.0]), size=self._n, p=[0.5, 0.25, 0.25]
            )
            return vals[:, None]
        prev_l = covs[-1][:, 0]
        prev_a = trts[-1]
        p = expit(-0.3 * prev_l + 0.5 * prev_a)
        return rng.binomial(1, p).astype(float)[:, None]

    def draw_treatment(self, t, rng, covs, trts):
        if t == 1:
            p = expit(-0.3 * covs[0][:, 0])
        else:
            p = expit(-2.5 + trts[-1] + 0.5 * covs[-1][:, 0])
        return rng.binomial(5, p).astype(float)

    def draw_outcome(self, rng, covs, trts):
        p = expit(-1.0 + 0.5 * trts[-1] - covs[-1][:, 0])
        return rng.binomial(1, p).astype(float)

    def begin(self, n):
        self._n = n


class _Sim2Structure:
    """Gaussian chain; covariates never read treatments."""

    outcome_family = "gaussian"

    def __init__(self, tau, sigma):
        self.tau = tau
        self.sigma = sigma

    def begin(self, n):
        self._n = n

    def draw_covariates(self, t, rng, covs, trts):
        if t == 1:
            return rng.uniform(0.0, 1.0, self._n)[:, None]
        return rng.normal(0.25 * covs[-1][:, 0], 0.5)[:, None]

    def draw_treatment(self, t, rng, covs, trts):
        if t == 1:
            return rng.binomial(1, 0.5, self._n).astype(float)
        return rng.binomial(1, expit(0.5 + 0.1 * covs[-1][:, 0])).astype(float)

    def draw_outcome(self, rng, covs, trts):
        return rng.normal(trts[-1] + covs[-1][:, 0], self.sigma)


class _AttToyStructure:
    """Enumerable one-period binary law with linear-probability factors."""

    tau = 1
    outcome_family = "binomial"

    def begin(self, n):
        self._n = n

    def draw_covariates(self, t, rng, covs, trts):
        return rng.binomial(1, 0.4, self._n).astype(float)[:, None]

    def draw_treatment(self, t, rng, covs, trts):
        return rng.binomial(1, 0.2 + 0.5 * covs[0][:, 0]).astype(float)

    def draw_outcome(self, rng, covs, trts):
        p = 0.1 + 0.3 * trts[-1] + 0.2 * covs[-1][:, 0]
        return rng.binomial(1, p).astype(float)


def simulate(dgp: DgpSpec, n: int) -> LongitudinalFrame:
    """Draw n trajectories from the process with no intervention."""
    if n < 1:
        raise ValueError("n must be at least 1")
    structure = dgp.resolve()
    rng = np.random.default_rng(dgp.seed)
    structure.begin(n)
    covs: list[np.ndarray] = []
    trts: list[np.ndarray] = []
    for t in range(1, structure.tau + 1):
        covs.append(structure.draw_covariates(t, rng, covs, trts))
        trts.append(structure.draw_treatment(t, rng, covs, trts))
    y = structure.draw_outcome(rng, covs, trts)
    return LongitudinalFrame(
        covariates=tuple(covs),
        treatments=tuple(trts),
        outcome=y,
        outcome_family=structure.outcome_family,
    )


def _history_columns(covs, trts):
    """Name->array map for policy rules that read bounds from history."""
    h = {}
    for s, block in enumerate(covs, start=1):
        for k in range(block.shape[1]):
            h[f"L{s}_{k + 1}"] = block[:, k]
    for s, a in enumerate(trts, start=1):
        h[f"A{s}"] = a
    return h


def compute_true_gatt(
    dgp: DgpSpec,
    policy: PolicySpec,
    conditioning: ConditioningSpec,
    M: int = 10**6,
    seed: int = 0,
) -> dict:
    """Structural truth by simulating the intervened system.

    At each time the covariates and the pre-shift treatment draw come from
    the history in which all earlier treatments were already policy-shifted;
    the pre-shift draw is recorded and its shifted value carried forward.
    The returned value is the mean intervened outcome among draws whose
    recorded pre-shift values all lie in the conditioning sets.
    """
    if M < 10**5:
        raise ValueError("truth simulation needs M >= 1e5")
    structure = dgp.resolve()
    tau = structure.tau
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    count = 0
    remaining = int(M)
    while remaining > 0:
        m = min(TRUTH_CHUNK, remaining)
        remaining -= m
        structure.begin(m)
        covs: list[np.ndarray] = []
        trts: list[np.ndarray] = []
        keep = np.ones(m, dtype=bool)
        for t in range(1, tau + 1):
            covs.append(structure.draw_covariates(t, rng, covs, trts))
            natural = structure.draw_treatment(t, rng, covs, trts)
            keep &= conditioning.set_at(t).contains(natural).astype(bool)
            shifted = apply_policy(
                policy, t, natural, _history_columns(covs, trts)
            )
            trts.append(np.asarray(shifted, dtype=np.float64))
        y = structure.draw_outcome(rng, covs, trts)[keep]
        total += float(y.sum())
        total_sq += float((y**2).sum())
        count += int(y.size)
    if count == 0:
        raise ValueError("no truth draws fell in the conditioning set")
    theta = total / count
    var = max(total_sq / count - theta**2, 0.0)
    if count > 1:
        var *= count / (count - 1)
    return {"theta_true": theta, "mc_se": math.sqrt(var / count)}


# --------------------------------------------------------------------------
# Built-in study wiring

SIM1_N_GRID = (500, 1000, 2500, 5000)

SIM1_M_POOL = (LearnerSpec(kind="intercept_only"), LearnerSpec(kind="glm"))
SIM1_G_POOL = (
    LearnerSpec(kind="intercept_only"),
    LearnerSpec(kind="glm", interaction_order=1),
    LearnerSpec(kind="mlp", hidden_units=15, epochs=150),
)
SIM1_ALPHA_LEARNER = LearnerSpec(kind="glm", interaction_order=1)

SIM2_M_LEARNERS = (LearnerSpec(kind="glm"),)
SIM2_ALPHA_LEARNER = LearnerSpec(
    kind="mlp", hidden_units=25, epochs=500, learning_rate=1e-3
)

# Frozen reference values for the four-period study, one per final-level
# conditioning set.  Regenerate with scripts/freeze_sim1_truths.py (M=1e7).
SIM1_TRUTHS: dict[int, tuple[float, float]] = {
    0: (0.20763235, 1.838e-04),
    1: (0.18881581, 2.270e-04),
    2: (0.24875593, 4.134e-04),
    3: (0.32449064, 6.621e-04),
    4: (0.41817994, 8.351e-04),
    5: (0.52412089, 1.072e-03),
}


def sim1_policy() -> PolicySpec:
    """Step every treatment down one level, leaving zeros alone."""
    rule = ThresholdShiftRule(delta=-1.0, comparator=">=", threshold=1.0)
    return PolicySpec.uniform(rule, 4)


def sim1_conditioning(level: int) -> ConditioningSpec:
    return ConditioningSpec.final_time(4, ValueSet((float(level),)))


def sim1_task(level: int, folds: int = 1, seed: int = 0) -> TaskSpec:
    return TaskSpec(
        policy=sim1_policy(),
        conditioning=sim1_conditioning(level),
        folds=folds,
        learners_m=SIM1_M_POOL,
        learners_g=SIM1_G_POOL,
        learner_alpha=SIM1_ALPHA_LEARNER,
        riesz_mode="loss_minimization",
        seed=seed,
    )


def sim2_task(
    tau: int, riesz_mode: str = "loss_minimization", folds: int = 1, seed: int = 0
) -> TaskSpec:
    return TaskSpec(
        policy=PolicySpec.uniform(ConstantRule(1.0), tau),
        conditioning=ConditioningSpec.trivial(tau),
        folds=folds,
        learners_m=SIM2_M_LEARNERS,
        learners_g=(LearnerSpec(kind="glm"),),
        learner_alpha=SIM2_ALPHA_LEARNER,
        riesz_mode=riesz_mode,
        seed=seed,
    )


def sim2_analytic_truth(tau: int) -> float:
    """Always-treat mean outcome: 1 plus the decayed covariate mean."""
    return 1.0 + 0.5 * 0.25 ** (tau - 1)


def att_toy_task(folds: int = 5, seed: int = 0) -> TaskSpec:
    return TaskSpec(
        policy=PolicySpec((ConstantRule(0.0),)),
        conditioning=ConditioningSpec((ValueSet((1.0,)),)),
        folds=folds,
        learners_m=(LearnerSpec(kind="glm"),),
        learners_g=(LearnerSpec(kind="glm"),),
        learner_alpha=LearnerSpec(kind="glm", interaction_order=1),
        seed=seed,
    )


# --------------------------------------------------------------------------
# Scenario grid for the four-period study


@dataclass(frozen=True)
class ScenarioSpec:
    """Which nuisances are deliberately misspecified, by scenario id.

    1: both fit normally.  2: outcome regressions degraded at t <= 2 and
    weights pinned to 1 at t > 2.  3: outcome regression degraded at the
    final time only and weights pinned everywhere else.  4: everything
    degraded.  Degraded outcome regressions use the intercept-only learner.
    """

    scenario: int

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError("scenario must be one of 1..4")

    def m_degraded_times(self, tau: int) -> tuple[int, ...]:
        if self.scenario == 1:
            return ()
        if self.scenario == 2:
            return tuple(t for t in range(1, tau + 1) if t <= 2)
        if self.scenario == 3:
            return (tau,)
        return tuple(range(1, tau + 1))

    def alpha_degraded_times(self, tau: int) -> tuple[int, ...]:
        if self.scenario == 1:
            return ()
        if self.scenario == 2:
            return tuple(t for t in range(1, tau + 1) if t > 2)
        if self.scenario == 3:
            return tuple(t for t in range(1, tau + 1) if t != tau)
        return tuple(range(1, tau + 1))

    def m_learners(self, tau: int, pool: Sequence[LearnerSpec]):
        degraded = set(self.m_degraded_times(tau))
        return tuple(
            (LearnerSpec(kind="intercept_only"),) if t in degraded else tuple(pool)
            for t in range(1, tau + 1)
        )


# --------------------------------------------------------------------------
# Replication harness


@dataclass(frozen=True)
class TaskCell:
    """One column of the study grid: a labelled task and its estimators."""

    label: str
    task: TaskSpec
    estimators: tuple[str, ...] = ("sub", "ipw", "tmle")
    record_sd_alpha: bool = False


@dataclass(frozen=True)
class ReplicationReport:
    """Aggregated metrics, one row per (task, scenario, n, estimator)."""

    rows: tuple[dict, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.rows))

    def to_csv(self, path) -> None:
        # long format: one row per cell x estimator x metric
        records = []
        for row in self.rows:
            key = {
                "task": row["task"],
                "scenario": row["scenario"],
                "n": row["n"],
                "estimator": row["estimator"],
            }
            for metric in (
                "coverage",
                "mae100",
                "me100",
                "sd_alpha_tau",
                "n_reps",
                "n_failed",
                "theta_true",
                "truth_mc_se",
            ):
                value = row.get(metric)
                if value is None:
                    continue
                records.append({**key, "metric": metric, "value": value})
        pd.DataFrame(records).to_csv(path, index=False)

    def to_text(self) -> str:
        frame = self.to_frame()
        lines = []
        header = (
            f"{'task':<14}{'scen':>5}{'n':>7}{'estimator':>12}"
            f"{'coverage':>10}{'MAEx100':>9}{'MEx100':>9}{'sd(a_tau)':>11}"
        )
        lines.append(header)
        lines.append("-" * len(header))
        for _, r in frame.iterrows():
            cov = "" if pd.isna(r.get("coverage")) else f"{100 * r['coverage']:.1f}%"
            sd = "" if pd.isna(r.get("sd_alpha_tau")) else f"{r['sd_alpha_tau']:.2f}"
            lines.append(
                f"{r['task']:<14}{r['scenario']:>5}{r['n']:>7}{r['estimator']:>12}"
                f"{cov:>10}{r['mae100']:>9.2f}{r['me100']:>9.2f}{sd:>11}"
            )
        return "\n".join(lines) + "\n"


def _replicate_seed(master: int, task_idx: int, scen: int, n: int, rep: int) -> int:
    seq = np.random.SeedSequence([int(master), task_idx, scen, int(n), rep])
    return int(seq.generate_state(1)[0])


_ESTIMATE_FNS: dict[str, Callable] = {
    "sub": estimate_substitution,
    "ipw": estimate_ipw,
    "tmle": estimate_tmle,
}


def _one_replicate(dgp, cell, n, m_per_time, alpha_deg, rep_seed):
    """Run every estimator for one seeded replicate.

    Returns (results, sd_alpha) where results is None when any estimator
    failed; a replicate counts only when all estimators succeed, so the
    per-estimator replicate counts stay aligned.
    """
    frame = simulate(replace(dgp, seed=rep_seed), n)
    task = replace(cell.task, learners_m=m_per_time, seed=rep_seed)
    try:
        nuis = fit_nuisances(frame, task, alpha_degraded=alpha_deg)
        results = {
            est: _ESTIMATE_FNS[est](frame, task, nuis)
            for est in cell.estimators
        }
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        return None, None
    sd = nuis.weights.diagnostics[-1]["sd"] if cell.record_sd_alpha else None
    return results, sd


def run_replications(
    dgp: DgpSpec,
    tasks: Sequence[TaskCell],
    scenarios: Sequence[ScenarioSpec],
    n_list: Sequence[int],
    replicates: int,
    seed: int = 0,
    truths: dict[str, tuple[float, float]] | None = None,
    truth_M: int = 10**6,
    threads: int = 1,
) -> ReplicationReport:
    """Run the full grid of seeded replicates and aggregate the metrics.

    Truth per task comes from ``truths`` (label -> (theta, mc_se)) when
    given, else from the oracle at ``truth_M`` draws.  Replicate-level
    estimation failures are counted and excluded, never fatal.  Seeds are
    derived from the grid position alone, so the output is identical for
    every ``threads`` value.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if threads < 1:
        raise ValueError("threads must be at least 1")
    resolved_truths = {}
    for idx, cell in enumerate(tasks):
        if truths is not None and cell.label in truths:
            resolved_truths[cell.label] = truths[cell.label]
        else:
            oracle = compute_true_gatt(
                dgp,
                cell.task.policy,
                cell.task.conditioning,
                M=truth_M,
                seed=_replicate_seed(seed, idx, 0, 0, 0),
            )
            resolved_truths[cell.label] = (oracle["theta_true"], oracle["mc_se"])
    rows = []
    for task_idx, cell in enumerate(tasks):
        tau = len(cell.task.policy.rules)
        theta_true, truth_se = resolved_truths[cell.label]
        for scen in scenarios:
            m_per_time = scen.m_learners(tau, cell.task.learners_m)
            alpha_deg = scen.alpha_degraded_times(tau)
            for n in n_list:
                seeds = [
                    _replicate_seed(seed, task_idx, scen.scenario, n, rep + 1)
                    for rep in range(replicates)
                ]
                runner = partial(_one_replicate, dgp, cell, n, m_per_time, alpha_deg)
                # catch_warnings mutates global filter state, so one block
                # wraps the whole batch instead of one per worker thread
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    if threads == 1:
                        outcomes = [runner(s) for s in seeds]
                    else:
                        with ThreadPoolExecutor(max_workers=threads) as pool:
                            outcomes = list(pool.map(runner, seeds))
                estimates = {
                    est: [res[est] for res, _ in outcomes if res is not None]
                    for est in cell.estimators
                }
                sd_alpha = [sd for res, sd in outcomes if res is not None and sd is not None]
                failures = sum(1 for res, _ in outcomes if res is None)
                for est in cell.estimators:
                    results = estimates[est]
                    errors = np.array([r.theta_hat - theta_true for r in results])
                    covered = [
                        r.ci_low <= theta_true <= r.ci_high
                        for r in results
                        if r.ci_low is not None
                    ]
                    rows.append(
                        {
                            "task": cell.label,
                            "scenario": scen.scenario,
                            "n": n,
                            "estimator": est,
                            "coverage": (
                                float(np.mean(covered)) if covered else None
                            ),
                            "mae100": 100.0 * float(np.mean(np.abs(errors))),
                            "me100": 100.0 * float(np.mean(errors)),
                            "sd_alpha_tau": (
                                float(np.mean(sd_alpha)) if sd_alpha else None
                            ),
                            "n_reps": len(results),
                            "n_failed": failures,
                            "theta_true": theta_true,
                            "truth_mc_se": truth_se,
                        }
                    )
    return ReplicationReport(rows=tuple(rows))
