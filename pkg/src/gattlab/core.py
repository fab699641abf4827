"""Data model shared by every estimator and the simulation lab.

A :class:`LongitudinalFrame` holds n units observed over tau time points:
time-varying covariates ``L_t``, scalar treatments ``A_t``, and a terminal
outcome ``Y``.  Histories ``H_t = (L_1, ..., L_t, A_1, ..., A_{t-1})`` are
derived on demand, never stored, so there is exactly one canonical column
ordering (covariate blocks then treatment blocks, time-ascending).

Policies and conditioning sets are declarative: a policy is a per-time rule
mapping the natural treatment value and history to a new value, and a
conditioning set restricts which natural treatment trajectories the target
parameter averages over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "LongitudinalFrame",
    "IdentityRule",
    "ConstantRule",
    "AdditiveShiftRule",
    "MultiplicativeShiftRule",
    "ThresholdShiftRule",
    "PolicySpec",
    "AllValues",
    "ValueSet",
    "Interval",
    "ConditioningSpec",
    "ComparabilityReport",
    "TaskSpec",
    "apply_policy",
    "conditioning_indicator",
    "validate_comparability",
]

OUTCOME_FAMILIES = ("binomial", "gaussian")


def _as_float_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains missing or non-finite values")
    return arr


def _as_float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains missing or non-finite values")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LongitudinalFrame:
    """Immutable container for longitudinal treatment data.

    Parameters
    ----------
    covariates : sequence of arrays
        One ``(n, p_t)`` matrix per time point ``t = 1..tau``.  A
        one-dimensional array is treated as a single column.
    treatments : sequence of arrays
        One length-``n`` numeric treatment vector per time point.  Values may
        be binary, categorical-coded-as-numeric, or continuous.
    outcome : array
        Length-``n`` outcome vector.
    outcome_family : {"binomial", "gaussian"}
        Binomial requires every outcome in {0, 1}.
    covariate_names : sequence of sequences of str, optional
        Column names per time point.  Defaults to ``("1", "2", ...)`` within
        each time point.

    Raises
    ------
    ValueError
        On length mismatches, missing/non-finite values, or a binomial
        outcome outside {0, 1}.
    """

    covariates: tuple
    treatments: tuple
    outcome: np.ndarray
    outcome_family: str
    covariate_names: tuple = ()

    def __post_init__(self):
        if self.outcome_family not in OUTCOME_FAMILIES:
            raise ValueError(
                f"outcome_family must be one of {OUTCOME_FAMILIES}, "
                f"got {self.outcome_family!r}"
            )
        covs = tuple(
            _freeze(_as_float_matrix(c, f"covariates[t={t + 1}]"))
            for t, c in enumerate(self.covariates)
        )
        trts = tuple(
            _freeze(_as_float_vector(a, f"treatments[t={t + 1}]"))
            for t, a in enumerate(self.treatments)
        )
        y = _freeze(_as_float_vector(self.outcome, "outcome"))
        if len(covs) == 0 or len(covs) != len(trts):
            raise ValueError(
                f"need one covariate matrix and one treatment vector per time "
                f"point, got {len(covs)} and {len(trts)}"
            )
        n = y.shape[0]
        if n == 0:
            raise ValueError("frame must contain at least one unit")
        for t, (c, a) in enumerate(zip(covs, trts)):
            if c.shape[0] != n or a.shape[0] != n:
                raise ValueError(f"length mismatch at t={t + 1}: expected n={n}")
        if self.outcome_family == "binomial" and not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("binomial outcome must lie in {0, 1}")
        names = self.covariate_names
        if not names:
            names = tuple(
                tuple(str(j + 1) for j in range(c.shape[1])) for c in covs
            )
        else:
            names = tuple(tuple(str(nm) for nm in per_t) for per_t in names)
            for t, (c, per_t) in enumerate(zip(covs, names)):
                if len(per_t) != c.shape[1]:
                    raise ValueError(f"covariate_names[t={t + 1}] has wrong length")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "treatments", trts)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def tau(self) -> int:
        return len(self.treatments)

    def history(self, t: int) -> tuple[np.ndarray, tuple[str, ...]]:
        """Materialize ``H_t``: covariates through time t, treatments before t.

        Columns are ordered covariate blocks then treatment blocks, each
        time-ascending, and this ordering is the one every learner sees.
        """
        if not 1 <= t <= self.tau:
            raise ValueError(f"t must lie in 1..{self.tau}, got {t}")
        blocks = [self.covariates[s] for s in range(t)]
        names = [
            f"L{s + 1}_{nm}" for s in range(t) for nm in self.covariate_names[s]
        ]
        for s in range(t - 1):
            blocks.append(self.treatments[s][:, None])
            names.append(f"A{s + 1}")
        return np.hstack(blocks), tuple(names)

    def history_row(self, t: int, i: int) -> dict[str, float]:
        """Single-unit history as a name -> value mapping (for policy bounds)."""
        X, names = self.history(t)
        return {nm: float(v) for nm, v in zip(names, X[i])}

    def design(self, t: int, treatment: np.ndarray | None = None):
        """Design matrix ``(A_t, H_t)`` with the treatment column first.

        ``treatment`` substitutes a different treatment column (e.g. the
        policy-shifted one) while leaving the history untouched.
        """
        H, names = self.history(t)
        a = self.treatments[t - 1] if treatment is None else np.asarray(treatment)
        return np.hstack([a[:, None], H]), (f"A{t}",) + names

    def to_table(self) -> tuple[np.ndarray, list[str]]:
        """Flatten to a wide numeric table with conventional column names.

        Columns are ``L<t>_<name>`` and ``A<t>`` in time order, then ``Y``.
        ``from_table`` inverts this bit-exactly.
        """
        blocks, names = [], []
        for t in range(self.tau):
            blocks.append(self.covariates[t])
            names.extend(f"L{t + 1}_{nm}" for nm in self.covariate_names[t])
            blocks.append(self.treatments[t][:, None])
            names.append(f"A{t + 1}")
        blocks.append(self.outcome[:, None])
        names.append("Y")
        return np.hstack(blocks), names

    @classmethod
    def from_table(
        cls, table: np.ndarray, names: Sequence[str], outcome_family: str
    ) -> "LongitudinalFrame":
        """Rebuild a frame from the wide-table layout produced by ``to_table``.

        Column order within the table is irrelevant; names alone drive the
        mapping.  Unknown columns are rejected.
        """
        table = _as_float_matrix(np.asarray(table, dtype=np.float64), "table")
        cols = {str(nm): table[:, j] for j, nm in enumerate(names)}
        if len(cols) != len(names):
            raise ValueError("duplicate column names in table")
        if "Y" not in cols:
            raise ValueError("table is missing outcome column 'Y'")
        cov_cols: dict[int, list[tuple[str, np.ndarray]]] = {}
        trt_cols: dict[int, np.ndarray] = {}
        for nm, col in cols.items():
            if nm == "Y":
                continue
            if nm.startswith("L") and "_" in nm:
                head, sub = nm[1:].split("_", 1)
                if head.isdigit():
                    cov_cols.setdefault(int(head), []).append((sub, col))
                    continue
            if nm.startswith("A") and nm[1:].isdigit():
                trt_cols[int(nm[1:])] = col
                continue
            raise ValueError(
                f"unrecognized column {nm!r}; expected L<t>_<name>, A<t>, or Y"
            )
        tau = len(trt_cols)
        if tau == 0 or sorted(trt_cols) != list(range(1, tau + 1)):
            raise ValueError("treatment columns must be A1..Atau without gaps")
        if cov_cols and max(cov_cols) > tau:
            raise ValueError("covariate columns extend past the last treatment")
        n = table.shape[0]
        covariates, cov_names, treatments = [], [], []
        for t in range(1, tau + 1):
            per_t = cov_cols.get(t, [])  # a time point may carry no covariates
            if per_t:
                covariates.append(np.column_stack([c for _, c in per_t]))
            else:
                covariates.append(np.zeros((n, 0)))
            cov_names.append(tuple(nm for nm, _ in per_t))
            treatments.append(trt_cols[t])
        return cls(
            covariates=tuple(covariates),
            treatments=tuple(treatments),
            outcome=cols["Y"],
            outcome_family=outcome_family,
            covariate_names=tuple(cov_names),
        )


# --------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class IdentityRule:
    """Leave the natural treatment value unchanged."""


@dataclass(frozen=True)
class ConstantRule:
    value: float


@dataclass(frozen=True)
class AdditiveShiftRule:
    """Shift by ``delta``, optionally respecting a feasibility bound.

    With an upper bound u (``direction="up"``) the shifted value is
    ``a + delta`` when ``a <= u(h) - delta`` and ``a`` otherwise; with a
    lower bound (``direction="down"``) the test is ``a >= u(h) - delta``.
    ``bound`` may be a constant or the name of a history column.
    """

    delta: float
    bound: Union[float, str, None] = None
    direction: str = "up"

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")


@dataclass(frozen=True)
class MultiplicativeShiftRule:
    factor: float


@dataclass(frozen=True)
class ThresholdShiftRule:
    """Shift by ``delta`` only where the treatment satisfies a comparison."""

    delta: float
    comparator: str
    threshold: float

    _OPS = {
        "<": np.less,
        "<=": np.less_equal,
        ">": np.greater,
        ">=": np.greater_equal,
        "==": np.equal,
        "!=": np.not_equal,
    }

    def __post_init__(self):
        if self.comparator not in self._OPS:
            raise ValueError(f"unknown comparator {self.comparator!r}")


PolicyRule = Union[
    IdentityRule,
    ConstantRule,
    AdditiveShiftRule,
    MultiplicativeShiftRule,
    ThresholdShiftRule,
]


@dataclass(frozen=True)
class PolicySpec:
    """Per-time modified treatment policy d_t(a_t, h_t)."""

    rules: tuple

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if len(self.rules) == 0:
            raise ValueError("policy needs at least one per-time rule")

    @classmethod
    def uniform(cls, rule: PolicyRule, tau: int) -> "PolicySpec":
        return cls(rules=(rule,) * tau)

    @classmethod
    def identity(cls, tau: int) -> "PolicySpec":
        return cls.uniform(IdentityRule(), tau)

    @property
    def tau(self) -> int:
        return len(self.rules)

    def rule_at(self, t: int) -> PolicyRule:
        if not 1 <= t <= self.tau:
            raise ValueError(f"t must lie in 1..{self.tau}, got {t}")
        return self.rules[t - 1]


def apply_policy(policy: PolicySpec, t: int, a, h: Mapping | None = None):
    """Evaluate ``d_t(a, h)``. Vectorizes over ``a``.

    Parameters
    ----------
    policy : PolicySpec
    t : int
        Time index, 1-based.
    a : scalar or array
        Natural treatment value(s).
    h : mapping, optional
        History columns by name; required only when a rule's bound refers to
        a column.  Values may be scalars or arrays aligned with ``a``.

    Returns
    -------
    Shifted treatment value(s), same shape as ``a``.
    """
    rule = policy.rule_at(t)
    a = np.asarray(a, dtype=np.float64)
    scalar = a.ndim == 0
    a = np.atleast_1d(a)
    if isinstance(rule, IdentityRule):
        out = a.copy()
    elif isinstance(rule, ConstantRule):
        out = np.full_like(a, float(rule.value))
    elif isinstance(rule, AdditiveShiftRule):
        if rule.bound is None:
            out = a + rule.delta
        else:
            if isinstance(rule.bound, str):
                if h is None or rule.bound not in h:
                    raise ValueError(
                        f"policy bound column {rule.bound!r} not in history"
                    )
                u = np.asarray(h[rule.bound], dtype=np.float64)
            else:
                u = np.asarray(float(rule.bound))
            if rule.direction == "up":
                feasible = a <= u - rule.delta
            else:
                feasible = a >= u - rule.delta
            out = np.where(feasible, a + rule.delta, a)
    elif isinstance(rule, MultiplicativeShiftRule):
        out = a * rule.factor
    elif isinstance(rule, ThresholdShiftRule):
        hit = ThresholdShiftRule._OPS[rule.comparator](a, rule.threshold)
        out = np.where(hit, a + rule.delta, a)
    else:  # pragma: no cover - PolicySpec construction guards this
        raise TypeError(f"unknown rule type {type(rule).__name__}")
    return float(out[0]) if scalar else out


def shifted_treatments(
    frame: LongitudinalFrame,
    policy: PolicySpec,
    t: int,
    treatment: np.ndarray | None = None,
) -> np.ndarray:
    """All-unit vector of d_t(a, H_t), resolving bound columns if needed.

    ``treatment`` substitutes a counterfactual treatment column for the
    observed one (histories stay observed).
    """
    rule = policy.rule_at(t)
    h = None
    if isinstance(rule, AdditiveShiftRule) and isinstance(rule.bound, str):
        X, names = frame.history(t)
        h = {nm: X[:, j] for j, nm in enumerate(names)}
    a = frame.treatments[t - 1] if treatment is None else np.asarray(treatment)
    return np.asarray(apply_policy(policy, t, a, h), dtype=np.float64)


# --------------------------------------------------------------------------
# Conditioning sets


@dataclass(frozen=True)
class AllValues:
    """The trivial set: every treatment value belongs."""

    def contains(self, a: np.ndarray) -> np.ndarray:
        return np.ones(np.shape(a), dtype=bool)


@dataclass(frozen=True)
class ValueSet:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) == 0:
            raise ValueError("value set must be non-empty")
        object.__setattr__(self, "values", vals)

    def contains(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        out = np.zeros(a.shape, dtype=bool)
        for v in self.values:
            out |= a == v
        return out


@dataclass(frozen=True)
class Interval:
    lower: float = -math.inf
    upper: float = math.inf
    closed_lower: bool = True
    closed_upper: bool = True

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("interval lower bound exceeds upper bound")

    def contains(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        lo = a >= self.lower if self.closed_lower else a > self.lower
        hi = a <= self.upper if self.closed_upper else a < self.upper
        return lo & hi


ConditioningSet = Union[AllValues, ValueSet, Interval]


@dataclass(frozen=True)
class ConditioningSpec:
    """Per-time sets B_t restricting the natural treatment trajectory."""

    sets: tuple

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if len(self.sets) == 0:
            raise ValueError("conditioning needs at least one per-time set")

    @classmethod
    def trivial(cls, tau: int) -> "ConditioningSpec":
        return cls(sets=(AllValues(),) * tau)

    @classmethod
    def final_time(cls, tau: int, final: ConditioningSet) -> "ConditioningSpec":
        """Trivial everywhere except the last time point."""
        return cls(sets=(AllValues(),) * (tau - 1) + (final,))

    @property
    def tau(self) -> int:
        return len(self.sets)

    def set_at(self, t: int) -> ConditioningSet:
        if not 1 <= t <= self.tau:
            raise ValueError(f"t must lie in 1..{self.tau}, got {t}")
        return self.sets[t - 1]

    def is_trivial(self, t: int) -> bool:
        return isinstance(self.set_at(t), AllValues)


def conditioning_indicator(
    frame: LongitudinalFrame, conditioning: ConditioningSpec, from_t: int
) -> np.ndarray:
    """Indicator vector of ``A_s in B_s`` for every s >= from_t.

    ``from_t = tau + 1`` returns all ones (the terminal convention).  The
    recursion ``indicator(t) = indicator(t + 1) * 1{A_t in B_t}`` holds
    elementwise.
    """
    tau = frame.tau
    if conditioning.tau != tau:
        raise ValueError("conditioning length does not match frame tau")
    if not 1 <= from_t <= tau + 1:
        raise ValueError(f"from_t must lie in 1..{tau + 1}, got {from_t}")
    out = np.ones(frame.n, dtype=np.float64)
    for s in range(from_t, tau + 1):
        out *= conditioning.set_at(s).contains(frame.treatments[s - 1])
    return out


# --------------------------------------------------------------------------
# Comparability between the policy and the conditioning set


@dataclass(frozen=True)
class ComparabilityReport:
    valid: bool
    k: int | None = None
    offending_t: int | None = None
    message: str = ""


def validate_comparability(
    policy: PolicySpec, conditioning: ConditioningSpec
) -> ComparabilityReport:
    """Check that conditioning ends before the intervention begins.

    Looks for the smallest k with the policy structurally identity at every
    t < k and the conditioning trivial at every t > k.  When no such k
    exists the report names the first conditioning time that follows the
    start of the intervention; callers treat that as a warning, since the
    target parameter stays well-defined.
    """
    tau = policy.tau
    if conditioning.tau != tau:
        raise ValueError("policy and conditioning lengths differ")
    first_active = tau + 1
    for t in range(1, tau + 1):
        if not isinstance(policy.rule_at(t), IdentityRule):
            first_active = t
            break
    last_conditioned = 0
    for t in range(tau, 0, -1):
        if not conditioning.is_trivial(t):
            last_conditioned = t
            break
    k_low = max(last_conditioned, 1)
    k_high = min(first_active, tau)
    if k_low <= k_high:
        return ComparabilityReport(valid=True, k=k_low)
    offending = next(
        (
            t
            for t in range(first_active + 1, tau + 1)
            if not conditioning.is_trivial(t)
        ),
        last_conditioned,
    )
    return ComparabilityReport(
        valid=False,
        offending_t=offending,
        message=(
            f"conditioning at t={offending} follows a policy active from "
            f"t={first_active}; estimates remain defined but the treated-"
            f"stratum reading is lost"
        ),
    )


# --------------------------------------------------------------------------
# Task configuration


RIESZ_MODES = ("loss_minimization", "plugin_discrete")


@dataclass(frozen=True)
class TaskSpec:
    """Everything an estimator needs besides the data.

    ``learners_m`` and ``learners_g`` are candidate lists handed to the
    cross-validated selector; ``learner_alpha`` is the single candidate
    space for the weight fit (ignored when ``riesz_mode`` is the discrete
    plug-in).  ``clip_alpha`` truncates fitted weights from above and is off
    by default.
    """

    policy: PolicySpec
    conditioning: ConditioningSpec
    folds: int = 5
    learners_m: tuple = ()
    learners_g: tuple = ()
    learner_alpha: object = None
    riesz_mode: str = "loss_minimization"
    clip_alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.policy.tau != self.conditioning.tau:
            raise ValueError("policy and conditioning lengths differ")
        if self.folds < 1:
            raise ValueError("folds must be a positive integer")
        if self.riesz_mode not in RIESZ_MODES:
            raise ValueError(f"riesz_mode must be one of {RIESZ_MODES}")
        if self.clip_alpha is not None and not self.clip_alpha > 0:
            raise ValueError("clip_alpha must be positive when set")
        object.__setattr__(self, "learners_m", tuple(self.learners_m))
        object.__setattr__(self, "learners_g", tuple(self.learners_g))

    @property
    def tau(self) -> int:
        return self.policy.tau
