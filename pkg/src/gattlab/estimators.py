"""Point estimators, influence-function evaluation, and confidence intervals.

Three estimators share one set of cross-fitted nuisances: the substitution
estimator averages the first sequential regression at the shifted treatment
over the conditioning stratum; the weighted estimator averages the outcome
times the terminal cumulated weight; the targeted estimator fluctuates each
sequential regression with a weighted intercept-only canonical-link update,
one backward pass, so that the influence-function estimating equation is
solved term by term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from gattlab.core import (
    ConditioningSpec,
    LongitudinalFrame,
    PolicySpec,
    TaskSpec,
    conditioning_indicator,
    shifted_treatments,
    validate_comparability,
)
from gattlab.learners import (
    FoldPlan,
    LearnerSpec,
    P_MIN,
    make_folds,
    select_superlearner,
)
from gattlab.riesz import (
    GSequence,
    RatioPath,
    RieszFit,
    _derived_seed,
    _selection_folds,
    fit_G_sequence,
    fit_ratio_plugin_sequence,
    fit_riesz_sequence,
)

__all__ = [
    "SequentialFits",
    "NuisanceBundle",
    "EstimateResult",
    "fit_sequential_regressions",
    "fit_nuisances",
    "estimate_substitution",
    "estimate_ipw",
    "estimate_tmle",
    "tmle_fluctuation_step",
    "compute_eif",
]

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
ALPHA_MAX_WARN = 1e3


@dataclass(frozen=True)
class SequentialFits:
    """Cross-fitted backward regressions with cached per-unit predictions.

    Rows 1..tau of ``m_obs``/``m_shift`` hold the time-t prediction at the
    observed and policy-shifted treatment; row tau+1 is literally the
    outcome vector in both (the terminal convention).  Row 0 is unused.
    """

    tau: int
    m_obs: np.ndarray
    m_shift: np.ndarray
    family: str

    def observed(self, t: int) -> np.ndarray:
        return self.m_obs[t]

    def shifted(self, t: int) -> np.ndarray:
        return self.m_shift[t]


def fit_sequential_regressions(
    frame: LongitudinalFrame,
    policy: PolicySpec,
    conditioning: ConditioningSpec,
    learners,
    folds: FoldPlan,
    seed: int = 0,
) -> SequentialFits:
    """Backward-recursive pseudo-outcome regressions.

    At each t = tau..1 the already-computed shifted prediction for t+1 is
    regressed on the time-t design, using only units whose future treatments
    lie in the conditioning set (every unit at t = tau), then evaluated for
    all units at the observed and the shifted treatment.

    ``learners`` is either one candidate list shared by every time point or
    a sequence of per-time candidate lists (index 0 = time 1).
    """
    tau, n = frame.tau, frame.n
    family = frame.outcome_family
    per_time = _normalize_per_time(learners, tau)
    m_obs = np.empty((tau + 2, n))
    m_shift = np.empty((tau + 2, n))
    m_obs[tau + 1] = frame.outcome
    m_shift[tau + 1] = frame.outcome
    for t in range(tau, 0, -1):
        pseudo = m_shift[t + 1]
        subset = conditioning_indicator(frame, conditioning, t + 1) == 1.0
        X_obs, _ = frame.design(t)
        X_shift, _ = frame.design(
            t, treatment=shifted_treatments(frame, policy, t)
        )
        for j in range(folds.J):
            train = folds.train_mask(j) & subset
            n_train = int(train.sum())
            if n_train == 0:
                raise ValueError(
                    f"empty regression subset at t={t}: no training unit has "
                    f"future treatments inside the conditioning set"
                )
            model = select_superlearner(
                per_time[t - 1],
                X_obs[train],
                pseudo[train],
                np.ones(n_train),
                family,
                _selection_folds(n_train, folds.J, _derived_seed(seed, 401, t, j)),
                seed=_derived_seed(seed, 402, t, j),
            )
            te = folds.test_mask(j)
            m_obs[t][te] = model.predict(X_obs[te])
            m_shift[t][te] = model.predict(X_shift[te])
    m_obs.flags.writeable = False
    m_shift.flags.writeable = False
    return SequentialFits(tau=tau, m_obs=m_obs, m_shift=m_shift, family=family)


def _normalize_per_time(learners, tau: int) -> list:
    items = list(learners)
    if items and isinstance(items[0], LearnerSpec):
        return [items] * tau
    if len(items) != tau:
        raise ValueError(f"need one candidate list per time point (tau={tau})")
    return [list(per_t) for per_t in items]


@dataclass(frozen=True)
class NuisanceBundle:
    """Everything the estimators consume: G, weights, sequential fits."""

    G: GSequence
    weights: object  # RieszFit or RatioPath: anything with alpha_at(t)
    seq: SequentialFits


DEFAULT_M_LEARNERS = (LearnerSpec(kind="glm"),)
DEFAULT_G_LEARNERS = (LearnerSpec(kind="glm"),)
DEFAULT_ALPHA_LEARNER = LearnerSpec(kind="glm", interaction_order=1)


def fit_nuisances(
    frame: LongitudinalFrame,
    task: TaskSpec,
    alpha_degraded: tuple[int, ...] = (),
) -> NuisanceBundle:
    """Fit all nuisances for a task on shared folds.

    Emits a warning (never an error) when the policy/conditioning pair lacks
    the treated-stratum comparability structure; the parameter stays
    well-defined.  ``alpha_degraded`` pins the cumulated weight to 1 at the
    listed times, a deliberate misspecification knob used by the simulation
    harness.
    """
    report = validate_comparability(task.policy, task.conditioning)
    if not report.valid:
        warnings.warn(f"comparability violated: {report.message}", UserWarning)
    folds = make_folds(frame.n, min(task.folds, frame.n), task.seed)
    g_specs = task.learners_g or DEFAULT_G_LEARNERS
    m_specs = task.learners_m or DEFAULT_M_LEARNERS
    G = fit_G_sequence(frame, task.conditioning, g_specs, folds, seed=task.seed)
    if task.riesz_mode == "plugin_discrete":
        weights = fit_ratio_plugin_sequence(
            frame,
            task.policy,
            task.conditioning,
            G,
            folds,
            seed=task.seed,
            clip_alpha=task.clip_alpha,
            degraded_times=alpha_degraded,
        )
    else:
        candidate = task.learner_alpha or DEFAULT_ALPHA_LEARNER
        weights = fit_riesz_sequence(
            frame,
            task.policy,
            task.conditioning,
            G,
            candidate,
            folds,
            seed=task.seed,
            clip_alpha=task.clip_alpha,
            degraded_times=alpha_degraded,
        )
    seq = fit_sequential_regressions(
        frame, task.policy, task.conditioning, m_specs, folds, seed=task.seed
    )
    return NuisanceBundle(G=G, weights=weights, seq=seq)


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    theta_hat: float
    n: int
    n_conditioning: int
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    eif_values: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.se is not None:
            if not self.se > 0:
                raise ValueError("standard error must be positive")
            if not self.ci_low <= self.theta_hat <= self.ci_high:
                raise ValueError("confidence interval must bracket the estimate")


def _base_diagnostics(frame, nuisances) -> dict:
    alpha_max = [
        float(np.max(nuisances.weights.alpha_at(t)))
        for t in range(1, frame.tau + 1)
    ]
    alpha_sd = [
        float(np.std(nuisances.weights.alpha_at(t)))
        for t in range(1, frame.tau + 1)
    ]
    if max(alpha_max) > ALPHA_MAX_WARN:
        warnings.warn(
            f"largest fitted weight is {max(alpha_max):.3g}; estimates may be "
            f"unstable (consider clip_alpha)",
            UserWarning,
        )
    return {
        "alpha_max": alpha_max,
        "alpha_sd": alpha_sd,
        "G0_hat": float(nuisances.G.G0_hat),
    }


def estimate_substitution(
    frame: LongitudinalFrame, task: TaskSpec, nuisances: NuisanceBundle | None = None
) -> EstimateResult:
    """Average the first shifted regression over the conditioning stratum."""
    if nuisances is None:
        nuisances = fit_nuisances(frame, task)
    cond = conditioning_indicator(frame, task.conditioning, 1) == 1.0
    n_cond = int(cond.sum())
    if n_cond == 0:
        raise ValueError("empty conditioning stratum: no unit lies in the set")
    theta = float(np.mean(nuisances.seq.shifted(1)[cond]))
    return EstimateResult(
        estimator="sub",
        theta_hat=theta,
        n=frame.n,
        n_conditioning=n_cond,
        diagnostics=_base_diagnostics(frame, nuisances),
    )


def estimate_ipw(
    frame: LongitudinalFrame, task: TaskSpec, nuisances: NuisanceBundle | None = None
) -> EstimateResult:
    """Weighted mean of the outcome under the terminal cumulated weight."""
    if nuisances is None:
        nuisances = fit_nuisances(frame, task)
    cond = conditioning_indicator(frame, task.conditioning, 1) == 1.0
    alpha_tau = nuisances.weights.alpha_at(frame.tau)
    theta = float(np.mean(alpha_tau * frame.outcome))
    return EstimateResult(
        estimator="ipw",
        theta_hat=theta,
        n=frame.n,
        n_conditioning=int(cond.sum()),
        diagnostics=_base_diagnostics(frame, nuisances),
    )


def tmle_fluctuation_step(
    m_next_shifted: np.ndarray,
    m_t_observed: np.ndarray,
    m_t_shifted: np.ndarray,
    weights: np.ndarray,
    family: str,
):
    """Weighted intercept-only canonical-link update of one regression.

    Solves sum_i w_i (y*_i - inverse_link(link(m_i) + eps)) = 0 for the
    scalar eps and applies it on the link scale to both prediction vectors.
    Gaussian solves in closed form; binomial runs Newton iterations until
    the absolute score drops below 1e-10.

    Weights are nominally nonnegative; small negative values from a linear
    weight fit are tolerated (the influence-function score must be solved
    with exactly these weights) as long as the total mass stays positive.
    All-zero weights leave the regression untouched: the score term they
    induce is identically zero, so eps = 0 already solves it.

    Returns
    -------
    (epsilon, updated_observed, updated_shifted)
    """
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w != 0.0):
        return 0.0, np.asarray(m_t_observed, dtype=np.float64), np.asarray(
            m_t_shifted, dtype=np.float64
        )
    wsum = float(np.sum(w))
    if wsum <= 0:
        raise ValueError("fluctuation weights carry no positive total mass")
    y = np.asarray(m_next_shifted, dtype=np.float64)
    m_o = np.asarray(m_t_observed, dtype=np.float64)
    m_s = np.asarray(m_t_shifted, dtype=np.float64)
    if family == "gaussian":
        eps = float(np.sum(w * (y - m_o)) / wsum)
        return eps, m_o + eps, m_s + eps
    eta_o = logit(np.clip(m_o, P_MIN, 1.0 - P_MIN))
    eta_s = logit(np.clip(m_s, P_MIN, 1.0 - P_MIN))
    eps = 0.0
    for _ in range(NEWTON_MAX_ITER):
        p = expit(eta_o + eps)
        score = float(np.sum(w * (y - p)))
        if abs(score) <= NEWTON_TOL:
            break
        fisher = float(np.sum(w * p * (1.0 - p)))
        if fisher <= 0.0:
            raise FloatingPointError("degenerate fluctuation: zero information")
        eps += score / fisher
    else:
        raise FloatingPointError(
            f"fluctuation did not converge: |score| = {abs(score):.3e}"
        )
    return eps, expit(eta_o + eps), expit(eta_s + eps)


def _tmle_weights(frame, conditioning, G, weights, t):
    ind_next = conditioning_indicator(frame, conditioning, t + 1)
    return weights.alpha_at(t) * ind_next / G.values_at(t)


def estimate_tmle(
    frame: LongitudinalFrame, task: TaskSpec, nuisances: NuisanceBundle | None = None
) -> EstimateResult:
    """Targeted estimator with influence-function-based inference.

    One backward pass of weighted intercept fluctuations; the pseudo-outcome
    entering time t is the already-updated shifted prediction from t+1.  The
    point estimate averages the updated first regression at the shifted
    treatment over the conditioning stratum; the standard error is the
    sample standard deviation of the influence-function values over root n.
    """
    if nuisances is None:
        nuisances = fit_nuisances(frame, task)
    tau, n = frame.tau, frame.n
    family = frame.outcome_family
    cond = conditioning_indicator(frame, task.conditioning, 1) == 1.0
    n_cond = int(cond.sum())
    if n_cond == 0:
        raise ValueError("empty conditioning stratum: no unit lies in the set")

    m_obs = nuisances.seq.m_obs.copy()
    m_shift = nuisances.seq.m_shift.copy()
    epsilons = []
    for t in range(tau, 0, -1):
        w_t = _tmle_weights(frame, task.conditioning, nuisances.G, nuisances.weights, t)
        eps, upd_obs, upd_shift = tmle_fluctuation_step(
            m_shift[t + 1], m_obs[t], m_shift[t], w_t, family
        )
        m_obs[t] = upd_obs
        m_shift[t] = upd_shift
        epsilons.append(eps)

    theta = float(np.mean(m_shift[1][cond]))
    eif = compute_eif(
        frame, task.conditioning, nuisances.G, nuisances.weights, m_obs, m_shift, theta
    )
    mean_eif = float(np.mean(eif))
    sd_eif = float(np.std(eif))
    if sd_eif > 0 and abs(mean_eif) > 1e-5 * sd_eif:
        warnings.warn(
            f"influence function not centered: mean {mean_eif:.3e} vs sd {sd_eif:.3e}",
            UserWarning,
        )
    se = sd_eif / np.sqrt(n)
    diagnostics = _base_diagnostics(frame, nuisances)
    diagnostics["mean_eif"] = mean_eif
    diagnostics["epsilons"] = list(reversed(epsilons))
    return EstimateResult(
        estimator="tmle",
        theta_hat=theta,
        n=n,
        n_conditioning=n_cond,
        se=se,
        ci_low=theta - 1.96 * se,
        ci_high=theta + 1.96 * se,
        eif_values=eif,
        diagnostics=diagnostics,
    )


def compute_eif(
    frame: LongitudinalFrame,
    conditioning: ConditioningSpec,
    G: GSequence,
    weights,
    m_obs: np.ndarray,
    m_shift: np.ndarray,
    theta_hat: float,
) -> np.ndarray:
    """Per-unit influence-function values.

    The sum runs from t = 0 with the conventions: time-0 weight one, time-0
    regression identically the point estimate, marginal conditioning
    probability in the denominator, and the terminal regression literally
    the outcome.
    """
    tau, n = frame.tau, frame.n
    out = np.zeros(n)
    for t in range(0, tau + 1):
        alpha_t = np.ones(n) if t == 0 else weights.alpha_at(t)
        ind_next = conditioning_indicator(frame, conditioning, t + 1)
        prev = np.full(n, theta_hat) if t == 0 else m_obs[t]
        out += alpha_t * ind_next / G.values_at(t) * (m_shift[t + 1] - prev)
    return out
