"""Conditioning probabilities and cumulated ratio weights.

Estimation of the weights proceeds along one of two routes.  The loss route
exploits the fact that the time-t cumulated ratio is the unique minimizer of

    E[ w(A_t, H_t)^2 ] - 2 E[ prev_w * indicator / G_prev * w(A_t^d, H_t) ],

so the weight function can be fit directly, without modelling any treatment
probability.  The plug-in route models each per-time treatment probability,
forms the shifted-to-observed ratio from the discrete closed form, and
cumulates the ratios; it exists as the classical baseline and requires a
finite treatment support.

Both routes are cross-fitted on a shared fold plan and cache per-unit
evaluations so downstream estimators never refit anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from gattlab.core import (
    ConditioningSpec,
    LongitudinalFrame,
    PolicySpec,
    conditioning_indicator,
    shifted_treatments,
)
from gattlab.learners import (
    FoldPlan,
    LearnerSpec,
    P_MIN,
    RIDGE,
    _solve_normal,
    adam_minimize,
    expand_features,
    make_folds,
    mlp_forward,
    mlp_init,
    select_superlearner,
)

__all__ = [
    "GSequence",
    "RieszFit",
    "RatioPath",
    "fit_G_sequence",
    "riesz_loss",
    "fit_riesz_sequence",
    "fit_ratio_plugin_sequence",
]


def _derived_seed(*parts: int) -> int:
    """Deterministic, well-mixed seed from a tuple of integer tags."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Conditioning probabilities G_t


@dataclass(frozen=True)
class GSequence:
    """Fitted conditioning probabilities.

    ``values_obs[t]`` caches the per-unit prediction at the observed
    treatment and history: row 0 is the empirical marginal repeated, row tau
    is exactly one, and rows where the future conditioning is trivial stay
    exactly one without any model having been fit.
    """

    G0_hat: float
    tau: int
    folds: FoldPlan
    models: tuple
    values_obs: np.ndarray

    def values_at(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.tau:
            raise ValueError(f"t must lie in 0..{self.tau}, got {t}")
        return self.values_obs[t]

    def predict_at(
        self, frame: LongitudinalFrame, t: int, treatment: np.ndarray
    ) -> np.ndarray:
        """Cross-fitted prediction at a substituted treatment column."""
        if t == 0:
            return np.full(frame.n, self.G0_hat)
        if t >= self.tau or self.models[t - 1] is None:
            return np.ones(frame.n)
        X, _ = frame.design(t, treatment=treatment)
        out = np.empty(frame.n)
        for j, model in enumerate(self.models[t - 1]):
            te = self.folds.test_mask(j)
            out[te] = model.predict(X[te])
        return out


def _selection_folds(n_train: int, outer_J: int, seed: int) -> FoldPlan:
    # candidate selection always cross-validates, even when outer
    # cross-fitting is disabled
    J = outer_J if outer_J > 1 else 5
    return make_folds(n_train, min(J, n_train), seed)


def fit_G_sequence(
    frame: LongitudinalFrame,
    conditioning: ConditioningSpec,
    learner_specs: Sequence[LearnerSpec],
    folds: FoldPlan,
    seed: int = 0,
) -> GSequence:
    """Estimate the conditioning probabilities for t = 0..tau.

    The marginal is the empirical proportion of units whose whole treatment
    trajectory lies in the conditioning set.  For interior times a binomial
    regression of the joint future indicator on the time-t design is fit
    per fold; times with a trivial future are pinned to one exactly.

    Raises
    ------
    ValueError
        If no unit lies in the conditioning set.
    """
    tau = frame.tau
    ind_full = conditioning_indicator(frame, conditioning, 1)
    G0 = float(np.mean(ind_full))
    if G0 == 0.0:
        raise ValueError("empty conditioning stratum: no unit lies in the set")
    values = np.ones((tau + 1, frame.n))
    values[0] = G0
    models: list = []
    for t in range(1, tau):
        if all(conditioning.is_trivial(s) for s in range(t + 1, tau + 1)):
            models.append(None)
            continue
        y = conditioning_indicator(frame, conditioning, t + 1)
        X, _ = frame.design(t)
        per_fold = []
        for j in range(folds.J):
            tr, te = folds.train_mask(j), folds.test_mask(j)
            inner = _selection_folds(
                int(tr.sum()), folds.J, _derived_seed(seed, 101, t, j)
            )
            model = select_superlearner(
                learner_specs,
                X[tr],
                y[tr],
                np.ones(int(tr.sum())),
                "binomial",
                inner,
                seed=_derived_seed(seed, 102, t, j),
            )
            per_fold.append(model)
            values[t][te] = model.predict(X[te])
        models.append(tuple(per_fold))
    values.flags.writeable = False
    return GSequence(
        G0_hat=G0, tau=tau, folds=folds, models=tuple(models), values_obs=values
    )


# --------------------------------------------------------------------------
# Loss-minimization route


def riesz_loss(
    candidate: Callable[[np.ndarray], np.ndarray],
    frame: LongitudinalFrame,
    t: int,
    policy: PolicySpec,
    alpha_prev_values: np.ndarray,
    G_prev_values: np.ndarray,
    indicator_values: np.ndarray,
) -> float:
    """Empirical weight-fitting loss for one time point.

    ``candidate`` maps a ``(A_t, H_t)`` design matrix to weight values.  The
    quadratic term evaluates it at the observed treatment, the linear term
    at the policy-shifted treatment with the history fixed.
    """
    X_obs, _ = frame.design(t)
    X_shift, _ = frame.design(t, treatment=shifted_treatments(frame, policy, t))
    w = np.asarray(alpha_prev_values) * np.asarray(indicator_values)
    w = w / np.asarray(G_prev_values)
    a_obs = np.asarray(candidate(X_obs), dtype=np.float64)
    a_shift = np.asarray(candidate(X_shift), dtype=np.float64)
    return float(np.mean(a_obs**2) - 2.0 * np.mean(w * a_shift))


def _linear_basis(X: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    if spec.kind == "intercept_only":
        return np.ones((X.shape[0], 1))
    return np.hstack(
        [np.ones((X.shape[0], 1)), expand_features(X, spec.interaction_order)]
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _riesz_mlp_value_grad(params, X_obs, X_shift, w, l2):
    """Loss and gradient for the nonnegative network candidate.

    The output head is a softplus, so fitted weights cannot go negative.
    """
    n = X_obs.shape[0]
    eta_o, pre_o, act_o = mlp_forward(params, X_obs)
    eta_s, pre_s, act_s = mlp_forward(params, X_shift)
    a_o = _softplus(eta_o)
    a_s = _softplus(eta_s)
    pen = l2 * (np.sum(params["W1"] ** 2) + np.sum(params["W2"] ** 2))
    loss = float(np.mean(a_o**2) - 2.0 * np.mean(w * a_s) + pen)
    deta_o = 2.0 * a_o * expit(eta_o) / n
    deta_s = -2.0 * w * expit(eta_s) / n
    grads = {}
    grads["W2"] = (
        act_o.T @ deta_o + act_s.T @ deta_s + 2.0 * l2 * params["W2"]
    )
    grads["b2"] = np.array([np.sum(deta_o) + np.sum(deta_s)])
    dpre_o = np.outer(deta_o, params["W2"]) * (pre_o > 0.0)
    dpre_s = np.outer(deta_s, params["W2"]) * (pre_s > 0.0)
    grads["W1"] = dpre_o.T @ X_obs + dpre_s.T @ X_shift + 2.0 * l2 * params["W1"]
    grads["b1"] = dpre_o.sum(axis=0) + dpre_s.sum(axis=0)
    return loss, grads


@dataclass(frozen=True)
class RieszFit:
    """Per-unit weight evaluations from the loss-minimization route.

    Row t of ``alpha_obs`` holds the time-t weight at the observed
    treatment and history (row 0 is identically one); ``alpha_shift`` holds
    the same candidates evaluated at the policy-shifted treatment.
    """

    tau: int
    alpha_obs: np.ndarray
    alpha_shift: np.ndarray
    diagnostics: tuple
    ridge_fallback: bool = False

    def alpha_at(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.tau:
            raise ValueError(f"t must lie in 0..{self.tau}, got {t}")
        return self.alpha_obs[t]


def _weight_diagnostics(values: np.ndarray) -> dict:
    return {
        "min": float(np.min(values)),
        "max": float(np.max(values)),
        "sd": float(np.std(values)),
    }


def fit_riesz_sequence(
    frame: LongitudinalFrame,
    policy: PolicySpec,
    conditioning: ConditioningSpec,
    G: GSequence,
    candidate: LearnerSpec,
    folds: FoldPlan,
    seed: int = 0,
    clip_alpha: float | None = None,
    degraded_times: Sequence[int] = (),
) -> RieszFit:
    """Fit the cumulated weights in increasing t by empirical loss minimization.

    Linear candidates (``glm`` or ``intercept_only`` kinds) solve the normal
    equations M beta = c in closed form, with M the second-moment matrix of
    the observed-treatment basis and c the weighted mean of the shifted
    basis; negative fitted values are allowed.  The ``mlp`` kind trains by
    gradient descent with a softplus head enforcing nonnegativity.  Each fit
    plugs in the previous time's fitted values, so times are inherently
    sequential; folds cross-fit within each time.

    Times listed in ``degraded_times`` are not fit: the cumulated weight is
    pinned to 1 there, and later fits consume the pinned values.
    """
    tau, n = frame.tau, frame.n
    degraded = frozenset(int(t) for t in degraded_times)
    alpha_obs = np.ones((tau + 1, n))
    alpha_shift = np.ones((tau + 1, n))
    diagnostics = []
    ridged = False
    for t in range(1, tau + 1):
        if t in degraded:
            diagnostics.append(_weight_diagnostics(alpha_obs[t]))
            continue
        ind_t = conditioning_indicator(frame, conditioning, t)
        w = alpha_obs[t - 1] * ind_t / G.values_at(t - 1)
        X_obs, _ = frame.design(t)
        X_shift, _ = frame.design(
            t, treatment=shifted_treatments(frame, policy, t)
        )
        obs_vals = np.empty(n)
        shift_vals = np.empty(n)
        for j in range(folds.J):
            tr, te = folds.train_mask(j), folds.test_mask(j)
            if candidate.kind == "mlp":
                rng = np.random.default_rng(_derived_seed(seed, 201, t, j))
                params = mlp_init(X_obs.shape[1], candidate.hidden_units, rng)
                params = adam_minimize(
                    params,
                    lambda p: _riesz_mlp_value_grad(
                        p, X_obs[tr], X_shift[tr], w[tr], candidate.l2_penalty
                    ),
                    candidate.epochs,
                    candidate.learning_rate,
                )
                obs_vals[te] = _softplus(mlp_forward(params, X_obs[te])[0])
                shift_vals[te] = _softplus(mlp_forward(params, X_shift[te])[0])
            else:
                phi_obs = _linear_basis(X_obs[tr], candidate)
                phi_shift = _linear_basis(X_shift[tr], candidate)
                M = phi_obs.T @ phi_obs / phi_obs.shape[0]
                c = phi_shift.T @ w[tr] / phi_shift.shape[0]
                beta, fell_back = _solve_normal(M, c)
                ridged = ridged or fell_back
                obs_vals[te] = _linear_basis(X_obs[te], candidate) @ beta
                shift_vals[te] = _linear_basis(X_shift[te], candidate) @ beta
        if not (np.all(np.isfinite(obs_vals)) and np.all(np.isfinite(shift_vals))):
            raise ValueError(f"non-finite weight fit at t={t}")
        if clip_alpha is not None:
            obs_vals = np.minimum(obs_vals, clip_alpha)
            shift_vals = np.minimum(shift_vals, clip_alpha)
        alpha_obs[t] = obs_vals
        alpha_shift[t] = shift_vals
        diagnostics.append(_weight_diagnostics(obs_vals))
    alpha_obs.flags.writeable = False
    alpha_shift.flags.writeable = False
    return RieszFit(
        tau=tau,
        alpha_obs=alpha_obs,
        alpha_shift=alpha_shift,
        diagnostics=tuple(diagnostics),
        ridge_fallback=ridged,
    )


# --------------------------------------------------------------------------
# Discrete plug-in route

SUPPORT_LIMIT = 20  # above this many distinct values a treatment is continuous


@dataclass(frozen=True)
class RatioPath:
    """Cumulated ratio weights built from per-time treatment probabilities."""

    tau: int
    alpha_obs: np.ndarray
    ratios: np.ndarray
    diagnostics: tuple
    clamp_count: int = 0

    def alpha_at(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.tau:
            raise ValueError(f"t must lie in 0..{self.tau}, got {t}")
        return self.alpha_obs[t]


def _fit_pmf(frame, t, support, g_learner, folds, seed):
    """Cross-fitted pmf over the observed support: returns (n, K) matrix."""
    H, _ = frame.history(t)
    A = frame.treatments[t - 1]
    n, K = frame.n, len(support)
    pmf = np.empty((n, K))
    for j in range(folds.J):
        tr, te = folds.train_mask(j), folds.test_mask(j)
        if K == 1:
            pmf[te] = 1.0
            continue
        if K == 2:
            y = (A == support[1]).astype(float)
            model_fit = select_superlearner(
                [g_learner], H[tr], y[tr], np.ones(int(tr.sum())), "binomial",
                _selection_folds(int(tr.sum()), folds.J, _derived_seed(seed, 301, t, j)),
                seed=_derived_seed(seed, 302, t, j),
            )
            p1 = model_fit.predict(H[te])
            pmf[te, 0] = 1.0 - p1
            pmf[te, 1] = p1
        else:
            # one-vs-rest logits, renormalized to a proper pmf
            raw = np.empty((int(te.sum()), K))
            for k, val in enumerate(support):
                y = (A == val).astype(float)
                model_fit = select_superlearner(
                    [g_learner], H[tr], y[tr], np.ones(int(tr.sum())), "binomial",
                    _selection_folds(
                        int(tr.sum()), folds.J, _derived_seed(seed, 303, t, j, k)
                    ),
                    seed=_derived_seed(seed, 304, t, j, k),
                )
                raw[:, k] = model_fit.predict(H[te])
            pmf[te] = raw / raw.sum(axis=1, keepdims=True)
    return pmf


def fit_ratio_plugin_sequence(
    frame: LongitudinalFrame,
    policy: PolicySpec,
    conditioning: ConditioningSpec,
    G: GSequence,
    folds: FoldPlan,
    g_learner: LearnerSpec | None = None,
    seed: int = 0,
    clip_alpha: float | None = None,
    degraded_times: Sequence[int] = (),
) -> RatioPath:
    """Plug-in weights: model each treatment pmf, form ratios, cumulate.

    The shifted-treatment probability at the observed value follows the
    discrete closed form

        sum over a in B_t of 1{A_t = d_t(a, H_t)}
            * G_t(a, H_t) / G_{t-1}(A_{t-1}, H_{t-1}) * g_t(a | H_t),

    divided by the observed-treatment probability.  Probabilities below the
    clamp are raised to it and counted.

    Raises
    ------
    ValueError
        When a treatment looks continuous (more than ``SUPPORT_LIMIT``
        distinct values); use riesz_mode="loss_minimization" instead.
    """
    if g_learner is None:
        g_learner = LearnerSpec(kind="glm")
    tau, n = frame.tau, frame.n
    degraded = frozenset(int(t) for t in degraded_times)
    alpha = np.ones((tau + 1, n))
    ratios = np.empty((tau, n))
    diagnostics = []
    clamped = 0
    for t in range(1, tau + 1):
        if t in degraded:
            # cumulated weight pinned to 1; record the ratio that keeps the
            # identity alpha_t = alpha_{t-1} * r_t where it is well defined
            prev = alpha[t - 1]
            ratios[t - 1] = np.divide(
                1.0, prev, out=np.zeros(n), where=prev != 0
            )
            alpha[t] = 1.0
            diagnostics.append(_weight_diagnostics(alpha[t]))
            continue
        A = frame.treatments[t - 1]
        support = np.unique(A)
        if support.size > SUPPORT_LIMIT:
            raise ValueError(
                f"treatment at t={t} has {support.size} distinct values and "
                f"looks continuous; use riesz_mode='loss_minimization'"
            )
        pmf = _fit_pmf(frame, t, support, g_learner, folds, _derived_seed(seed, t))
        in_B = conditioning.set_at(t).contains(support)
        G_prev = G.values_at(t - 1)
        numerator = np.zeros(n)
        for k, val in enumerate(support):
            if not in_B[k]:
                continue
            shifted = shifted_treatments(
                frame, policy, t, treatment=np.full(n, val)
            )
            hit = A == shifted
            if not np.any(hit):
                continue
            G_t_at = G.predict_at(frame, t, np.full(n, val))
            numerator += hit * (G_t_at / G_prev) * pmf[:, k]
        g_obs = pmf[np.arange(n), np.searchsorted(support, A)]
        low = g_obs < P_MIN
        clamped += int(np.sum(low))
        r = numerator / np.where(low, P_MIN, g_obs)
        ratios[t - 1] = r
        alpha[t] = alpha[t - 1] * r
        if clip_alpha is not None:
            alpha[t] = np.minimum(alpha[t], clip_alpha)
        diagnostics.append(_weight_diagnostics(alpha[t]))
    alpha.flags.writeable = False
    ratios.flags.writeable = False
    return RatioPath(
        tau=tau,
        alpha_obs=alpha,
        ratios=ratios,
        diagnostics=tuple(diagnostics),
        clamp_count=clamped,
    )
