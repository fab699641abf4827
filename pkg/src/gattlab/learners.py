"""Regression learners, cross-validation folds, and discrete model selection.

Three learner kinds cover every nuisance fit in the package: a weighted
intercept, a generalized linear model (optionally with all pairwise
interaction terms), and a single-hidden-layer neural network trained with an
adaptive-moment gradient method.  The discrete super-learner fits each
candidate with V-fold cross-validation and keeps the single best one.

All fits accept nonnegative observation weights and, for the binomial
family, fractional responses in [0, 1]; sequential-regression pseudo
outcomes need both.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "LearnerSpec",
    "FoldPlan",
    "FittedModel",
    "make_folds",
    "fit",
    "select_superlearner",
    "expand_features",
    "mlp_init",
    "mlp_forward",
    "mlp_loss_and_grad",
    "adam_minimize",
    "P_MIN",
]

P_MIN = 1e-6  # probability clamp keeping ratio weights finite
RIDGE = 1e-8
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration for one learner.

    ``interaction_order`` applies to the glm kind only: 1 adds the product
    of every distinct pair of input columns.  The mlp hyperparameters follow
    the package-wide defaults (25 hidden units, 500 epochs, learning rate
    1e-3, l2 penalty 1e-4); the hidden layer uses rectified-linear
    activations.
    """

    kind: str = "glm"
    interaction_order: int = 0
    hidden_units: int = 25
    epochs: int = 500
    learning_rate: float = 1e-3
    l2_penalty: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("intercept_only", "glm", "mlp"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.interaction_order not in (0, 1):
            raise ValueError("interaction_order must be 0 or 1")
        if self.hidden_units < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("invalid mlp hyperparameters")


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic partition of unit indexes into J folds."""

    J: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    def train_mask(self, j: int) -> np.ndarray:
        """Units a model may train on when predicting fold j.

        With a single fold there is no held-out data: train = predict.
        """
        if self.J == 1:
            return np.ones(self.n, dtype=bool)
        return self.assignment != j

    def test_mask(self, j: int) -> np.ndarray:
        return (
            np.ones(self.n, dtype=bool) if self.J == 1 else self.assignment == j
        )


def make_folds(n: int, J: int, seed: int) -> FoldPlan:
    """Randomly partition 1..n into J folds of near-equal size."""
    if not 1 <= J <= n:
        raise ValueError(f"need 1 <= J <= n, got J={J}, n={n}")
    assignment = np.zeros(n, dtype=np.int64)
    if J > 1:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        assignment[perm] = np.arange(n) % J
    return FoldPlan(J=J, assignment=assignment, seed=seed)


def expand_features(X: np.ndarray, interaction_order: int) -> np.ndarray:
    """Append the product of every distinct column pair when order is 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d design matrix")
    if interaction_order == 0 or X.shape[1] < 2:
        return X
    d = X.shape[1]
    cross = [X[:, i] * X[:, j] for i in range(d) for j in range(i + 1, d)]
    return np.hstack([X] + [c[:, None] for c in cross])


def _check_xyw(X, y, w):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d design matrix")
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if X.shape[0] != y.shape[0] or y.shape[0] != w.shape[0]:
        raise ValueError("X, y, w length mismatch")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    return X, y, w


def _solve_normal(M: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve M beta = c, falling back to a small ridge on singularity."""
    try:
        beta = np.linalg.solve(M, c)
        if np.all(np.isfinite(beta)):
            return beta, False
    except np.linalg.LinAlgError:
        pass
    beta = np.linalg.solve(M + RIDGE * np.eye(M.shape[0]), c)
    return beta, True


@dataclass(frozen=True)
class FittedModel:
    """Immutable fitted learner; ``predict`` maps raw inputs to the mean scale."""

    spec: LearnerSpec
    family: str
    n_features: int
    coef: np.ndarray | None = None
    mlp_params: dict | None = None
    ridge_fallback: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} feature columns, got shape {X.shape}"
            )
        if self.spec.kind == "mlp":
            eta = mlp_forward(self.mlp_params, X)[0]
        elif self.spec.kind == "intercept_only":
            eta = np.full(X.shape[0], self.coef[0])
        else:
            Z = expand_features(X, self.spec.interaction_order)
            eta = self.coef[0] + Z @ self.coef[1:]
        if self.family == "binomial":
            return np.clip(expit(eta), P_MIN, 1.0 - P_MIN)
        return eta


def _fit_gaussian_glm(Z, y, w):
    D = np.hstack([np.ones((Z.shape[0], 1)), Z])
    Dw = D * w[:, None]
    beta, ridged = _solve_normal(D.T @ Dw, Dw.T @ y)
    return beta, ridged


def _fit_binomial_glm(Z, y, w):
    # IRLS on the canonical link; fractional y in [0, 1] is allowed.
    D = np.hstack([np.ones((Z.shape[0], 1)), Z])
    beta = np.zeros(D.shape[1])
    ridged = False
    for _ in range(IRLS_MAX_ITER):
        p = expit(D @ beta)
        score = D.T @ (w * (y - p))
        if np.max(np.abs(score)) <= IRLS_TOL:
            break
        # keep the Hessian positive definite under separation
        v = w * np.clip(p * (1.0 - p), 1e-10, None)
        H = D.T @ (D * v[:, None])
        step, fell_back = _solve_normal(H, score)
        ridged = ridged or fell_back
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            raise FloatingPointError("IRLS produced non-finite coefficients")
    return beta, ridged


def fit(
    spec: LearnerSpec,
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    family: str,
    seed: int = 0,
) -> FittedModel:
    """Fit one learner.

    Parameters
    ----------
    spec : LearnerSpec
    X : (n, d) array
        Raw feature columns; interaction expansion happens internally.
    y : (n,) array
        Response; binomial accepts fractional values in [0, 1].
    w : (n,) array
        Nonnegative observation weights, at least one positive.
    family : {"gaussian", "binomial"}
    seed : int
        Initialization seed for the mlp kind; ignored otherwise.
    """
    X, y, w = _check_xyw(X, y, w)
    if family not in ("gaussian", "binomial"):
        raise ValueError(f"unknown family {family!r}")

    if spec.kind == "intercept_only":
        mean = float(np.sum(w * y) / np.sum(w))
        if family == "binomial":
            coef = np.array([logit(np.clip(mean, P_MIN, 1.0 - P_MIN))])
        else:
            coef = np.array([mean])
        return FittedModel(spec=spec, family=family, n_features=X.shape[1], coef=coef)

    if spec.kind == "glm":
        Z = expand_features(X, spec.interaction_order)
        if family == "gaussian":
            coef, ridged = _fit_gaussian_glm(Z, y, w)
        else:
            coef, ridged = _fit_binomial_glm(Z, y, w)
        return FittedModel(
            spec=spec,
            family=family,
            n_features=X.shape[1],
            coef=coef,
            ridge_fallback=ridged,
        )

    # mlp
    rng = np.random.default_rng(seed)
    params = mlp_init(X.shape[1], spec.hidden_units, rng)

    def value_grad(p):
        return mlp_loss_and_grad(p, X, y, w, family, spec.l2_penalty)

    params = adam_minimize(params, value_grad, spec.epochs, spec.learning_rate)
    return FittedModel(
        spec=spec, family=family, n_features=X.shape[1], mlp_params=params
    )


# --------------------------------------------------------------------------
# Neural-network machinery, shared with the weight-fitting module


def mlp_init(d: int, hidden: int, rng: np.random.Generator) -> dict:
    """He-scaled initial parameters for a one-hidden-layer network."""
    return {
        "W1": rng.normal(0.0, np.sqrt(2.0 / max(d, 1)), size=(hidden, d)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden),
        "b2": np.zeros(1),
    }


def mlp_forward(params: dict, X: np.ndarray):
    """Linear output head: returns (eta, hidden pre-activation, activation)."""
    pre = X @ params["W1"].T + params["b1"]
    act = np.maximum(pre, 0.0)
    eta = act @ params["W2"] + params["b2"][0]
    return eta, pre, act


def _mlp_backprop(params, X, pre, act, dloss_deta, l2):
    """Gradients of loss + l2 * (||W1||^2 + ||W2||^2) given dloss/deta."""
    grads = {}
    grads["W2"] = act.T @ dloss_deta + 2.0 * l2 * params["W2"]
    grads["b2"] = np.array([np.sum(dloss_deta)])
    dact = np.outer(dloss_deta, params["W2"])
    dpre = dact * (pre > 0.0)
    grads["W1"] = dpre.T @ X + 2.0 * l2 * params["W1"]
    grads["b1"] = dpre.sum(axis=0)
    return grads


def mlp_loss_and_grad(params, X, y, w, family, l2):
    """Weighted canonical loss and its analytic gradient.

    Gaussian uses mean squared error, binomial the negative log-likelihood,
    both weight-normalized; the l2 penalty covers the weight matrices only.
    """
    eta, pre, act = mlp_forward(params, X)
    wsum = np.sum(w)
    pen = l2 * (np.sum(params["W1"] ** 2) + np.sum(params["W2"] ** 2))
    if family == "gaussian":
        resid = eta - y
        loss = np.sum(w * resid**2) / wsum + pen
        deta = 2.0 * w * resid / wsum
    else:
        p = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
        loss = np.sum(w * -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))) / wsum + pen
        deta = w * (expit(eta) - y) / wsum
    return loss, _mlp_backprop(params, X, pre, act, deta, l2)


def adam_minimize(params, value_grad, epochs, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Full-batch adaptive-moment descent; returns the final parameters."""
    params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    for step in range(1, epochs + 1):
        _, grads = value_grad(params)
        for k in params:
            m[k] = beta1 * m[k] + (1.0 - beta1) * grads[k]
            v[k] = beta2 * v[k] + (1.0 - beta2) * grads[k] ** 2
            mhat = m[k] / (1.0 - beta1**step)
            vhat = v[k] / (1.0 - beta2**step)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return params


# --------------------------------------------------------------------------
# Discrete super-learner


def _cv_loss(pred, y, w, family):
    if family == "binomial":
        p = np.clip(pred, P_MIN, 1.0 - P_MIN)
        per_unit = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    else:
        per_unit = (y - pred) ** 2
    return float(np.sum(w * per_unit) / np.sum(w))


def select_superlearner(
    specs: Sequence[LearnerSpec],
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    family: str,
    folds: FoldPlan,
    seed: int = 0,
) -> FittedModel:
    """Pick the candidate with the smallest cross-validated loss and refit it.

    Squared error scores the gaussian family, negative log-likelihood the
    binomial one.  Ties break toward the earliest candidate.  A candidate
    whose fit raises is disqualified; if every candidate fails the last
    error propagates.
    """
    if len(specs) == 0:
        raise ValueError("need at least one candidate learner")
    X, y, w = _check_xyw(X, y, w)
    if folds.n != X.shape[0]:
        raise ValueError("fold plan does not match data length")
    if len(specs) == 1:
        return fit(specs[0], X, y, w, family, seed=seed)

    losses = []
    last_err: Exception | None = None
    for spec in specs:
        try:
            pred = np.empty(X.shape[0])
            for j in range(folds.J):
                tr, te = folds.train_mask(j), folds.test_mask(j)
                model = fit(spec, X[tr], y[tr], w[tr], family, seed=seed)
                pred[te] = model.predict(X[te])
            losses.append(_cv_loss(pred, y, w, family))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            losses.append(np.inf)
            last_err = err
    if not np.any(np.isfinite(losses)):
        raise ValueError(f"every candidate learner failed; last error: {last_err}")
    best = int(np.argmin(losses))  # argmin takes the first minimum: list order
    return fit(specs[best], X, y, w, family, seed=seed)
