"""Generalized treatment effects on the treated under modified treatment policies."""

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
    apply_policy,
    conditioning_indicator,
    validate_comparability,
)
from gattlab.estimators import (
    EstimateResult,
    NuisanceBundle,
    SequentialFits,
    compute_eif,
    estimate_ipw,
    estimate_substitution,
    estimate_tmle,
    fit_nuisances,
    fit_sequential_regressions,
    tmle_fluctuation_step,
)
from gattlab.learners import FoldPlan, LearnerSpec, fit, make_folds, select_superlearner
from gattlab.riesz import (
    GSequence,
    RatioPath,
    RieszFit,
    fit_G_sequence,
    fit_ratio_plugin_sequence,
    fit_riesz_sequence,
    riesz_loss,
)
from gattlab.simlab import (
    SIM1_TRUTHS,
    DgpSpec,
    ReplicationReport,
    ScenarioSpec,
    TaskCell,
    compute_true_gatt,
    run_replications,
    simulate,
)

__version__ = "0.1.0"
