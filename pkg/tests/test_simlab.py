import math

import numpy as np
import numpy.testing as npt
import pytest

from gattlab.core import (
    ConditioningSpec,
    ConstantRule,
    IdentityRule,
    PolicySpec,
    TaskSpec,
    ValueSet,
    apply_policy,
)
from gattlab.learners import LearnerSpec
from gattlab.simlab import (
    DgpSpec,
    ReplicationReport,
    ScenarioSpec,
    SIM1_TRUTHS,
    TaskCell,
    att_toy_task,
    compute_true_gatt,
    run_replications,
    sim1_conditioning,
    sim1_policy,
    sim1_task,
    sim2_analytic_truth,
    sim2_task,
    simulate,
)

GLM = LearnerSpec(kind="glm")
GLM_INTER = LearnerSpec(kind="glm", interaction_order=1)


def _binom_pmf(k, size, p):
    return math.comb(size, k) * p**k * (1.0 - p) ** (size - k)


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def four_period_enumerated_truth(level, shift=True):
    """Exact value by dynamic programming over (L_t, carried A_t) states.

    Mirrors the four-period study law from first principles: covariates and
    pre-shift treatment draws evolve from the already-shifted history, the
    final-time pre-shift draw is conditioned to equal ``level``, and the
    outcome sees the shifted value.  ``shift=False`` gives the observational
    stratum mean E[Y | A_4 = level].
    """

    def d(a):
        return a - 1 if (shift and a >= 1) else a

    states = {}
    for l1, pl in ((1.0, 0.5), (2.0, 0.25), (3.0, 0.25)):
        p_take = _expit(-0.3 * l1)
        for a in range(6):
            w = pl * _binom_pmf(a, 5, p_take)
            key = (l1, d(a))
            states[key] = states.get(key, 0.0) + w
    for _t in (2, 3):
        new = {}
        for (l_prev, a_prev), w0 in states.items():
            pl1 = _expit(-0.3 * l_prev + 0.5 * a_prev)
            for l, pl in ((1.0, pl1), (0.0, 1.0 - pl1)):
                p_take = _expit(-2.5 + a_prev + 0.5 * l)
                for a in range(6):
                    w = w0 * pl * _binom_pmf(a, 5, p_take)
                    key = (l, d(a))
                    new[key] = new.get(key, 0.0) + w
        states = new
    num = den = 0.0
    for (l_prev, a_prev), w0 in states.items():
        pl1 = _expit(-0.3 * l_prev + 0.5 * a_prev)
        for l4, pl in ((1.0, pl1), (0.0, 1.0 - pl1)):
            p_take = _expit(-2.5 + a_prev + 0.5 * l4)
            w_nat = w0 * pl * _binom_pmf(level, 5, p_take)
            py = _expit(-1.0 + 0.5 * d(level) - l4)
            num += w_nat * py
            den += w_nat
    return num / den


# --------------------------------------------------------------------------
# Generating processes


class TestDgpSpec:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown dgp kind"):
            DgpSpec(kind="sim3")

    def test_sim2_needs_horizon_and_positive_sigma(self):
        with pytest.raises(ValueError, match="tau >= 2"):
            DgpSpec(kind="sim2")
        with pytest.raises(ValueError, match="sigma"):
            DgpSpec(kind="sim2", tau=4, sigma=0.0)

    def test_fixed_horizons(self):
        with pytest.raises(ValueError, match="fixed horizon"):
            DgpSpec(kind="sim1", tau=3)
        with pytest.raises(ValueError, match="single-period"):
            DgpSpec(kind="att_toy", tau=2)

    def test_custom_needs_structure(self):
        with pytest.raises(ValueError, match="structure"):
            DgpSpec(kind="custom")


class TestSimulate:
    def test_four_period_first_time_moments(self):
        frame = simulate(DgpSpec(kind="sim1", seed=11), 10**6)
        l1 = frame.covariates[0][:, 0]
        a1 = frame.treatments[0]
        for value, prob in ((1.0, 0.5), (2.0, 0.25), (3.0, 0.25)):
            share = np.mean(l1 == value)
            se = math.sqrt(prob * (1 - prob) / l1.size)
            assert abs(share - prob) < 3 * se
        mask = l1 == 1.0
        p = _expit(-0.3)
        se = math.sqrt(5 * p * (1 - p) / mask.sum())
        assert abs(np.mean(a1[mask]) - 5 * p) < 3 * se
        assert frame.outcome_family == "binomial"
        assert set(np.unique(frame.outcome)) <= {0.0, 1.0}
        assert np.all((a1 >= 0) & (a1 <= 5))

    def test_gaussian_chain_covariate_recursion(self):
        frame = simulate(DgpSpec(kind="sim2", tau=2, seed=5), 10**6)
        l2 = frame.covariates[1][:, 0]
        # mean 0.25 * E[L1] = 0.125; var = 0.25^2/12 + 0.5^2
        se = math.sqrt((0.0625 / 12 + 0.25) / l2.size)
        assert abs(np.mean(l2) - 0.125) < 3 * se

    def test_deterministic_given_seed(self):
        dgp = DgpSpec(kind="sim1", seed=99)
        a = simulate(dgp, 20000)
        b = simulate(dgp, 20000)
        npt.assert_array_equal(a.outcome, b.outcome)
        for s in range(4):
            npt.assert_array_equal(a.treatments[s], b.treatments[s])
            npt.assert_array_equal(a.covariates[s], b.covariates[s])
        c = simulate(DgpSpec(kind="sim1", seed=100), 20000)
        assert not np.array_equal(a.outcome, c.outcome)

    def test_covariate_path_ignores_treatments_in_gaussian_chain(self):
        structure = DgpSpec(kind="sim2", tau=3, seed=0).resolve()
        structure.begin(64)
        covs = [np.linspace(0, 1, 64)[:, None]]
        draws = []
        for trts in (np.zeros(64), np.ones(64)):
            rng = np.random.default_rng(123)
            draws.append(structure.draw_covariates(2, rng, covs, [trts]))
        npt.assert_array_equal(draws[0], draws[1])


# --------------------------------------------------------------------------
# Truth oracle


class TestTruthOracle:
    def test_rejects_small_draw_counts(self):
        with pytest.raises(ValueError, match="1e5"):
            compute_true_gatt(
                DgpSpec(kind="att_toy"),
                PolicySpec((ConstantRule(0.0),)),
                ConditioningSpec((ValueSet((1.0,)),)),
                M=10**4,
            )

    def test_enumerable_toy_across_seeds(self):
        dgp = DgpSpec(kind="att_toy")
        task = att_toy_task()
        for seed in range(20):
            out = compute_true_gatt(
                dgp, task.policy, task.conditioning, M=10**5, seed=seed
            )
            assert abs(out["theta_true"] - 0.24) <= 4 * out["mc_se"]

    def test_empty_conditioning_set_errors(self):
        with pytest.raises(ValueError, match="no truth draws"):
            compute_true_gatt(
                DgpSpec(kind="att_toy"),
                PolicySpec((ConstantRule(0.0),)),
                ConditioningSpec((ValueSet((5.0,)),)),
                M=10**5,
            )

    def test_four_period_truth_matches_enumeration(self):
        assert four_period_enumerated_truth(1) == pytest.approx(
            0.1887372999, abs=1e-9
        )
        out = compute_true_gatt(
            DgpSpec(kind="sim1"),
            sim1_policy(),
            sim1_conditioning(1),
            M=2 * 10**5,
            seed=3,
        )
        assert abs(out["theta_true"] - 0.1887372999) <= 4 * out["mc_se"]

    def test_frozen_truths_agree_with_enumeration(self):
        for level, (theta, mc_se) in SIM1_TRUTHS.items():
            exact = four_period_enumerated_truth(level)
            assert abs(theta - exact) <= 4 * mc_se, level

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_identity_policy_reproduces_observational_strata(self, level):
        # recorded pre-shift draws must follow the observed-law treatment
        # distribution when the policy does nothing
        exact = four_period_enumerated_truth(level, shift=False)
        out = compute_true_gatt(
            DgpSpec(kind="sim1"),
            PolicySpec.uniform(IdentityRule(), 4),
            sim1_conditioning(level),
            M=2 * 10**5,
            seed=7,
        )
        assert abs(out["theta_true"] - exact) <= 4 * out["mc_se"]

    @pytest.mark.parametrize("tau", [2, 6, 14])
    def test_gaussian_chain_matches_analytic_value(self, tau):
        task = sim2_task(tau)
        out = compute_true_gatt(
            DgpSpec(kind="sim2", tau=tau),
            task.policy,
            task.conditioning,
            M=2 * 10**5,
            seed=tau,
        )
        assert abs(out["theta_true"] - sim2_analytic_truth(tau)) <= 4 * out["mc_se"]

    def test_gaussian_chain_policy_shifts_only_the_treatment_term(self):
        # covariates never read treatments, so switching d moves the truth
        # by exactly the treatment coefficient
        dgp = DgpSpec(kind="sim2", tau=3)
        cond = ConditioningSpec.trivial(3)
        lo = compute_true_gatt(
            dgp, PolicySpec.uniform(ConstantRule(0.0), 3), cond,
            M=2 * 10**5, seed=1,
        )
        hi = compute_true_gatt(
            dgp, PolicySpec.uniform(ConstantRule(1.0), 3), cond,
            M=2 * 10**5, seed=2,
        )
        tol = 4 * math.hypot(lo["mc_se"], hi["mc_se"])
        assert abs(hi["theta_true"] - lo["theta_true"] - 1.0) <= tol
        assert abs(lo["theta_true"] - (sim2_analytic_truth(3) - 1.0)) <= 4 * lo["mc_se"]


# --------------------------------------------------------------------------
# Study wiring


class TestStudyWiring:
    def test_shift_policy_steps_down_and_respects_zero(self):
        got = apply_policy(sim1_policy(), 2, np.array([0.0, 1.0, 5.0]), {})
        npt.assert_array_equal(got, [0.0, 0.0, 4.0])

    def test_conditioning_is_final_time_only(self):
        cond = sim1_conditioning(2)
        assert cond.is_trivial(1) and cond.is_trivial(3)
        assert not cond.is_trivial(4)
        npt.assert_array_equal(
            cond.set_at(4).contains(np.array([1.0, 2.0])), [False, True]
        )

    def test_analytic_values_from_the_recursion(self):
        assert sim2_analytic_truth(2) == pytest.approx(1.125)
        assert sim2_analytic_truth(4) == pytest.approx(1.0078125)

    def test_task_defaults(self):
        assert sim1_task(1).tau == 4
        assert sim2_task(6).tau == 6
        assert sim2_task(6, riesz_mode="plugin_discrete").riesz_mode == (
            "plugin_discrete"
        )
        assert att_toy_task().tau == 1


class TestScenarioSpec:
    def test_invalid_id(self):
        with pytest.raises(ValueError, match="scenario"):
            ScenarioSpec(scenario=5)

    def test_degradation_grid(self):
        assert ScenarioSpec(1).m_degraded_times(4) == ()
        assert ScenarioSpec(1).alpha_degraded_times(4) == ()
        assert ScenarioSpec(2).m_degraded_times(4) == (1, 2)
        assert ScenarioSpec(2).alpha_degraded_times(4) == (3, 4)
        assert ScenarioSpec(3).m_degraded_times(4) == (4,)
        assert ScenarioSpec(3).alpha_degraded_times(4) == (1, 2, 3)
        assert ScenarioSpec(4).m_degraded_times(4) == (1, 2, 3, 4)
        assert ScenarioSpec(4).alpha_degraded_times(4) == (1, 2, 3, 4)

    def test_learner_pools_swap_in_the_intercept(self):
        pool = (GLM, GLM_INTER)
        per_time = ScenarioSpec(2).m_learners(4, pool)
        assert per_time[0] == (LearnerSpec(kind="intercept_only"),)
        assert per_time[1] == (LearnerSpec(kind="intercept_only"),)
        assert per_time[2] == pool
        assert per_time[3] == pool


# --------------------------------------------------------------------------
# Replication harness


def toy_cell(label="toy", **kwargs):
    return TaskCell(label=label, task=att_toy_task(folds=2), **kwargs)


class TestRunReplications:
    def test_report_shape_and_provided_truth(self):
        report = run_replications(
            DgpSpec(kind="att_toy"),
            [toy_cell(record_sd_alpha=True)],
            [ScenarioSpec(1)],
            n_list=[150],
            replicates=4,
            seed=2,
            truths={"toy": (0.24, 0.001)},
        )
        frame = report.to_frame()
        assert sorted(frame["estimator"]) == ["ipw", "sub", "tmle"]
        assert (frame["n_reps"] == 4).all()
        assert (frame["n_failed"] == 0).all()
        assert (frame["theta_true"] == 0.24).all()
        tmle = frame[frame["estimator"] == "tmle"].iloc[0]
        assert 0.0 <= tmle["coverage"] <= 1.0
        assert frame["sd_alpha_tau"].notna().all()
        assert (frame["mae100"] >= 0).all()

    def test_truth_resolved_from_oracle_when_not_given(self):
        report = run_replications(
            DgpSpec(kind="att_toy"),
            [toy_cell()],
            [ScenarioSpec(1)],
            n_list=[100],
            replicates=2,
            seed=5,
            truth_M=10**5,
        )
        frame = report.to_frame()
        assert abs(frame["theta_true"].iloc[0] - 0.24) < 0.02
        assert (frame["truth_mc_se"] > 0).all()

    def test_deterministic_given_configuration(self, tmp_path):
        kwargs = dict(
            dgp=DgpSpec(kind="att_toy"),
            tasks=[toy_cell()],
            scenarios=[ScenarioSpec(1), ScenarioSpec(4)],
            n_list=[120],
            replicates=3,
            seed=9,
            truths={"toy": (0.24, 0.001)},
        )
        first = run_replications(**kwargs)
        second = run_replications(**kwargs)
        assert first.rows == second.rows
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        first.to_csv(p1)
        second.to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_degraded_scenario_changes_the_answer(self):
        kwargs = dict(
            dgp=DgpSpec(kind="att_toy"),
            tasks=[toy_cell()],
            n_list=[400],
            replicates=3,
            seed=13,
            truths={"toy": (0.24, 0.001)},
        )
        clean = run_replications(scenarios=[ScenarioSpec(1)], **kwargs).to_frame()
        broken = run_replications(scenarios=[ScenarioSpec(4)], **kwargs).to_frame()
        ipw_clean = clean[clean["estimator"] == "ipw"]["me100"].iloc[0]
        ipw_broken = broken[broken["estimator"] == "ipw"]["me100"].iloc[0]
        # weights pinned to 1 turn the weighted mean into the raw outcome
        # mean, far above the stratum truth
        assert abs(ipw_broken) > abs(ipw_clean) + 5.0

    def test_estimation_failures_are_counted_not_fatal(self):
        # a rare final-time stratum at tiny n: some replicates contain no
        # stratum units and must be excluded with a count
        task = rare_stratum_task()
        report = run_replications(
            DgpSpec(kind="sim1"),
            [TaskCell(label="lvl4", task=task)],
            [ScenarioSpec(1)],
            n_list=[40],
            replicates=6,
            seed=1,
            truths={"lvl4": SIM1_TRUTHS[4]},
        )
        frame = report.to_frame()
        assert (frame["n_failed"] >= 1).all()
        assert ((frame["n_reps"] + frame["n_failed"]) == 6).all()

    def test_smoke_run_of_the_four_period_study_cell(self):
        report = run_replications(
            DgpSpec(kind="sim1"),
            [TaskCell(label="lvl1", task=sim1_task(1))],
            [ScenarioSpec(1)],
            n_list=[300],
            replicates=2,
            seed=4,
            truths={"lvl1": SIM1_TRUTHS[1]},
        )
        frame = report.to_frame()
        assert len(frame) == 3
        assert frame["mae100"].notna().all()

    def test_replicates_must_be_positive(self):
        with pytest.raises(ValueError, match="replicates"):
            run_replications(
                DgpSpec(kind="att_toy"), [toy_cell()], [ScenarioSpec(1)],
                n_list=[50], replicates=0,
            )


def rare_stratum_task():
    return TaskSpec(
        policy=sim1_policy(),
        conditioning=sim1_conditioning(4),
        folds=1,
        learners_m=(GLM,),
        learners_g=(GLM,),
        learner_alpha=GLM_INTER,
    )


class TestReportOutput:
    def make_report(self):
        return run_replications(
            DgpSpec(kind="att_toy"),
            [toy_cell(record_sd_alpha=True)],
            [ScenarioSpec(1)],
            n_list=[100],
            replicates=2,
            seed=3,
            truths={"toy": (0.24, 0.001)},
        )

    def test_csv_long_format(self, tmp_path):
        import pandas as pd

        path = tmp_path / "report.csv"
        self.make_report().to_csv(path)
        frame = pd.read_csv(path)
        assert set(frame.columns) == {
            "task", "scenario", "n", "estimator", "metric", "value",
        }
        metrics = set(frame["metric"])
        assert {"mae100", "me100", "n_reps", "theta_true"} <= metrics
        # sub and ipw report no CI, so no coverage rows for them
        sub = frame[(frame["estimator"] == "sub") & (frame["metric"] == "coverage")]
        assert sub.empty

    def test_text_table_renders(self):
        text = self.make_report().to_text()
        assert "MAEx100" in text
        assert "toy" in text
        assert text.endswith("\n")
