import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import dataset
from platform_cate.data import ContrastSpec, TrialDataset
from platform_cate.estimators import (
    ESTIMATOR_ORDER,
    EstimateReport,
    analysis_rows,
    dr_oc_terms,
    estimate_dr_oc,
    estimate_ipw,
    estimate_naive,
    estimate_or_oc,
    fit_nuisances,
    resolve_estimators,
    run_estimators,
)
from platform_cate.exceptions import ConfigError, EmptyArmError, EmptyConcurrentSetError, PositivityError
from platform_cate.regression import DesignSpec
from platform_cate.simulation import ScenarioConfig, generate

C = ContrastSpec(1)


def binary_covariate_dataset(seed=0, n=600):
    rng = np.random.default_rng(seed)
    e = np.sort(rng.random(n))
    w = (rng.random(n) < 0.4).astype(float)
    v = e > 0.3
    a = (v & (rng.random(n) < 0.3 + 0.4 * w)).astype(int)
    y = 1 + 2 * w + e + a * (0.5 + w) + rng.normal(size=n)
    avail = np.column_stack([np.ones(n), v])
    return TrialDataset(e, w[:, None], avail, a, y)


class TestOracles:
    def test_saturated_design_equals_stratified_means(self):
        ds = binary_covariate_dataset()
        design = DesignSpec(include_entry_time=False)
        nz = fit_nuisances(ds, C, design, design)
        V = ds.availability[:, 1] == 1
        A = ds.arm == 1
        w = ds.covariates[:, 0]
        expected = 0.0
        for level in (0.0, 1.0):
            s = V & (w == level)
            diff = ds.outcome[s & A].mean() - ds.outcome[s & ~A].mean()
            expected += s.sum() / V.sum() * diff
        for tag in ("OR-oc", "IPW", "DR-oc"):
            r = run_estimators(ds, C, [tag], nuisances=nz)[tag]
            assert r.point == pytest.approx(expected, abs=1e-12), tag

    def test_constant_propensity_ipw_equals_naive(self):
        ds = dataset(seed=3)
        nz = fit_nuisances(ds, C)
        ipw = estimate_ipw(ds, C, nz, propensity=0.5)
        naive = estimate_naive(ds, C)
        assert ipw.point == pytest.approx(naive.point, abs=1e-12)
        assert ipw.se == pytest.approx(naive.se, rel=1e-12)

    def test_noiseless_linear_outcome_recovers_effect(self):
        ds = dataset(seed=5, n=500)
        w, e, a = ds.covariates[:, 0], ds.entry_time, ds.arm
        clean = ds.with_outcome(0.8 * w + 0.5 * e + 0.8 * a)
        reports = run_estimators(clean, C)
        for tag in ("OR-oc", "OR-ac", "DR-oc", "DR-ac"):
            assert reports[tag].point == pytest.approx(0.8, abs=1e-10), tag

    def test_no_nonconcurrent_controls_collapses_pooling(self):
        ds = dataset(seed=2, n=400)
        avail = np.ones_like(ds.availability)
        rng = np.random.default_rng(0)
        arm = (rng.random(400) < 0.5).astype(int)
        full = TrialDataset(ds.entry_time, ds.covariates, avail, arm, ds.outcome + 0.8 * arm)
        r = run_estimators(full, C)
        assert r["OR-ac"].point == pytest.approx(r["OR-oc"].point, abs=1e-12)
        assert r["DR-ac"].point == pytest.approx(r["DR-oc"].point, abs=1e-12)
        assert r["DR-ac"].se == pytest.approx(r["DR-oc"].se, rel=1e-10)

    def test_dr_oc_is_or_oc_plus_augmentation(self):
        ds = dataset(seed=8)
        nz = fit_nuisances(ds, C)
        V = ds.availability[:, 1] == 1
        A = ds.arm == 1
        Y = ds.outcome
        m0 = nz.mu_oc_control.predict(ds)
        m1 = nz.mu_oc_treated.predict(ds)
        pi = 0.4
        aug = np.where(A, (Y - m1) / pi, -(Y - m0) / (1 - pi))
        expected = estimate_or_oc(ds, C, nz).point + aug[V].mean()
        got = estimate_dr_oc(ds, C, nz, propensity=pi).point
        assert got == pytest.approx(expected, abs=1e-12)
        assert (m1 - m0)[V].mean() == pytest.approx(estimate_or_oc(ds, C, nz).point, abs=1e-12)


class TestProperties:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), frac=st.sampled_from([0.3, 0.5, 0.8]))
    def test_eif_mean_zero(self, seed, frac):
        r = run_estimators(dataset(seed=seed, fraction=frac), C, ["DR-oc", "DR-ac"])
        for rep in r.values():
            assert abs(rep.influence.mean()) <= 1e-10

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
    def test_outcome_shift_invariance(self, seed, shift):
        ds = dataset(seed=seed)
        a = run_estimators(ds, C)
        b = run_estimators(ds.with_outcome(ds.outcome + shift), C)
        for tag in ESTIMATOR_ORDER:
            assert b[tag].point == pytest.approx(a[tag].point, abs=1e-10), tag

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_covariate_permutation_invariance(self, seed):
        ds = dataset(seed=seed)
        noise = np.random.default_rng(seed).normal(size=len(ds))
        two = ds.with_covariates(np.column_stack([ds.covariates[:, 0], noise]), ("w", "z"))
        swapped = ds.with_covariates(np.column_stack([noise, ds.covariates[:, 0]]), ("z", "w"))
        a, b = run_estimators(two, C), run_estimators(swapped, C)
        for tag in ESTIMATOR_ORDER:
            assert b[tag].point == pytest.approx(a[tag].point, abs=1e-12), tag

    def test_dr_eif_se_agrees_with_or_sandwich(self):
        cfg = ScenarioConfig(n=20000, reps=1, seed=9, fractions=(0.5,))
        r = run_estimators(generate(cfg, 0, 0.5), C, ["OR-oc", "DR-oc"])
        assert r["DR-oc"].se / r["OR-oc"].se == pytest.approx(1.0, abs=0.05)


class TestErrorsAndPlumbing:
    def test_empty_concurrent_set(self):
        ds = dataset()
        none = TrialDataset(ds.entry_time, ds.covariates, np.column_stack([np.ones(len(ds)), np.zeros(len(ds))]),
                            np.zeros(len(ds), int), ds.outcome)
        with pytest.raises(EmptyConcurrentSetError):
            estimate_naive(none, C)

    def test_empty_treated_arm(self):
        ds = dataset()
        with pytest.raises(EmptyArmError):
            estimate_naive(TrialDataset(ds.entry_time, ds.covariates, ds.availability,
                                        np.zeros(len(ds), int), ds.outcome), C)

    def test_missing_arm(self):
        with pytest.raises(ConfigError):
            analysis_rows(dataset(), ContrastSpec(2))

    def test_positivity_violation(self):
        ds = dataset()
        nz = fit_nuisances(ds, C)
        with pytest.raises(PositivityError):
            estimate_ipw(ds, C, nz, propensity=1e-9)
        with pytest.raises(PositivityError):
            dr_oc_terms(ds, C, nz, propensity=1 - 1e-9)

    def test_other_arms_dropped(self):
        cfg = ScenarioConfig(n=600, reps=1, arms_mode="two-arm")
        ds = generate(cfg, 0)
        sub = analysis_rows(ds, ContrastSpec(1))
        assert set(np.unique(sub.arm)) == {0, 1}
        assert run_estimators(ds, ContrastSpec(2, {1: 1}))["naive"].n_used == (ds.arm != 1).sum()

    def test_resolve_estimators(self):
        assert resolve_estimators("all") == list(ESTIMATOR_ORDER)
        assert resolve_estimators("dr-all, NAIVE,or_oc") == ["DR-ac", "naive", "OR-oc"]
        assert resolve_estimators(["ate"]) == ["OR-ATE"]
        with pytest.raises(ConfigError):
            resolve_estimators("magic")

    def test_report_fields(self):
        r = EstimateReport.from_point_se("x", 1.0, 0.5, 10, note="hi")
        assert (r.ci_low, r.ci_high) == pytest.approx((0.02, 1.98), abs=1e-15)
        assert r.covers(1.5) and not r.covers(2.5)
        d = r.to_dict(include_influence=True)
        assert d["note"] == "hi" and d["influence"] == []

    def test_or_ate_flags_extrapolation(self):
        r = run_estimators(dataset(), C, ["OR-ATE"])["OR-ATE"]
        assert r.extras["extrapolation"] is True

    def test_fitted_availability(self):
        ds = dataset(availability_mode="stochastic", n=800)
        r = run_estimators(ds, C, availability="fitted")
        assert all(np.isfinite(x.se) and x.se > 0 for x in r.values())
        r2 = run_estimators(ds, C, availability="fitted", pi_all="logistic")
        assert r2["DR-oc"].point == pytest.approx(r["DR-oc"].point, abs=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("outcome_model, treatment_model", [
    ("correct", "intercept-only"),
    ("intercept-only", "correct"),
])
def test_double_robustness_monte_carlo(outcome_model, treatment_model):
    from _support import study

    t = study(n=1000, reps=2000, seed=99, fractions=(0.5,), estimators=("DR-oc", "DR-ac"),
              outcome_model=outcome_model, treatment_model=treatment_model).metrics
    for tag in ("DR-oc", "DR-ac"):
        assert abs(t.get(tag, "bias")) < 3 * t.get(tag, "mc_se_bias"), tag
