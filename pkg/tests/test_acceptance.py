"""Acceptance criteria 1-8.

Each test records one pass/fail line (printed in the terminal summary) listing
the cells that miss their band, then asserts.  Replication studies use
2000 replications and are cached for the session.
"""

import json

import numpy as np
import pytest

from _support import record, study
from platform_cate.cli import main
from platform_cate.data import ContrastSpec
from platform_cate.diagnostics import pooling_test
from platform_cate.inference import numeric_jacobian
from platform_cate.simulation import (
    DEFAULT_FRACTIONS,
    TWO_ARM_CONTRASTS,
    ScenarioConfig,
    actt_schema,
    base_draws,
    generate,
    generate_actt_like,
)

pytestmark = pytest.mark.slow

REPS = 2000
# the simulation criteria concern the five adjusted estimators; naive is confounded by W in these designs
MAIN = ("OR-oc", "OR-ac", "IPW", "DR-oc", "DR-ac")
FIVE_TO_NINE = (0.5, 0.6, 0.7, 0.8, 0.9)


def correct_study():
    return study(n=1000, reps=REPS, seed=20240101)


def finish(criterion, problems, summary):
    detail = summary if not problems else f"{summary}; {len(problems)} miss(es): " + "; ".join(problems[:12])
    record(criterion, not problems, detail)
    assert not problems, "\n".join(problems)


def bias_coverage_problems(table, fractions, estimators, band):
    out = []
    for f in fractions:
        for e in estimators:
            b2 = table.get(e, "bias2", f)
            cov = table.get(e, "coverage", f)
            if not b2 < 1e-3:
                out.append(f"{e}@{f:g} bias2={b2:.2e}")
            if not band[0] <= cov <= band[1]:
                out.append(f"{e}@{f:g} coverage={cov:.3f}")
    return out


def monotone_with_one_inversion(values):
    """values ordered from the most to the least concurrent fraction should increase."""
    drops = sum(1 for a, b in zip(values, values[1:]) if b < a)
    return drops <= 1


def efficiency_problems(table, fractions, hi_target=1.29, lo_target=1.80, tol=0.15, check_low_end=True):
    out = []
    grid = sorted(fractions, reverse=True)
    ratios = [table.get("OR-oc/OR-ac", "control_var_ratio", f) for f in grid]
    if not monotone_with_one_inversion(ratios):
        out.append("control variance ratio not monotone: " + ", ".join(f"{r:.3f}" for r in ratios))
    if abs(ratios[0] - hi_target) > tol:
        out.append(f"control variance ratio @{grid[0]:g} = {ratios[0]:.3f} (target {hi_target}±{tol})")
    if check_low_end and abs(ratios[-1] - lo_target) > tol:
        out.append(f"control variance ratio @{grid[-1]:g} = {ratios[-1]:.3f} (target {lo_target}±{tol})")
    for f in grid:
        r = table.get("DR-oc/DR-ac", "se_ratio", f)
        if abs(r - 1.0) > 0.02:
            out.append(f"DR-oc/DR-ac se ratio @{f:g} = {r:.3f}")
    return out, ratios


def test_criterion_1_correct_models():
    t = correct_study().metrics
    problems = bias_coverage_problems(t, DEFAULT_FRACTIONS, MAIN, (0.93, 0.97))
    cov = [t.get(e, "coverage", f) for e in MAIN for f in DEFAULT_FRACTIONS]
    finish(1, problems, f"coverage range {min(cov):.3f}..{max(cov):.3f}")


def test_criterion_2_misspecified_outcome():
    t = study(n=1000, reps=REPS, seed=20240101, outcome_model="intercept-only").metrics
    problems = []
    for f in DEFAULT_FRACTIONS:
        for e in ("OR-oc", "OR-ac"):
            bias, mcse, cov = t.get(e, "bias", f), t.get(e, "mc_se_bias", f), t.get(e, "coverage", f)
            if not abs(bias) > 5 * mcse:
                problems.append(f"{e}@{f:g} |bias|={abs(bias):.4f} <= 5*MCSE={5 * mcse:.4f}")
            if not cov < 0.90:
                problems.append(f"{e}@{f:g} coverage={cov:.3f}")
    problems += bias_coverage_problems(t, DEFAULT_FRACTIONS, ("IPW", "DR-oc", "DR-ac"), (0.93, 0.97))
    finish(2, problems, "OR biased, IPW/DR unbiased under intercept-only outcome models")


def test_criterion_3_efficiency_deterministic():
    t = correct_study().metrics
    problems, ratios = efficiency_problems(t, DEFAULT_FRACTIONS)
    finish(3, problems, "control variance ratio 90%..10%: " + ", ".join(f"{r:.2f}" for r in ratios))


def test_criterion_4_efficiency_stochastic():
    t = study(n=1000, reps=REPS, seed=20240101, availability_mode="stochastic").metrics
    ratios = {f: t.get("DR-oc/DR-ac", "se_ratio", f) for f in DEFAULT_FRACTIONS}
    problems = [f"DR-oc/DR-ac se ratio @{f:g} = {r:.3f}" for f, r in ratios.items() if not r > 1.0]
    finish(4, problems, f"DR-oc/DR-ac se ratio range {min(ratios.values()):.3f}..{max(ratios.values()):.3f}")


def test_criterion_5_small_sample():
    t = study(n=100, reps=REPS, seed=20240101, fractions=FIVE_TO_NINE).metrics
    problems = bias_coverage_problems(t, FIVE_TO_NINE, MAIN, (0.92, 0.98))
    eff, ratios = efficiency_problems(t, FIVE_TO_NINE, check_low_end=False)
    problems += eff
    finish(5, problems, "n=100 control variance ratio 90%..50%: " + ", ".join(f"{r:.2f}" for r in ratios))


def test_criterion_6_two_arm():
    t = study(n=1000, reps=REPS, seed=20240101, arms_mode="two-arm").metrics
    problems = []
    for label in TWO_ARM_CONTRASTS:
        for e in MAIN:
            bias, mcse = t.get(e, "bias", contrast=label), t.get(e, "mc_se_bias", contrast=label)
            cov = t.get(e, "coverage", contrast=label)
            if not abs(bias) < 3 * mcse:
                problems.append(f"{e}@{label} |bias|={abs(bias):.4f} >= 3*MCSE={3 * mcse:.4f}")
            if not 0.92 <= cov <= 0.99:
                problems.append(f"{e}@{label} coverage={cov:.3f}")
        ratio = t.get("OR-oc/OR-ac", "se_ratio", contrast=label)
        overlap = label.endswith("VA=1,VB=1")
        # a gain means the pooled estimator's SE is at least 20% smaller (ratio >= 1.25)
        if overlap != (ratio >= 1.25):
            problems.append(f"OR-oc/OR-ac se ratio @{label} = {ratio:.3f}")
    finish(6, problems, "two-arm study, six estimands")


def test_criterion_7_property_suites():
    problems = []
    from test_inference import all_stacks
    from platform_cate.estimators import run_estimators

    cfg = ScenarioConfig(n=1000, reps=1, seed=5)
    for r in range(20):
        for f in (0.2, 0.5, 0.8):
            ds = generate(cfg, r, f, base_draws(cfg, r))
            for rep in run_estimators(ds, ContrastSpec(1), ["DR-oc", "DR-ac"]).values():
                if abs(rep.influence.mean()) > 1e-10:
                    problems.append(f"EIF mean {rep.influence.mean():.1e} rep {r}")
    for seed in range(20):
        for s in all_stacks(seed):
            scale = np.maximum(1.0, np.abs(s.score(s.theta_hat)).mean(axis=0))
            if np.any(np.abs(s.mean_score()) > 1e-8 * scale):
                problems.append(f"{s.label} mean score seed {seed}")
            G, N = s.jacobian(s.theta_hat), numeric_jacobian(s)
            if np.any(np.abs(G - N) > 1e-5 * np.maximum(np.abs(G), np.abs(G).max() * 1e-3) + 1e-9):
                problems.append(f"{s.label} Jacobian seed {seed}")

    t = correct_study().metrics
    for f in DEFAULT_FRACTIONS:
        for e in ("OR-oc", "OR-ac", "IPW"):
            ratio = t.get(e, "mean_se", f) / t.get(e, "mc_sd", f)
            if not 0.9 <= ratio <= 1.1:
                problems.append(f"{e}@{f:g} SE/MC-SD={ratio:.3f}")

    from test_regression import exact_normal_equations, irls_oracle
    from platform_cate.regression import solve_logistic, solve_ols
    from scipy.special import expit

    rng = np.random.default_rng(1)
    for _ in range(20):
        Xi = rng.integers(-5, 6, size=(12, 3)).astype(float)
        Xi[:, 0] = 1
        yi = rng.integers(-9, 10, size=12).astype(float)
        if abs(np.linalg.det(Xi.T @ Xi)) < 1:
            continue
        if np.max(np.abs(solve_ols(Xi, yi) - exact_normal_equations(Xi.tolist(), yi.tolist()))) > 1e-8:
            problems.append("OLS oracle")
        X = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])
        tt = (rng.random(300) < expit(X @ [0.2, 0.7, -0.4])).astype(float)
        if np.max(np.abs(solve_logistic(X, tt)[0] - irls_oracle(X, tt))) > 1e-8:
            problems.append("logistic oracle")

    def rejection_rate(drift):
        cfg = ScenarioConfig(n=1000, reps=REPS, seed=314, fractions=(0.5,), control_drift=drift)
        return np.mean([pooling_test(generate(cfg, r, 0.5)).reject for r in range(REPS)])

    size, power = rejection_rate(0.0), rejection_rate(1.0)
    if not 0.03 <= size <= 0.07:
        problems.append(f"pooling test size {size:.4f}")
    if not power > 0.9:
        problems.append(f"pooling test power {power:.4f}")
    finish(7, problems, f"pooling test size {size:.4f}, power {power:.4f}")


def test_criterion_8_case_study_pipeline(tmp_path, capsys):
    effect = -1.3
    frame, t = generate_actt_like(n=1000, seed=2024, effect=effect)
    frame.to_csv(tmp_path / "actt.csv", index=False)
    (tmp_path / "schema.json").write_text(json.dumps(actt_schema(t).to_mapping()))
    base = ["estimate", "-i", str(tmp_path / "actt.csv"), "--schema", str(tmp_path / "schema.json")]
    problems = []
    if main(base + ["--format", "text", "-o", str(tmp_path / "table.txt")]) != 0:
        problems.append("text report failed")
    table = (tmp_path / "table.txt").read_text().splitlines()
    if table[0].split() != ["Method", "point", "SE", "95%", "CI", "p", "p_exact", "Ratio"] or len(table) != 7:
        problems.append("report is not one row per estimator")
    if main(base + ["--format", "json", "-o", str(tmp_path / "r.json")]) != 0:
        problems.append("json report failed")
    capsys.readouterr()
    est = json.loads((tmp_path / "r.json").read_text())["estimates"]
    # assignment depends on age and severity, so only the adjusted estimators are expected to recover it
    for e in est:
        if e["estimator"] != "naive" and not abs(e["point"] - effect) < 3 * e["se"]:
            problems.append(f"{e['estimator']} {e['point']:.3f} vs {effect} (se {e['se']:.3f})")
    shown = ", ".join(f"{e['estimator']} {e['point']:.2f}({e['se']:.2f})" for e in est)
    finish(8, problems, f"planted {effect}: {shown}")
