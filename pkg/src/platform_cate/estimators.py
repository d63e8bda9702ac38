"""Point estimators and standard errors for the concurrent effect cATE(k).

All estimators first drop rows whose arm is neither 0 nor ``k``; the
concurrent population is the set of rows matching the contrast's
availability pattern (``V = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ContrastSpec, TrialDataset
from .exceptions import (
    ConfigError,
    EmptyArmError,
    EmptyConcurrentSetError,
    PositivityError,
)
from .inference import (
    build_ipw_stack,
    build_mean_stack,
    build_or_ac_stack,
    build_or_ate_stack,
    build_or_oc_stack,
    eif_variance,
    sandwich,
    wald,
)
from .regression import DesignSpec, ModelFit, fit_logistic, fit_ols

POSITIVITY_EPS = 1e-6
ESTIMATOR_ORDER = ("OR-oc", "OR-ac", "IPW", "DR-oc", "DR-ac", "naive")


@dataclass(frozen=True)
class DeterministicAvailability:
    """``P(V = 1 | W, E)`` when availability is a known function of entry time.

    Predicts the availability pattern indicator itself.  With ``threshold``
    set, predicts ``1[E > threshold]`` instead (useful for new data).
    """

    contrast: ContrastSpec
    threshold: float | None = None
    fit_subset: str = "deterministic"

    def predict(self, dataset: TrialDataset):
        if self.threshold is not None:
            return (dataset.entry_time > self.threshold).astype(float)
        return self.contrast.mask(dataset).astype(float)


@dataclass(frozen=True)
class ProductPropensity:
    """``P(A = k | W, E) = P(V = 1 | W, E) * P(A = k | W, E, V = 1)``.

    Exact whenever arm ``k`` can only be assigned while it is available.
    """

    nu: object
    pi_oc: ModelFit
    fit_subset: str = "product nu*pi_oc"

    def predict(self, dataset: TrialDataset):
        return self.nu.predict(dataset) * self.pi_oc.predict(dataset)


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    contrast: ContrastSpec
    mu_oc_treated: ModelFit
    mu_oc_control: ModelFit
    mu_all_control: ModelFit
    pi_oc: ModelFit
    pi_all: object
    nu: object


@dataclass(eq=False)
class EstimateReport:
    """Point estimate with Wald inference.

    ``ci_low``/``ci_high`` are ``point -/+ 1.96 se``.  ``influence`` holds the
    per-unit influence values for the influence-function based estimators and
    is empty for estimators whose variance comes from stacked equations.
    """

    estimator_tag: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    n_used: int
    influence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_point_se(cls, tag, point, se, n_used, influence=None, **extras):
        lo, hi, p = wald(point, se)
        inf = np.zeros(0) if influence is None else np.asarray(influence, dtype=float)
        return cls(tag, float(point), float(se), lo, hi, p, int(n_used), inf, extras)

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high

    def to_dict(self, include_influence=False):
        d = {
            "estimator": self.estimator_tag,
            "point": self.point,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "n_used": self.n_used,
        }
        d.update({k: v for k, v in self.extras.items() if np.isscalar(v) or v is None})
        if include_influence:
            d["influence"] = [float(x) for x in self.influence]
        return d


# ---------------------------------------------------------------------------
# analysis frame and nuisance fitting
# ---------------------------------------------------------------------------


def analysis_rows(dataset: TrialDataset, contrast: ContrastSpec) -> TrialDataset:
    """Rows assigned to control or to the treated arm of ``contrast``."""
    k = contrast.treated_arm
    if k >= dataset.arm_count:
        raise ConfigError(f"treated arm {k} is not present (dataset has arms 0..{dataset.arm_count - 1})")
    keep = (dataset.arm == 0) | (dataset.arm == k)
    return dataset if keep.all() else dataset.take(keep)


def _indicators(ds: TrialDataset, contrast: ContrastSpec):
    A = ds.arm == contrast.treated_arm
    V = contrast.mask(ds)
    if not V.any():
        raise EmptyConcurrentSetError(f"no records satisfy {contrast.label}; cATE is undefined")
    if not (V & A).any():
        raise EmptyArmError(f"no concurrent records on arm {contrast.treated_arm}")
    if not (V & ~A).any():
        raise EmptyArmError("no concurrent control records")
    return A, V


def fit_nuisances(
    dataset: TrialDataset,
    contrast: ContrastSpec,
    outcome_design: DesignSpec | None = None,
    treatment_design: DesignSpec | None = None,
    availability: str = "deterministic",
    availability_design: DesignSpec | None = None,
    pi_all: str = "product",
) -> NuisanceBundle:
    """Fit every nuisance model needed by the estimators of one contrast.

    Parameters
    ----------
    availability : {"deterministic", "fitted"}
        Deterministic uses the availability pattern itself as ``nu``;
        fitted runs a logistic regression of the pattern on ``availability_design``.
    pi_all : {"product", "logistic"}
        ``P(A = k | W, E)`` as ``nu * pi_oc`` or as a separate logistic fit on
        ``treatment_design`` over all analysis rows.
    """
    ds = analysis_rows(dataset, contrast)
    outcome_design = outcome_design or DesignSpec.full()
    treatment_design = treatment_design or DesignSpec.full()
    A, V = _indicators(ds, contrast)
    mu1 = fit_ols(ds, outcome_design, V & A, f"arm={contrast.treated_arm} & V=1")
    mu0 = fit_ols(ds, outcome_design, V & ~A, "arm=0 & V=1")
    mu_all = fit_ols(ds, outcome_design, ~A, "arm=0 all")
    pi_oc = fit_logistic(ds, treatment_design, A, V, "V=1")
    if availability == "deterministic":
        nu = DeterministicAvailability(contrast)
    elif availability == "fitted":
        nu = fit_logistic(ds, availability_design or DesignSpec.full(), V, None, "all rows")
    else:
        raise ConfigError(f"unknown availability model {availability!r}")
    if pi_all == "product":
        pa = ProductPropensity(nu, pi_oc)
    elif pi_all == "logistic":
        pa = fit_logistic(ds, treatment_design, A, None, f"arm in {{0,{contrast.treated_arm}}}")
    else:
        raise ConfigError(f"unknown pi_all model {pi_all!r}")
    return NuisanceBundle(contrast, mu1, mu0, mu_all, pi_oc, pa, nu)


def _check_positivity(prob, rows, eps=POSITIVITY_EPS):
    bad = rows & ((prob <= eps) | (prob >= 1 - eps))
    if bad.any():
        raise PositivityError(np.flatnonzero(bad).tolist(), eps)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def estimate_naive(dataset: TrialDataset, contrast: ContrastSpec, nuisances=None) -> EstimateReport:
    """Difference of concurrent arm means with the unpooled two-sample SE."""
    ds = analysis_rows(dataset, contrast)
    A, V = _indicators(ds, contrast)
    stack = build_mean_stack(ds.outcome, [V & ~A, V & A])
    res = sandwich(stack)
    return EstimateReport.from_point_se(
        "naive", stack.point, res.se, len(ds),
        mu0=float(stack.theta_hat[0]), mu1=float(stack.theta_hat[1]), control_se=res.component_se(0),
    )


def _or_report(tag, stack, n_used, **extras):
    res = sandwich(stack)
    j0 = stack.blocks["mu0"].start
    return EstimateReport.from_point_se(
        tag, stack.point, res.se, n_used,
        mu0=float(stack.theta_hat[j0]),
        mu1=float(stack.theta_hat[stack.blocks["mu1"].start]),
        control_se=res.component_se(j0),
        **extras,
    )


def _outcome_matrices(ds, fit0, fit1, k):
    X0 = fit0.design.matrix(ds, override_arm=0 if fit0.design.arm_indicator is not None else None)
    X1 = fit1.design.matrix(ds, override_arm=k if fit1.design.arm_indicator is not None else None)
    return X0, X1


def estimate_or_oc(dataset, contrast, nuisances: NuisanceBundle) -> EstimateReport:
    ds = analysis_rows(dataset, contrast)
    A, V = _indicators(ds, contrast)
    f0, f1 = nuisances.mu_oc_control, nuisances.mu_oc_treated
    X0, X1 = _outcome_matrices(ds, f0, f1, contrast.treated_arm)
    stack = build_or_oc_stack(X0, X1, ds.outcome, A, V, f0.coefficients, f1.coefficients)
    return _or_report("OR-oc", stack, len(ds))


def estimate_or_ac(dataset, contrast, nuisances: NuisanceBundle) -> EstimateReport:
    ds = analysis_rows(dataset, contrast)
    A, V = _indicators(ds, contrast)
    f0, f1 = nuisances.mu_all_control, nuisances.mu_oc_treated
    X0, X1 = _outcome_matrices(ds, f0, f1, contrast.treated_arm)
    stack = build_or_ac_stack(X0, X1, ds.outcome, A, V, f0.coefficients, f1.coefficients)
    return _or_report("OR-ac", stack, len(ds))


def estimate_or_ate(dataset, contrast, nuisances: NuisanceBundle) -> EstimateReport:
    """Whole-population effect ATE(k), extrapolating the concurrent treated model.

    Valid only if the treated outcome model transports to non-concurrent
    entry times; the report carries ``extrapolation=True``.
    """
    ds = analysis_rows(dataset, contrast)
    A, V = _indicators(ds, contrast)
    f0, f1 = nuisances.mu_all_control, nuisances.mu_oc_treated
    X0, X1 = _outcome_matrices(ds, f0, f1, contrast.treated_arm)
    stack = build_or_ate_stack(X0, X1, ds.outcome, A, V, f0.coefficients, f1.coefficients)
    return _or_report("OR-ATE", stack, len(ds), extrapolation=True)


def estimate_ipw(dataset, contrast, nuisances: NuisanceBundle, propensity=None) -> EstimateReport:
    """Hajek IPW among concurrent units.

    ``propensity`` optionally replaces the fitted ``pi_oc`` by known values
    (scalar or per-row array); the SE then treats it as fixed.
    """
    ds = analysis_rows(dataset, contrast)
    A, V = _indicators(ds, contrast)
    Y = ds.outcome
    if propensity is not None:
        pi = np.broadcast_to(np.asarray(propensity, dtype=float), (len(ds),))
        _check_positivity(pi, V)
        g0 = V * ~A / (1 - pi)
        g1 = V * A / pi
        mu0, mu1 = g0 @ Y / g0.sum(), g1 @ Y / g1.sum()
        phi = g1 * (Y - mu1) / g1.mean() - g0 * (Y - mu0) / g0.mean()
        se, _, _ = eif_variance(phi)
        return EstimateReport.from_point_se("IPW", mu1 - mu0, se, len(ds), mu0=mu0, mu1=mu1)
    fit = nuisances.pi_oc
    X = fit.design.matrix(ds)
    pi = fit.predict(X)
    _check_positivity(pi, V)
    stack = build_ipw_stack(X, Y, A, V, fit.coefficients)
    res = sandwich(stack)
    d = stack.blocks["mu0"].start
    return EstimateReport.from_point_se(
        "IPW", stack.point, res.se, len(ds),
        mu0=float(stack.theta_hat[d]), mu1=float(stack.theta_hat[d + 1]), control_se=res.component_se(d),
    )


def _dr_report(tag, T, V, n_used, **extras):
    p_hat = V.mean()
    psi = float(T.mean())
    phi = T - psi * V / p_hat
    se, _, _ = eif_variance(phi)
    return EstimateReport.from_point_se(tag, psi, se, n_used, influence=phi, **extras)


def dr_oc_terms(ds, contrast, nuisances, propensity=None):
    """Per-unit summands whose mean is the DR-oc estimate."""
    A, V = _indicators(ds, contrast)
    Y = ds.outcome
    k = contrast.treated_arm
    f0, f1 = nuisances.mu_oc_control, nuisances.mu_oc_treated
    X0, X1 = _outcome_matrices(ds, f0, f1, k)
    m0, m1 = X0 @ f0.coefficients, X1 @ f1.coefficients
    if propensity is None:
        pi = nuisances.pi_oc.predict(ds)
    else:
        pi = np.broadcast_to(np.asarray(propensity, dtype=float), (len(ds),))
    _check_positivity(pi, V)
    p_hat = V.mean()
    pa = np.where(A, pi, 1 - pi)
    ma = np.where(A, m1, m0)
    with np.errstate(divide="ignore", invalid="ignore"):
        aug = np.where(V, (2 * A - 1) / pa * (Y - ma), 0.0)
    return V / p_hat * (aug + m1 - m0), V


def estimate_dr_oc(dataset, contrast, nuisances: NuisanceBundle, propensity=None) -> EstimateReport:
    ds = analysis_rows(dataset, contrast)
    T, V = dr_oc_terms(ds, contrast, nuisances, propensity)
    return _dr_report("DR-oc", T, V, len(ds))


def dr_ac_terms(ds, contrast, nuisances):
    A, V = _indicators(ds, contrast)
    Y = ds.outcome
    k = contrast.treated_arm
    f0, f1 = nuisances.mu_all_control, nuisances.mu_oc_treated
    X0, X1 = _outcome_matrices(ds, f0, f1, k)
    m0, m1 = X0 @ f0.coefficients, X1 @ f1.coefficients
    pi_oc = nuisances.pi_oc.predict(ds)
    pi_all = nuisances.pi_all.predict(ds)
    nu = nuisances.nu.predict(ds)
    _check_positivity(pi_oc, V)
    # only the control weight 1 / (1 - pi_all) can blow up; rows with nu = 0 carry no weight
    bad = ~A & (nu > 0) & (1 - pi_all <= POSITIVITY_EPS)
    if bad.any():
        raise PositivityError(np.flatnonzero(bad).tolist(), POSITIVITY_EPS)
    p_hat = V.mean()
    with np.errstate(divide="ignore", invalid="ignore"):
        treated = np.where(V & A, (Y - m1) / pi_oc, 0.0)
        control = np.where(~A & (nu > 0), nu / (1 - pi_all) * (Y - m0), 0.0)
    return V / p_hat * (treated + m1 - m0) - control / p_hat, V


def estimate_dr_ac(dataset, contrast, nuisances: NuisanceBundle) -> EstimateReport:
    ds = analysis_rows(dataset, contrast)
    T, V = dr_ac_terms(ds, contrast, nuisances)
    return _dr_report("DR-ac", T, V, len(ds))


ESTIMATORS = {
    "naive": estimate_naive,
    "OR-oc": estimate_or_oc,
    "OR-ac": estimate_or_ac,
    "IPW": estimate_ipw,
    "DR-oc": estimate_dr_oc,
    "DR-ac": estimate_dr_ac,
    "OR-ATE": estimate_or_ate,
}

_ALIASES = {k.lower(): k for k in ESTIMATORS}
_ALIASES.update({"or-all": "OR-ac", "dr-all": "DR-ac", "or_oc": "OR-oc", "or_ac": "OR-ac",
                 "dr_oc": "DR-oc", "dr_ac": "DR-ac", "or-ate": "OR-ATE", "ate": "OR-ATE"})


def resolve_estimators(names) -> list[str]:
    """Canonical estimator tags from user input (case-insensitive, comma string or list)."""
    if names is None or names == "all":
        return list(ESTIMATOR_ORDER)
    if isinstance(names, str):
        names = [s for s in (x.strip() for x in names.split(",")) if s]
    out = []
    for s in names:
        if s.lower() == "all":
            out.extend(t for t in ESTIMATOR_ORDER if t not in out)
            continue
        tag = _ALIASES.get(s.lower())
        if tag is None:
            raise ConfigError(f"unknown estimator {s!r}; choose from {', '.join(ESTIMATORS)}")
        if tag not in out:
            out.append(tag)
    if not out:
        raise ConfigError("no estimators selected")
    return out


def run_estimators(dataset, contrast, estimators: Sequence[str] = ESTIMATOR_ORDER, nuisances=None,
                   **nuisance_kw) -> dict:
    """Run several estimators sharing one set of nuisance fits."""
    tags = resolve_estimators(estimators)
    needs_fits = any(t != "naive" for t in tags)
    if nuisances is None and needs_fits:
        nuisances = fit_nuisances(dataset, contrast, **nuisance_kw)
    return {t: ESTIMATORS[t](dataset, contrast, nuisances) for t in tags}
