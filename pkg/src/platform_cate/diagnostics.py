"""Specification test for pooling concurrent and non-concurrent controls.

Pooling is licensed when the control-arm regression ``E(Y | A=0, W, E)`` is
the same in both concurrency strata.  The test fits that regression on all
controls with every regressor interacted with the concurrency indicator and
tests the interaction block with a heteroskedasticity-robust Wald
statistic.  The HC3 variant (squared residuals inflated by ``1/(1-h_ii)^2``)
keeps the null distribution close to chi-square at moderate sample sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .data import ContrastSpec, TrialDataset
from .estimators import analysis_rows
from .exceptions import PoolingTestUndefinedError, SingularDesignError
from .regression import DesignSpec, solve_ols


@dataclass(frozen=True)
class PoolingTestReport:
    statistic: float
    dof: int
    p_value: float
    alpha: float = 0.05
    method_tag: str = "interaction-wald"
    n_concurrent_controls: int = 0
    n_nonconcurrent_controls: int = 0
    interaction_terms: tuple = field(default_factory=tuple)

    @property
    def reject(self) -> bool:
        return self.p_value <= self.alpha

    @property
    def recommendation(self) -> str:
        return "do-not-pool" if self.reject else "pool"

    def summary_line(self):
        verdict = (
            "non-concurrent controls differ from concurrent controls; do not pool"
            if self.reject
            else "no evidence against pooling concurrent and non-concurrent controls"
        )
        return f"{self.recommendation}: chi2({self.dof}) = {self.statistic:.3f}, p = {self.p_value:.4g} at alpha = {self.alpha:g} ({verdict})"

    def to_dict(self):
        return {
            "method": self.method_tag,
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "decision": self.recommendation,
            "n_concurrent_controls": self.n_concurrent_controls,
            "n_nonconcurrent_controls": self.n_nonconcurrent_controls,
            "interaction_terms": list(self.interaction_terms),
        }


def hc_covariance(X, resid, kind="hc3"):
    """Sandwich covariance ``(X'X)^-1 X' diag(u) X (X'X)^-1``.

    ``u`` is ``e^2`` for HC0 and ``e^2 / (1 - h)^2`` for HC3, with ``h`` the leverages.
    """
    bread = np.linalg.inv(X.T @ X)
    u = resid**2
    if kind == "hc3":
        h = np.einsum("ij,jk,ik->i", X, bread, X)
        u = u / (1 - h) ** 2
    elif kind != "hc0":
        raise ValueError(f"unknown covariance kind {kind!r}")
    meat = (X * u[:, None]).T @ X
    return bread @ meat @ bread


def pooling_test(dataset: TrialDataset, contrast: ContrastSpec | None = None,
                 design: DesignSpec | None = None, alpha: float = 0.05) -> PoolingTestReport:
    """Interaction Wald test of equal control regressions across concurrency strata."""
    contrast = contrast or ContrastSpec(1)
    design = design or DesignSpec.full()
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ds = analysis_rows(dataset, contrast)
    ctrl = ds.arm == 0
    V = contrast.mask(ds)
    n_conc = int((ctrl & V).sum())
    n_non = int((ctrl & ~V).sum())
    if n_non == 0:
        raise PoolingTestUndefinedError(
            "no non-concurrent controls: the pooling question does not arise"
        )
    if n_conc == 0:
        raise PoolingTestUndefinedError("no concurrent controls to compare against")
    X = design.matrix(ds)[ctrl]
    v = V[ctrl].astype(float)
    names = design.column_names(ds.covariate_names)
    inames = [f"V*{c}" for c in names]
    Z = np.hstack([X, X * v[:, None]])
    y = ds.outcome[ctrl]
    beta = solve_ols(Z, y, names + inames, "pooling test")
    resid = y - Z @ beta
    d = X.shape[1]
    cov = hc_covariance(Z, resid)[d:, d:]
    b = beta[d:]
    try:
        stat = float(b @ np.linalg.solve(cov, b))
    except np.linalg.LinAlgError:
        raise SingularDesignError(inames[0], "pooling test covariance") from None
    p = float(chi2.sf(stat, d))
    return PoolingTestReport(stat, d, p, alpha, "interaction-wald", n_conc, n_non, tuple(inames))
