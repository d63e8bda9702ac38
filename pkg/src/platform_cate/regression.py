"""Parametric nuisance models: OLS via QR and Newton logistic regression.

Design matrices are built from a :class:`~platform_cate.data.TrialDataset`
by a :class:`DesignSpec`.  Column order is fixed: intercept, selected
covariates, entry time, then an optional arm indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit

from .data import TrialDataset, TrialRecord
from .exceptions import (
    DegenerateTargetError,
    EmptySubsetError,
    PlatformCateError,
    SeparationError,
    SingularDesignError,
)

RANK_TOL = 1e-10
SCORE_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 20
SEPARATION_BOUND = 1e3


class DesignMismatchError(PlatformCateError):
    exit_code = 2


@dataclass(frozen=True)
class DesignSpec:
    """Which regressors enter ``x``.

    Parameters
    ----------
    include_intercept : bool
    covariate_indices : tuple of int or None
        Indices into the covariate vector; ``None`` means all covariates.
    include_entry_time : bool
    arm_indicator : int or None
        When set, adds the column ``1[A = arm_indicator]``.
    """

    include_intercept: bool = True
    covariate_indices: tuple | None = None
    include_entry_time: bool = True
    arm_indicator: int | None = None

    def __post_init__(self):
        if self.covariate_indices is not None:
            object.__setattr__(self, "covariate_indices", tuple(int(j) for j in self.covariate_indices))

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def intercept_only(cls):
        return cls(include_intercept=True, covariate_indices=(), include_entry_time=False)

    @property
    def is_intercept_only(self):
        return (
            self.include_intercept
            and self.covariate_indices == ()
            and not self.include_entry_time
            and self.arm_indicator is None
        )

    def _cov_idx(self, p):
        if self.covariate_indices is None:
            return tuple(range(p))
        bad = [j for j in self.covariate_indices if not 0 <= j < p]
        if bad:
            raise DesignMismatchError(f"covariate indices {bad} out of range for {p} covariates")
        return self.covariate_indices

    def column_names(self, covariate_names):
        names = ["(intercept)"] if self.include_intercept else []
        names += [covariate_names[j] for j in self._cov_idx(len(covariate_names))]
        if self.include_entry_time:
            names.append("entry_time")
        if self.arm_indicator is not None:
            names.append(f"arm={self.arm_indicator}")
        return names

    def n_columns(self, p):
        return (
            int(self.include_intercept)
            + len(self._cov_idx(p))
            + int(self.include_entry_time)
            + int(self.arm_indicator is not None)
        )

    def build(self, entry_time, covariates, arm=None, override_arm=None):
        """Assemble the design matrix from raw arrays."""
        e = np.asarray(entry_time, dtype=float).reshape(-1)
        n = e.shape[0]
        w = np.asarray(covariates, dtype=float).reshape(n, -1)
        cols = []
        if self.include_intercept:
            cols.append(np.ones(n))
        idx = self._cov_idx(w.shape[1])
        if idx:
            cols.extend(w[:, list(idx)].T)
        if self.include_entry_time:
            cols.append(e)
        if self.arm_indicator is not None:
            if override_arm is not None:
                cols.append(np.full(n, float(override_arm == self.arm_indicator)))
            else:
                if arm is None:
                    raise DesignMismatchError("design includes an arm indicator but no arm was given")
                cols.append((np.asarray(arm) == self.arm_indicator).astype(float))
        if not cols:
            raise DesignMismatchError("design has no columns")
        return np.column_stack(cols)

    def matrix(self, dataset: TrialDataset, override_arm=None):
        return self.build(dataset.entry_time, dataset.covariates, dataset.arm, override_arm)


@dataclass(frozen=True, eq=False)
class ModelFit:
    """A fitted regression with identity or logit link."""

    coefficients: np.ndarray
    design: DesignSpec
    link: str
    fit_subset: str
    converged: bool = True
    iterations: int = 0
    n_obs: int = 0
    column_names: tuple = ()
    p_covariates: int | None = None
    max_score: float = 0.0

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(-1)
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)
        if self.link not in ("identity", "logit"):
            raise ValueError(f"unknown link {self.link!r}")

    def linear_predictor(self, data, override_arm=None):
        if isinstance(data, TrialRecord):
            X = self.design.build([data.entry_time], [data.covariates], [data.arm], override_arm)
        elif isinstance(data, TrialDataset):
            X = self.design.matrix(data, override_arm)
        else:
            X = np.asarray(data, dtype=float)
            if X.ndim == 1:
                X = X[None, :]
        if self.p_covariates is not None and not isinstance(data, np.ndarray):
            p = len(data.covariates) if isinstance(data, TrialRecord) else data.p
            if p != self.p_covariates:
                raise DesignMismatchError(
                    f"record has {p} covariates but the model was fit with {self.p_covariates}"
                )
        if X.shape[1] != self.coefficients.shape[0]:
            raise DesignMismatchError(
                f"design has {X.shape[1]} columns but the fit has {self.coefficients.shape[0]} coefficients"
            )
        return X @ self.coefficients

    def predict(self, data, override_arm=None):
        """Fitted mean for a record (scalar), a dataset or a design matrix (vector)."""
        eta = self.linear_predictor(data, override_arm)
        out = eta if self.link == "identity" else expit(eta)
        if isinstance(data, TrialRecord):
            return float(out[0])
        return out


def predict(fit: ModelFit, record, override_arm=None):
    return fit.predict(record, override_arm)


def solve_ols(X, y, column_names=None, label=""):
    """Least squares via Householder QR with rank detection on diag(R)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise EmptySubsetError(f"no rows to fit{' ' + label if label else ''}")
    names = column_names or [f"x{j}" for j in range(d)]
    if n < d:
        raise SingularDesignError(names[n], label)
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    scale = diag.max() if d else 0.0
    small = np.flatnonzero(diag < RANK_TOL * scale) if scale > 0 else np.arange(d)
    if small.size:
        raise SingularDesignError(names[small[0]], label)
    return solve_triangular(R, Q.T @ y)


def logistic_loglik(X, t, beta):
    eta = X @ beta
    return float(np.sum(t * log_expit(eta) + (1 - t) * log_expit(-eta)))


def solve_logistic(X, t, column_names=None, label="", tol=SCORE_TOL, max_iter=MAX_ITER,
                   bound=SEPARATION_BOUND):
    """Newton-Raphson for logistic regression with step-halving.

    Convergence is declared when the max absolute mean score
    ``max|X'(t - p)/n|`` is below ``tol``.

    Returns
    -------
    beta, converged, iterations, max_score
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    n, d = X.shape
    if n == 0:
        raise EmptySubsetError(f"no rows to fit{' ' + label if label else ''}")
    s = t.sum()
    if s == 0 or s == n:
        raise DegenerateTargetError(
            f"binary target has a single class ({int(s)} of {n} ones){' in ' + label if label else ''}"
        )
    names = column_names or [f"x{j}" for j in range(d)]
    # rank check up front gives a named error instead of a singular Hessian
    solve_ols(X, t, names, label)

    beta = np.zeros(d)
    if d and np.allclose(X[:, 0], 1.0):
        beta[0] = np.log(s / (n - s))
    ll = logistic_loglik(X, t, beta)
    converged = False
    it = 0
    score = X.T @ (t - expit(X @ beta)) / n
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (t - p) / n
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        wts = p * (1 - p)
        H = (X * wts[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise SeparationError(f"logistic Hessian singular{' in ' + label if label else ''}") from None
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + lam * step
            ll_new = logistic_loglik(X, t, cand)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            lam *= 0.5
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > bound:
            raise SeparationError(
                f"coefficient norm exceeded {bound:g}: the classes appear separated{' in ' + label if label else ''}"
            )
    else:
        p = expit(X @ beta)
        score = X.T @ (t - p) / n
        converged = bool(np.max(np.abs(score)) <= tol)
    p = expit(X @ beta)
    if np.max(np.abs(t - p)) < 1e-6:
        raise SeparationError(f"fitted probabilities reproduce the target exactly{' in ' + label if label else ''}")
    return beta, converged, it, float(np.max(np.abs(score)))


def _rows(dataset, row_filter):
    if row_filter is None:
        return np.ones(len(dataset), dtype=bool)
    if callable(row_filter):
        row_filter = row_filter(dataset)
    m = np.asarray(row_filter)
    if m.dtype != bool:
        mask = np.zeros(len(dataset), dtype=bool)
        mask[m] = True
        m = mask
    return m


def fit_ols(dataset: TrialDataset, design: DesignSpec, row_filter=None, label="all",
            target=None) -> ModelFit:
    """Regress the outcome (or ``target``) on ``design`` over the filtered rows."""
    m = _rows(dataset, row_filter)
    if not m.any():
        raise EmptySubsetError(f"row filter {label!r} selects no rows")
    X = design.matrix(dataset)[m]
    y = (dataset.outcome if target is None else np.asarray(target, dtype=float))[m]
    names = design.column_names(dataset.covariate_names)
    beta = solve_ols(X, y, names, label)
    return ModelFit(beta, design, "identity", label, True, 0, int(m.sum()), tuple(names), dataset.p)


def fit_logistic(dataset: TrialDataset, design: DesignSpec, target, row_filter=None,
                 label="all", **kw) -> ModelFit:
    """Logistic MLE of a binary target.

    ``target`` is a boolean array over all rows or a callable of the dataset.
    """
    m = _rows(dataset, row_filter)
    if not m.any():
        raise EmptySubsetError(f"row filter {label!r} selects no rows")
    t = target(dataset) if callable(target) else target
    t = np.asarray(t, dtype=float)[m]
    X = design.matrix(dataset)[m]
    names = design.column_names(dataset.covariate_names)
    beta, conv, it, ms = solve_logistic(X, t, names, label, **kw)
    return ModelFit(beta, design, "logit", label, conv, it, int(m.sum()), tuple(names), dataset.p, ms)
