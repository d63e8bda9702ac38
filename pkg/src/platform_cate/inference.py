"""Standard errors from stacked estimating equations and from influence functions.

Every stack is a set of per-unit scores ``h(Z_i, theta)`` whose sample mean
is zero at ``theta_hat``.  The influence of unit ``i`` is
``phi_i = G^{-1} h(Z_i, theta_hat)`` with ``G = -n^{-1} sum dh/dtheta``; because
``G`` is block lower-triangular the inverse is applied block by block.
Variances use the population convention ``n^{-1} sum phi phi'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .exceptions import DataError, SingularJacobianError

PROB_CLIP = 1e-12


class InsufficientDataError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class EstimatingStack:
    """Stacked estimating equations.

    Parameters
    ----------
    score : callable
        ``score(theta) -> (n, d)`` array of per-unit scores.
    jacobian : callable
        ``jacobian(theta) -> (d, d)`` array, the sample mean of ``-dh/dtheta``.
    theta_hat : ndarray
    blocks : dict
        Ordered mapping from block name to a slice of ``theta``.
    contrast : ndarray
        Weights ``c`` so that the target is ``c' theta``.
    """

    score: Callable
    jacobian: Callable
    theta_hat: np.ndarray
    blocks: dict
    contrast: np.ndarray
    label: str = ""

    @property
    def n(self):
        return self.score(self.theta_hat).shape[0]

    @property
    def point(self):
        return float(self.contrast @ self.theta_hat)

    def block(self, name):
        return self.theta_hat[self.blocks[name]]

    def mean_score(self, theta=None):
        return self.score(self.theta_hat if theta is None else theta).mean(axis=0)


@dataclass(frozen=True, eq=False)
class InfluenceDecomposition:
    influence: np.ndarray  # (n, d), one row per unit
    target_index: np.ndarray  # contrast weights over theta

    @property
    def contrast_influence(self):
        return self.influence @ self.target_index

    def component(self, j):
        return self.influence[:, j]


@dataclass(frozen=True, eq=False)
class SandwichResult:
    covariance: np.ndarray
    influence: InfluenceDecomposition
    se: float

    @property
    def contrast_influence(self):
        return self.influence.contrast_influence

    def component_se(self, j):
        return float(np.sqrt(self.covariance[j, j]))


def influence_functions(stack: EstimatingStack) -> np.ndarray:
    """Per-unit influence via forward substitution over the block layout."""
    theta = stack.theta_hat
    H = stack.score(theta)
    G = stack.jacobian(theta)
    n, d = H.shape
    phi = np.zeros((n, d))
    done = []
    for name, sl in stack.blocks.items():
        rhs = H[:, sl].copy()
        for prev in done:
            g = G[sl, prev]
            if np.any(g):
                rhs -= phi[:, prev] @ g.T
        gbb = G[sl, sl]
        try:
            if gbb.shape == (1, 1):
                if gbb[0, 0] == 0 or not np.isfinite(gbb[0, 0]):
                    raise np.linalg.LinAlgError
                phi[:, sl] = rhs / gbb[0, 0]
            else:
                if np.linalg.cond(gbb) > 1e14:
                    raise np.linalg.LinAlgError
                phi[:, sl] = np.linalg.solve(gbb, rhs.T).T
        except np.linalg.LinAlgError:
            raise SingularJacobianError(
                f"Jacobian block {name!r}{' of ' + stack.label if stack.label else ''} is not invertible"
            ) from None
        done.append(sl)
    return phi


def sandwich(stack: EstimatingStack) -> SandwichResult:
    """Covariance ``n^{-2} sum phi phi'`` and the standard error of the contrast."""
    phi = influence_functions(stack)
    n = phi.shape[0]
    cov = phi.T @ phi / n**2
    cov = (cov + cov.T) / 2
    dec = InfluenceDecomposition(phi, np.asarray(stack.contrast, dtype=float))
    psi = dec.contrast_influence
    se = float(np.sqrt(psi @ psi) / n)
    return SandwichResult(cov, dec, se)


def wald(point, se):
    """Two-sided Wald interval (point +/- 1.96 se) and p-value."""
    lo, hi = point - 1.96 * se, point + 1.96 * se
    if se > 0:
        p = float(2 * norm.sf(abs(point) / se))
    else:
        p = 0.0 if point != 0 else 1.0
    return lo, hi, p


def eif_variance(influence, point=0.0):
    """Wald inference from a per-unit influence vector.

    ``se = sqrt(mean((phi - mean(phi))^2) / n)``.

    Returns
    -------
    se : float
    ci : tuple of float
        ``point -/+ 1.96 se``.
    p_value : float
    """
    phi = np.asarray(influence, dtype=float).reshape(-1)
    n = phi.shape[0]
    if n < 2:
        raise InsufficientDataError(f"influence-based variance needs n >= 2, got {n}")
    centered = phi - phi.mean()
    se = float(np.sqrt(np.mean(centered**2) / n))
    lo, hi, p = wald(point, se)
    return se, (lo, hi), p


# ---------------------------------------------------------------------------
# concrete stacks
# ---------------------------------------------------------------------------


def _or_stack(X0, X1, Y, fit0, fit1, avg, beta0, beta1, label):
    """theta = [beta0, mu0, beta1, mu1]; OLS blocks then averaging blocks."""
    n, d0 = X0.shape
    d1 = X1.shape[1]
    fit0 = fit0.astype(float)
    fit1 = fit1.astype(float)
    avg = avg.astype(float)
    sl = {
        "beta0": slice(0, d0),
        "mu0": slice(d0, d0 + 1),
        "beta1": slice(d0 + 1, d0 + 1 + d1),
        "mu1": slice(d0 + 1 + d1, d0 + 2 + d1),
    }
    mu0 = float(np.sum(avg * (X0 @ beta0)) / avg.sum())
    mu1 = float(np.sum(avg * (X1 @ beta1)) / avg.sum())
    theta = np.concatenate([beta0, [mu0], beta1, [mu1]])
    D = d0 + d1 + 2

    def score(th):
        b0, m0, b1, m1 = th[sl["beta0"]], th[sl["mu0"]][0], th[sl["beta1"]], th[sl["mu1"]][0]
        H = np.empty((n, D))
        H[:, sl["beta0"]] = X0 * (fit0 * (Y - X0 @ b0))[:, None]
        H[:, sl["mu0"]] = (avg * (X0 @ b0 - m0))[:, None]
        H[:, sl["beta1"]] = X1 * (fit1 * (Y - X1 @ b1))[:, None]
        H[:, sl["mu1"]] = (avg * (X1 @ b1 - m1))[:, None]
        return H

    def jacobian(th):
        G = np.zeros((D, D))
        G[sl["beta0"], sl["beta0"]] = (X0 * fit0[:, None]).T @ X0 / n
        G[sl["mu0"], sl["beta0"]] = -(avg @ X0) / n
        G[sl["mu0"], sl["mu0"]] = avg.mean()
        G[sl["beta1"], sl["beta1"]] = (X1 * fit1[:, None]).T @ X1 / n
        G[sl["mu1"], sl["beta1"]] = -(avg @ X1) / n
        G[sl["mu1"], sl["mu1"]] = avg.mean()
        return G

    c = np.zeros(D)
    c[sl["mu1"]] = 1.0
    c[sl["mu0"]] = -1.0
    return EstimatingStack(score, jacobian, theta, sl, c, label)


def build_or_oc_stack(X0, X1, Y, A, V, beta0, beta1):
    """Both outcome models fit on concurrent units; averaged over concurrent units."""
    A = np.asarray(A, dtype=bool)
    V = np.asarray(V, dtype=bool)
    return _or_stack(X0, X1, Y, V & ~A, V & A, V, beta0, beta1, "OR-oc")


def build_or_ac_stack(X0, X1, Y, A, V, alpha0, beta1):
    """Control model fit on all controls; averaged over concurrent units."""
    A = np.asarray(A, dtype=bool)
    V = np.asarray(V, dtype=bool)
    return _or_stack(X0, X1, Y, ~A, V & A, V, alpha0, beta1, "OR-ac")


def build_or_ate_stack(X0, X1, Y, A, V, alpha0, beta1):
    """Control model on all controls, treated model on concurrent treated; averaged over everyone."""
    A = np.asarray(A, dtype=bool)
    V = np.asarray(V, dtype=bool)
    return _or_stack(X0, X1, Y, ~A, V & A, np.ones_like(V), alpha0, beta1, "OR-ATE")


def _hajek_weights(pi, A, V):
    """Control and treated inverse-probability weights, zero outside their arm."""
    c0, c1 = V * (1 - A), V * A
    with np.errstate(divide="ignore", invalid="ignore"):
        w0 = np.where(c0 > 0, c0 / (1 - pi), 0.0)
        w1 = np.where(c1 > 0, c1 / pi, 0.0)
    return w0, w1


def build_ipw_stack(X, Y, A, V, eta):
    """Hajek IPW: theta = [eta, mu0, mu1] with the propensity fit on concurrent units."""
    n, d = X.shape
    A = np.asarray(A, dtype=float)
    V = np.asarray(V, dtype=float)
    sl = {"eta": slice(0, d), "mu0": slice(d, d + 1), "mu1": slice(d + 1, d + 2)}
    g0, g1 = _hajek_weights(expit(X @ eta), A, V)
    theta = np.concatenate([eta, [g0 @ Y / g0.sum()], [g1 @ Y / g1.sum()]])

    def score(th):
        e = th[sl["eta"]]
        pi = expit(X @ e)
        w0, w1 = _hajek_weights(pi, A, V)
        H = np.empty((n, d + 2))
        H[:, sl["eta"]] = X * (V * (A - pi))[:, None]
        H[:, d] = w0 * (Y - th[d])
        H[:, d + 1] = w1 * (Y - th[d + 1])
        return H

    def jacobian(th):
        e = th[sl["eta"]]
        lin = X @ e
        pi = np.clip(expit(lin), PROB_CLIP, 1 - PROB_CLIP)
        G = np.zeros((d + 2, d + 2))
        w0, w1 = _hajek_weights(pi, A, V)
        c0, c1 = V * (1 - A), V * A
        # d/d eta of 1/(1-pi) is exp(x eta) x; of 1/pi is -exp(-x eta) x
        G[sl["eta"], sl["eta"]] = (X * (V * pi * (1 - pi))[:, None]).T @ X / n
        G[d, sl["eta"]] = -((c0 * (Y - th[d]) * np.exp(np.where(c0 > 0, lin, 0.0))) @ X) / n
        G[d, d] = np.mean(w0)
        G[d + 1, sl["eta"]] = ((c1 * (Y - th[d + 1]) * np.exp(np.where(c1 > 0, -lin, 0.0))) @ X) / n
        G[d + 1, d + 1] = np.mean(w1)
        return G

    c = np.zeros(d + 2)
    c[d + 1] = 1.0
    c[d] = -1.0
    return EstimatingStack(score, jacobian, theta, sl, c, "IPW")


def build_mean_stack(Y, groups):
    """Sample means over disjoint row groups; theta = [mu_g for g in groups].

    With two groups ``(control, treated)`` the contrast is ``mu_1 - mu_0``.
    """
    Y = np.asarray(Y, dtype=float)
    M = np.column_stack([np.asarray(g, dtype=float) for g in groups])
    n, d = M.shape
    counts = M.sum(axis=0)
    theta = (M * Y[:, None]).sum(axis=0) / counts
    sl = {f"mu{j}": slice(j, j + 1) for j in range(d)}

    def score(th):
        return M * (Y[:, None] - th[None, :])

    def jacobian(th):
        return np.diag(M.mean(axis=0))

    c = np.zeros(d)
    if d == 2:
        c[:] = (-1.0, 1.0)
    else:
        c[0] = 1.0
    return EstimatingStack(score, jacobian, theta, sl, c, "mean")


def numeric_jacobian(stack: EstimatingStack, theta=None, h=1e-6):
    """Central finite differences of ``-mean score``; used as a test oracle."""
    theta = stack.theta_hat if theta is None else np.asarray(theta, dtype=float)
    d = theta.shape[0]
    G = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        G[:, j] = -(stack.mean_score(theta + e) - stack.mean_score(theta - e)) / (2 * h)
    return G
