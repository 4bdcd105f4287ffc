"""Fisher plug-ins, sandwich covariance, multiplier bootstrap, confidence sets.

All covariance matrices here are asymptotic covariances of
``sqrt(n) (theta_hat - theta*)``; joint sets shrink like ``1/n`` and marginal
half-widths like ``1/sqrt(n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import estimator
from .diffcore import invert
from .errors import Diverged, MaxIterations, SingularMatrix, TooFewDraws, TooManyFailures
from .simulators import exponentials, stream


def fisher_curv(dscore, theta_hat, data) -> np.ndarray:
    """Negative symmetrized average Jacobian of the debiased score."""
    data = np.atleast_2d(np.asarray(data, float))
    jac = dscore.per_datum_jacobian(theta_hat, data)
    avg = jac.mean(axis=0)
    return -0.5 * (avg + avg.T)


def fisher_ss(dscore, theta_hat, data) -> np.ndarray:
    """Average outer product of the debiased per-datum scores."""
    data = np.atleast_2d(np.asarray(data, float))
    s = dscore.per_datum(theta_hat, data)
    return (s.T @ s) / s.shape[0]


def sandwich(dscore, theta_hat, data) -> np.ndarray:
    """Huber sandwich: inv(curv) @ score-outer-product @ inv(curv)."""
    curv = fisher_curv(dscore, theta_hat, data)
    middle = fisher_ss(dscore, theta_hat, data)
    inv_curv = invert(curv)
    out = inv_curv @ middle @ inv_curv
    return 0.5 * (out + out.T)


def fisher_to_covariance(fisher) -> np.ndarray:
    """Asymptotic covariance from a Fisher-information estimate (symmetrized
    inverse)."""
    fisher = np.asarray(fisher, float)
    sym = 0.5 * (fisher + fisher.T)
    cov = invert(sym)
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# distribution quantiles (numeric inverse CDFs, no external dependency)

def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def normal_quantile(prob: float) -> float:
    """Standard normal quantile by bisection on erf; |error| < 1e-12."""
    if not 0.0 < prob < 1.0:
        raise ValueError("probability must be in (0, 1)")
    lo, hi = -40.0, 40.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _normal_cdf(mid) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    log_pref = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        # series expansion
        term = 1.0 / a
        total = term
        k = a
        for _ in range(500):
            k += 1.0
            term *= x / k
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(log_pref)
    # continued fraction (modified Lentz) for the upper tail
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return 1.0 - math.exp(log_pref) * h


def chi2_quantile(dof: int, prob: float) -> float:
    """Chi-square quantile by bisection on the incomplete gamma; |error| < 1e-10."""
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if not 0.0 < prob < 1.0:
        raise ValueError("probability must be in (0, 1)")
    hi = float(dof + 10.0 * math.sqrt(2.0 * dof) + 10.0)
    while _gammainc_lower(dof / 2.0, hi / 2.0) < prob:
        hi *= 2.0
    lo = 0.0
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if _gammainc_lower(dof / 2.0, mid / 2.0) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# confidence sets

@dataclass
class ConfidenceReport:
    """Joint ellipsoid plus marginal intervals for one method at one level."""

    theta: np.ndarray
    method: str
    level: float
    n: int
    shape: np.ndarray
    radius_sq: float
    lower: np.ndarray
    upper: np.ndarray
    covariance: np.ndarray | None = None
    boot_failures: int = 0

    def contains_joint(self, point) -> bool:
        diff = np.asarray(point, float) - self.theta
        return float(diff @ self.shape @ diff) <= self.radius_sq

    def quadratic_form(self, point) -> float:
        diff = np.asarray(point, float) - self.theta
        return float(diff @ self.shape @ diff)

    def contains_marginal(self, j: int, value: float) -> bool:
        return self.lower[j] <= value <= self.upper[j]

    @property
    def widths(self):
        return self.upper - self.lower


def confidence_sets(theta_hat, covariance, n: int, level: float = 0.95,
                    method: str = "") -> ConfidenceReport:
    """Plug-in set: ellipsoid from the covariance, z-interval marginals."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    covariance = np.asarray(covariance, dtype=float)
    d = theta_hat.size
    diag = np.diag(covariance)
    if np.any(diag <= 0):
        raise SingularMatrix("covariance has nonpositive diagonal")
    shape = invert(covariance)
    radius_sq = chi2_quantile(d, level) / n
    half = normal_quantile(1.0 - (1.0 - level) / 2.0) * np.sqrt(diag / n)
    return ConfidenceReport(theta=theta_hat, method=method, level=level, n=n,
                            shape=shape, radius_sq=radius_sq,
                            lower=theta_hat - half, upper=theta_hat + half,
                            covariance=covariance)


# ---------------------------------------------------------------------------
# multiplier bootstrap

@dataclass
class BootstrapDraws:
    draws: np.ndarray
    converged: np.ndarray
    seed: object = None

    @property
    def n_converged(self):
        return int(self.converged.sum())

    @property
    def n_failed(self):
        return int((~self.converged).sum())

    def kept(self):
        return self.draws[self.converged]


def multiplier_bootstrap(dscore, data, theta_hat, n_replicates: int, seed,
                         tol: float = 1e-6, max_iter: int = 200,
                         trust_radius: float | None = None,
                         failure_budget: float = 0.2) -> BootstrapDraws:
    """Roots of the Exp(1)-weighted score equation, one per replicate.

    Every replicate restarts from ``theta_hat`` with the quasi-Newton
    preconditioner frozen there; replicate-level failures are recorded and
    only fatal when they exceed the failure budget.
    """
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    data = np.atleast_2d(np.asarray(data, float))
    n = data.shape[0]
    theta_hat = np.asarray(theta_hat, dtype=float)
    precond = estimator.quasi_newton_at(dscore, data, theta_hat)
    d = theta_hat.size
    draws = np.zeros((n_replicates, d))
    done = np.zeros(n_replicates, dtype=bool)
    for b in range(n_replicates):
        rng = stream(seed, "boot", b)
        weights = exponentials(rng, 1.0, n)
        try:
            res = estimator.find_root(dscore, data, theta_hat, precond=precond,
                                      tol=tol, max_iter=max_iter,
                                      trust_radius=trust_radius, weights=weights)
            draws[b] = res.theta
            done[b] = res.converged
        except (Diverged, MaxIterations, SingularMatrix):
            done[b] = False
    failures = int((~done).sum())
    if failures > failure_budget * n_replicates:
        raise TooManyFailures(
            f"{failures}/{n_replicates} bootstrap replicates failed")
    return BootstrapDraws(draws=draws, converged=done, seed=seed)


def empirical_quantile(values, prob: float) -> float:
    """Order statistic at the ceil(prob * count) position (1-indexed)."""
    values = np.sort(np.asarray(values, float))
    count = values.size
    idx = min(max(int(np.ceil(prob * count)), 1), count)
    return float(values[idx - 1])


def bootstrap_sets(draws: BootstrapDraws, theta_hat, level: float = 0.95,
                   shape_matrix=None, min_draws: int = 50) -> ConfidenceReport:
    """Bootstrap confidence set from the converged replicate roots.

    The joint set uses the supplied shape matrix (identity by default) with
    the empirical quantile of the quadratic forms as its radius; marginals
    come from per-coordinate empirical quantiles of the centered draws.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    kept = draws.kept()
    if kept.shape[0] < min_draws:
        raise TooFewDraws(f"only {kept.shape[0]} converged draws, need {min_draws}")
    d = theta_hat.size
    shape = np.eye(d) if shape_matrix is None else np.asarray(shape_matrix, float)
    diffs = kept - theta_hat
    forms = np.einsum("bi,ij,bj->b", diffs, shape, diffs)
    radius_sq = empirical_quantile(forms, level)
    alpha = 1.0 - level
    lower = np.array([empirical_quantile(diffs[:, j], alpha / 2.0) for j in range(d)])
    upper = np.array([empirical_quantile(diffs[:, j], 1.0 - alpha / 2.0) for j in range(d)])
    n_eff = kept.shape[0]
    cov = (diffs.T @ diffs) / n_eff
    return ConfidenceReport(theta=theta_hat, method="boot", level=level,
                            n=n_eff, shape=shape, radius_sq=radius_sq,
                            lower=theta_hat + lower, upper=theta_hat + upper,
                            covariance=cov, boot_failures=draws.n_failed)


# ---------------------------------------------------------------------------
# CSV interface

def write_reports_csv(path, reports, sidecar_path=None):
    """One row per (coordinate, method); joint shapes go to the sidecar file."""
    with open(path, "w") as fh:
        fh.write("method,level,coordinate,estimate,lower,upper,width\n")
        for rep in reports:
            for j in range(rep.theta.size):
                fh.write(f"{rep.method},{rep.level:g},{j + 1},"
                         f"{rep.theta[j]:.6g},{rep.lower[j]:.6g},"
                         f"{rep.upper[j]:.6g},{rep.upper[j] - rep.lower[j]:.6g}\n")
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            fh.write("method,level,radius_sq,shape_row_major\n")
            for rep in reports:
                flat = ";".join(f"{v:.6g}" for v in rep.shape.ravel())
                fh.write(f"{rep.method},{rep.level:g},{rep.radius_sq:.6g},{flat}\n")
