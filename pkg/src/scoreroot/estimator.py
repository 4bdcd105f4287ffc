"""Root finding for the aggregated debiased score.

The iteration is ``theta <- theta + alpha * H_t * score(theta)`` with three
preconditioner choices: identity (gradient ascent on the surrogate
log-likelihood), full Newton (H recomputed from the symmetrized score
Jacobian each step), and quasi-Newton (H frozen at the starting point).
The learned Jacobian approximates the negative Fisher information times the
sample size, so it is negated before inversion; steps where the symmetrized
Jacobian is not negative definite fall back to an identity step and the
event is recorded on the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import solve_linear
from .errors import Diverged, MaxIterations
from .simulators import sample_params

NEG_DEF_TOL = 1e-8


@dataclass(frozen=True)
class Preconditioner:
    kind: str
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "newton", "quasi_newton"):
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if self.kind == "quasi_newton":
            if self.matrix is None or not np.all(np.isfinite(self.matrix)):
                raise ValueError("quasi_newton needs a finite frozen matrix")


def identity() -> Preconditioner:
    return Preconditioner("identity")


def newton() -> Preconditioner:
    return Preconditioner("newton")


def newton_matrix(dscore, data, theta, weights=None):
    """Inverse of the negated symmetrized score Jacobian, made usable.

    Returns ``(matrix, exact)`` where ``exact`` is True when the symmetrized
    Jacobian of the debiased score was negative definite and used as-is.
    When it is not (the mean network's gradient can cancel weak-direction
    curvature), the Jacobian without the mean part is tried, and as a last
    resort the spectrum is shifted to enforce negative definiteness.  Any
    positive-definite preconditioner leaves the root of the iteration
    unchanged; only the exact one gives quadratic local convergence.
    """
    n = np.atleast_2d(data).shape[0]

    def usable(mat):
        if mat is None or not np.all(np.isfinite(mat)):
            return None
        sym = 0.5 * (mat + mat.T)
        if np.max(np.linalg.eigvalsh(sym)) > -NEG_DEF_TOL * n:
            return None
        return sym

    sym = usable(dscore.aggregate_jacobian(theta, data, weights=weights))
    if sym is not None:
        return solve_linear(-sym, np.eye(sym.shape[0])), True
    alt = None
    if getattr(dscore, "mean_part", None) is not None:
        alt = usable(dscore.aggregate_jacobian(theta, data, weights=weights,
                                               include_mean=False))
    if alt is None:
        jac = dscore.aggregate_jacobian(theta, data, weights=weights)
        if not np.all(np.isfinite(jac)):
            raise Diverged("score Jacobian is not finite")
        alt = 0.5 * (jac + jac.T)
        shift = float(np.max(np.linalg.eigvalsh(alt))) + NEG_DEF_TOL * n
        alt = alt - shift * np.eye(alt.shape[0])
    return solve_linear(-alt, np.eye(alt.shape[0])), False


def quasi_newton_at(dscore, data, theta0) -> Preconditioner:
    """Freeze the Newton matrix at the starting point."""
    mat, _ = newton_matrix(dscore, data, theta0)
    return Preconditioner("quasi_newton", mat)


@dataclass
class EstimateResult:
    theta: np.ndarray
    iterations: int
    converged: bool
    preconditioner: str
    alpha: float
    trace: list = field(default_factory=list)
    fallback_steps: int = 0

    def trace_array(self):
        """Trace rows as (iteration, theta..., score_norm)."""
        return np.array([[t, *theta, norm] for t, theta, norm in self.trace])


def default_alpha(kind: str, n: int) -> float:
    """Classical unit step for (quasi-)Newton, per-datum O(1) step otherwise."""
    return 1.0 if kind in ("newton", "quasi_newton") else 1.0 / n


def find_root(dscore, data, theta0, precond: Preconditioner | None = None,
              alpha: float | None = None, tol: float = 1e-6,
              max_iter: int = 500, trust_radius: float | None = None,
              max_step: float | None = None, bounds=None,
              weights=None) -> EstimateResult:
    """Iterate the preconditioned update until the step norm drops below tol.

    ``max_step`` caps the length of a single update (damped Newton) and
    ``bounds`` projects iterates onto the sampling support where the learned
    score is trained; near an interior root both are inactive, so converged
    results are unaffected.  Raises :class:`Diverged` when the iterate leaves
    the trust region around ``theta0`` (callers typically pass ten times the
    sampling-box diameter) and :class:`MaxIterations` when the cap is hit;
    both carry the partial result.
    """
    if tol <= 0 or (alpha is not None and alpha <= 0):
        raise ValueError("tol and alpha must be positive")
    data = np.atleast_2d(np.asarray(data, float))
    n = data.shape[0]
    precond = precond if precond is not None else newton()
    alpha = default_alpha(precond.kind, n) if alpha is None else alpha
    lo = hi = None
    if bounds is not None:
        lo, hi = (np.asarray(b, float) for b in bounds)

    theta = np.asarray(theta0, dtype=float).copy()
    if lo is not None:
        theta = np.clip(theta, lo, hi)
    result = EstimateResult(theta=theta, iterations=0, converged=False,
                            preconditioner=precond.kind, alpha=alpha)
    for t in range(max_iter):
        score = dscore.eval_aggregate(theta, data, weights=weights)
        if not np.all(np.isfinite(score)):
            raise Diverged(f"score not finite at iteration {t}", result)
        result.trace.append((t, theta.copy(), float(np.linalg.norm(score))))
        if precond.kind == "identity":
            step = alpha * score
        elif precond.kind == "quasi_newton":
            step = alpha * (precond.matrix @ score)
        else:
            mat, exact = newton_matrix(dscore, data, theta, weights=weights)
            if not exact:
                result.fallback_steps += 1
            step = alpha * (mat @ score)
        if max_step is not None:
            norm = float(np.linalg.norm(step))
            if norm > max_step:
                step = step * (max_step / norm)
        prev = theta
        theta = theta + step
        if lo is not None:
            theta = np.clip(theta, lo, hi)
        result.theta = theta
        result.iterations = t + 1
        if trust_radius is not None and np.linalg.norm(theta - np.asarray(theta0, float)) > trust_radius:
            raise Diverged(f"left trust region after {t + 1} iterations", result)
        if np.linalg.norm(theta - prev) <= tol:
            result.converged = True
            score = dscore.eval_aggregate(theta, data, weights=weights)
            result.trace.append((t + 1, theta.copy(), float(np.linalg.norm(score))))
            return result
    raise MaxIterations(f"no convergence in {max_iter} iterations", result)


def initialize(model, dist, strategy: str = "random", seed=0,
               round1_estimate=None) -> np.ndarray:
    """Starting point: a draw from the sampling distribution, or a prior estimate."""
    if strategy == "random":
        rng = seed if isinstance(seed, np.random.Generator) else None
        if rng is None:
            from .simulators import stream
            rng = stream(seed, "init")
        return sample_params(dist, 1, rng)[0]
    if strategy == "round1":
        if round1_estimate is None:
            raise ValueError("round1 strategy needs an estimate")
        return np.asarray(round1_estimate, dtype=float).copy()
    raise ValueError(f"unknown strategy {strategy!r}")


def compare_dynamics(dscore, data, theta0, tol: float = 1e-6,
                     alpha_identity: float | None = None,
                     max_iter: int = 2000, trust_radius: float | None = None,
                     bounds=None, max_step: float | None = None):
    """Quasi-Newton (frozen at theta0) versus identity gradient ascent.

    Both runs share the starting point, tolerance, and guards; returns the
    pair of results for trace reporting.
    """
    qn = find_root(dscore, data, theta0, precond=quasi_newton_at(dscore, data, theta0),
                   tol=tol, max_iter=max_iter, trust_radius=trust_radius,
                   bounds=bounds, max_step=max_step)
    ga = find_root(dscore, data, theta0, precond=identity(), alpha=alpha_identity,
                   tol=tol, max_iter=max_iter, trust_radius=trust_radius,
                   bounds=bounds, max_step=max_step)
    return qn, ga


def write_trace_csv(path, result: EstimateResult):
    """Iteration trace as CSV: iteration, theta coordinates, score norm."""
    rows = result.trace_array()
    d = rows.shape[1] - 2
    header = "iteration," + ",".join(f"theta{j + 1}" for j in range(d)) + ",score_norm"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(f"{int(row[0])}," + ",".join(f"{v:.10g}" for v in row[1:]) + "\n")
