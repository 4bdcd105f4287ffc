"""Synthetic-likelihood comparator: Gaussian surrogate over summary statistics.

At each proposal the model is simulated in blocks, a Gaussian is fitted to
the block summaries, and a random-walk Metropolis-Hastings chain searches for
the synthetic-likelihood maximizer.  The point estimate comes from a
quadratic regression over the retained chain and the intervals from chain
quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, InvalidParameter, SingularMatrix
from .simulators import normals, stream

COV_RIDGE = 1e-8


def quantile_summary(data) -> np.ndarray:
    """(min, 0.25, 0.5, 0.75, max) of the pooled dataset values."""
    flat = np.asarray(data, float).ravel()
    return np.quantile(flat, [0.0, 0.25, 0.5, 0.75, 1.0])


def moment_summary(data) -> np.ndarray:
    """Coordinate-wise mean and standard deviation."""
    data = np.atleast_2d(np.asarray(data, float))
    return np.concatenate([data.mean(axis=0), data.std(axis=0, ddof=1)])


SUMMARIES = {
    "toy": quantile_summary,
    "gandk": quantile_summary,
    "mg1": moment_summary,
    "volatility": moment_summary,
    "analytic-gaussian": moment_summary,
}


def summary_for(model_name: str):
    try:
        return SUMMARIES[model_name]
    except KeyError:
        raise ValueError(f"no summary statistic registered for {model_name!r}")


def synthetic_loglik(model, theta_unc, observed_summary, n_obs: int, n_sims: int,
                     rng, summary_fn=None) -> float:
    """Gaussian log-density of the observed summary under simulated moments.

    Requires at least ``len(summary) + 2`` simulated datasets so the
    covariance estimate has positive degrees of freedom.
    """
    summary_fn = summary_fn or summary_for(model.name)
    observed_summary = np.asarray(observed_summary, float)
    if n_sims < observed_summary.size + 2:
        raise ValueError("need n_sims >= summary length + 2")
    theta = np.asarray(theta_unc, float)
    rows = np.broadcast_to(theta, (n_sims * n_obs, theta.size))
    draws = model.simulate_batch(rows, rng).reshape(n_sims, n_obs, -1)
    stats = np.stack([summary_fn(draws[j]) for j in range(n_sims)])
    mu = stats.mean(axis=0)
    cov = np.cov(stats.T, ddof=1)
    cov = np.atleast_2d(cov) + COV_RIDGE * np.eye(observed_summary.size)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise SingularMatrix("summary covariance not positive definite")
    diff = observed_summary - mu
    quad = diff @ np.linalg.solve(cov, diff)
    return float(-0.5 * (logdet + quad + observed_summary.size * np.log(2.0 * np.pi)))


@dataclass
class ChainState:
    thetas: np.ndarray
    logliks: np.ndarray
    accepted: int
    burn_in: int

    @property
    def steps(self):
        return self.thetas.shape[0] - 1

    @property
    def acceptance_rate(self):
        return self.accepted / max(self.steps, 1)

    def retained(self):
        return self.thetas[self.burn_in + 1:], self.logliks[self.burn_in + 1:]


def mh_chain(model, observed, init_unc, steps: int, burn_in: int, n_sims: int,
             proposal_scale, seed, summary_fn=None, search_box=None) -> ChainState:
    """Random-walk Metropolis-Hastings on the synthetic log-likelihood."""
    if steps <= burn_in:
        raise ValueError("steps must exceed burn_in")
    summary_fn = summary_fn or summary_for(model.name)
    observed = np.atleast_2d(np.asarray(observed, float))
    obs_summary = summary_fn(observed)
    n_obs = observed.shape[0]
    search_box = search_box if search_box is not None else model.default_dist
    theta = np.asarray(init_unc, float).copy()
    d = theta.size
    scale = np.broadcast_to(np.asarray(proposal_scale, float), (d,))

    rng_prop = stream(seed, "sl-prop")
    current = synthetic_loglik(model, theta, obs_summary, n_obs, n_sims,
                               stream(seed, "sl-sim", 0), summary_fn)
    thetas = np.empty((steps + 1, d))
    logliks = np.empty(steps + 1)
    thetas[0], logliks[0] = theta, current
    accepted = 0
    for t in range(1, steps + 1):
        prop = theta + scale * normals(rng_prop, d)
        if search_box is not None and not search_box.contains(prop):
            cand = -np.inf
        else:
            try:
                cand = synthetic_loglik(model, prop, obs_summary, n_obs, n_sims,
                                        stream(seed, "sl-sim", t), summary_fn)
            except (InvalidParameter, SingularMatrix):
                cand = -np.inf
        if np.log(1.0 - rng_prop.random()) < cand - current:
            theta, current = prop, cand
            accepted += 1
        thetas[t], logliks[t] = theta, current
    return ChainState(thetas=thetas, logliks=logliks, accepted=accepted,
                      burn_in=burn_in)


def tune_proposal_scale(model, observed, init_unc, n_sims: int, seed,
                        start_scale=0.5, pilot_steps: int = 60,
                        target=(0.2, 0.4), max_rounds: int = 8,
                        summary_fn=None, search_box=None):
    """Double or halve the proposal scale until a pilot chain accepts 20-40%."""
    scale = float(start_scale)
    for round_idx in range(max_rounds):
        chain = mh_chain(model, observed, init_unc, pilot_steps, 0, n_sims,
                         scale, (seed, "pilot", round_idx),
                         summary_fn=summary_fn, search_box=search_box)
        rate = chain.acceptance_rate
        if target[0] <= rate <= target[1]:
            break
        scale = scale * (0.5 if rate < target[0] else 2.0)
    return scale


def _quadratic_design(thetas):
    count, d = thetas.shape
    cols = [np.ones(count)]
    cols.extend(thetas[:, j] for j in range(d))
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    cols.extend(thetas[:, i] * thetas[:, j] for i, j in pairs)
    return np.column_stack(cols), pairs


def sl_point_and_ci(chain: ChainState, level: float = 0.95):
    """Quadratic-regression point estimate plus chain-quantile intervals.

    Falls back to the best visited point when the fitted quadratic is not
    concave; interval endpoints are order statistics of the retained chain.
    """
    thetas, logliks = chain.retained()
    if thetas.shape[0] < 100:
        raise ValueError("need at least 100 retained chain points")
    d = thetas.shape[1]
    design, pairs = _quadratic_design(thetas)
    coef, _, rank, _ = np.linalg.lstsq(design, logliks, rcond=None)
    if rank < design.shape[1]:
        raise DegenerateFit("quadratic design matrix is rank-deficient")
    lin = coef[1: 1 + d]
    quad = np.zeros((d, d))
    for c, (i, j) in zip(coef[1 + d:], pairs):
        if i == j:
            quad[i, i] = c
        else:
            quad[i, j] = quad[j, i] = 0.5 * c
    eigs = np.linalg.eigvalsh(quad)
    if np.all(eigs < 0):
        point = np.linalg.solve(-2.0 * quad, lin)
    else:
        point = thetas[int(np.argmax(logliks))].copy()

    from .uncertainty import empirical_quantile
    alpha = 1.0 - level
    lower = np.array([empirical_quantile(thetas[:, j], alpha / 2.0) for j in range(d)])
    upper = np.array([empirical_quantile(thetas[:, j], 1.0 - alpha / 2.0) for j in range(d)])
    return point, np.column_stack([lower, upper])


def write_chain_csv(path, chain: ChainState):
    d = chain.thetas.shape[1]
    header = "step," + ",".join(f"theta{j + 1}" for j in range(d)) + ",loglik"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(chain.thetas.shape[0]):
            fh.write(f"{t}," + ",".join(f"{v:.10g}" for v in chain.thetas[t])
                     + f",{chain.logliks[t]:.10g}\n")
