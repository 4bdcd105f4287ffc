"""Benchmark data-generating processes and their sampling distributions.

Every simulator is deterministic given an explicit stream: randomness comes
from a counter-based Philox generator keyed by an arbitrary path of seed
components, so parallel workers never share streams.  Gaussian draws use
Box-Muller and exponentials the inverse CDF, keeping the primitive draws
reproducible and easy to reason about.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, ParseError, TooFewRows
from .scorenet import AnalyticScore

GANDK_C = 0.8


# ---------------------------------------------------------------------------
# seeded streams and primitive draws

def _flatten_key(key):
    for part in key:
        if isinstance(part, (tuple, list)):
            yield from _flatten_key(part)
        elif isinstance(part, (int, np.integer)):
            yield int(part) & 0xFFFFFFFFFFFFFFFF
        else:
            yield zlib.crc32(str(part).encode())


def stream(*key) -> np.random.Generator:
    """Philox generator keyed by a path of integers and/or labels.

    Nested tuples flatten, so derived seeds like ``(seed, "round2")`` compose
    without losing entropy from the base seed.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(list(_flatten_key(key)))))


def normals(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normals via Box-Muller on uniform draws."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape)) if shape else 1
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)
    u2 = rng.random(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                        radius * np.sin(2.0 * np.pi * u2)])[:n]
    return z.reshape(shape)


def exponentials(rng: np.random.Generator, rate, size) -> np.ndarray:
    """Exp(rate) via inverse CDF; ``rate`` may broadcast against ``size``."""
    u = 1.0 - rng.random(size)
    return -np.log(u) / rate


# ---------------------------------------------------------------------------
# sampling distributions over the unconstrained parameter space

@dataclass(frozen=True)
class UniformBox:
    """Uniform sampling distribution on an axis-aligned box."""

    lo: tuple
    hi: tuple
    kind: str = field(default="uniform-box", init=False)

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box bounds must satisfy lo < hi coordinatewise")

    @property
    def dim(self):
        return len(self.lo)

    @property
    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def sample(self, rng, count):
        lo, hi = self.bounds
        return lo + (hi - lo) * rng.random((count, self.dim))

    def log_density_gradient(self, theta):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def contains(self, theta):
        lo, hi = self.bounds
        theta = np.asarray(theta, float)
        return bool(np.all(theta >= lo) and np.all(theta <= hi))

    def diameter(self):
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class GaussianSampler:
    """Gaussian sampling distribution, optionally truncated to a support box.

    The gradient of the log density is the untruncated Gaussian score; the
    truncation only rejects draws outside the simulator's valid region.
    """

    mean: tuple
    cov: tuple
    support_box: UniformBox | None = None
    kind: str = field(default="gaussian", init=False)

    @property
    def dim(self):
        return len(self.mean)

    def _chol(self):
        return np.linalg.cholesky(np.asarray(self.cov, float))

    def sample(self, rng, count):
        mean = np.asarray(self.mean, float)
        chol = self._chol()
        out = np.empty((count, self.dim))
        filled = 0
        while filled < count:
            need = count - filled
            draws = mean + normals(rng, (need, self.dim)) @ chol.T
            if self.support_box is None:
                keep = draws
            else:
                lo, hi = self.support_box.bounds
                mask = np.all((draws >= lo) & (draws <= hi), axis=1)
                keep = draws[mask]
            out[filled: filled + keep.shape[0]] = keep
            filled += keep.shape[0]
        return out

    def log_density_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        mean = np.asarray(self.mean, float)
        prec = np.linalg.inv(np.asarray(self.cov, float))
        if theta.ndim == 1:
            return -prec @ (theta - mean)
        return -(theta - mean) @ prec.T

    def diameter(self):
        sd = np.sqrt(np.diag(np.asarray(self.cov, float)))
        return float(np.linalg.norm(6.0 * sd))


def sample_params(dist, count, rng) -> np.ndarray:
    """i.i.d. parameter draws from a sampling distribution."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return dist.sample(rng, count)


# ---------------------------------------------------------------------------
# reparameterizations

@dataclass(frozen=True)
class Reparam:
    """Bijection between the natural and unconstrained parameter scales."""

    to_natural: callable
    to_unconstrained: callable


_identity_reparam = Reparam(lambda t: np.asarray(t, float).copy(),
                            lambda t: np.asarray(t, float).copy())


# ---------------------------------------------------------------------------
# simulator cores (deterministic maps from raw draws; used directly in tests)

TOY_CHOL = np.linalg.cholesky(np.array([[1.0, 0.2], [0.2, 1.0]]))


def toy_from_normals(theta, raw):
    """X = exp(Z1) + Z2 with Z = theta + chol @ raw, rowwise."""
    theta = np.atleast_2d(np.asarray(theta, float))
    raw = np.atleast_2d(np.asarray(raw, float))
    z = theta + raw @ TOY_CHOL.T
    return (np.exp(z[:, 0]) + z[:, 1]).reshape(-1, 1)


def mg1_recursion(service, arrival):
    """Inter-departure times from service and inter-arrival draws, rowwise."""
    service = np.atleast_2d(np.asarray(service, float))
    arrival = np.atleast_2d(np.asarray(arrival, float))
    cum_arrival = np.cumsum(arrival, axis=1)
    out = np.empty_like(service)
    cum_out = np.zeros(service.shape[0])
    for k in range(service.shape[1]):
        out[:, k] = service[:, k] + np.maximum(0.0, cum_arrival[:, k] - cum_out)
        cum_out += out[:, k]
    return out


def gandk_quantile(z, a, b, g, k):
    """Quantile transform Q(z) = A + B*(1 + c*tanh(g z / 2)) * z * (1 + z^2)^k."""
    z = np.asarray(z, float)
    return a + b * (1.0 + GANDK_C * np.tanh(g * z / 2.0)) * z * (1.0 + z * z) ** k


def volatility_path_summary(theta_unc, raw, horizon=1.0):
    """(max, min, close) per coordinate of an Euler path from the raw normals.

    ``raw`` has shape ``(rows, steps, 2)``; paths start at zero and the
    extremes include the starting point.
    """
    theta = np.atleast_2d(np.asarray(theta_unc, float))
    raw = np.asarray(raw, float)
    if raw.ndim == 2:
        raw = raw[None]
    rows, steps, _ = raw.shape
    mu = theta[:, 0:2]
    sig1, sig2 = np.exp(theta[:, 2]), np.exp(theta[:, 3])
    rho = np.tanh(theta[:, 4])
    dt = horizon / steps
    sqdt = np.sqrt(dt)
    x = np.zeros((rows, 2))
    hi = np.zeros((rows, 2))
    lo = np.zeros((rows, 2))
    for k in range(steps):
        z1, z2 = raw[:, k, 0], raw[:, k, 1]
        inc1 = sig1 * z1
        inc2 = rho * sig2 * z1 + sig2 * np.sqrt(1.0 - rho ** 2) * z2
        x = x + mu * dt + sqdt * np.column_stack([inc1, inc2])
        hi = np.maximum(hi, x)
        lo = np.minimum(lo, x)
    return np.column_stack([hi[:, 0], lo[:, 0], x[:, 0], hi[:, 1], lo[:, 1], x[:, 1]])


# ---------------------------------------------------------------------------
# models

@dataclass
class SimulatorModel:
    """One benchmark problem: forward map, scales, defaults, optional oracle.

    ``score_features`` is an optional parameter-free bijection applied to the
    data before it enters the score network; such transforms leave the
    parameter score unchanged (their Jacobian does not involve theta) but can
    make heavy-tailed observations far easier to learn from.
    """

    name: str
    theta_dim: int
    data_dim: int
    reparam: Reparam
    default_dist: object
    simulate_batch: callable
    default_theta_star_unc: np.ndarray | None = None
    default_n: int = 500
    to_report: callable = None
    report_jacobian: callable = None
    analytic: AnalyticScore | None = None
    exact_mle: callable = None
    score_features: callable = None
    feature_dim: int | None = None

    def __post_init__(self):
        if self.to_report is None:
            self.to_report = lambda t: np.asarray(t, float).copy()
            self.report_jacobian = lambda t: np.eye(self.theta_dim)
        if self.feature_dim is None:
            self.feature_dim = self.data_dim

    def simulate(self, theta_unc, rng) -> np.ndarray:
        """One observation at a single unconstrained parameter."""
        theta = np.asarray(theta_unc, float).reshape(1, -1)
        return self.simulate_batch(theta, rng)[0]

    def simulate_dataset(self, theta_unc, n, rng) -> np.ndarray:
        theta = np.asarray(theta_unc, float).reshape(1, -1)
        rows = np.broadcast_to(theta, (n, self.theta_dim))
        return self.simulate_batch(rows, rng)


def toy_model() -> SimulatorModel:
    """Nonlinear Gaussian toy problem: X = exp(Z1) + Z2, correlated (Z1, Z2)."""

    def simulate_batch(rows, rng):
        return toy_from_normals(rows, normals(rng, (rows.shape[0], 2)))

    return SimulatorModel(
        name="toy", theta_dim=2, data_dim=1,
        reparam=_identity_reparam,
        default_dist=UniformBox((-5.0, -5.0), (5.0, 5.0)),
        simulate_batch=simulate_batch,
        default_theta_star_unc=np.array([1.0, -2.0]),
        default_n=500,
    )


def _mg1_validate(rows):
    if np.any(rows[:, 0] <= 0) or np.any(rows[:, 1] <= 0) or np.any(rows[:, 2] <= 0):
        raise InvalidParameter("need 0 < theta1 < theta2 and theta3 > 0")


def _mg1_features(data):
    """Log inter-departure times plus the sequence minimum.

    The log tames the heavy right tail; the minimum exposes the hard lower
    bound that carries most of the information about the service-time floor.
    """
    logd = np.log(np.asarray(data, float))
    return np.concatenate([logd, logd.min(axis=-1, keepdims=True)], axis=-1)


def mg1_model() -> SimulatorModel:
    """Single-server queue; observations are sequences of 5 inter-departure times.

    Works internally on (theta1, theta2 - theta1, theta3) so the sampling box
    enforces positivity of the service-time window and the arrival rate.
    """

    def to_natural(eta):
        eta = np.asarray(eta, float)
        return np.array([eta[0], eta[0] + eta[1], eta[2]])

    def to_unconstrained(theta):
        theta = np.asarray(theta, float)
        return np.array([theta[0], theta[1] - theta[0], theta[2]])

    def simulate_batch(rows, rng):
        rows = np.asarray(rows, float)
        _mg1_validate(rows)
        t1 = rows[:, 0:1]
        t2 = t1 + rows[:, 1:2]
        rate = rows[:, 2:3]
        service = t1 + (t2 - t1) * rng.random((rows.shape[0], 5))
        arrival = exponentials(rng, rate, (rows.shape[0], 5))
        return mg1_recursion(service, arrival)

    def to_report(eta):
        return to_natural(eta)

    def report_jacobian(eta):
        return np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    return SimulatorModel(
        name="mg1", theta_dim=3, data_dim=5,
        reparam=Reparam(to_natural, to_unconstrained),
        default_dist=UniformBox((0.0, 0.01, 0.01), (10.0, 10.0, 0.5)),
        simulate_batch=simulate_batch,
        default_theta_star_unc=np.array([1.0, 4.0, 0.2]),
        default_n=500,
        to_report=to_report,
        report_jacobian=report_jacobian,
        score_features=_mg1_features,
        feature_dim=6,
    )


def gandk_model() -> SimulatorModel:
    """g-and-k quantile distribution; unconstrained scale is (A, log B, g, k)."""

    def to_natural(eta):
        eta = np.asarray(eta, float)
        return np.array([eta[0], np.exp(eta[1]), eta[2], eta[3]])

    def to_unconstrained(theta):
        theta = np.asarray(theta, float)
        if theta[1] <= 0 or theta[3] <= -0.5:
            raise InvalidParameter("need B > 0 and k > -0.5")
        return np.array([theta[0], np.log(theta[1]), theta[2], theta[3]])

    def simulate_batch(rows, rng):
        rows = np.asarray(rows, float)
        if np.any(rows[:, 3] <= -0.5):
            raise InvalidParameter("need k > -0.5")
        z = normals(rng, rows.shape[0])
        q = gandk_quantile(z, rows[:, 0], np.exp(rows[:, 1]), rows[:, 2], rows[:, 3])
        return q.reshape(-1, 1)

    def to_report(eta):
        return to_natural(eta)

    def report_jacobian(eta):
        jac = np.eye(4)
        jac[1, 1] = np.exp(np.asarray(eta, float)[1])
        return jac

    return SimulatorModel(
        name="gandk", theta_dim=4, data_dim=1,
        reparam=Reparam(to_natural, to_unconstrained),
        default_dist=UniformBox((-1.0, -2.0, -5.0, 0.0), (1.0, 1.0, 5.0, 0.5)),
        simulate_batch=simulate_batch,
        default_theta_star_unc=np.array([0.0, np.log(0.7), -0.5, 0.3]),
        default_n=2000,
        to_report=to_report,
        report_jacobian=report_jacobian,
    )


def volatility_model(steps: int = 1000, horizon: float = 1.0) -> SimulatorModel:
    """Two-asset Brownian log-price model observed through (high, low, close).

    Path resolution and horizon are configurable; reporting stays on the
    unconstrained scale (mu1, mu2, log sig1, log sig2, atanh rho).
    """

    def to_natural(theta):
        theta = np.asarray(theta, float)
        return np.array([theta[0], theta[1], np.exp(theta[2]), np.exp(theta[3]),
                         np.tanh(theta[4])])

    def to_unconstrained(nat):
        nat = np.asarray(nat, float)
        if nat[2] <= 0 or nat[3] <= 0 or abs(nat[4]) >= 1:
            raise InvalidParameter("need sigmas > 0 and |rho| < 1")
        return np.array([nat[0], nat[1], np.log(nat[2]), np.log(nat[3]),
                         np.arctanh(nat[4])])

    def simulate_batch(rows, rng):
        rows = np.asarray(rows, float)
        chunk = max(1, int(4_000_000 / max(steps, 1)))
        parts = []
        for start in range(0, rows.shape[0], chunk):
            sub = rows[start: start + chunk]
            raw = normals(rng, (sub.shape[0], steps, 2))
            parts.append(volatility_path_summary(sub, raw, horizon=horizon))
        return np.vstack(parts)

    return SimulatorModel(
        name="volatility", theta_dim=5, data_dim=6,
        reparam=Reparam(to_natural, to_unconstrained),
        default_dist=UniformBox((-3.0, -3.0, -3.0, -3.0, -3.0),
                                (3.0, 3.0, 2.0, 2.0, 3.0)),
        simulate_batch=simulate_batch,
        default_theta_star_unc=np.array([0.0, 0.0, 0.0, 0.0, np.arctanh(0.5)]),
        default_n=1000,
    )


def analytic_gaussian_model() -> SimulatorModel:
    """X ~ N(theta, 1) with exact score, Jacobian, and MLE; the test oracle."""

    def simulate_batch(rows, rng):
        rows = np.asarray(rows, float)
        return rows[:, 0:1] + normals(rng, (rows.shape[0], 1))

    analytic = AnalyticScore(
        theta_dim=1, data_dim=1,
        score_fn=lambda theta, data: np.atleast_2d(data) - theta[0],
        jac_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1, 1), -1.0),
    )

    return SimulatorModel(
        name="analytic-gaussian", theta_dim=1, data_dim=1,
        reparam=_identity_reparam,
        default_dist=UniformBox((-4.0,), (4.0,)),
        simulate_batch=simulate_batch,
        default_theta_star_unc=np.array([0.0]),
        default_n=500,
        analytic=analytic,
        exact_mle=lambda data: np.array([float(np.mean(data))]),
    )


MODEL_BUILDERS = {
    "toy": toy_model,
    "mg1": mg1_model,
    "gandk": gandk_model,
    "volatility": volatility_model,
    "analytic-gaussian": analytic_gaussian_model,
}


def make_model(name: str, **kwargs) -> SimulatorModel:
    if name not in MODEL_BUILDERS:
        raise ValueError(f"unknown model {name!r}; have {sorted(MODEL_BUILDERS)}")
    return MODEL_BUILDERS[name](**kwargs)


# ---------------------------------------------------------------------------
# observed-dataset CSV interface: headerless, one observation per row

def write_dataset_csv(path, data):
    data = np.atleast_2d(np.asarray(data, float))
    with open(path, "w") as fh:
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_dataset_csv(path, min_rows: int = 1) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise ParseError(f"line {lineno}: cannot parse {line!r}", line=lineno)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"line {lineno}: expected {width} columns", line=lineno)
            if not all(np.isfinite(v) for v in vals):
                raise ParseError(f"line {lineno}: non-finite value", line=lineno)
            rows.append(vals)
    if len(rows) < min_rows:
        raise TooFewRows(f"{len(rows)} rows, need at least {min_rows}")
    return np.asarray(rows, dtype=float)
