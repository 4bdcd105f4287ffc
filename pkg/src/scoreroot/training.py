"""Reference tables and the two-stage structured score-matching training.

Stage one fits the per-datum score network by the implicit (integration by
parts) objective plus a curvature penalty that pushes the within-model
average of ``s s^T + grad_theta s`` toward zero.  Stage two fits a mean
network to the within-group averages of the trained score and subtracts it,
with a second penalty that keeps the debiased score's curvature structure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .errors import NoOracle, NonFiniteLoss
from .scorenet import (DebiasedScore, MlpMeanPart, MlpScorePart, MlpSpec,
                       ScoreNetwork)
from .simulators import GaussianSampler, UniformBox, sample_params, stream


@dataclass
class SingleTable:
    """Single-draw reference table: one observation per sampled parameter."""

    theta: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.theta.shape[0] != self.data.shape[0]:
            raise ValueError("theta and data row counts differ")

    @property
    def size(self):
        return self.theta.shape[0]


@dataclass
class GroupedTable:
    """Grouped reference table: a block of draws per sampled parameter."""

    theta: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.theta.shape[0] != self.data.shape[0]:
            raise ValueError("theta and data group counts differ")
        if self.data.ndim != 3 or self.data.shape[1] < 2:
            raise ValueError("grouped data must be (groups, group_size>=2, p)")

    @property
    def groups(self):
        return self.theta.shape[0]

    @property
    def group_size(self):
        return self.data.shape[1]


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay: float = 0.5
    plateau_patience: int = 10
    stop_patience: int = 10
    max_epochs: int = 400
    eval_min_steps: int = 200
    val_fraction: float = 1.0 / 6.0
    curve_path: str | None = None

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must be in (0, 1)")


@dataclass
class Diagnostics:
    """Grid maxima of the three score-quality errors with MC standard errors."""

    eps1: float | None
    eps1_se: float | None
    eps2: float
    eps2_se: float
    eps3: float
    eps3_se: float


def build_tables(model, dist, n_single, n_groups, group_size, seed):
    """Generate the single-draw and grouped reference tables for one run."""
    if n_single < 1 or n_groups < 1 or group_size < 1:
        raise ValueError("table sizes must be positive")
    rng_s = stream(seed, "table-single")
    theta_s = sample_params(dist, n_single, rng_s)
    data_s = model.simulate_batch(theta_s, rng_s)
    rng_g = stream(seed, "table-grouped")
    theta_g = sample_params(dist, n_groups, rng_g)
    rows = np.repeat(theta_g, group_size, axis=0)
    data_g = model.simulate_batch(rows, rng_g).reshape(n_groups, group_size, -1)
    return SingleTable(theta_s, data_s), GroupedTable(theta_g, data_g)


# ---------------------------------------------------------------------------
# loss evaluation (plain numpy; the on-tape builders below mirror these)

def sm_loss(net: ScoreNetwork, theta, data, dist) -> float:
    """Implicit score-matching loss averaged over a batch.

    Per row: ``|s|^2 + 2 s . grad log p(theta) + 2 tr(grad_theta s)``.
    """
    theta = np.atleast_2d(np.asarray(theta, float))
    data = np.atleast_2d(np.asarray(data, float))
    if theta.shape[0] == 0:
        raise ValueError("empty batch")
    d = theta.shape[1]
    inputs = np.hstack([theta, data])
    s = net.forward(inputs)
    jac = net.jacobian(inputs, range(d))
    trace = np.trace(jac, axis1=1, axis2=2)
    glogp = dist.log_density_gradient(theta)
    with np.errstate(invalid="ignore", over="ignore"):
        vals = (s * s).sum(axis=1) + 2.0 * (s * glogp).sum(axis=1) + 2.0 * trace
        loss = float(vals.mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss("implicit score-matching loss is not finite")
    return loss


def curvature_penalty(net: ScoreNetwork, theta_groups, data_groups) -> float:
    """Mean over groups of ``|avg(s s^T + grad_theta s)|_F^2``."""
    theta_groups = np.atleast_2d(np.asarray(theta_groups, float))
    data_groups = np.asarray(data_groups, float)
    if data_groups.ndim == 2:
        data_groups = data_groups[None]
    if data_groups.shape[1] < 2:
        raise ValueError("groups need at least 2 points")
    n_groups, m, p = data_groups.shape
    d = theta_groups.shape[1]
    total = 0.0
    group_chunk = max(1, 200_000 // m)
    for start in range(0, n_groups, group_chunk):
        theta = theta_groups[start: start + group_chunk]
        block = data_groups[start: start + group_chunk]
        rows = theta.shape[0] * m
        inputs = np.hstack([np.repeat(theta, m, axis=0), block.reshape(rows, p)])
        s = net.forward(inputs).reshape(-1, m, d)
        jac = net.jacobian(inputs, range(d)).reshape(-1, m, d, d)
        mats = np.einsum("gmi,gmj->gij", s, s) / m + jac.mean(axis=1)
        total += float((mats * mats).sum())
    penalty = total / n_groups
    if not np.isfinite(penalty):
        raise NonFiniteLoss("curvature penalty is not finite")
    return penalty


def mean_fit_loss(net: ScoreNetwork, theta, targets, lambda2: float) -> float:
    """Mean-matching loss plus the debias curvature-preservation penalty."""
    theta = np.atleast_2d(np.asarray(theta, float))
    targets = np.atleast_2d(np.asarray(targets, float))
    d = theta.shape[1]
    h = net.forward(theta)
    fit = ((h - targets) ** 2).sum(axis=1)
    if lambda2 > 0:
        jac = net.jacobian(theta, range(d))
        hh = h[:, :, None] * h[:, None, :]
        mh = targets[:, :, None] * h[:, None, :]
        hm = h[:, :, None] * targets[:, None, :]
        mats = hh - jac - mh - hm
        fit = fit + lambda2 * (mats ** 2).sum(axis=(1, 2))
    loss = float(fit.mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss("mean-matching loss is not finite")
    return loss


# ---------------------------------------------------------------------------
# on-tape builders used by the optimizer

def _sweep_seed(tape, d_theta, input_dim):
    seed = np.zeros((d_theta, 1, input_dim))
    for j in range(d_theta):
        seed[j, 0, j] = 1.0
    return tape.constant(seed)


def _score_batch_graph(tape, bound, theta, data, d):
    inputs = np.hstack([theta, data]) if data is not None else theta
    x = tape.constant(inputs)
    out = bound.apply(x)
    dual = bound.apply(dc.Dual(x, _sweep_seed(tape, d, inputs.shape[1])))
    return out, dual.tangent


def _sm_loss_graph(tape, bound, theta, data, glogp, d):
    out, tangent = _score_batch_graph(tape, bound, theta, data, d)
    per = dc.vsum(dc.square(out), axis=1)
    per = dc.add(per, dc.mul(dc.vsum(dc.mul(out, tape.constant(glogp)), axis=1),
                             tape.constant(2.0)))
    per = dc.add(per, dc.mul(dc.trace_from_sweeps(tangent), tape.constant(2.0)))
    return dc.vmean(per)


def _curvature_graph(tape, bound, theta, block, d):
    rows = block.shape[0]
    out, tangent = _score_batch_graph(
        tape, bound, np.broadcast_to(theta, (rows, d)), block, d)
    ss = dc.mul(dc.matmul(dc.transpose(out), out), tape.constant(1.0 / rows))
    mat = dc.add(ss, dc.vmean(tangent, axis=1))
    return dc.vsum(dc.square(mat))


def _mean_loss_graph(tape, bound, theta, targets, d, lambda2):
    x = tape.constant(theta)
    h = bound.apply(x)
    diff = dc.sub(h, tape.constant(targets))
    per = dc.vsum(dc.square(diff), axis=1)
    if lambda2 > 0:
        dual = bound.apply(dc.Dual(x, _sweep_seed(tape, d, d)))
        tangent = dual.tangent
        tgt = tape.constant(targets)
        pen = None
        for k in range(d):
            hk = dc.col(h, k)
            term = dc.sub(dc.sub(dc.sub(dc.mul(h, hk), dc.sweep(tangent, k)),
                                 dc.mul(tgt, hk)),
                          dc.mul(h, dc.col(tgt, k)))
            part = dc.vsum(dc.square(term), axis=1)
            pen = part if pen is None else dc.add(pen, part)
        per = dc.add(per, dc.mul(pen, tape.constant(lambda2)))
    return dc.vmean(per)


class _Adam:
    def __init__(self, dim, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def _split(count, fraction, rng):
    perm = rng.permutation(count)
    n_val = max(1, int(np.floor(count * fraction)))
    return perm[n_val:], perm[:n_val]


def _append_curve(path, tag, epoch, train_loss, val_loss, penalty, lr):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(f"{tag},{epoch},{train_loss:.6g},{val_loss:.6g},{penalty:.6g},{lr:.6g}\n")


def _optimize(init_params, epoch_batches, loss_grad, validate, config: TrainConfig,
              rng, tag=""):
    """Shared minibatch loop: Adam, plateau decay, best-validation checkpoint."""
    params = init_params.copy()
    adam = _Adam(params.size)
    lr = config.lr_start
    best_params = params.copy()
    best_val = np.inf
    bad_evals = 0
    aborted = False
    eval_every = 1
    for epoch in range(config.max_epochs):
        epoch_losses = []
        try:
            batches = epoch_batches(rng)
            if epoch == 0:
                # validation plateaus are judged per evaluation, so space the
                # evaluations to cover a minimum number of optimizer steps
                eval_every = max(1, round(config.eval_min_steps / max(len(batches), 1)))
            for batch in batches:
                loss, grad = loss_grad(params, batch)
                params = adam.step(params, grad, lr)
                epoch_losses.append(loss)
        except NonFiniteLoss:
            aborted = True
        if not aborted and (epoch + 1) % eval_every and epoch != config.max_epochs - 1:
            continue
        try:
            val, val_pen = validate(params)
        except NonFiniteLoss:
            aborted = True
            val, val_pen = np.inf, np.inf
        if val < best_val:
            best_val = val
            best_params = params.copy()
            bad_evals = 0
        else:
            bad_evals += 1
        _append_curve(config.curve_path, tag, epoch,
                      float(np.mean(epoch_losses)) if epoch_losses else np.nan,
                      val, val_pen, lr)
        if aborted:
            warnings.warn(f"non-finite loss during {tag or 'training'}; "
                          "keeping best checkpoint")
            break
        # decay on plateau; each decay opens a fresh patience window, and the
        # run ends once the floor rate has had a full window without progress
        if lr > config.lr_floor and bad_evals >= config.plateau_patience:
            lr = max(lr * config.lr_decay, config.lr_floor)
            bad_evals = 0
        elif lr <= config.lr_floor and bad_evals >= config.stop_patience:
            break
    return best_params, best_val


def train_score(single: SingleTable, grouped: GroupedTable, spec: MlpSpec,
                dist, config: TrainConfig, seed,
                data_transform=None) -> ScoreNetwork:
    """Fit the per-datum score network on the reference tables.

    ``data_transform`` applies the model's score-input featurization to both
    tables before training; the fitted network then always consumes
    transformed data.
    """
    d = single.theta.shape[1]
    single_data = (data_transform(single.data) if data_transform is not None
                   else single.data)
    grouped_data = (data_transform(grouped.data) if data_transform is not None
                    else grouped.data)
    rng = stream(seed, "train-score")
    train_idx, val_idx = _split(single.size, config.val_fraction, rng)
    gtrain_idx, gval_idx = _split(grouped.groups, config.val_fraction, rng)

    inputs_all = np.hstack([single.theta, single_data])
    shift = inputs_all[train_idx].mean(axis=0)
    scale = inputs_all[train_idx].std(axis=0)
    scale[scale < 1e-8] = 1.0

    net = ScoreNetwork.initialize(spec, rng)
    net.set_standardization(shift, scale)
    glogp_all = dist.log_density_gradient(single.theta)

    val_theta, val_data = single.theta[val_idx], single_data[val_idx]
    vg_theta, vg_data = grouped.theta[gval_idx], grouped_data[gval_idx]

    def epoch_batches(rng):
        order = rng.permutation(train_idx)
        n_steps = (order.size + config.batch_size - 1) // config.batch_size
        pair = rng.integers(0, gtrain_idx.size, size=n_steps)
        return [(order[i * config.batch_size: (i + 1) * config.batch_size],
                 gtrain_idx[pair[i]]) for i in range(n_steps)]

    def loss_grad(params, batch):
        idx, gidx = batch
        net.set_params(params)
        tape = dc.Tape()
        bound = net.bind(tape)
        loss = _sm_loss_graph(tape, bound, single.theta[idx], single_data[idx],
                              glogp_all[idx], d)
        if config.lambda1 > 0:
            pen = _curvature_graph(tape, bound, grouped.theta[gidx],
                                   grouped_data[gidx], d)
            loss = dc.add(loss, dc.mul(pen, tape.constant(config.lambda1)))
        value = float(loss.value)
        if not np.isfinite(value):
            raise NonFiniteLoss("training step loss is not finite")
        return value, dc.grad_wrt_params(loss, bound.params)

    def validate(params):
        net.set_params(params)
        val = sm_loss(net, val_theta, val_data, dist)
        pen = curvature_penalty(net, vg_theta, vg_data) if config.lambda1 > 0 else 0.0
        return val + config.lambda1 * pen, pen

    best, _ = _optimize(net.params, epoch_batches, loss_grad, validate, config,
                        rng, tag="score")
    net.set_params(best)
    return net.freeze()


def group_score_means(score_net: ScoreNetwork, grouped: GroupedTable,
                      data_transform=None, chunk: int = 200_000) -> np.ndarray:
    """Within-group averages of the trained score, the debias regression target."""
    n_groups, m = grouped.data.shape[:2]
    d = grouped.theta.shape[1]
    data = (data_transform(grouped.data) if data_transform is not None
            else grouped.data)
    flat_inputs = np.hstack([np.repeat(grouped.theta, m, axis=0),
                             data.reshape(n_groups * m, data.shape[-1])])
    outs = []
    for start in range(0, flat_inputs.shape[0], chunk):
        outs.append(score_net.forward(flat_inputs[start: start + chunk]))
    return np.vstack(outs).reshape(n_groups, m, d).mean(axis=1)


def train_mean(score_net: ScoreNetwork, grouped: GroupedTable, spec: MlpSpec,
               config: TrainConfig, seed, data_transform=None) -> ScoreNetwork:
    """Fit the mean network to the within-group score averages."""
    if not score_net.frozen:
        raise ValueError("score network must be frozen before debiasing")
    d = grouped.theta.shape[1]
    if spec.input_dim != d or spec.output_dim != d:
        raise ValueError("mean network must map theta_dim to theta_dim")
    targets = group_score_means(score_net, grouped, data_transform=data_transform)
    rng = stream(seed, "train-mean")
    train_idx, val_idx = _split(grouped.groups, config.val_fraction, rng)

    shift = grouped.theta[train_idx].mean(axis=0)
    scale = grouped.theta[train_idx].std(axis=0)
    scale[scale < 1e-8] = 1.0
    net = ScoreNetwork.initialize(spec, rng)
    net.set_standardization(shift, scale)

    def epoch_batches(rng):
        order = rng.permutation(train_idx)
        return [order[start: start + config.batch_size]
                for start in range(0, order.size, config.batch_size)]

    def loss_grad(params, idx):
        net.set_params(params)
        tape = dc.Tape()
        bound = net.bind(tape)
        loss = _mean_loss_graph(tape, bound, grouped.theta[idx], targets[idx],
                                d, config.lambda2)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NonFiniteLoss("training step loss is not finite")
        return value, dc.grad_wrt_params(loss, bound.params)

    def validate(params):
        net.set_params(params)
        loss = mean_fit_loss(net, grouped.theta[val_idx], targets[val_idx],
                             config.lambda2)
        return loss, 0.0

    best, _ = _optimize(net.params, epoch_batches, loss_grad, validate, config,
                        rng, tag="mean")
    net.set_params(best)
    return net.freeze()


def train_debiased(single: SingleTable, grouped: GroupedTable, score_spec: MlpSpec,
                   mean_spec: MlpSpec, dist, config: TrainConfig, seed,
                   mean_config: TrainConfig | None = None,
                   data_transform=None) -> DebiasedScore:
    """Run both training stages and assemble the debiased score."""
    d = single.theta.shape[1]
    score_net = train_score(single, grouped, score_spec, dist, config, seed,
                            data_transform=data_transform)
    mean_net = train_mean(score_net, grouped, mean_spec,
                          mean_config if mean_config is not None else config, seed,
                          data_transform=data_transform)
    return DebiasedScore(MlpScorePart(score_net, d, transform=data_transform),
                         MlpMeanPart(mean_net))


# ---------------------------------------------------------------------------
# full estimation rounds and the two-round refinement

@dataclass
class RunSettings:
    """Everything one estimation round needs beyond the model and data."""

    n_single: int
    n_groups: int
    group_size: int
    score_hidden: tuple = (32, 32)
    mean_hidden: tuple = (32, 32)
    score_train: TrainConfig = None
    mean_train: TrainConfig = None
    score_train_round2: TrainConfig = None
    mean_train_round2: TrainConfig = None
    tol: float = 1e-6
    max_iter: int = 200
    trust_factor: float = 10.0
    round2_inflation: float = 3.0
    use_analytic_score: bool = False

    def __post_init__(self):
        if self.score_train is None:
            self.score_train = TrainConfig()
        if self.mean_train is None:
            self.mean_train = TrainConfig(batch_size=32, max_epochs=800)
        # the refinement round samples parameters from a narrow Gaussian whose
        # log-density gradient makes the implicit loss far noisier per sample,
        # so it defaults to larger batches at the same step budget
        if self.score_train_round2 is None:
            self.score_train_round2 = replace(
                self.score_train,
                batch_size=max(4 * self.score_train.batch_size, 256),
                max_epochs=2 * self.score_train.max_epochs)
        if self.mean_train_round2 is None:
            self.mean_train_round2 = self.mean_train


@dataclass
class RoundArtifacts:
    dscore: DebiasedScore
    theta_hat: np.ndarray
    result: object
    sandwich_cov: np.ndarray
    dist: object
    warning: str | None = None


def run_round(model, dist, observed, settings: RunSettings, seed,
              theta0=None, refinement: bool = False) -> RoundArtifacts:
    """Train (or wrap the analytic score), solve for the root, and attach
    the sandwich covariance."""
    from . import estimator, uncertainty

    observed = np.atleast_2d(np.asarray(observed, float))
    if observed.shape[0] < 1:
        raise ValueError("observed dataset is empty")
    if settings.use_analytic_score:
        if model.analytic is None:
            raise NoOracle(f"model {model.name!r} has no analytic score")
        dscore = DebiasedScore(model.analytic)
    else:
        single, grouped = build_tables(model, dist, settings.n_single,
                                       settings.n_groups, settings.group_size,
                                       (seed, "tables"))
        d = model.theta_dim
        score_spec = MlpSpec(input_dim=d + model.feature_dim, output_dim=d,
                             hidden=tuple(settings.score_hidden))
        mean_spec = MlpSpec(input_dim=d, output_dim=d,
                            hidden=tuple(settings.mean_hidden))
        score_cfg = settings.score_train_round2 if refinement else settings.score_train
        mean_cfg = settings.mean_train_round2 if refinement else settings.mean_train
        dscore = train_debiased(single, grouped, score_spec, mean_spec, dist,
                                score_cfg, (seed, "fit"), mean_config=mean_cfg,
                                data_transform=model.score_features)
    if theta0 is None:
        theta0 = estimator.initialize(model, dist, "random", seed=(seed, "init"))
    diameter = dist.diameter()
    box = dist if isinstance(dist, UniformBox) else getattr(dist, "support_box", None)
    result = estimator.find_root(
        dscore, observed, theta0, tol=settings.tol, max_iter=settings.max_iter,
        trust_radius=settings.trust_factor * diameter,
        max_step=diameter / 20.0,
        bounds=box.bounds if box is not None else None)
    sand = uncertainty.sandwich(dscore, result.theta, observed)
    return RoundArtifacts(dscore=dscore, theta_hat=result.theta, result=result,
                          sandwich_cov=sand, dist=dist)


def _round2_dist(model, broad_dist, artifacts: RoundArtifacts, n_obs: int,
                 inflation: float):
    cov = (inflation ** 2) * artifacts.sandwich_cov / n_obs
    cov = 0.5 * (cov + cov.T)
    floor = 1e-10 * max(np.max(np.abs(cov)), 1e-12)
    eigvals, eigvecs = np.linalg.eigh(cov)
    cov = eigvecs @ np.diag(np.maximum(eigvals, floor)) @ eigvecs.T
    box = broad_dist if isinstance(broad_dist, UniformBox) else getattr(
        broad_dist, "support_box", None)
    return GaussianSampler(mean=tuple(artifacts.theta_hat),
                           cov=tuple(map(tuple, cov)), support_box=box)


def two_round(model, dist, observed, settings: RunSettings, seed):
    """Broad round, then a refit with sampling concentrated at the estimate.

    The second round samples parameters from a Gaussian centered at the
    round-one estimate with covariance inflated from its sandwich matrix; if
    the second round fails, round-one artifacts are returned with a warning.
    """
    from .errors import Diverged, MaxIterations, SingularMatrix, TooManyFailures

    observed = np.atleast_2d(np.asarray(observed, float))
    round1 = run_round(model, dist, observed, settings, (seed, "round1"))
    dist2 = _round2_dist(model, dist, round1, observed.shape[0],
                         settings.round2_inflation)
    try:
        round2 = run_round(model, dist2, observed, settings, (seed, "round2"),
                           theta0=round1.theta_hat, refinement=True)
    except (Diverged, MaxIterations, SingularMatrix, TooManyFailures,
            NonFiniteLoss) as exc:
        round2 = RoundArtifacts(dscore=round1.dscore, theta_hat=round1.theta_hat,
                                result=round1.result,
                                sandwich_cov=round1.sandwich_cov,
                                dist=dist2,
                                warning=f"round 2 failed ({exc}); kept round 1")
    return round1, round2


# ---------------------------------------------------------------------------
# score-quality diagnostics

_HALTON_PRIMES = (2, 3, 5, 7, 11, 13, 17)


def _halton(count, dim):
    if dim > len(_HALTON_PRIMES):
        raise ValueError("halton grid supports up to 7 dimensions")
    out = np.empty((count, dim))
    for j in range(dim):
        base = _HALTON_PRIMES[j]
        for i in range(count):
            f, r, k = 1.0, 0.0, i + 1
            while k > 0:
                f /= base
                r += f * (k % base)
                k //= base
            out[i, j] = r
    return out


def _batched_stat(values, stat, batches=10):
    """Value of ``stat`` on all draws plus a batched Monte Carlo SE."""
    full = stat(values)
    size = values.shape[0] // batches
    if size < 1:
        return full, np.nan
    subs = [stat(values[i * size: (i + 1) * size]) for i in range(batches)]
    return full, float(np.std(subs) / np.sqrt(batches))


def estimate_diagnostics(dscore: DebiasedScore, model, center, radius,
                         n_grid: int = 32, mc_draws: int = 2000, seed=0,
                         want_score_error: bool | None = None) -> Diagnostics:
    """Grid maxima of the three score-quality errors around ``center``.

    The score error (against the exact score) needs an analytic oracle on the
    model; the curvature and mean errors are pure Monte Carlo.
    """
    center = np.asarray(center, float)
    d = center.size
    if want_score_error is None:
        want_score_error = model.analytic is not None
    if want_score_error and model.analytic is None:
        raise NoOracle(f"model {model.name!r} has no analytic score")
    grid = center + radius * (2.0 * _halton(n_grid, d) - 1.0) / np.sqrt(d)

    eps1 = eps1_se = None
    if want_score_error:
        rng = stream(seed, "diag-eps1")
        draws = model.simulate_dataset(center, mc_draws, rng)
        best = (-np.inf, np.nan)
        for theta in grid:
            gap = dscore.per_datum(theta, draws) - model.analytic.per_datum(theta, draws)
            stat, se = _batched_stat((gap * gap).sum(axis=1),
                                     lambda v: float(np.mean(v)))
            if stat > best[0]:
                best = (stat, se)
        eps1, eps1_se = best

    best2 = (-np.inf, np.nan)
    best3 = (-np.inf, np.nan)
    for i, theta in enumerate(grid):
        rng = stream(seed, "diag-grid", i)
        draws = model.simulate_dataset(theta, mc_draws, rng)
        s = dscore.per_datum(theta, draws)
        jac = dscore.per_datum_jacobian(theta, draws)
        combo = s[:, :, None] * s[:, None, :] + jac
        stat2, se2 = _batched_stat(combo, lambda v: float((v.mean(axis=0) ** 2).sum()))
        stat3, se3 = _batched_stat(s, lambda v: float((v.mean(axis=0) ** 2).sum()))
        if stat2 > best2[0]:
            best2 = (stat2, se2)
        if stat3 > best3[0]:
            best3 = (stat3, se3)
    return Diagnostics(eps1, eps1_se, best2[0], best2[1], best3[0], best3[1])
