"""Experiment orchestration: replicated benchmark runs and real-data fits.

A benchmark run repeats the full pipeline (simulate observed data, train,
estimate, build confidence sets) over seeded replicates and aggregates
per-parameter errors plus per-method coverage and width.  All metrics are
reported on each model's reporting scale (natural parameters for the queue
and quantile models, the training scale elsewhere).
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import uncertainty
from .errors import (ConfigError, Diverged, MaxIterations, ParseError,
                     SingularMatrix, TooFewRows, TooManyFailures)
from .simulators import make_model, read_dataset_csv, stream
from .training import RunSettings, TrainConfig, run_round, two_round

CI_METHODS = ("ss", "curv", "sand", "boot")


@dataclass
class ExperimentConfig:
    model: str
    theta_star_unc: tuple | None = None
    n: int | None = None
    replicates: int = 20
    settings: RunSettings = None
    ci_methods: tuple = CI_METHODS
    boot_replicates: int = 400
    level: float = 0.95
    seed: int = 0
    two_round: bool = True
    failure_budget: float = 0.2
    workers: int = 1
    sampling_box: tuple | None = None
    model_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.settings is None:
            self.settings = RunSettings(n_single=4000, n_groups=400, group_size=100)
        bad = set(self.ci_methods) - set(CI_METHODS)
        if bad:
            raise ConfigError(f"unknown CI methods {sorted(bad)}")


@dataclass
class ReplicateMetrics:
    abs_error: np.ndarray
    abs_error_round1: np.ndarray
    coverage: dict
    joint_coverage: dict
    width: dict
    qn_iterations: int
    warning: str | None = None


@dataclass
class BenchReport:
    model: str
    level: float
    replicates_requested: int
    replicates_used: int
    failures: int
    theta_star_report: np.ndarray
    mean_abs_error: np.ndarray
    sd_abs_error: np.ndarray
    mean_abs_error_round1: np.ndarray
    coverage: dict
    joint_coverage: dict
    mean_width: dict
    sd_width: dict
    runtime_seconds: float
    simulations_per_round: int
    simulations_total: int
    methods: tuple


def _method_covariance(method, dscore, theta_hat, data):
    if method == "curv":
        return uncertainty.fisher_to_covariance(
            uncertainty.fisher_curv(dscore, theta_hat, data))
    if method == "ss":
        return uncertainty.fisher_to_covariance(
            uncertainty.fisher_ss(dscore, theta_hat, data))
    if method == "sand":
        return uncertainty.sandwich(dscore, theta_hat, data)
    raise ConfigError(f"unknown plug-in method {method!r}")


def _report_space_sets(model, dscore, theta_hat, data, config, rep_seed):
    """Confidence reports per method, mapped to the reporting scale."""
    n = data.shape[0]
    theta_rep = model.to_report(theta_hat)
    jac = model.report_jacobian(theta_hat)
    reports = {}
    for method in config.ci_methods:
        if method == "boot":
            draws = uncertainty.multiplier_bootstrap(
                dscore, data, theta_hat, config.boot_replicates,
                (rep_seed, "boot"), tol=config.settings.tol,
                max_iter=config.settings.max_iter,
                failure_budget=config.failure_budget)
            rep_draws = np.stack([model.to_report(t) for t in draws.draws])
            mapped = uncertainty.BootstrapDraws(draws=rep_draws,
                                                converged=draws.converged,
                                                seed=draws.seed)
            reports[method] = uncertainty.bootstrap_sets(mapped, theta_rep,
                                                         level=config.level)
        else:
            cov = _method_covariance(method, dscore, theta_hat, data)
            cov_rep = jac @ cov @ jac.T
            reports[method] = uncertainty.confidence_sets(
                theta_rep, cov_rep, n, level=config.level, method=method)
    return reports


def run_replicate(config: ExperimentConfig, rep: int) -> ReplicateMetrics:
    """One full pipeline pass; raises on unrecoverable failure."""
    model = make_model(config.model, **config.model_kwargs)
    theta_star = (np.asarray(config.theta_star_unc, float)
                  if config.theta_star_unc is not None
                  else model.default_theta_star_unc)
    n = config.n if config.n is not None else model.default_n
    if config.sampling_box is not None:
        from .simulators import UniformBox
        dist = UniformBox(*config.sampling_box)
    else:
        dist = model.default_dist
    rep_seed = (config.seed, "rep", rep)
    observed = model.simulate_dataset(theta_star, n, stream(rep_seed, "obs"))

    if config.two_round:
        round1, final = two_round(model, dist, observed, config.settings,
                                  rep_seed)
        warning = final.warning
    else:
        round1 = final = run_round(model, dist, observed, config.settings,
                                   (rep_seed, "round1"))
        warning = None

    star_rep = model.to_report(theta_star)
    err = np.abs(model.to_report(final.theta_hat) - star_rep)
    err1 = np.abs(model.to_report(round1.theta_hat) - star_rep)
    reports = _report_space_sets(model, final.dscore, final.theta_hat, observed,
                                 config, rep_seed)
    coverage = {}
    joint = {}
    width = {}
    for method, rep_obj in reports.items():
        coverage[method] = np.array([
            1.0 if rep_obj.contains_marginal(j, star_rep[j]) else 0.0
            for j in range(star_rep.size)])
        joint[method] = 1.0 if rep_obj.contains_joint(star_rep) else 0.0
        width[method] = rep_obj.widths
    return ReplicateMetrics(abs_error=err, abs_error_round1=err1,
                            coverage=coverage, joint_coverage=joint,
                            width=width,
                            qn_iterations=final.result.iterations,
                            warning=warning)


def run_benchmark(config: ExperimentConfig) -> BenchReport:
    """Replicated benchmark; per-replicate failures are excluded up to the
    failure budget, beyond which the whole run aborts."""
    start = time.time()
    metrics = []
    failures = 0
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_replicate, config, r)
                       for r in range(config.replicates)]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except (Diverged, MaxIterations, SingularMatrix,
                        TooManyFailures) as exc:
                    outcomes.append(exc)
        for out in outcomes:
            if isinstance(out, ReplicateMetrics):
                metrics.append(out)
            else:
                failures += 1
    else:
        for r in range(config.replicates):
            try:
                metrics.append(run_replicate(config, r))
            except (Diverged, MaxIterations, SingularMatrix,
                    TooManyFailures):
                failures += 1
    if failures > config.failure_budget * config.replicates or not metrics:
        raise TooManyFailures(
            f"{failures}/{config.replicates} replicates failed")

    model = make_model(config.model, **config.model_kwargs)
    theta_star = (np.asarray(config.theta_star_unc, float)
                  if config.theta_star_unc is not None
                  else model.default_theta_star_unc)
    errs = np.stack([m.abs_error for m in metrics])
    errs1 = np.stack([m.abs_error_round1 for m in metrics])
    coverage = {}
    joint_coverage = {}
    mean_width = {}
    sd_width = {}
    for method in config.ci_methods:
        cov = np.stack([m.coverage[method] for m in metrics])
        wid = np.stack([m.width[method] for m in metrics])
        coverage[method] = cov.mean(axis=0)
        joint_coverage[method] = float(np.mean([m.joint_coverage[method]
                                                for m in metrics]))
        mean_width[method] = wid.mean(axis=0)
        sd_width[method] = wid.std(axis=0)
    settings = config.settings
    sims_round = settings.n_single + settings.n_groups * settings.group_size
    rounds = 2 if config.two_round else 1
    n = config.n if config.n is not None else model.default_n
    sims_total = len(metrics) * (rounds * sims_round + n)
    return BenchReport(
        model=config.model, level=config.level,
        replicates_requested=config.replicates,
        replicates_used=len(metrics), failures=failures,
        theta_star_report=model.to_report(theta_star),
        mean_abs_error=errs.mean(axis=0), sd_abs_error=errs.std(axis=0),
        mean_abs_error_round1=errs1.mean(axis=0),
        coverage=coverage, joint_coverage=joint_coverage,
        mean_width=mean_width, sd_width=sd_width,
        runtime_seconds=time.time() - start,
        simulations_per_round=sims_round,
        simulations_total=sims_total,
        methods=tuple(config.ci_methods))


# ---------------------------------------------------------------------------
# table emission

def report_rows(report: BenchReport):
    """Flat rows: one per (parameter, method) with error, coverage, width."""
    rows = []
    d = report.mean_abs_error.size
    for j in range(d):
        for method in report.methods:
            rows.append({
                "parameter": f"theta{j + 1}",
                "method": method,
                "abs_error_mean": report.mean_abs_error[j],
                "abs_error_sd": report.sd_abs_error[j],
                "coverage": report.coverage[method][j],
                "width_mean": report.mean_width[method][j],
                "width_sd": report.sd_width[method][j],
            })
    return rows


def emit_tables(report: BenchReport, fmt: str, out_path) -> None:
    """Write the benchmark table as CSV or markdown with stable formatting."""
    if fmt not in ("csv", "markdown"):
        raise ConfigError(f"unknown table format {fmt!r}")
    rows = report_rows(report)
    cols = ["parameter", "method", "abs_error_mean", "abs_error_sd",
            "coverage", "width_mean", "width_sd"]
    with open(out_path, "w") as fh:
        if fmt == "csv":
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(_fmt_cell(row[c]) for c in cols) + "\n")
        else:
            fh.write("| " + " | ".join(cols) + " |\n")
            fh.write("|" + "|".join(["---"] * len(cols)) + "|\n")
            for row in rows:
                fh.write("| " + " | ".join(_fmt_cell(row[c]) for c in cols) + " |\n")


def _fmt_cell(value):
    if isinstance(value, str):
        return value
    return f"{float(value):.6g}"


# ---------------------------------------------------------------------------
# real-data g-and-k fit

@dataclass
class FitResult:
    theta_natural: np.ndarray
    theta_natural_round1: np.ndarray
    boot_se: np.ndarray
    scale_factor: float
    qq_probs: np.ndarray
    qq_empirical: np.ndarray
    qq_fitted: np.ndarray
    qq_normal: np.ndarray
    warning: str | None = None


def _gandk_natural_rescaled(model, theta_unc, scale_factor):
    nat = model.reparam.to_natural(theta_unc)
    out = nat.copy()
    out[0] *= scale_factor
    out[1] *= scale_factor
    return out


def fit_csv(path, settings: RunSettings, seed=0, log_returns: bool = False,
            boot_replicates: int = 200, qq_points: int = 200) -> FitResult:
    """Fit the quantile model to a one-column CSV and produce Q-Q pairs.

    The series is standardized by its standard deviation before fitting (the
    family is closed under affine maps, so location/scale parameters are
    rescaled back afterwards) and compared against a Gaussian moment fit.
    """
    raw = read_dataset_csv(path, min_rows=2)
    if raw.shape[1] != 1:
        raise ParseError(f"expected one column, found {raw.shape[1]}")
    series = raw[:, 0]
    if log_returns:
        if np.any(series <= 0):
            raise ParseError("nonpositive price encountered with log-returns on")
        series = np.diff(np.log(series))
    if series.size < 50:
        raise TooFewRows(f"{series.size} usable rows, need at least 50")

    sd = float(series.std(ddof=1))
    standardized = (series / sd).reshape(-1, 1)
    model = make_model("gandk")
    round1, final = two_round(model, model.default_dist, standardized, settings,
                              (seed, "fit-csv"))
    theta_nat = _gandk_natural_rescaled(model, final.theta_hat, sd)
    theta_nat1 = _gandk_natural_rescaled(model, round1.theta_hat, sd)

    draws = uncertainty.multiplier_bootstrap(
        final.dscore, standardized, final.theta_hat, boot_replicates,
        (seed, "fit-boot"), tol=settings.tol, max_iter=settings.max_iter)
    nat_draws = np.stack([_gandk_natural_rescaled(model, t, sd)
                          for t in draws.kept()])
    boot_se = nat_draws.std(axis=0, ddof=1)

    probs = (np.arange(qq_points) + 0.5) / qq_points
    z = np.array([uncertainty.normal_quantile(p) for p in probs])
    from .simulators import gandk_quantile
    fitted_q = gandk_quantile(z, *theta_nat)
    mu_hat = float(series.mean())
    normal_q = mu_hat + series.std(ddof=1) * z
    empirical_q = np.quantile(series, probs)
    return FitResult(theta_natural=theta_nat, theta_natural_round1=theta_nat1,
                     boot_se=boot_se, scale_factor=sd, qq_probs=probs,
                     qq_empirical=empirical_q, qq_fitted=fitted_q,
                     qq_normal=normal_q, warning=final.warning)


def write_qq_csv(path, fit: FitResult):
    with open(path, "w") as fh:
        fh.write("prob,empirical,fitted_gandk,fitted_normal\n")
        for row in zip(fit.qq_probs, fit.qq_empirical, fit.qq_fitted, fit.qq_normal):
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")


def write_qq_svg(path, fit: FitResult, size: int = 480, margin: int = 40):
    """Minimal hand-rolled Q-Q scatter: fitted model and normal baseline."""
    lo = min(fit.qq_empirical.min(), fit.qq_fitted.min(), fit.qq_normal.min())
    hi = max(fit.qq_empirical.max(), fit.qq_fitted.max(), fit.qq_normal.max())
    span = hi - lo if hi > lo else 1.0

    def sx(v):
        return margin + (v - lo) / span * (size - 2 * margin)

    def sy(v):
        return size - margin - (v - lo) / span * (size - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
             f'<line x1="{sx(lo):.1f}" y1="{sy(lo):.1f}" x2="{sx(hi):.1f}" '
             f'y2="{sy(hi):.1f}" stroke="#888" stroke-dasharray="4,3"/>']
    for series, color in ((fit.qq_fitted, "#1f77b4"), (fit.qq_normal, "#d62728")):
        for emp, q in zip(fit.qq_empirical, series):
            parts.append(f'<circle cx="{sx(emp):.1f}" cy="{sy(q):.1f}" r="2" '
                         f'fill="{color}" fill-opacity="0.7"/>')
    parts.append(f'<text x="{size // 2}" y="{size - 8}" font-size="12" '
                 'text-anchor="middle">observed quantiles</text>')
    parts.append(f'<text x="12" y="{size // 2}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 12 {size // 2})">'
                 'fitted quantiles</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# desk-scale presets

def preset(name: str) -> ExperimentConfig:
    """Desk-scale benchmark configurations per model."""
    if name == "toy":
        return ExperimentConfig(
            model="toy", replicates=20,
            settings=RunSettings(
                n_single=6000, n_groups=1200, group_size=500,
                score_hidden=(32, 32), mean_hidden=(32, 32),
                score_train=TrainConfig(lambda1=0.3, batch_size=128,
                                        max_epochs=150),
                mean_train=TrainConfig(lambda2=0.01, batch_size=32,
                                       max_epochs=700),
                max_iter=300),
            boot_replicates=400, seed=20240501)
    if name == "mg1":
        # desk scale: paper table sizes, but the proposal box is narrowed so
        # the score is learnable within the desk training budget
        return ExperimentConfig(
            model="mg1", replicates=10, two_round=False,
            sampling_box=((0.2, 1.5, 0.05), (2.5, 6.0, 0.4)),
            settings=RunSettings(
                n_single=12000, n_groups=1200, group_size=500,
                score_hidden=(64, 64), mean_hidden=(128, 128),
                score_train=TrainConfig(batch_size=128, max_epochs=150),
                mean_train=TrainConfig(lambda2=0.01, batch_size=64,
                                       max_epochs=800),
                max_iter=300),
            boot_replicates=200, seed=20240502)
    if name == "gandk":
        return ExperimentConfig(
            model="gandk", replicates=10,
            settings=RunSettings(
                n_single=100_000, n_groups=1000, group_size=200,
                score_hidden=(64, 64, 64), mean_hidden=(64, 64),
                score_train=TrainConfig(batch_size=256, max_epochs=60),
                mean_train=TrainConfig(batch_size=32, max_epochs=700)),
            boot_replicates=300, seed=20240503)
    if name == "volatility":
        return ExperimentConfig(
            model="volatility", replicates=10,
            settings=RunSettings(
                n_single=1_000_000, n_groups=10_000, group_size=100,
                score_hidden=(64, 64, 64), mean_hidden=(64, 64),
                score_train=TrainConfig(batch_size=256, max_epochs=30),
                mean_train=TrainConfig(batch_size=64, max_epochs=400)),
            boot_replicates=200, seed=20240504)
    if name == "analytic-gaussian":
        return ExperimentConfig(
            model="analytic-gaussian", replicates=200, n=1000,
            settings=RunSettings(n_single=1, n_groups=1, group_size=2,
                                 use_analytic_score=True),
            two_round=False, boot_replicates=300, seed=20240505)
    raise ConfigError(f"unknown preset {name!r}")


def preset_or_default(model_name: str) -> ExperimentConfig:
    try:
        return preset(model_name)
    except ConfigError:
        return ExperimentConfig(model=model_name)


# ---------------------------------------------------------------------------
# plain-text key=value configuration files

def parse_config_file(path) -> dict:
    """Namespaced key=value pairs; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def _parse_value(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(type(like[0])(tok) for tok in text.split(",")) if text else ()
    return text


def apply_config(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply namespaced overrides (model.*, train.*, mean_train.*, est.*,
    ci.*, bench.*) onto an experiment configuration."""
    settings = config.settings
    score_train = settings.score_train
    mean_train = settings.mean_train
    top = {}
    set_kwargs = {}
    for key, text in overrides.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} must be namespaced")
        ns, name = key.split(".", 1)
        try:
            if ns == "model":
                if name == "name":
                    top["model"] = text
                elif name == "theta_star":
                    top["theta_star_unc"] = tuple(float(t) for t in text.split(","))
                elif name == "n":
                    top["n"] = int(text)
                else:
                    raise ConfigError(f"unknown model key {name!r}")
            elif ns == "train":
                score_train = replace(score_train, **{
                    name: _parse_value(text, getattr(score_train, name))})
            elif ns == "mean_train":
                mean_train = replace(mean_train, **{
                    name: _parse_value(text, getattr(mean_train, name))})
            elif ns == "est":
                if name not in ("tol", "max_iter", "trust_factor",
                                "round2_inflation"):
                    raise ConfigError(f"unknown est key {name!r}")
                set_kwargs[name] = _parse_value(text, getattr(settings, name))
            elif ns == "tables":
                if name not in ("n_single", "n_groups", "group_size"):
                    raise ConfigError(f"unknown tables key {name!r}")
                set_kwargs[name] = int(text)
            elif ns == "net":
                if name == "score_hidden":
                    set_kwargs["score_hidden"] = tuple(int(t) for t in text.split(","))
                elif name == "mean_hidden":
                    set_kwargs["mean_hidden"] = tuple(int(t) for t in text.split(","))
                else:
                    raise ConfigError(f"unknown net key {name!r}")
            elif ns == "ci":
                if name == "level":
                    top["level"] = float(text)
                elif name == "methods":
                    top["ci_methods"] = tuple(text.split(","))
                elif name == "boot_replicates":
                    top["boot_replicates"] = int(text)
                else:
                    raise ConfigError(f"unknown ci key {name!r}")
            elif ns == "bench":
                if name == "replicates":
                    top["replicates"] = int(text)
                elif name == "seed":
                    top["seed"] = int(text)
                elif name == "two_round":
                    top["two_round"] = _parse_value(text, True)
                elif name == "workers":
                    top["workers"] = int(text)
                else:
                    raise ConfigError(f"unknown bench key {name!r}")
            else:
                raise ConfigError(f"unknown namespace {ns!r}")
        except (ValueError, AttributeError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})")
    settings = replace(settings, score_train=score_train, mean_train=mean_train,
                       **set_kwargs)
    return replace(config, settings=settings, **top)
