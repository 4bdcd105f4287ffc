"""Command-line interface.

Exit codes: 0 on success, 2 for configuration/usage errors, 3 when a run's
failure budget is exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, estimator, training, uncertainty
from .errors import (ConfigError, ParseError, ScorerootError, TooFewRows,
                     TooManyFailures)
from .scorenet import (DebiasedScore, MlpMeanPart, MlpScorePart, MlpSpec,
                       load_network, save_network)
from .simulators import make_model, read_dataset_csv, stream, write_dataset_csv


def _parse_theta(text):
    return np.array([float(tok) for tok in text.split(",")])


def _out_dir(args) -> Path:
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dscore(model, args) -> DebiasedScore:
    score_net = load_network(args.score_net)
    score_part = MlpScorePart(score_net, model.theta_dim,
                              transform=model.score_features)
    mean_part = None
    if args.mean_net:
        mean_part = MlpMeanPart(load_network(args.mean_net))
    return DebiasedScore(score_part, mean_part)


def _settings_from_args(args, config: bench.ExperimentConfig) -> bench.ExperimentConfig:
    if args.config:
        config = bench.apply_config(config, bench.parse_config_file(args.config))
    if args.seed is not None:
        config = bench.replace(config, seed=args.seed)
    if getattr(args, "threads", None):
        config = bench.replace(config, workers=args.threads)
    return config


def cmd_simulate(args):
    model = make_model(args.model)
    theta = (_parse_theta(args.theta) if args.theta is not None
             else model.default_theta_star_unc)
    if args.natural:
        theta = model.reparam.to_unconstrained(theta)
    n = args.n if args.n is not None else model.default_n
    data = model.simulate_dataset(theta, n, stream(args.seed or 0, "simulate"))
    write_dataset_csv(args.out, data)
    print(f"wrote {n} observations of {model.name} to {args.out}")
    return 0


def cmd_tables(args):
    model = make_model(args.model)
    single, grouped = training.build_tables(
        model, model.default_dist, args.n_single, args.n_groups,
        args.group_size, args.seed or 0)
    np.savez(args.out, single_theta=single.theta, single_data=single.data,
             grouped_theta=grouped.theta, grouped_data=grouped.data)
    print(f"wrote tables ({args.n_single} singles, {args.n_groups}x"
          f"{args.group_size} grouped) to {args.out}")
    return 0


def _tables_from_npz(path):
    blob = np.load(path)
    return (training.SingleTable(blob["single_theta"], blob["single_data"]),
            training.GroupedTable(blob["grouped_theta"], blob["grouped_data"]))


def cmd_train(args):
    model = make_model(args.model)
    config = _settings_from_args(args, bench.preset_or_default(args.model))
    settings = config.settings
    single, grouped = _tables_from_npz(args.tables)
    d = model.theta_dim
    score_spec = MlpSpec(d + model.feature_dim, d, tuple(settings.score_hidden))
    mean_spec = MlpSpec(d, d, tuple(settings.mean_hidden))
    out = _out_dir(args)
    score_net = training.train_score(single, grouped, score_spec,
                                     model.default_dist, settings.score_train,
                                     (config.seed, "cli-train"),
                                     data_transform=model.score_features)
    mean_net = training.train_mean(score_net, grouped, mean_spec,
                                   settings.mean_train, (config.seed, "cli-train"),
                                   data_transform=model.score_features)
    save_network(score_net, out / "score_net.lfsn")
    save_network(mean_net, out / "mean_net.lfsn")
    print(f"wrote {out / 'score_net.lfsn'} and {out / 'mean_net.lfsn'}")
    return 0


def cmd_estimate(args):
    model = make_model(args.model)
    dscore = _load_dscore(model, args)
    data = read_dataset_csv(args.data)
    theta0 = (_parse_theta(args.theta0) if args.theta0 is not None
              else estimator.initialize(model, model.default_dist, "random",
                                        seed=(args.seed or 0, "estimate")))
    precond = (estimator.identity() if args.precond == "identity"
               else estimator.newton() if args.precond == "newton"
               else estimator.quasi_newton_at(dscore, data, theta0))
    result = estimator.find_root(dscore, data, theta0, precond=precond,
                                 alpha=args.alpha, tol=args.tol,
                                 max_iter=args.max_iter)
    report = model.to_report(result.theta)
    print("estimate (report scale):", ",".join(f"{v:.6g}" for v in report))
    print(f"iterations={result.iterations} converged={result.converged} "
          f"preconditioner={result.preconditioner}")
    if args.trace_out:
        estimator.write_trace_csv(args.trace_out, result)
        print(f"wrote trace to {args.trace_out}")
    return 0


def cmd_ci(args):
    model = make_model(args.model)
    dscore = _load_dscore(model, args)
    data = read_dataset_csv(args.data)
    theta_hat = _parse_theta(args.theta_hat)
    out = _out_dir(args)
    reports = []
    for method in args.methods.split(","):
        if method == "boot":
            draws = uncertainty.multiplier_bootstrap(
                dscore, data, theta_hat, args.boot_replicates,
                (args.seed or 0, "ci-boot"))
            reports.append(uncertainty.bootstrap_sets(draws, theta_hat,
                                                      level=args.level))
        else:
            cov = bench._method_covariance(method, dscore, theta_hat, data)
            reports.append(uncertainty.confidence_sets(
                theta_hat, cov, data.shape[0], level=args.level, method=method))
    uncertainty.write_reports_csv(out / "confidence_sets.csv", reports,
                                  sidecar_path=out / "confidence_shapes.csv")
    print(f"wrote {out / 'confidence_sets.csv'}")
    return 0


def cmd_bootstrap(args):
    model = make_model(args.model)
    dscore = _load_dscore(model, args)
    data = read_dataset_csv(args.data)
    theta_hat = _parse_theta(args.theta_hat)
    draws = uncertainty.multiplier_bootstrap(dscore, data, theta_hat,
                                             args.replicates,
                                             (args.seed or 0, "bootstrap"))
    with open(args.out, "w") as fh:
        fh.write(",".join(f"theta{j + 1}" for j in range(theta_hat.size))
                 + ",converged\n")
        for row, ok in zip(draws.draws, draws.converged):
            fh.write(",".join(f"{v:.10g}" for v in row) + f",{int(ok)}\n")
    print(f"wrote {draws.n_converged}/{args.replicates} converged draws to {args.out}")
    return 0


def cmd_bench(args):
    config = _settings_from_args(args, bench.preset(args.preset))
    report = bench.run_benchmark(config)
    out = _out_dir(args)
    bench.emit_tables(report, "csv", out / f"bench_{report.model}.csv")
    bench.emit_tables(report, "markdown", out / f"bench_{report.model}.md")
    print(f"model={report.model} replicates={report.replicates_used}"
          f"/{report.replicates_requested} failures={report.failures}")
    print("mean abs error:", ",".join(f"{v:.4g}" for v in report.mean_abs_error))
    for method in report.methods:
        cov = ",".join(f"{v:.2f}" for v in report.coverage[method])
        print(f"  {method}: coverage {cov}")
    print(f"simulations/replicate/round: {report.simulations_per_round}; "
          f"runtime {report.runtime_seconds:.1f}s")
    return 0


def cmd_fit_csv(args):
    config = _settings_from_args(args, bench.preset("gandk"))
    settings = config.settings
    fit = bench.fit_csv(args.input, settings, seed=config.seed,
                        log_returns=args.log_returns,
                        boot_replicates=args.boot_replicates)
    out = _out_dir(args)
    with open(out / "fit_params.csv", "w") as fh:
        fh.write("parameter,estimate,boot_se,round1\n")
        for name, est, se, r1 in zip(("A", "B", "g", "k"), fit.theta_natural,
                                     fit.boot_se, fit.theta_natural_round1):
            fh.write(f"{name},{est:.6g},{se:.6g},{r1:.6g}\n")
    bench.write_qq_csv(out / "qq_pairs.csv", fit)
    bench.write_qq_svg(out / "qq_plot.svg", fit)
    print("fitted (A,B,g,k):", ",".join(f"{v:.6g}" for v in fit.theta_natural))
    if fit.warning:
        print("warning:", fit.warning)
    print(f"wrote {out / 'fit_params.csv'}, {out / 'qq_pairs.csv'}, "
          f"{out / 'qq_plot.svg'}")
    return 0


def cmd_compare_dynamics(args):
    model = make_model(args.model)
    dscore = _load_dscore(model, args)
    data = read_dataset_csv(args.data)
    theta0 = _parse_theta(args.theta0)
    qn, ga = estimator.compare_dynamics(dscore, data, theta0, tol=args.tol,
                                        max_iter=args.max_iter)
    out = _out_dir(args)
    estimator.write_trace_csv(out / "trace_quasi_newton.csv", qn)
    estimator.write_trace_csv(out / "trace_gradient_ascent.csv", ga)
    print(f"quasi-Newton: {qn.iterations} iterations; "
          f"gradient ascent: {ga.iterations} iterations")
    print(f"wrote traces to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoreroot",
        description="Likelihood-free inference via learned likelihood scores")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None,
                        help="key=value configuration file")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--theta", default=None, help="comma-separated parameters")
    p.add_argument("--natural", action="store_true",
                   help="theta is on the natural scale")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tables", help="generate reference tables")
    p.add_argument("--model", required=True)
    p.add_argument("--n-single", type=int, required=True)
    p.add_argument("--n-groups", type=int, required=True)
    p.add_argument("--group-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("train", help="train score and mean networks")
    p.add_argument("--model", required=True)
    p.add_argument("--tables", required=True, help="npz from the tables command")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="root-find the aggregated score")
    p.add_argument("--model", required=True)
    p.add_argument("--score-net", required=True)
    p.add_argument("--mean-net", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--theta0", default=None)
    p.add_argument("--precond", choices=("identity", "newton", "quasi_newton"),
                   default="newton")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--trace-out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("ci", help="confidence sets at a given estimate")
    p.add_argument("--model", required=True)
    p.add_argument("--score-net", required=True)
    p.add_argument("--mean-net", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--theta-hat", required=True)
    p.add_argument("--methods", default="curv,ss,sand")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--boot-replicates", type=int, default=400)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("bootstrap", help="multiplier-bootstrap root draws")
    p.add_argument("--model", required=True)
    p.add_argument("--score-net", required=True)
    p.add_argument("--mean-net", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--theta-hat", required=True)
    p.add_argument("--replicates", type=int, default=400)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("bench", help="run a desk-scale benchmark preset")
    p.add_argument("--preset", required=True,
                   choices=("toy", "mg1", "gandk", "volatility",
                            "analytic-gaussian"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fit-csv", help="fit the quantile model to a data column")
    p.add_argument("--input", required=True)
    p.add_argument("--log-returns", action="store_true",
                   help="difference the logs of the input column first")
    p.add_argument("--boot-replicates", type=int, default=200)
    p.set_defaults(func=cmd_fit_csv)

    p = sub.add_parser("compare-dynamics",
                       help="quasi-Newton vs gradient-ascent traces")
    p.add_argument("--model", required=True)
    p.add_argument("--score-net", required=True)
    p.add_argument("--mean-net", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--theta0", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=2000)
    p.set_defaults(func=cmd_compare_dynamics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ParseError, TooFewRows, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TooManyFailures, ScorerootError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
