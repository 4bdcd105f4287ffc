import numpy as np
import pytest

from scoreroot import bench
from scoreroot import simulators as sim
from scoreroot.errors import ConfigError, ParseError, TooFewRows
from scoreroot.training import RunSettings, TrainConfig


def analytic_config(replicates=6, n=150, boot=80, seed=99):
    return bench.ExperimentConfig(
        model="analytic-gaussian", replicates=replicates, n=n,
        settings=RunSettings(n_single=1, n_groups=1, group_size=2,
                             use_analytic_score=True),
        two_round=False, boot_replicates=boot, seed=seed)


@pytest.fixture(scope="module")
def analytic_report():
    return bench.run_benchmark(analytic_config())


def test_report_shapes_and_ranges(analytic_report):
    rep = analytic_report
    assert rep.replicates_used == 6
    assert rep.failures == 0
    assert rep.mean_abs_error.shape == (1,)
    for method in rep.methods:
        assert 0.0 <= rep.coverage[method][0] <= 1.0
        assert rep.mean_width[method][0] > 0.0


def test_simulation_accounting(analytic_report):
    cfg = analytic_config()
    s = cfg.settings
    assert analytic_report.simulations_per_round == s.n_single + s.n_groups * s.group_size
    assert analytic_report.simulations_total == 6 * (analytic_report.simulations_per_round + 150)


def test_single_replicate_zero_sd():
    rep = bench.run_benchmark(analytic_config(replicates=1))
    assert np.all(rep.sd_abs_error == 0.0)
    for method in rep.methods:
        assert np.all(rep.sd_width[method] == 0.0)


def test_full_determinism(analytic_report, tmp_path):
    again = bench.run_benchmark(analytic_config())
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    bench.emit_tables(analytic_report, "csv", a)
    bench.emit_tables(again, "csv", b)
    assert a.read_bytes() == b.read_bytes()


def test_seed_isolation():
    cfg = analytic_config()
    first = bench.run_replicate(cfg, 0)
    cfg_more = analytic_config(replicates=9)
    first_again = bench.run_replicate(cfg_more, 0)
    assert np.array_equal(first.abs_error, first_again.abs_error)
    for method in cfg.ci_methods:
        assert np.array_equal(first.width[method], first_again.width[method])


def test_workers_do_not_change_results(tmp_path):
    serial = bench.run_benchmark(analytic_config(replicates=4))
    parallel_cfg = analytic_config(replicates=4)
    parallel_cfg = bench.replace(parallel_cfg, workers=2)
    parallel = bench.run_benchmark(parallel_cfg)
    a, b = tmp_path / "s.csv", tmp_path / "p.csv"
    bench.emit_tables(serial, "csv", a)
    bench.emit_tables(parallel, "csv", b)
    assert a.read_bytes() == b.read_bytes()


def test_emit_tables_markdown_rows(analytic_report, tmp_path):
    path = tmp_path / "table.md"
    bench.emit_tables(analytic_report, "markdown", path)
    lines = path.read_text().strip().splitlines()
    d = analytic_report.mean_abs_error.size
    assert len(lines) == 2 + d * len(analytic_report.methods)
    with pytest.raises(ConfigError):
        bench.emit_tables(analytic_report, "html", tmp_path / "x")


def test_sampling_box_override():
    cfg = bench.replace(analytic_config(replicates=1),
                        sampling_box=((-1.0,), (1.0,)))
    rep = bench.run_benchmark(cfg)
    assert rep.replicates_used == 1


# ---------------------------------------------------------------------------
# configuration files

def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""
# comment line
model.name = toy
train.lambda1 = 0.2   # inline comment
bench.replicates = 7
ci.level = 0.9
tables.n_single = 111
net.score_hidden = 16,16
""")
    overrides = bench.parse_config_file(path)
    cfg = bench.apply_config(bench.preset("toy"), overrides)
    assert cfg.model == "toy"
    assert cfg.settings.score_train.lambda1 == 0.2
    assert cfg.replicates == 7
    assert cfg.level == 0.9
    assert cfg.settings.n_single == 111
    assert cfg.settings.score_hidden == (16, 16)


def test_parse_config_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just-a-token\n")
    with pytest.raises(ConfigError):
        bench.parse_config_file(path)


def test_apply_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        bench.apply_config(bench.preset("toy"), {"nope.key": "1"})
    with pytest.raises(ConfigError):
        bench.apply_config(bench.preset("toy"), {"flat": "1"})
    with pytest.raises(ConfigError):
        bench.apply_config(bench.preset("toy"), {"train.lambda1": "abc"})


def test_presets_exist():
    for name in ("toy", "mg1", "gandk", "volatility", "analytic-gaussian"):
        cfg = bench.preset(name)
        assert cfg.model == name
    with pytest.raises(ConfigError):
        bench.preset("unknown")


# ---------------------------------------------------------------------------
# real-data fit plumbing (full-quality fit runs in the acceptance suite)

def test_fit_csv_input_validation(tmp_path):
    small = tmp_path / "small.csv"
    small.write_text("\n".join(str(v) for v in range(30)) + "\n")
    settings = RunSettings(n_single=100, n_groups=10, group_size=5)
    with pytest.raises(TooFewRows):
        bench.fit_csv(small, settings)
    two_col = tmp_path / "two.csv"
    two_col.write_text("1.0,2.0\n" * 60)
    with pytest.raises(ParseError):
        bench.fit_csv(two_col, settings)
    neg = tmp_path / "neg.csv"
    neg.write_text("\n".join(str(v) for v in np.linspace(-1, 1, 80)) + "\n")
    with pytest.raises(ParseError):
        bench.fit_csv(neg, settings, log_returns=True)


def test_qq_svg_writer(tmp_path):
    fit = bench.FitResult(
        theta_natural=np.array([0.0, 1.0, 0.0, 0.1]),
        theta_natural_round1=np.array([0.0, 1.0, 0.0, 0.1]),
        boot_se=np.full(4, 0.01), scale_factor=1.0,
        qq_probs=np.linspace(0.01, 0.99, 20),
        qq_empirical=np.linspace(-2, 2, 20),
        qq_fitted=np.linspace(-2, 2, 20),
        qq_normal=np.linspace(-2.2, 2.2, 20))
    svg = tmp_path / "qq.svg"
    bench.write_qq_svg(svg, fit)
    text = svg.read_text()
    assert text.startswith("<svg")
    assert text.count("<circle") == 40
    csv = tmp_path / "qq.csv"
    bench.write_qq_csv(csv, fit)
    assert csv.read_text().splitlines()[0] == "prob,empirical,fitted_gandk,fitted_normal"


@pytest.mark.slow
def test_fit_csv_affine_closure(tmp_path):
    # rescaling the input series rescales (A, B) and leaves (g, k) unchanged,
    # because standardization makes the training pipeline scale-invariant
    model = sim.make_model("gandk")
    data = model.simulate_dataset(model.default_theta_star_unc, 700,
                                  sim.stream(314))
    base = tmp_path / "base.csv"
    scaled = tmp_path / "scaled.csv"
    sim.write_dataset_csv(base, data)
    sim.write_dataset_csv(scaled, 3.0 * data)
    settings = RunSettings(
        n_single=20_000, n_groups=200, group_size=100,
        score_hidden=(32, 32), mean_hidden=(32, 32),
        score_train=TrainConfig(batch_size=128, max_epochs=40),
        mean_train=TrainConfig(lambda2=0.01, batch_size=32, max_epochs=200),
        max_iter=300)
    fit1 = bench.fit_csv(base, settings, seed=11, boot_replicates=60)
    fit2 = bench.fit_csv(scaled, settings, seed=11, boot_replicates=60)
    assert fit2.theta_natural[0] == pytest.approx(3.0 * fit1.theta_natural[0], abs=1e-6)
    assert fit2.theta_natural[1] == pytest.approx(3.0 * fit1.theta_natural[1], rel=1e-6)
    assert fit2.theta_natural[2] == pytest.approx(fit1.theta_natural[2], abs=1e-6)
    assert fit2.theta_natural[3] == pytest.approx(fit1.theta_natural[3], abs=1e-6)
