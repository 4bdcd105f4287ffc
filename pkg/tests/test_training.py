import numpy as np
import pytest

from scoreroot import diffcore as dc
from scoreroot import simulators as sim
from scoreroot import training as tr
from scoreroot.errors import NoOracle, NonFiniteLoss
from scoreroot.scorenet import (DebiasedScore, MlpMeanPart, MlpScorePart,
                                MlpSpec, ScoreNetwork)


class FakeScoreNet:
    """Duck-typed score net with a closed-form rule, for loss oracles."""

    frozen = True

    def __init__(self, fn, jac_fn, theta_dim=1):
        self.fn = fn
        self.jac_fn = jac_fn
        self.theta_dim = theta_dim

    def forward(self, inputs):
        theta = inputs[:, : self.theta_dim]
        x = inputs[:, self.theta_dim:]
        return self.fn(theta, x)

    def jacobian(self, inputs, block):
        theta = inputs[:, : self.theta_dim]
        x = inputs[:, self.theta_dim:]
        return self.jac_fn(theta, x)


def linear_candidate(a, b):
    """s(theta, x) = a (x - theta) + b on the scalar Gaussian model."""
    return FakeScoreNet(
        fn=lambda theta, x: a * (x - theta) + b,
        jac_fn=lambda theta, x: np.full((theta.shape[0], 1, 1), -a))


@pytest.fixture(scope="module")
def gauss_setup():
    model = sim.analytic_gaussian_model()
    dist = sim.UniformBox((-3.0,), (3.0,))
    rng = sim.stream(99)
    theta = sim.sample_params(dist, 100_000, rng)
    data = model.simulate_batch(theta, rng)
    return model, dist, theta, data


# ---------------------------------------------------------------------------
# reference tables

def test_build_tables_single_row():
    model = sim.analytic_gaussian_model()
    single, grouped = tr.build_tables(model, model.default_dist, 1, 1, 2, seed=0)
    assert single.theta.shape == (1, 1)
    assert grouped.data.shape == (1, 2, 1)


def test_build_tables_paper_toy_sizes():
    model = sim.toy_model()
    single, grouped = tr.build_tables(model, model.default_dist, 6000, 1200,
                                      500, seed=1)
    assert single.theta.shape == (6000, 2)
    assert single.data.shape == (6000, 1)
    assert grouped.data.shape == (1200, 500, 1)


def test_build_tables_deterministic():
    model = sim.toy_model()
    s1, g1 = tr.build_tables(model, model.default_dist, 50, 10, 5, seed=3)
    s2, g2 = tr.build_tables(model, model.default_dist, 50, 10, 5, seed=3)
    assert s1.theta.tobytes() == s2.theta.tobytes()
    assert s1.data.tobytes() == s2.data.tobytes()
    assert g1.data.tobytes() == g2.data.tobytes()


def test_build_tables_rejects_bad_sizes():
    model = sim.analytic_gaussian_model()
    with pytest.raises(ValueError):
        tr.build_tables(model, model.default_dist, 0, 1, 2, seed=0)


# ---------------------------------------------------------------------------
# implicit score-matching loss

def test_sm_loss_zero_net(gauss_setup):
    _, dist, theta, data = gauss_setup
    zero = FakeScoreNet(lambda t, x: np.zeros_like(t),
                        lambda t, x: np.zeros((t.shape[0], 1, 1)))
    assert tr.sm_loss(zero, theta[:100], data[:100], dist) == 0.0


def test_sm_loss_population_value_linear_candidate(gauss_setup):
    # population implicit loss of s = a(x-theta)+b is a^2 + b^2 - 2a
    _, dist, theta, data = gauss_setup
    for a, b in ((1.0, 0.0), (0.5, 0.3), (2.0, -1.0)):
        net = linear_candidate(a, b)
        per_sample = (net.fn(theta, data) ** 2).sum(axis=1) - 2 * a
        se = per_sample.std() / np.sqrt(theta.shape[0])
        loss = tr.sm_loss(net, theta, data, dist)
        assert abs(loss - (a * a + b * b - 2 * a)) < 3 * se + 1e-9


def test_sm_loss_difference_equals_explicit_difference(gauss_setup):
    # implicit-loss differences equal explicit-MSE differences (paired MC)
    _, dist, theta, data = gauss_setup
    net1, net2 = linear_candidate(0.8, 0.2), linear_candidate(1.3, -0.4)
    truth = data - theta
    diffs = None
    for sign, net in ((1.0, net1), (-1.0, net2)):
        vals = net.fn(theta, data)
        implicit = (vals ** 2).sum(axis=1) + 2 * np.trace(
            net.jac_fn(theta, data), axis1=1, axis2=2)
        explicit = ((vals - truth) ** 2).sum(axis=1)
        term = sign * (implicit - explicit)
        diffs = term if diffs is None else diffs + term
    se = diffs.std() / np.sqrt(diffs.size)
    assert abs(diffs.mean()) < 3 * se + 1e-9


def test_sm_loss_nonfinite_raises(gauss_setup):
    _, dist, theta, data = gauss_setup
    bad = FakeScoreNet(lambda t, x: np.full_like(t, np.inf),
                       lambda t, x: np.zeros((t.shape[0], 1, 1)))
    with pytest.raises(NonFiniteLoss):
        tr.sm_loss(bad, theta[:10], data[:10], dist)


# ---------------------------------------------------------------------------
# curvature penalty

def test_curvature_penalty_constant_net():
    c = np.array([0.7, -0.2])
    net = FakeScoreNet(lambda t, x: np.broadcast_to(c, (t.shape[0], 2)).copy(),
                       lambda t, x: np.zeros((t.shape[0], 2, 2)), theta_dim=2)
    theta = np.zeros((3, 2))
    data = np.zeros((3, 50, 1))
    pen = tr.curvature_penalty(net, theta, data)
    assert pen == pytest.approx(np.sum(np.outer(c, c) ** 2), abs=1e-12)
    zero = FakeScoreNet(lambda t, x: np.zeros((t.shape[0], 2)),
                        lambda t, x: np.zeros((t.shape[0], 2, 2)), theta_dim=2)
    assert tr.curvature_penalty(zero, theta, data) == 0.0


def test_curvature_penalty_exact_score_statistically_zero():
    model = sim.analytic_gaussian_model()
    single, grouped = tr.build_tables(model, model.default_dist, 2, 40, 2000,
                                      seed=8)
    exact = FakeScoreNet(lambda t, x: x - t,
                         lambda t, x: np.full((t.shape[0], 1, 1), -1.0))
    pen = tr.curvature_penalty(exact, grouped.theta, grouped.data)
    # per group the Frobenius error is O(1/sqrt(m)); the squared norm is chi2-ish
    assert pen < 9.0 * (2.0 / 2000)


def test_curvature_penalty_doubled_score():
    model = sim.analytic_gaussian_model()
    single, grouped = tr.build_tables(model, model.default_dist, 2, 30, 5000,
                                      seed=9)
    doubled = FakeScoreNet(lambda t, x: 2.0 * (x - t),
                           lambda t, x: np.full((t.shape[0], 1, 1), -2.0))
    pen = tr.curvature_penalty(doubled, grouped.theta, grouped.data)
    assert pen == pytest.approx(4.0, rel=0.15)


# ---------------------------------------------------------------------------
# score training

@pytest.fixture(scope="module")
def trained_gaussian():
    model = sim.analytic_gaussian_model()
    dist = model.default_dist
    single, grouped = tr.build_tables(model, dist, 10_000, 200, 100, seed=11)
    spec = MlpSpec(2, 1, (16, 16))
    config = tr.TrainConfig(lambda1=0.0, batch_size=64, max_epochs=200)
    net = tr.train_score(single, grouped, spec, dist, config, seed=12)
    return model, dist, single, grouped, net


def test_linear_family_minimizer_of_implicit_loss(gauss_setup):
    # the empirical implicit loss over s = a(x-theta)+b is quadratic in (a,b);
    # its minimizer must approach the population optimum (1, 0)
    _, dist, theta, data = gauss_setup
    res = (data - theta)[:10_000, 0]
    m1, m2 = res.mean(), (res ** 2).mean()
    a_hat, b_hat = np.linalg.solve([[m2, m1], [m1, 1.0]], [1.0, 0.0])
    assert a_hat == pytest.approx(1.0, abs=0.05)
    assert b_hat == pytest.approx(0.0, abs=0.05)
    base = tr.sm_loss(linear_candidate(a_hat, b_hat), theta[:10_000],
                      data[:10_000], dist)
    for da, db in ((0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1)):
        worse = tr.sm_loss(linear_candidate(a_hat + da, b_hat + db),
                           theta[:10_000], data[:10_000], dist)
        assert worse >= base


def test_train_score_recovers_gaussian_score(trained_gaussian):
    model, dist, single, grouped, net = trained_gaussian
    rng = sim.stream(500)
    theta = sim.sample_params(sim.UniformBox((-2.0,), (2.0,)), 4000, rng)
    data = model.simulate_batch(theta, rng)
    outputs = net.forward(np.hstack([theta, data]))[:, 0]
    design = np.column_stack([data[:, 0] - theta[:, 0], np.ones(theta.shape[0])])
    coef, *_ = np.linalg.lstsq(design, outputs, rcond=None)
    assert coef[0] == pytest.approx(1.0, abs=0.05)
    # the raw net carries a mean offset; debiasing removes it
    mean_net = tr.train_mean(net, grouped, MlpSpec(1, 1, (16,)),
                             tr.TrainConfig(lambda2=0.0, batch_size=32,
                                            max_epochs=600), seed=13)
    ds = DebiasedScore(MlpScorePart(net, 1), MlpMeanPart(mean_net))
    debiased = ds.per_datum(np.array([0.5]),
                            model.simulate_batch(np.full((4000, 1), 0.5),
                                                 sim.stream(501)))
    assert abs(debiased.mean()) < 0.05


def test_train_score_checkpoint_contract(trained_gaussian):
    model, dist, single, grouped, net = trained_gaussian
    rng = sim.stream((12, "train-score"))
    n_val = int(np.floor(single.size / 6.0))
    val_idx = rng.permutation(single.size)[:n_val]
    init = ScoreNetwork.initialize(MlpSpec(2, 1, (16, 16)), rng)
    init.set_standardization(net.input_shift, net.input_scale)
    val_init = tr.sm_loss(init, single.theta[val_idx], single.data[val_idx], dist)
    val_final = tr.sm_loss(net, single.theta[val_idx], single.data[val_idx], dist)
    assert val_final <= val_init


def test_train_score_reproducible():
    model = sim.analytic_gaussian_model()
    dist = model.default_dist
    single, grouped = tr.build_tables(model, dist, 600, 30, 40, seed=21)
    spec = MlpSpec(2, 1, (8,))
    config = tr.TrainConfig(batch_size=32, max_epochs=12)
    n1 = tr.train_score(single, grouped, spec, dist, config, seed=5)
    n2 = tr.train_score(single, grouped, spec, dist, config, seed=5)
    assert n1.params.tobytes() == n2.params.tobytes()
    assert n1.frozen


def test_tape_losses_match_numpy_paths():
    model = sim.analytic_gaussian_model()
    dist = model.default_dist
    single, grouped = tr.build_tables(model, dist, 256, 10, 50, seed=31)
    net = ScoreNetwork.initialize(MlpSpec(2, 1, (8, 8)), np.random.default_rng(0))
    net.set_standardization(np.zeros(2), np.ones(2) * 2.0)
    theta, data = single.theta[:64], single.data[:64]
    tape = dc.Tape()
    bound = net.bind(tape)
    tape_loss = tr._sm_loss_graph(tape, bound, theta, data,
                                  dist.log_density_gradient(theta), 1)
    assert float(tape_loss.value) == pytest.approx(
        tr.sm_loss(net, theta, data, dist), abs=1e-12)
    tape2 = dc.Tape()
    bound2 = net.bind(tape2)
    pen = tr._curvature_graph(tape2, bound2, grouped.theta[0], grouped.data[0], 1)
    assert float(pen.value) == pytest.approx(
        tr.curvature_penalty(net, grouped.theta[:1], grouped.data[:1]), abs=1e-12)
    mean_net = ScoreNetwork.initialize(MlpSpec(1, 1, (8,)), np.random.default_rng(1))
    targets = np.random.default_rng(2).normal(size=(10, 1))
    tape3 = dc.Tape()
    bound3 = mean_net.bind(tape3)
    mean_loss = tr._mean_loss_graph(tape3, bound3, grouped.theta, targets, 1, 0.3)
    assert float(mean_loss.value) == pytest.approx(
        tr.mean_fit_loss(mean_net, grouped.theta, targets, 0.3), abs=1e-12)


# ---------------------------------------------------------------------------
# mean training and debiasing

def test_group_score_means_match_direct_average():
    model = sim.analytic_gaussian_model()
    _, grouped = tr.build_tables(model, model.default_dist, 2, 6, 30, seed=41)
    net = ScoreNetwork.initialize(MlpSpec(2, 1, (8,)), np.random.default_rng(3))
    net.freeze()
    means = tr.group_score_means(net, grouped)
    for g in range(6):
        inputs = np.hstack([np.broadcast_to(grouped.theta[g], (30, 1)),
                            grouped.data[g]])
        assert np.allclose(means[g], net.forward(inputs).mean(axis=0))


def test_train_mean_zero_targets_give_small_mean_net():
    model = sim.analytic_gaussian_model()
    _, grouped = tr.build_tables(model, model.default_dist, 2, 200, 20, seed=42)
    zero_score = FakeScoreNet(lambda t, x: np.zeros_like(t),
                              lambda t, x: np.zeros((t.shape[0], 1, 1)))
    zero_score.frozen = True
    config = tr.TrainConfig(lambda2=0.0, batch_size=32, max_epochs=600)
    mean_net = tr.train_mean(zero_score, grouped, MlpSpec(1, 1, (8,)), config,
                             seed=43)
    grid = np.linspace(-3, 3, 11).reshape(-1, 1)
    assert np.max(np.abs(mean_net.forward(grid))) < 0.02


def test_train_mean_recovers_constant_bias():
    model = sim.analytic_gaussian_model()
    _, grouped = tr.build_tables(model, model.default_dist, 2, 400, 200, seed=44)
    c = 0.8
    biased = FakeScoreNet(lambda t, x: (x - t) + c,
                          lambda t, x: np.full((t.shape[0], 1, 1), -1.0))
    biased.frozen = True
    config = tr.TrainConfig(lambda2=0.0, batch_size=64, max_epochs=600)
    mean_net = tr.train_mean(biased, grouped, MlpSpec(1, 1, (8,)), config, seed=45)
    grid = np.linspace(-3, 3, 11).reshape(-1, 1)
    values = mean_net.forward(grid)
    assert np.max(np.abs(values - c)) < 0.05


def test_train_mean_requires_frozen_score():
    model = sim.analytic_gaussian_model()
    _, grouped = tr.build_tables(model, model.default_dist, 2, 10, 10, seed=46)
    net = ScoreNetwork.initialize(MlpSpec(2, 1, (8,)), np.random.default_rng(5))
    with pytest.raises(ValueError):
        tr.train_mean(net, grouped, MlpSpec(1, 1, (8,)), tr.TrainConfig(), seed=0)


# ---------------------------------------------------------------------------
# diagnostics

def exact_dscore():
    from scoreroot.scorenet import AnalyticScore
    return DebiasedScore(AnalyticScore(
        theta_dim=1, data_dim=1,
        score_fn=lambda theta, data: np.atleast_2d(data) - theta[0],
        jac_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1, 1),
                                           -1.0)))


def shifted_dscore(c):
    from scoreroot.scorenet import AnalyticScore
    return DebiasedScore(AnalyticScore(
        theta_dim=1, data_dim=1,
        score_fn=lambda theta, data: np.atleast_2d(data) - theta[0] + c,
        jac_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1, 1),
                                           -1.0)))


def test_diagnostics_exact_score():
    model = sim.analytic_gaussian_model()
    diag = tr.estimate_diagnostics(exact_dscore(), model, center=np.zeros(1),
                                   radius=0.5, n_grid=8, mc_draws=4000, seed=3)
    assert diag.eps1 == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= diag.eps2 < 9 * max(diag.eps2_se, 1e-4)
    assert 0.0 <= diag.eps3 < 9 * max(diag.eps3_se, 1e-4)


def test_diagnostics_constant_shift():
    model = sim.analytic_gaussian_model()
    c = 0.5
    diag = tr.estimate_diagnostics(shifted_dscore(c), model, center=np.zeros(1),
                                   radius=0.3, n_grid=8, mc_draws=8000, seed=4)
    assert diag.eps3 == pytest.approx(c * c, rel=0.15)
    assert diag.eps1 > 0.0


def test_diagnostics_requires_oracle():
    model = sim.toy_model()
    from scoreroot.scorenet import AnalyticScore
    ds = DebiasedScore(AnalyticScore(2, 1,
                                     lambda t, d: np.zeros((np.atleast_2d(d).shape[0], 2)),
                                     lambda t, d: np.zeros((np.atleast_2d(d).shape[0], 2, 2))))
    with pytest.raises(NoOracle):
        tr.estimate_diagnostics(ds, model, center=np.zeros(2), radius=0.5,
                                n_grid=4, mc_draws=100, seed=0,
                                want_score_error=True)
    diag = tr.estimate_diagnostics(ds, model, center=np.zeros(2), radius=0.5,
                                   n_grid=4, mc_draws=100, seed=0)
    assert diag.eps1 is None


# ---------------------------------------------------------------------------
# rounds

def test_two_round_on_analytic_oracle():
    model = sim.analytic_gaussian_model()
    observed = model.simulate_dataset([0.4], 300, sim.stream(71))
    settings = tr.RunSettings(n_single=10, n_groups=5, group_size=4,
                              use_analytic_score=True)
    r1, r2 = tr.two_round(model, model.default_dist, observed, settings, seed=72)
    assert r2.warning is None
    # the refinement distribution is centered exactly at the first estimate
    assert np.allclose(np.asarray(r2.dist.mean), r1.theta_hat)
    assert np.allclose(np.asarray(r2.dist.cov),
                       9.0 * r1.sandwich_cov / observed.shape[0], atol=1e-12)
    # analytic score: both rounds solve the same equation
    assert np.allclose(r1.theta_hat, r2.theta_hat, atol=1e-8)
    single = tr.run_round(model, model.default_dist, observed, settings,
                          (72, "round1"))
    assert np.array_equal(single.theta_hat, r1.theta_hat)
