import numpy as np
import pytest

from scoreroot import estimator as est
from scoreroot import simulators as sim
from scoreroot.errors import Diverged, MaxIterations
from scoreroot.scorenet import AnalyticScore, DebiasedScore


def gaussian_dscore(scale=1.0):
    """Exact score of N(theta, 1), optionally rescaled by a positive constant."""
    return DebiasedScore(AnalyticScore(
        theta_dim=1, data_dim=1,
        score_fn=lambda theta, data: scale * (np.atleast_2d(data) - theta[0]),
        jac_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1, 1),
                                           -scale)))


@pytest.fixture
def observed():
    model = sim.analytic_gaussian_model()
    return model.simulate_dataset([0.5], 400, sim.stream(123))


def test_newton_exact_after_one_step(observed):
    ds = gaussian_dscore()
    res = est.find_root(ds, observed, np.array([4.0]))
    mle = observed.mean()
    assert res.converged
    assert abs(res.theta[0] - mle) <= 1e-10
    # the first update already lands on the mean; the second certifies it
    assert res.trace[1][1][0] == pytest.approx(mle, abs=1e-12)


def test_identity_geometric_contraction(observed):
    ds = gaussian_dscore()
    n = observed.shape[0]
    res = est.find_root(ds, observed, np.array([3.0]), precond=est.identity(),
                        alpha=0.5 / n, tol=1e-12, max_iter=100)
    errs = np.abs(res.trace_array()[:, 1] - observed.mean())
    ratios = errs[1:8] / errs[:7]
    assert np.allclose(ratios, 0.5, atol=1e-10)


def test_identity_full_step_is_exact_on_unit_fisher(observed):
    ds = gaussian_dscore()
    res = est.find_root(ds, observed, np.array([2.0]), precond=est.identity())
    assert res.converged
    assert abs(res.theta[0] - observed.mean()) <= 1e-10


def test_root_invariant_under_dataset_duplication(observed):
    ds = gaussian_dscore()
    doubled = np.vstack([observed, observed])
    r1 = est.find_root(ds, observed, np.array([2.0]))
    r2 = est.find_root(ds, doubled, np.array([2.0]))
    assert abs(r1.theta[0] - r2.theta[0]) <= 1e-10


def test_score_scaling_leaves_newton_iterates_identical(observed):
    r1 = est.find_root(ds := gaussian_dscore(1.0), observed, np.array([3.0]))
    r2 = est.find_root(gaussian_dscore(7.5), observed, np.array([3.0]))
    t1, t2 = r1.trace_array(), r2.trace_array()
    assert t1.shape == t2.shape
    assert np.allclose(t1[:, 1], t2[:, 1], atol=1e-12)
    assert abs(r1.theta[0] - r2.theta[0]) <= 1e-12


def test_root_certificate(observed):
    ds = gaussian_dscore()
    tol = 1e-6
    res = est.find_root(ds, observed, np.array([2.0]), tol=tol)
    score_norm = np.linalg.norm(ds.eval_aggregate(res.theta, observed))
    jac_norm = np.linalg.norm(ds.aggregate_jacobian(res.theta, observed), 2)
    assert score_norm <= jac_norm * tol * 10


def test_trust_radius_divergence():
    # score pointing away from the root forces escape
    bad = DebiasedScore(AnalyticScore(
        theta_dim=1, data_dim=1,
        score_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1),
                                             theta[0] + 10.0),
        jac_fn=lambda theta, data: np.full((np.atleast_2d(data).shape[0], 1, 1), 1.0)))
    with pytest.raises(Diverged) as err:
        est.find_root(bad, np.zeros((10, 1)), np.array([1.0]),
                      precond=est.identity(), alpha=1.0, trust_radius=5.0)
    assert err.value.result is not None


def test_max_iterations_carries_partial_result(observed):
    ds = gaussian_dscore()
    n = observed.shape[0]
    with pytest.raises(MaxIterations) as err:
        est.find_root(ds, observed, np.array([3.0]), precond=est.identity(),
                      alpha=0.01 / n, tol=1e-14, max_iter=5)
    assert err.value.result.iterations == 5
    assert not err.value.result.converged


def test_bounds_projection(observed):
    ds = gaussian_dscore()
    res = est.find_root(ds, observed, np.array([3.0]), bounds=([0.0], [0.45]))
    # interior root is above the ceiling, so the iterate parks at the face
    assert res.theta[0] == pytest.approx(0.45, abs=1e-9)


def test_max_step_cap(observed):
    ds = gaussian_dscore()
    res = est.find_root(ds, observed, np.array([5.0]), max_step=0.25)
    steps = np.diff(res.trace_array()[:, 1])
    assert np.max(np.abs(steps)) <= 0.25 + 1e-12
    assert abs(res.theta[0] - observed.mean()) <= 1e-8


def test_initialize_reproducible_and_round1():
    model = sim.analytic_gaussian_model()
    a = est.initialize(model, model.default_dist, "random", seed=9)
    b = est.initialize(model, model.default_dist, "random", seed=9)
    assert np.array_equal(a, b)
    given = np.array([1.23])
    out = est.initialize(model, model.default_dist, "round1",
                         round1_estimate=given)
    assert np.array_equal(out, given)
    out[0] = 0.0
    assert given[0] == 1.23


def test_initialize_uniform_over_box():
    model = sim.analytic_gaussian_model()
    lo, hi = model.default_dist.bounds
    draws = np.array([est.initialize(model, model.default_dist, "random",
                                     seed=(777, k))[0]
                      for k in range(10_000)])
    u = (draws - lo[0]) / (hi[0] - lo[0])
    grid = np.sort(u)
    ks = np.max(np.abs(grid - (np.arange(1, grid.size + 1) / grid.size)))
    assert ks < 0.02


def test_compare_dynamics_on_analytic(observed):
    ds = gaussian_dscore()
    qn, ga = est.compare_dynamics(ds, observed, np.array([3.0]),
                                  alpha_identity=0.5 / observed.shape[0])
    # frozen Newton matrix is exact here: one real step plus certification
    assert qn.iterations <= 2
    expected = int(np.ceil(np.log(1e-6 / abs(3.0 - observed.mean()))
                           / np.log(0.5))) + 1
    assert abs(ga.iterations - expected) <= 2
    assert np.linalg.norm(qn.theta - ga.theta) <= 10 * 1e-6


def test_trace_csv_round_trip(tmp_path, observed):
    ds = gaussian_dscore()
    res = est.find_root(ds, observed, np.array([2.0]))
    path = tmp_path / "trace.csv"
    est.write_trace_csv(path, res)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,theta1,score_norm"
    assert len(lines) == len(res.trace) + 1
