import math

import numpy as np
import pytest
from scipy import stats

from llqml.errors import NotAdditiveNoise, SimulationBlowup
from llqml.models import builtin, exact_conditional_moments
from llqml.moments import step_batch
from llqml.simulate import (
    PathGrid,
    RngStream,
    euler_path,
    euler_paths,
    ll_path,
    ll_paths,
    simulate_paths,
    subsample,
)


def _streams(seed, ids):
    return [RngStream(seed, i) for i in ids]


# ---------------------------------------------------------------- grid and streams


def test_path_grid_validation():
    with pytest.raises(ValueError):
        PathGrid(0.0, 0.0, 10)
    with pytest.raises(ValueError):
        PathGrid(0.0, 0.1, 0)
    with pytest.raises(ValueError):
        PathGrid.spanning(0.0, 0.3, 1.0)
    grid = PathGrid.spanning(0.5, 1e-3, 2.0)
    assert grid.n_steps == 2000
    assert grid.times[-1] == pytest.approx(2.5)


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(7, 3).generator().standard_normal(5)
    b = RngStream(7, 3).generator().standard_normal(5)
    c = RngStream(7, 4).generator().standard_normal(5)
    d = RngStream(7, 3).generator(substream=1).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


# ---------------------------------------------------------------- Euler


def test_euler_zero_coefficients_constant_path():
    model = builtin("ou")
    path = euler_path(model, [0.0, 0.0], PathGrid(0.0, 0.01, 100), RngStream(1))
    np.testing.assert_array_equal(path, np.ones((101, 1)))


def test_euler_deterministic_ou_matches_exponential():
    model = builtin("ou")
    path = euler_path(model, [-1.0, 0.0], PathGrid(0.0, 1e-4, 10_000), RngStream(1))
    assert path[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-3)


def test_euler_example1_mean_large_sample():
    model = builtin("example1")
    grid = PathGrid.spanning(0.5, 1e-3, 1.0)
    finals = []
    for chunk in range(10):
        paths, alive = euler_paths(model, model.theta0, grid,
                                   _streams(99, range(chunk * 10_000, (chunk + 1) * 10_000)))
        assert alive.all()
        finals.append(paths[:, -1, 0])
    x = np.concatenate(finals)
    mu, S = exact_conditional_moments(model, model.theta0, np.array([1.0]), 0.5, 1.5)
    assert mu[0] == pytest.approx(0.9048374, abs=1e-7)
    assert abs(x.mean() - mu[0]) < 3 * x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.var(ddof=1) - S[0, 0]) < 4 * S[0, 0] * math.sqrt(2.0 / (x.size - 1))


def test_euler_blowup_is_per_replicate():
    model = builtin("gbm")
    grid = PathGrid(0.0, 0.1, 400)
    paths, alive = euler_paths(model, [60.0, 0.1], grid, _streams(0, range(2)))
    assert not alive.any()
    assert np.isnan(paths[0, -1, 0])
    ok, alive_ok = euler_paths(model, [0.05, 0.2], grid, _streams(0, range(2)))
    assert alive_ok.all() and np.all(np.isfinite(ok))
    with pytest.raises(SimulationBlowup):
        euler_path(model, [60.0, 0.1], grid, RngStream(0))


# ---------------------------------------------------------------- LL


def test_ll_ou_transition_law_ks():
    model = builtin("ou")
    th = [-1.0, 1.0]
    grid = PathGrid(0.0, 0.5, 1)
    paths, _ = ll_paths(model, th, grid, _streams(3, range(10_000)), x0=[0.8])
    mu, S = exact_conditional_moments(model, th, np.array([0.8]), 0.0, 0.5)
    res = stats.kstest(paths[:, 1, 0], "norm", args=(mu[0], math.sqrt(S[0, 0])))
    assert res.pvalue > 0.01


def test_ll_zero_noise_is_deterministic_ll_integration():
    model = builtin("example3")
    th = np.array([0.5, 0.0])
    grid = PathGrid(0.0, 0.05, 20)
    a = ll_path(model, th, grid, RngStream(1))
    b = ll_path(model, th, grid, RngStream(2))
    np.testing.assert_array_equal(a, b)
    y = model.x0.copy()
    for n in range(grid.n_steps):
        y, _ = step_batch(model, th, np.array([n * 0.05]), y[None], np.outer(y, y)[None],
                          np.array([0.05]))
        y = y[0]
        np.testing.assert_allclose(a[n + 1], y, rtol=1e-12)


def test_ll_rejects_multiplicative_noise():
    with pytest.raises(NotAdditiveNoise):
        ll_path(builtin("example4"), builtin("example4").theta0, PathGrid(0.0, 0.01, 5),
                RngStream(0))


def test_ll_example2_stays_finite():
    model = builtin("example2")
    grid = PathGrid.spanning(model.t0, 1e-3, 30.0)
    paths, alive = simulate_paths(model, model.theta0, grid, _streams(4, range(3)))
    assert alive.all()
    assert np.all(np.isfinite(paths))


@pytest.mark.parametrize("name, t1", [("example1", 1.5), ("example2", 0.21)])
def test_monte_carlo_matches_closed_form_moments(name, t1):
    model = builtin(name)
    grid = PathGrid.spanning(model.t0, 1e-3, t1 - model.t0)
    paths, _ = simulate_paths(model, model.theta0, grid, _streams(17, range(10_000)))
    x = paths[:, -1, 0]
    mu, S = exact_conditional_moments(model, model.theta0, model.x0, model.t0, t1)
    se_mean = math.sqrt(S[0, 0] / x.size)
    se_var = S[0, 0] * math.sqrt(2.0 / (x.size - 1))
    assert abs(x.mean() - mu[0]) < 4 * se_mean
    assert abs(x.var(ddof=1) - S[0, 0]) < 4 * se_var


# ---------------------------------------------------------------- reproducibility


@pytest.mark.parametrize("name", ["example1", "example3"])
def test_paths_independent_of_batch_order(name):
    model = builtin(name)
    grid = PathGrid(model.t0, 1e-2, 200)
    forward, _ = simulate_paths(model, model.theta0, grid, _streams(5, [0, 1, 2, 3]))
    shuffled, _ = simulate_paths(model, model.theta0, grid, _streams(5, [3, 1]))
    np.testing.assert_array_equal(forward[3], shuffled[0])
    np.testing.assert_array_equal(forward[1], shuffled[1])
    single = (euler_path if model.integrator == "euler" else ll_path)(
        model, model.theta0, grid, RngStream(5, 2))
    np.testing.assert_array_equal(forward[2], single)


# ---------------------------------------------------------------- subsample


def test_subsample_every_grid_point():
    grid = PathGrid(0.0, 0.1, 10)
    path = np.arange(11.0)[:, None]
    obs = subsample(path, grid, 0.0, 0.1, 1.0)
    assert obs.M == 10
    np.testing.assert_array_equal(obs.values[:, 0], np.arange(10.0))


def test_subsample_window_count():
    grid = PathGrid.spanning(0.5, 1e-3, 10.0)
    path = np.zeros((grid.n_steps + 1, 1))
    obs = subsample(path, grid, 0.5, 1.0, 10.0)
    assert obs.M == 10
    np.testing.assert_allclose(obs.times, 0.5 + np.arange(10.0))


def test_subsample_composition():
    grid = PathGrid.spanning(0.0, 1e-3, 4.0)
    path = np.random.default_rng(0).normal(size=(grid.n_steps + 1, 2))
    fine = subsample(path, grid, 0.0, 0.1, 4.0)
    coarse = subsample(path, grid, 0.0, 0.2, 4.0)
    np.testing.assert_array_equal(fine.values[::2], coarse.values)
    np.testing.assert_array_equal(fine.times[::2], coarse.times)


@pytest.mark.parametrize("t0, delta, T", [
    (0.0, 0.15, 1.5),    # delta not on the grid
    (0.0, 0.2, 1.1),     # T not a multiple of delta
    (0.05, 0.2, 1.0),    # start off the grid
    (0.0, 0.5, 20.0),    # window past the end
])
def test_subsample_alignment_errors(t0, delta, T):
    grid = PathGrid(0.0, 0.1, 100)
    with pytest.raises(ValueError):
        subsample(np.zeros((101, 1)), grid, t0, delta, T)
