import dataclasses
import math

import numpy as np
import pytest

from llqml.errors import NonFiniteStart, NonPositiveDefinite
from llqml.harness import ExperimentConfig, VariantConfig, initial_theta, run_experiment
from llqml.linalg import chol_logdet_quad
from llqml.models import ObservationSeries, builtin, default_box
from llqml.moments import Adaptive, Conventional, Uniform
from llqml.qml import (
    LOG_2PI,
    ObjectiveSpec,
    OptimizerOptions,
    Variant,
    estimate,
    evaluate,
    gaussian_qml,
    minimize,
    nelder_mead,
    objective,
)
from llqml.simulate import PathGrid, RngStream, simulate_paths, subsample


@pytest.fixture(scope="module")
def ex1_series():
    model = builtin("example1")
    grid = PathGrid.spanning(model.t0, 1e-3, 10.0)
    paths, _ = simulate_paths(model, model.theta0, grid, [RngStream(5, 0)])
    return model, grid, paths[0]


# ---------------------------------------------------------------- objective


def test_gaussian_qml_single_terms():
    assert gaussian_qml(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1, 1))) == pytest.approx(
        math.log(2 * math.pi))
    value = gaussian_qml(np.ones((1, 1)), np.zeros((1, 1)), np.full((1, 1, 1), 0.5))
    assert value == pytest.approx(math.log(2 * math.pi) + math.log(0.5) + 2.0)
    assert value == pytest.approx(3.1447299, abs=1e-7)


def test_gaussian_qml_constant_scales_with_dimension():
    z = np.zeros((3, 2))
    value = gaussian_qml(z, z, np.broadcast_to(np.eye(2), (3, 2, 2)))
    assert value == pytest.approx(2 * 3 * LOG_2PI)


def test_gaussian_qml_rejects_non_pd():
    with pytest.raises(NonPositiveDefinite):
        gaussian_qml(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))


def test_objective_exact_vs_fine_ll(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    u_exact = objective(Variant("exact").spec(model, obs), model.theta0)
    u_ll = objective(ObjectiveSpec(model, obs, Uniform(1 / 64)), model.theta0)
    assert abs(u_exact - u_ll) / abs(u_exact) < 1e-2


def test_objective_is_deterministic(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 0.5, 5.0)
    spec = ObjectiveSpec(model, obs, Adaptive())
    assert objective(spec, [-0.2, 0.15]) == objective(spec, [-0.2, 0.15])


def test_objective_splits_over_intervals(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 0.5, 10.0)
    j = 7
    head = ObservationSeries(obs.times[:j + 1], obs.values[:j + 1])
    tail = ObservationSeries(obs.times[j:], obs.values[j:])
    th = [-0.12, 0.09]
    whole = objective(ObjectiveSpec(model, obs, Uniform(0.1)), th)
    parts = (objective(ObjectiveSpec(model, head, Uniform(0.1)), th)
             + objective(ObjectiveSpec(model, tail, Uniform(0.1)), th))
    assert whole == pytest.approx(parts, rel=1e-13)


def test_objective_non_pd_is_infinite():
    # sigma = 0 gives a zero predicted covariance
    base = builtin("ou")
    model = dataclasses.replace(base, box=default_box(base.theta0))
    obs = ObservationSeries(np.arange(4.0), np.array([1.0, 0.5, 0.2, 0.1]))
    assert objective(ObjectiveSpec(model, obs), [-1.0, 0.0]) == math.inf
    assert evaluate(ObjectiveSpec(model, obs), [-1.0, 0.0]).mu is None


def test_objective_projects_onto_box(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    spec = ObjectiveSpec(model, obs)
    assert objective(spec, [-50.0, 0.1]) == objective(spec, [model.box.lower[0], 0.1])


def test_objective_spec_validation(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    with pytest.raises(ValueError, match="moment source"):
        ObjectiveSpec(model, obs, moment_source="sampled")
    with pytest.raises(ValueError, match="closed-form"):
        ObjectiveSpec(builtin("example3"), ObservationSeries([0.0, 1.0], np.ones((2, 2))),
                      moment_source="exact_oracle")
    with pytest.raises(ValueError, match="dimension"):
        ObjectiveSpec(builtin("example3"), obs)


def test_evaluate_reports_adaptive_step_counts(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    ev = evaluate(ObjectiveSpec(model, obs, Adaptive()), model.theta0)
    assert ev.accepted.shape == (obs.M - 1,)
    assert np.all(ev.accepted >= 1) and np.all(ev.failed >= 0)


# ---------------------------------------------------------------- identities


def test_objective_decomposition_identities():
    rng = np.random.default_rng(8)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        X = rng.normal(size=(d, d))
        S = X @ X.T + d * np.eye(d)
        Y = rng.normal(size=(d, d))
        S_h = S + 0.3 * (Y @ Y.T) - 0.1 * np.eye(d)
        S_h = 0.5 * (S_h + S_h.T)
        if np.linalg.eigvalsh(S_h).min() <= 0:
            S_h += (1e-3 - np.linalg.eigvalsh(S_h).min()) * np.eye(d)
        dS = S - S_h
        r = rng.normal(size=d)
        S_inv = np.linalg.inv(S)
        K = np.eye(d) - S_inv @ dS

        logdet_h, quad_h = chol_logdet_quad(S_h, r)
        logdet, _ = chol_logdet_quad(S, r)
        assert logdet_h == pytest.approx(logdet + math.log(np.linalg.det(K)), abs=1e-9)
        inv_h = S_inv + S_inv @ dS @ np.linalg.inv(K) @ S_inv
        assert quad_h == pytest.approx(r @ inv_h @ r, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- optimizer


def test_nelder_mead_quadratic():
    c = np.array([0.3, -1.2, 2.0])
    fun = lambda th: float(np.sum((th - c) ** 2))  # noqa: E731
    # with the value-spread stop, a quadratic pins x only to about sqrt(ftol)
    x, f, it, nfev, term = nelder_mead(fun, np.zeros(3), -5 * np.ones(3), 5 * np.ones(3))
    np.testing.assert_allclose(x, c, atol=10 * math.sqrt(OptimizerOptions().ftol))
    assert term in ("xtol", "ftol")
    assert nfev > it
    x, *_ = nelder_mead(fun, np.zeros(3), -5 * np.ones(3), 5 * np.ones(3),
                        OptimizerOptions(ftol=1e-16))
    np.testing.assert_allclose(x, c, atol=1e-6)


def test_nelder_mead_respects_box():
    x, *_ = nelder_mead(lambda th: float((th[0] - 3.0) ** 2), np.array([0.5]),
                        np.array([-1.0]), np.array([1.0]))
    assert x[0] == pytest.approx(1.0, abs=1e-7)


def test_nelder_mead_max_iters():
    *_, it, _, term = nelder_mead(lambda th: float(np.sum(th**2)), np.ones(2),
                                  -5 * np.ones(2), 5 * np.ones(2),
                                  OptimizerOptions(max_iters=3, xtol=0.0, ftol=0.0))
    assert (it, term) == (3, "max_iters")


def test_nelder_mead_tolerates_infinite_vertices():
    fun = lambda th: math.inf if th[0] > 1.02 else float((th[0] - 0.5) ** 2)  # noqa: E731
    x, f, *_ = nelder_mead(fun, np.array([1.0]), np.array([-5.0]), np.array([5.0]))
    assert x[0] == pytest.approx(0.5, abs=1e-6)


def test_nelder_mead_non_finite_start():
    with pytest.raises(NonFiniteStart):
        nelder_mead(lambda th: math.nan, np.ones(2), -np.ones(2), 2 * np.ones(2))


def test_minimize_result_inside_box_and_finite(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    res = minimize(ObjectiveSpec(model, obs), model.theta0 * 1.4)
    assert model.box.contains(res.theta)
    assert np.isfinite(res.objective)
    assert res.converged
    assert res.accepted is None
    d = res.to_dict(list(model.param_names))
    assert set(d["theta"]) == {"alpha", "sigma"}


def test_minimize_adaptive_attaches_step_stats(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 5.0)
    res = minimize(ObjectiveSpec(model, obs, Adaptive()), model.theta0)
    assert res.accepted.shape == (obs.M - 1,)
    assert "accepted_steps" in res.to_dict()


def test_restart_from_optimum_is_fixed_point(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 0.01, 10.0)
    first = estimate(model, obs, Variant("exact"), model.theta0 * 1.3)
    again = estimate(model, obs, Variant("exact"), first.theta)
    assert abs(again.objective - first.objective) < OptimizerOptions().ftol


def test_exact_estimate_inside_harness_band():
    # the harness's own estimator spread on dense data brackets a refit from a different start
    config = ExperimentConfig(example="example1", replicates=10, seed=21, deltas=(0.01,),
                              Ts=(10.0,), variants=(VariantConfig("exact"),))
    report = run_experiment(config)
    model = builtin("example1")
    grid = PathGrid.spanning(model.t0, config.dt, 10.0)
    paths, _ = simulate_paths(model, model.theta0, grid, [RngStream(21, 0)])
    obs = subsample(paths[0], grid, model.t0, 0.01, 10.0)
    start = 2.0 * model.theta0 - initial_theta(model.theta0, 21, 0)
    refit = estimate(model, obs, Variant("exact"), start)
    for i, name in enumerate(model.param_names):
        row = next(r for r in report.summary if r["parameter"] == name)
        assert row["min"] <= refit.theta[i] <= row["max"]
        own = next(e["estimate"] for e in report.estimates
                   if e["replicate"] == 0 and e["parameter"] == name)
        assert refit.theta[i] == pytest.approx(own, abs=1e-4)


# ---------------------------------------------------------------- variants


def test_conventional_equals_uniform_delta_bitwise(ex1_series):
    model, grid, path = ex1_series
    obs = subsample(path, grid, model.t0, 1.0, 10.0)
    a = estimate(model, obs, Variant("conventional"), model.theta0 * 0.8)
    b = estimate(model, obs, Variant("uniform", h=1.0), model.theta0 * 0.8)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.objective == b.objective


def test_variant_policies():
    assert Variant("conventional").policy() == Conventional()
    assert Variant("uniform", h=0.25).policy() == Uniform(0.25)
    assert Variant("adaptive").policy() == Adaptive()
    with pytest.raises(ValueError):
        Variant("order3")
    with pytest.raises(ValueError):
        Variant("uniform")
