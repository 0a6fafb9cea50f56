"""Gaussian quasi-likelihood objective and its minimization over the parameter box."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import inf, log, pi
from typing import Callable, Optional

import numpy as np

from .errors import LLQMLError, NonFiniteStart, NonPositiveDefinite
from .linalg import chol_logdet_quad
from .models import ObservationSeries, SdeModel, exact_conditional_moments
from .moments import Adaptive, Conventional, Policy, Uniform, propagate_batch

log_ = logging.getLogger(__name__)

LOG_2PI = log(2.0 * pi)


@dataclass(frozen=True)
class ObjectiveSpec:
    model: SdeModel
    data: ObservationSeries
    policy: Policy = field(default_factory=Conventional)
    beta: int = 1
    # "ll" or "exact_oracle"
    moment_source: str = "ll"

    def __post_init__(self):
        if self.moment_source not in ("ll", "exact_oracle"):
            raise ValueError(f"unknown moment source {self.moment_source!r}")
        if self.moment_source == "exact_oracle" and not self.model.has_oracle:
            raise ValueError(f"model {self.model.name!r} has no closed-form moments")
        self.data.check_model(self.model)


@dataclass
class Evaluation:
    value: float
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    accepted: Optional[np.ndarray] = None
    failed: Optional[np.ndarray] = None


def gaussian_qml(z: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Sum of Gaussian negative log-likelihood terms (times two).

    ``z`` and ``mu`` are (K, d), ``sigma`` is (K, d, d). Returns
    ``d K ln(2 pi) + sum_k [ln det sigma_k + r_k^T sigma_k^{-1} r_k]``.

    Raises NonPositiveDefinite when any covariance fails to factorize.
    """
    z = np.atleast_2d(z)
    K, d = z.shape
    logdet, quad = chol_logdet_quad(sigma, z - mu)
    return float(d * K * LOG_2PI + np.sum(logdet + quad))


def evaluate(spec: ObjectiveSpec, theta) -> Evaluation:
    """Objective value together with the predicted moments and step counts."""
    theta = spec.model.box.project(theta)
    t = spec.data.times
    z = spec.data.values
    accepted = failed = None
    try:
        with np.errstate(all="ignore"):
            if spec.moment_source == "exact_oracle":
                mu, sigma = exact_conditional_moments(spec.model, theta, z[:-1], t[:-1], t[1:])
            else:
                mu, sigma, accepted, failed = propagate_batch(
                    spec.model, theta, z[:-1], t[:-1], t[1:], spec.policy, spec.beta
                )
        value = gaussian_qml(z[1:], mu, sigma)
    except (NonPositiveDefinite, LLQMLError, np.linalg.LinAlgError):
        return Evaluation(inf)
    if not np.isfinite(value):
        value = inf
    return Evaluation(value, mu, sigma, accepted, failed)


def objective(spec: ObjectiveSpec, theta) -> float:
    """Quasi-likelihood objective; ``+inf`` marks parameters with a non-PD covariance."""
    return evaluate(spec, theta).value


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 2000
    xtol: float = 1e-8
    ftol: float = 1e-10


@dataclass
class EstimateResult:
    theta: np.ndarray
    objective: float
    iterations: int
    evaluations: int
    converged: bool
    # "xtol", "ftol" or "max_iters"
    termination: str
    accepted: Optional[np.ndarray] = None
    failed: Optional[np.ndarray] = None

    def to_dict(self, param_names=None) -> dict:
        names = param_names or [f"theta{i}" for i in range(len(self.theta))]
        out = {
            "theta": {n: float(v) for n, v in zip(names, self.theta)},
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "evaluations": int(self.evaluations),
            "converged": bool(self.converged),
            "termination": self.termination,
        }
        if self.accepted is not None:
            out["accepted_steps"] = [int(v) for v in self.accepted]
            out["failed_steps"] = [int(v) for v in self.failed]
        return out


def nelder_mead(fun: Callable[[np.ndarray], float], x0, lower, upper,
                opts: OptimizerOptions = OptimizerOptions()):
    """Nelder-Mead simplex search with every trial point projected onto a box.

    Stops when the simplex diameter (max-norm distance to the best vertex)
    drops below ``xtol``, or the spread of vertex values drops below ``ftol``,
    or after ``max_iters`` iterations.

    Returns ``(x, f, iterations, evaluations, termination)``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    n = x0.size
    nfev = 0

    def f(x):
        nonlocal nfev
        nfev += 1
        v = fun(x)
        return v if np.isfinite(v) else inf

    simplex = [x0]
    for i in range(n):
        x = x0.copy()
        delta = 0.05 * x[i] if x[i] != 0.0 else 0.00025
        x[i] += delta
        if x[i] > upper[i] or x[i] < lower[i]:
            x[i] = x0[i] - delta
        simplex.append(np.clip(x, lower, upper))
    simplex = np.array(simplex)
    fvals = np.array([f(x) for x in simplex])
    if not np.any(np.isfinite(fvals)):
        raise NonFiniteStart("objective is non-finite at every starting vertex")

    it = 0
    termination = "max_iters"
    while it < opts.max_iters:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        diameter = np.max(np.abs(simplex[1:] - simplex[0]))
        spread = fvals[-1] - fvals[0]
        if diameter < opts.xtol:
            termination = "xtol"
            break
        if spread < opts.ftol:
            termination = "ftol"
            break
        it += 1

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = np.clip(2.0 * centroid - worst, lower, upper)
        fr = f(xr)
        if fr < fvals[0]:
            xe = np.clip(3.0 * centroid - 2.0 * worst, lower, upper)
            fe = f(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = np.clip(1.5 * centroid - 0.5 * worst, lower, upper)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = np.clip(0.5 * centroid + 0.5 * worst, lower, upper)
            fc = f(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        # shrink toward the best vertex
        for j in range(1, n + 1):
            simplex[j] = simplex[0] + 0.5 * (simplex[j] - simplex[0])
            fvals[j] = f(simplex[j])

    best = int(np.argmin(fvals))
    return simplex[best].copy(), float(fvals[best]), it, nfev, termination


def minimize(spec: ObjectiveSpec, theta_init, opts: OptimizerOptions = OptimizerOptions()
             ) -> EstimateResult:
    box = spec.model.box
    x, fx, it, nfev, termination = nelder_mead(
        lambda th: objective(spec, th), box.project(theta_init), box.lower, box.upper, opts
    )
    if not np.isfinite(fx):
        raise NonFiniteStart("optimizer ended without a finite objective value")
    final = evaluate(spec, x)
    return EstimateResult(
        theta=x, objective=fx, iterations=it, evaluations=nfev,
        converged=termination != "max_iters", termination=termination,
        accepted=final.accepted if isinstance(spec.policy, Adaptive) else None,
        failed=final.failed if isinstance(spec.policy, Adaptive) else None,
    )


# ---------------------------------------------------------------------------
# estimator variants


@dataclass(frozen=True)
class Variant:
    """An estimator flavour: ``exact``, ``conventional``, ``uniform`` or ``adaptive``.

    ``h`` is the absolute sub-step for ``uniform``; ``tol`` the tolerance
    quadruple for ``adaptive``.
    """

    kind: str
    h: Optional[float] = None
    tol: Optional[Adaptive] = None
    beta: int = 1

    def __post_init__(self):
        if self.kind not in ("exact", "conventional", "uniform", "adaptive"):
            raise ValueError(f"unknown estimator variant {self.kind!r}")
        if self.kind == "uniform" and not (self.h and self.h > 0):
            raise ValueError("uniform variant needs a positive h")
        if self.kind == "adaptive" and self.tol is None:
            object.__setattr__(self, "tol", Adaptive())

    def policy(self) -> Policy:
        if self.kind == "uniform":
            return Uniform(self.h)
        if self.kind == "adaptive":
            return self.tol
        return Conventional()

    def spec(self, model: SdeModel, data: ObservationSeries) -> ObjectiveSpec:
        source = "exact_oracle" if self.kind == "exact" else "ll"
        return ObjectiveSpec(model, data, self.policy(), self.beta, source)


def estimate(model: SdeModel, data: ObservationSeries, variant: Variant, theta_init,
             opts: OptimizerOptions = OptimizerOptions()) -> EstimateResult:
    """Fit ``model`` to ``data`` with the chosen estimator variant."""
    result = minimize(variant.spec(model, data), theta_init, opts)
    log_.debug("%s %s -> %s (%s)", model.name, variant, result.theta, result.termination)
    return result
