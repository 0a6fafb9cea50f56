"""SDE model specification, builtin test equations and observation series.

A model is ``dx = f(t, x; theta) dt + sum_i g_i(t, x; theta) dw_i``. All
evaluators are vectorized over a leading batch axis of length K:

=================  ======================  ==================
evaluator          signature               returns
=================  ======================  ==================
``drift``          (t[K], x[K,d], theta)   f, shape (K, d)
``drift_jac``                              df/dx, (K, d, d)
``drift_dt``                               df/dt, (K, d)
``diffusion``                              G = [g_1..g_m], (K, d, m)
``diffusion_jac``                          dg_i/dx, (K, m, d, d)
``diffusion_dt``                           dG/dt, (K, d, m)
``drift_hess``                             (K, d, d, d), [k, i, j, l] = d2 f_i / dx_j dx_l
``diffusion_hess``                         (K, m, d, d, d)
=================  ======================  ==================
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import NoOracle

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
MomentOracle = Callable[
    [np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]
]

POSITIVE_FLOOR = 1e-8


@dataclass(frozen=True)
class ParameterBox:
    """Closed coordinate box for the parameters."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError("box lower bounds must be below upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def project(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


def default_box(theta0, positive=()) -> ParameterBox:
    """Box ``[-10|theta0| - 1, 10|theta0| + 1]``, floored at 1e-8 for ``positive``."""
    theta0 = np.asarray(theta0, dtype=float)
    width = 10.0 * np.abs(theta0) + 1.0
    lower = -width
    for i in positive:
        lower[i] = POSITIVE_FLOOR
    return ParameterBox(lower, width.copy())


@dataclass(frozen=True)
class SdeModel:
    name: str
    d: int
    m: int
    param_names: tuple[str, ...]
    theta0: np.ndarray
    box: ParameterBox
    t0: float
    x0: np.ndarray
    drift: Evaluator
    drift_jac: Evaluator
    drift_dt: Evaluator
    diffusion: Evaluator
    diffusion_jac: Evaluator
    diffusion_dt: Evaluator
    drift_hess: Optional[Evaluator] = None
    diffusion_hess: Optional[Evaluator] = None
    exact: Optional[MomentOracle] = None
    # path integrator used by the simulation harness: "euler" or "ll"
    integrator: str = "euler"
    # parameters that the tables also report squared
    variance_params: tuple[str, ...] = field(default_factory=tuple)

    @property
    def p(self) -> int:
        return len(self.param_names)

    @property
    def has_hessians(self) -> bool:
        return self.drift_hess is not None and self.diffusion_hess is not None

    @property
    def has_oracle(self) -> bool:
        return self.exact is not None


def exact_conditional_moments(model: SdeModel, theta, z, t_from, t_to):
    """Closed-form conditional mean and covariance of x(t_to) given x(t_from) = z.

    Scalar call: ``z`` of shape (d,) and scalar times give ``(mu[d], Sigma[d, d])``.
    Batched call: ``z`` of shape (K, d) and times of shape (K,).
    """
    if model.exact is None:
        raise NoOracle(f"model {model.name!r} has no closed-form moments")
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    K = Z.shape[0]
    t_from = np.broadcast_to(np.asarray(t_from, dtype=float), (K,))
    t_to = np.broadcast_to(np.asarray(t_to, dtype=float), (K,))
    mu, sigma = model.exact(theta, Z, t_from, t_to)
    if single:
        return mu[0], sigma[0]
    return mu, sigma


# ---------------------------------------------------------------------------
# builtin equations


def _zeros(K, *shape):
    return np.zeros((K,) + shape)


def _example1() -> SdeModel:
    # dx = alpha t x dt + sigma sqrt(t) x dw
    def drift(t, x, th):
        return th[0] * t[:, None] * x

    def drift_jac(t, x, th):
        return (th[0] * t)[:, None, None] * np.ones((1, 1, 1))

    def drift_dt(t, x, th):
        return th[0] * x

    def diffusion(t, x, th):
        return (th[1] * np.sqrt(t)[:, None] * x)[:, :, None]

    def diffusion_jac(t, x, th):
        return (th[1] * np.sqrt(t))[:, None, None, None] * np.ones((1, 1, 1, 1))

    def diffusion_dt(t, x, th):
        return (th[1] * x / (2.0 * np.sqrt(t))[:, None])[:, :, None]

    def exact(th, z, t_from, t_to):
        alpha, sigma = th
        dt2 = t_to**2 - t_from**2
        mu = z * np.exp(alpha * dt2 / 2.0)[:, None]
        # z^2 e^{(alpha + sigma^2/2) dt2} - mu^2, without cancellation
        var = mu**2 * np.expm1(sigma**2 * dt2 / 2.0)[:, None]
        return mu, var[:, :, None]

    theta0 = np.array([-0.1, 0.1])
    return SdeModel(
        name="example1", d=1, m=1, param_names=("alpha", "sigma"),
        theta0=theta0, box=default_box(theta0, positive=(1,)),
        t0=0.5, x0=np.array([1.0]),
        drift=drift, drift_jac=drift_jac, drift_dt=drift_dt,
        diffusion=diffusion, diffusion_jac=diffusion_jac, diffusion_dt=diffusion_dt,
        drift_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1, 1),
        exact=exact, integrator="euler",
    )


def _example2() -> SdeModel:
    # dx = alpha t x dt + sigma t^2 exp(alpha t^2 / 2) dw1 + rho sqrt(t) dw2
    def drift(t, x, th):
        return th[0] * t[:, None] * x

    def drift_jac(t, x, th):
        return (th[0] * t)[:, None, None] * np.ones((1, 1, 1))

    def drift_dt(t, x, th):
        return th[0] * x

    def diffusion(t, x, th):
        alpha, sigma, rho = th
        g1 = sigma * t**2 * np.exp(alpha * t**2 / 2.0)
        g2 = rho * np.sqrt(t)
        return np.stack([g1, g2], axis=-1)[:, None, :]

    def diffusion_dt(t, x, th):
        alpha, sigma, rho = th
        g1t = sigma * (2.0 * t + alpha * t**3) * np.exp(alpha * t**2 / 2.0)
        g2t = rho / (2.0 * np.sqrt(t))
        return np.stack([g1t, g2t], axis=-1)[:, None, :]

    def exact(th, z, t_from, t_to):
        alpha, sigma, rho = th
        mu = z * np.exp(alpha * (t_to**2 - t_from**2) / 2.0)[:, None]
        var = (
            rho**2 / (2.0 * alpha) * np.exp(alpha * (t_to**2 - t_from**2))
            + sigma**2 / 5.0 * (t_to**5 - t_from**5) * np.exp(alpha * t_to**2)
            - rho**2 / (2.0 * alpha)
        )
        return mu, var[:, None, None]

    theta0 = np.array([-0.25, 5.0, 0.1])
    return SdeModel(
        name="example2", d=1, m=2, param_names=("alpha", "sigma", "rho"),
        theta0=theta0, box=default_box(theta0, positive=(1, 2)),
        t0=0.01, x0=np.array([10.0]),
        drift=drift, drift_jac=drift_jac, drift_dt=drift_dt,
        diffusion=diffusion,
        diffusion_jac=lambda t, x, th: _zeros(len(t), 2, 1, 1),
        diffusion_dt=diffusion_dt,
        drift_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 2, 1, 1, 1),
        exact=exact, integrator="ll",
    )


def _vdp_drift_hess(t, x):
    # f_2 = -(x1^2 - 1) x2 + (terms linear in x1)
    H = _zeros(len(t), 2, 2, 2)
    H[:, 1, 0, 0] = -2.0 * x[:, 1]
    H[:, 1, 0, 1] = -2.0 * x[:, 0]
    H[:, 1, 1, 0] = -2.0 * x[:, 0]
    return H


def _example3() -> SdeModel:
    # Van der Pol with random input:
    # dx1 = x2 dt,  dx2 = (-(x1^2 - 1) x2 - x1 + alpha) dt + sigma dw
    def drift(t, x, th):
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x2, -(x1**2 - 1.0) * x2 - x1 + th[0]], axis=-1)

    def drift_jac(t, x, th):
        x1, x2 = x[:, 0], x[:, 1]
        J = _zeros(len(t), 2, 2)
        J[:, 0, 1] = 1.0
        J[:, 1, 0] = -2.0 * x1 * x2 - 1.0
        J[:, 1, 1] = 1.0 - x1**2
        return J

    def diffusion(t, x, th):
        G = _zeros(len(t), 2, 1)
        G[:, 1, 0] = th[1]
        return G

    theta0 = np.array([0.5, 0.75])
    return SdeModel(
        name="example3", d=2, m=1, param_names=("alpha", "sigma"),
        theta0=theta0, box=default_box(theta0, positive=(1,)),
        t0=0.0, x0=np.array([1.0, 1.0]),
        drift=drift, drift_jac=drift_jac,
        drift_dt=lambda t, x, th: _zeros(len(t), 2),
        diffusion=diffusion,
        diffusion_jac=lambda t, x, th: _zeros(len(t), 1, 2, 2),
        diffusion_dt=lambda t, x, th: _zeros(len(t), 2, 1),
        drift_hess=lambda t, x, th: _vdp_drift_hess(t, x),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 1, 2, 2, 2),
        integrator="ll", variance_params=("sigma",),
    )


def _example4() -> SdeModel:
    # Van der Pol with random frequency:
    # dx1 = x2 dt,  dx2 = (-(x1^2 - 1) x2 - alpha x1) dt + sigma x1 dw
    def drift(t, x, th):
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x2, -(x1**2 - 1.0) * x2 - th[0] * x1], axis=-1)

    def drift_jac(t, x, th):
        x1, x2 = x[:, 0], x[:, 1]
        J = _zeros(len(t), 2, 2)
        J[:, 0, 1] = 1.0
        J[:, 1, 0] = -2.0 * x1 * x2 - th[0]
        J[:, 1, 1] = 1.0 - x1**2
        return J

    def diffusion(t, x, th):
        G = _zeros(len(t), 2, 1)
        G[:, 1, 0] = th[1] * x[:, 0]
        return G

    def diffusion_jac(t, x, th):
        B = _zeros(len(t), 1, 2, 2)
        B[:, 0, 1, 0] = th[1]
        return B

    theta0 = np.array([1.0, 1.0])
    return SdeModel(
        name="example4", d=2, m=1, param_names=("alpha", "sigma"),
        theta0=theta0, box=default_box(theta0, positive=(1,)),
        t0=0.0, x0=np.array([1.0, 1.0]),
        drift=drift, drift_jac=drift_jac,
        drift_dt=lambda t, x, th: _zeros(len(t), 2),
        diffusion=diffusion, diffusion_jac=diffusion_jac,
        diffusion_dt=lambda t, x, th: _zeros(len(t), 2, 1),
        drift_hess=lambda t, x, th: _vdp_drift_hess(t, x),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 1, 2, 2, 2),
        integrator="euler", variance_params=("sigma",),
    )


def _ou() -> SdeModel:
    # dx = alpha x dt + sigma dw
    def exact(th, z, t_from, t_to):
        alpha, sigma = th
        dt = t_to - t_from
        mu = z * np.exp(alpha * dt)[:, None]
        if alpha == 0.0:
            var = sigma**2 * dt
        else:
            var = sigma**2 * np.expm1(2.0 * alpha * dt) / (2.0 * alpha)
        return mu, var[:, None, None]

    theta0 = np.array([-1.0, 1.0])
    return SdeModel(
        name="ou", d=1, m=1, param_names=("alpha", "sigma"),
        theta0=theta0, box=default_box(theta0, positive=(1,)),
        t0=0.0, x0=np.array([1.0]),
        drift=lambda t, x, th: th[0] * x,
        drift_jac=lambda t, x, th: np.full((len(t), 1, 1), th[0]),
        drift_dt=lambda t, x, th: _zeros(len(t), 1),
        diffusion=lambda t, x, th: np.full((len(t), 1, 1), th[1]),
        diffusion_jac=lambda t, x, th: _zeros(len(t), 1, 1, 1),
        diffusion_dt=lambda t, x, th: _zeros(len(t), 1, 1),
        drift_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1, 1),
        exact=exact, integrator="ll",
    )


def _gbm() -> SdeModel:
    # dx = alpha x dt + sigma x dw
    def exact(th, z, t_from, t_to):
        alpha, sigma = th
        dt = t_to - t_from
        mu = z * np.exp(alpha * dt)[:, None]
        var = mu**2 * np.expm1(sigma**2 * dt)[:, None]
        return mu, var[:, :, None]

    theta0 = np.array([0.05, 0.2])
    return SdeModel(
        name="gbm", d=1, m=1, param_names=("alpha", "sigma"),
        theta0=theta0, box=default_box(theta0, positive=(1,)),
        t0=0.0, x0=np.array([1.0]),
        drift=lambda t, x, th: th[0] * x,
        drift_jac=lambda t, x, th: np.full((len(t), 1, 1), th[0]),
        drift_dt=lambda t, x, th: _zeros(len(t), 1),
        diffusion=lambda t, x, th: (th[1] * x)[:, :, None],
        diffusion_jac=lambda t, x, th: np.full((len(t), 1, 1, 1), th[1]),
        diffusion_dt=lambda t, x, th: _zeros(len(t), 1, 1),
        drift_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1),
        diffusion_hess=lambda t, x, th: _zeros(len(t), 1, 1, 1, 1),
        exact=exact, integrator="euler",
    )


def linear_sde(F, Gs, name: str = "linear") -> SdeModel:
    """Autonomous linear model ``dx = F x dt + sum_i G_i x dw_i`` with fixed matrices.

    The parameter vector is a dummy scalar; the matrices are baked in. Used to
    exercise multi-dimensional multiplicative noise.
    """
    F = np.asarray(F, dtype=float)
    Gs = np.asarray(Gs, dtype=float)
    d = F.shape[0]
    m = Gs.shape[0]

    def diffusion(t, x, th):
        return np.einsum("iab,kb->kai", Gs, x)

    theta0 = np.array([1.0])
    return SdeModel(
        name=name, d=d, m=m, param_names=("scale",), theta0=theta0,
        box=default_box(theta0), t0=0.0, x0=np.ones(d),
        drift=lambda t, x, th: x @ F.T,
        drift_jac=lambda t, x, th: np.broadcast_to(F, (len(t), d, d)).copy(),
        drift_dt=lambda t, x, th: _zeros(len(t), d),
        diffusion=diffusion,
        diffusion_jac=lambda t, x, th: np.broadcast_to(Gs, (len(t), m, d, d)).copy(),
        diffusion_dt=lambda t, x, th: _zeros(len(t), d, m),
        drift_hess=lambda t, x, th: _zeros(len(t), d, d, d),
        diffusion_hess=lambda t, x, th: _zeros(len(t), m, d, d, d),
    )


_BUILTINS = {
    "example1": _example1,
    "example2": _example2,
    "example3": _example3,
    "example4": _example4,
    "ou": _ou,
    "gbm": _gbm,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> SdeModel:
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(
            f"unknown builtin model {name!r}; choose from {', '.join(BUILTIN_NAMES)}"
        ) from None
    return factory()


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class ObservationSeries:
    """Observations ``values[k]`` of the full state at strictly increasing ``times[k]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.values, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if t.ndim != 1 or t.shape[0] != z.shape[0]:
            raise ValueError("times and values must have the same length")
        if t.shape[0] < 2:
            raise ValueError("an observation series needs at least two points")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("observation times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", z)

    @property
    def M(self) -> int:
        return self.times.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def check_model(self, model: SdeModel) -> None:
        if self.d != model.d:
            raise ValueError(
                f"observations have dimension {self.d}, model {model.name!r} has {model.d}"
            )

    def to_csv(self, path) -> None:
        write_path_csv(path, self.times, self.values)

    @classmethod
    def from_csv(cls, path) -> "ObservationSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0].strip() != "t":
            raise ValueError(f"{path}: first column must be 't'")
        data = np.array([[float(v) for v in row] for row in body if row])
        return cls(data[:, 0], data[:, 1:])


def write_path_csv(path, times, values) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if hasattr(path, "write"):
        _write_rows(path, times, values)
        return
    with Path(path).open("w", newline="") as fh:
        _write_rows(fh, times, values)


def _write_rows(fh, times, values):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"x{i + 1}" for i in range(values.shape[1])])
    for t, row in zip(times, values):
        w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
