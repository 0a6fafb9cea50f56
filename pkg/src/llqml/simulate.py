"""Ground-truth path simulation on a thin grid and subsampling into observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotAdditiveNoise, SimulationBlowup
from .models import ObservationSeries, SdeModel
from .moments import step_batch


@dataclass(frozen=True)
class PathGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("grid dt must be positive")
        if self.n_steps < 1:
            raise ValueError("grid needs at least one step")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @classmethod
    def spanning(cls, t0: float, dt: float, length: float) -> "PathGrid":
        n = int(round(length / dt))
        if abs(n * dt - length) > 1e-9 * max(length, 1.0):
            raise ValueError(f"length {length} is not a multiple of dt {dt}")
        return cls(t0, dt, n)


@dataclass(frozen=True)
class RngStream:
    """Independent, counter-based Gaussian stream addressed by ``(seed, stream)``.

    Streams never overlap, so replicate ``i`` draws the same numbers whatever
    order or process the replicates run in.
    """

    seed: int
    stream: int = 0

    def generator(self, substream: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, substream))
        return np.random.Generator(np.random.Philox(ss))


def _initial(model, x0, R):
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    return np.broadcast_to(x, (R, model.d)).copy()


def _advance(paths, n, x_new, x_old, alive):
    """Store step ``n + 1``; replicates that left the finite range are frozen and NaN-marked."""
    bad = ~np.all(np.isfinite(x_new), axis=1)
    alive &= ~bad
    x_new = np.where(alive[:, None], x_new, x_old)
    paths[:, n + 1] = np.where(alive[:, None], x_new, np.nan)
    return x_new


def _euler_batch(model, theta, grid, x, noise):
    R, n_steps, _ = noise.shape
    sqdt = np.sqrt(grid.dt)
    paths = np.empty((R, n_steps + 1, model.d))
    paths[:, 0] = x
    alive = np.ones(R, dtype=bool)
    for n in range(n_steps):
        tt = np.full(R, grid.t0 + n * grid.dt)
        with np.errstate(all="ignore"):
            f = model.drift(tt, x, theta)
            G = model.diffusion(tt, x, theta)
            x_new = x + f * grid.dt + np.einsum("rdm,rm->rd", G, noise[:, n]) * sqdt
        x = _advance(paths, n, x_new, x, alive)
    return paths, alive


def _ll_batch(model, theta, grid, x, noise, noise_tol):
    R, n_steps, d = noise.shape
    paths = np.empty((R, n_steps + 1, d))
    paths[:, 0] = x
    dts = np.full(R, grid.dt)
    alive = np.ones(R, dtype=bool)
    for n in range(n_steps):
        tt = np.full(R, grid.t0 + n * grid.dt)
        B = model.diffusion_jac(tt, x, theta)
        if np.max(np.abs(B), initial=0.0) > noise_tol:
            raise NotAdditiveNoise(f"model {model.name!r} has state-dependent noise")
        with np.errstate(all="ignore"):
            mu, P = step_batch(model, theta, tt, x, x[:, :, None] * x[:, None, :], dts)
            cov = P - mu[:, :, None] * mu[:, None, :]
            cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
            finite = np.all(np.isfinite(cov), axis=(1, 2))
            cov[~finite] = 0.0
            w, V = np.linalg.eigh(cov)
            # eigenvalues inside the cancellation noise of P - mu mu^T are zero
            floor = 64.0 * np.finfo(float).eps * np.abs(P).max(axis=(1, 2), initial=0.0)
            w = np.where(w > floor[:, None], w, 0.0)
            root = V * np.sqrt(w)[:, None, :]
            x_new = mu + np.einsum("rij,rj->ri", root, noise[:, n])
        x_new[~finite] = np.nan
        x = _advance(paths, n, x_new, x, alive)
    return paths, alive


def _require_alive(result):
    paths, alive = result
    if not alive[0]:
        bad = np.flatnonzero(~np.all(np.isfinite(paths[0]), axis=1))[0]
        raise SimulationBlowup(f"path left the finite range at grid step {bad - 1}")
    return paths[0]


def euler_paths(model: SdeModel, theta, grid: PathGrid, rngs, x0=None):
    """Euler-Maruyama paths, one per stream in ``rngs``.

    Returns ``(paths, alive)`` with paths of shape (R, n_steps + 1, d). A
    replicate that blows up is NaN from that step on and has ``alive`` False.
    """
    theta = np.asarray(theta, dtype=float)
    noise = np.stack([r.generator().standard_normal((grid.n_steps, model.m)) for r in rngs])
    return _euler_batch(model, theta, grid, _initial(model, x0, len(rngs)), noise)


def ll_paths(model: SdeModel, theta, grid: PathGrid, rngs, x0=None,
             noise_tol: float = 0.0):
    """Local-Linearization paths for additive-noise equations.

    Each transition is drawn from the Gaussian LL transition law started at
    the current point, which is exact in distribution for the linearized
    equation. Returns ``(paths, alive)`` as :func:`euler_paths` does.
    """
    theta = np.asarray(theta, dtype=float)
    noise = np.stack([r.generator().standard_normal((grid.n_steps, model.d)) for r in rngs])
    return _ll_batch(model, theta, grid, _initial(model, x0, len(rngs)), noise, noise_tol)


def euler_path(model: SdeModel, theta, grid: PathGrid, rng: RngStream, x0=None) -> np.ndarray:
    """Single Euler-Maruyama path, shape (n_steps + 1, d).

    Raises SimulationBlowup if the path leaves the finite range.
    """
    return _require_alive(euler_paths(model, theta, grid, [rng], x0))


def ll_path(model: SdeModel, theta, grid: PathGrid, rng: RngStream, x0=None) -> np.ndarray:
    """Single Local-Linearization path, shape (n_steps + 1, d).

    Raises SimulationBlowup if the path leaves the finite range.
    """
    return _require_alive(ll_paths(model, theta, grid, [rng], x0))


def simulate_paths(model: SdeModel, theta, grid: PathGrid, rngs):
    """Paths with the integrator the model is registered with.

    Returns ``(paths, alive)``. Each path depends only on its own stream,
    not on its batch neighbours.
    """
    if model.integrator == "ll":
        return ll_paths(model, theta, grid, rngs)
    return euler_paths(model, theta, grid, rngs)


def subsample(path: np.ndarray, grid: PathGrid, t0: float, delta: float,
              T: float) -> ObservationSeries:
    """Observations at ``t0 + k delta`` for ``k = 0..M-1`` with ``M = T / delta``."""
    stride = int(round(delta / grid.dt))
    M = int(round(T / delta))
    start = int(round((t0 - grid.t0) / grid.dt))
    if stride < 1 or abs(stride * grid.dt - delta) > 1e-9 * delta:
        raise ValueError(f"delta {delta} is not a multiple of grid dt {grid.dt}")
    if M < 2 or abs(M * delta - T) > 1e-9 * T:
        raise ValueError(f"window {T} is not a multiple of delta {delta}")
    if start < 0 or abs(grid.t0 + start * grid.dt - t0) > 1e-9 * max(abs(t0), 1.0):
        raise ValueError(f"start {t0} is not on the grid")
    idx = start + stride * np.arange(M)
    if idx[-1] > grid.n_steps:
        raise ValueError("observation window runs past the simulated path")
    return ObservationSeries(grid.t0 + idx * grid.dt, path[idx])
