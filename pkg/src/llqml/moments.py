"""Local-Linearization propagation of the first two conditional moments.

Between two anchor times the drift and diffusion are replaced by their
linearizations around the current mean ``y``:

    f ~ A x + a0 + a1 (t - tau),     g_i ~ B_i x + b_i0 + b_i1 (t - tau)

The mean and second moment of the linearized equation solve a linear ODE whose
solution over a step of length ``dt`` is read off one matrix exponential of a
block generator of size ``d^2 + 2d + 7``.

Every function here works on a batch of K independent states, one per
observation interval, so a whole likelihood evaluation costs a handful of
batched exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import inf
from typing import Union

import numpy as np

from .errors import MissingHessians, StepUnderflow
from .linalg import batch_kron, expm, unvec, vec
from .models import SdeModel

# relative floor for the adaptive step, in units of the interval length
STEP_FLOOR = 1e-12
# slack when counting uniform sub-steps, so that h == gap gives one step
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class Conventional:
    """One LL step per observation gap."""


@dataclass(frozen=True)
class Uniform:
    """Equal sub-steps no longer than ``h`` inside each gap."""

    h: float

    def __post_init__(self):
        if not self.h > 0.0:
            raise ValueError(f"uniform step must be positive, got {self.h}")


@dataclass(frozen=True)
class Adaptive:
    """Step-doubling control with separate tolerances for the mean and second moment."""

    rtol_y: float = 5e-6
    rtol_P: float = 5e-6
    atol_y: float = 5e-9
    atol_P: float = 5e-12

    def __post_init__(self):
        for name in ("rtol_y", "rtol_P", "atol_y", "atol_P"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


Policy = Union[Conventional, Uniform, Adaptive]


@dataclass(frozen=True)
class MomentState:
    t: float
    y: np.ndarray
    P: np.ndarray

    @classmethod
    def at_observation(cls, t, z) -> "MomentState":
        z = np.asarray(z, dtype=float)
        return cls(float(t), z.copy(), np.outer(z, z))

    @property
    def covariance(self) -> np.ndarray:
        return self.P - np.outer(self.y, self.y)


@dataclass(frozen=True)
class StepStats:
    accepted: int
    failed: int


@dataclass(frozen=True)
class LinearizationCoeffs:
    """Batched linearization coefficients at anchors ``(tau_k, y_k)``.

    Shapes: ``A`` (K, d, d), ``B`` (K, m, d, d), ``a0``/``a1`` (K, d),
    ``b0``/``b1`` (K, m, d).
    """

    A: np.ndarray
    B: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray


def _as_batch(tau, y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    T = np.broadcast_to(np.asarray(tau, dtype=float), (Y.shape[0],))
    return T, Y, single


def linearize(model: SdeModel, theta, tau, y, beta: int = 1) -> LinearizationCoeffs:
    """Order-``beta`` linearization of drift and diffusion around ``(tau, y)``.

    ``y`` may be a single state (d,) or a batch (K, d); the coefficients always
    carry a leading batch axis.
    """
    if beta not in (1, 2):
        raise ValueError(f"beta must be 1 or 2, got {beta}")
    if beta == 2 and not model.has_hessians:
        raise MissingHessians(f"model {model.name!r} supplies no second derivatives")
    theta = np.asarray(theta, dtype=float)
    T, Y, _ = _as_batch(tau, y)

    A = model.drift_jac(T, Y, theta)
    B = model.diffusion_jac(T, Y, theta)
    G = model.diffusion(T, Y, theta)
    a0 = model.drift(T, Y, theta) - np.einsum("kij,kj->ki", A, Y)
    a1 = model.drift_dt(T, Y, theta).copy()
    b0 = np.swapaxes(G, 1, 2) - np.einsum("kmij,kj->kmi", B, Y)
    b1 = np.swapaxes(model.diffusion_dt(T, Y, theta), 1, 2).copy()

    if beta == 2:
        GG = G @ np.swapaxes(G, 1, 2)
        a1 += 0.5 * np.einsum("kjl,kijl->ki", GG, model.drift_hess(T, Y, theta))
        b1 += 0.5 * np.einsum("kjl,kmijl->kmi", GG, model.diffusion_hess(T, Y, theta))

    return LinearizationCoeffs(A=A, B=B, a0=a0, a1=a1, b0=b0, b1=b1)


def generator_size(d: int) -> int:
    return d * d + 2 * d + 7


def _vec_kron_sum(a, b):
    # batched a (x) I + I (x) b for vectors: (K, d) -> (K, d^2, d)
    K, d = a.shape
    eye = np.broadcast_to(np.eye(d), (K, d, d))
    return batch_kron(a[:, :, None], eye) + batch_kron(eye, b[:, :, None])


def build_generator(coeffs: LinearizationCoeffs, y, P) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the block generator ``M`` and start vector ``u``.

    Layout of the state (length ``d^2 + 2d + 7``): ``vec(P)`` | auxiliary
    block of size d+2 | mean-increment block ``[y(s) - y, s, 1]`` | three
    scalars ``s^2, s, 1``.
    """
    c = coeffs
    y = np.atleast_2d(np.asarray(y, dtype=float))
    P = np.asarray(P, dtype=float)
    if P.ndim == 2:
        P = P[None]
    K, d = y.shape
    m = c.B.shape[1]
    d2 = d * d
    n = generator_size(d)
    i2 = d2
    i3 = d2 + d + 2
    i4 = d2 + 2 * d + 4

    eye = np.broadcast_to(np.eye(d), (K, d, d))
    calA = batch_kron(c.A, eye) + batch_kron(eye, c.A)
    beta1 = np.zeros((K, d, d))
    beta2 = np.zeros((K, d, d))
    beta3 = np.zeros((K, d, d))
    beta4 = _vec_kron_sum(c.a0, c.a0)
    beta5 = _vec_kron_sum(c.a1, c.a1)
    for i in range(m):
        Bi = c.B[:, i]
        b0 = c.b0[:, i, :, None]
        b1 = c.b1[:, i, :, None]
        calA = calA + batch_kron(Bi, Bi)
        beta1 += b0 @ np.swapaxes(b0, 1, 2)
        beta2 += b0 @ np.swapaxes(b1, 1, 2) + b1 @ np.swapaxes(b0, 1, 2)
        beta3 += b1 @ np.swapaxes(b1, 1, 2)
        beta4 += batch_kron(b0, Bi) + batch_kron(Bi, b0)
        beta5 += batch_kron(b1, Bi) + batch_kron(Bi, b1)

    C = np.zeros((K, d + 2, d + 2))
    C[:, :d, :d] = c.A
    C[:, :d, d] = c.a1
    C[:, :d, d + 1] = np.einsum("kij,kj->ki", c.A, y) + c.a0
    C[:, d, d + 1] = 1.0

    M = np.zeros((K, n, n))
    M[:, :d2, :d2] = calA
    # B5 = beta5 L and B4 = beta4 L, with L = [I_d 0]
    M[:, :d2, i2:i2 + d] = beta5
    M[:, :d2, i3:i3 + d] = beta4
    M[:, :d2, i4] = vec(beta3)
    M[:, :d2, i4 + 1] = vec(beta2) + np.einsum("kij,kj->ki", beta5, y)
    M[:, :d2, i4 + 2] = vec(beta1) + np.einsum("kij,kj->ki", beta4, y)
    M[:, i2:i3, i2:i3] = C
    M[:, i2:i3, i3:i4] = np.eye(d + 2)
    M[:, i3:i4, i3:i4] = C
    M[:, i4, i4 + 1] = 2.0
    M[:, i4 + 1, i4 + 2] = 1.0

    u = np.zeros((K, n))
    u[:, :d2] = vec(P)
    u[:, i3 + d + 1] = 1.0
    u[:, i4 + 2] = 1.0
    return M, u


def _symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def step_batch(model: SdeModel, theta, t, y, P, dt, beta: int = 1):
    """Advance K moment states ``(y, P)`` anchored at times ``t`` by ``dt``.

    ``dt`` may be zero for some entries; those states come back unchanged.
    """
    K, d = y.shape
    coeffs = linearize(model, theta, t, y, beta)
    M, u = build_generator(coeffs, y, P)
    E = expm(M * np.asarray(dt, dtype=float).reshape(-1, 1, 1))
    w = np.einsum("kij,kj->ki", E, u)
    i3 = d * d + d + 2
    y_new = y + w[:, i3:i3 + d]
    P_new = _symmetrize(unvec(w[:, :d * d], d))
    return y_new, P_new


def step(model: SdeModel, theta, state: MomentState, dt: float, beta: int = 1) -> MomentState:
    """One LL moment step from ``state`` over ``dt > 0``."""
    if not dt > 0.0:
        raise ValueError(f"step size must be positive, got {dt}")
    y, P = step_batch(model, theta, np.array([state.t]), state.y[None], state.P[None],
                      np.array([dt]), beta)
    return MomentState(state.t + dt, y[0], P[0])


def _uniform_counts(gaps, h):
    return np.maximum(1, np.ceil(gaps / h - _CEIL_SLACK)).astype(int)


def _propagate_fixed(model, theta, t_from, y, P, gaps, counts, beta):
    dts = gaps / counts
    for j in range(int(counts.max())):
        active = np.flatnonzero(j < counts)
        if active.size == 0:
            break
        tau = t_from[active] + j * dts[active]
        y[active], P[active] = step_batch(
            model, theta, tau, y[active], P[active], dts[active], beta
        )
    return y, P


def _propagate_adaptive(model, theta, t_from, t_to, y, P, tol: Adaptive, beta):
    K, d = y.shape
    gaps = t_to - t_from
    t = t_from.copy()
    h = gaps.copy()
    accepted = np.zeros(K, dtype=int)
    failed = np.zeros(K, dtype=int)
    done = np.zeros(K, dtype=bool)

    while not done.all():
        idx = np.flatnonzero(~done)
        remaining = t_to[idx] - t[idx]
        hk = np.minimum(h[idx], remaining)
        if np.any(hk < STEP_FLOOR * gaps[idx]):
            raise StepUnderflow("adaptive step fell below its floor")
        tk, yk, Pk = t[idx], y[idx], P[idx]

        y_c, P_c = step_batch(model, theta, tk, yk, Pk, hk, beta)
        half = 0.5 * hk
        y_h, P_h = step_batch(model, theta, tk, yk, Pk, half, beta)
        y_f, P_f = step_batch(model, theta, tk + half, y_h, P_h, half, beta)

        err_y = np.abs(y_f - y_c) / (tol.atol_y + tol.rtol_y * np.abs(y_f))
        err_P = np.abs(P_f - P_c) / (tol.atol_P + tol.rtol_P * np.abs(P_f))
        err = np.maximum(err_y.max(axis=1), err_P.reshape(len(idx), -1).max(axis=1))
        err = np.where(np.isfinite(err), err, inf)
        ok = err <= 1.0

        acc = idx[ok]
        last = hk[ok] >= remaining[ok]
        t[acc] = np.where(last, t_to[acc], t[acc] + hk[ok])
        y[acc] = y_f[ok]
        P[acc] = P_f[ok]
        done[acc[last]] = True
        accepted[acc] += 1
        failed[idx[~ok]] += 1

        with np.errstate(divide="ignore"):
            factor = np.clip(0.9 * err**-0.5, 0.2, 5.0)
        h[idx] = hk * factor

    return y, P, accepted, failed


def propagate_batch(model: SdeModel, theta, z, t_from, t_to, policy: Policy, beta: int = 1):
    """Predicted mean and covariance at ``t_to`` from point masses at ``z``.

    Returns ``(mu[K, d], Sigma[K, d, d], accepted[K], failed[K])``.
    """
    theta = np.asarray(theta, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    K = z.shape[0]
    t_from = np.broadcast_to(np.asarray(t_from, dtype=float), (K,)).copy()
    t_to = np.broadcast_to(np.asarray(t_to, dtype=float), (K,)).copy()
    gaps = t_to - t_from
    if np.any(gaps <= 0.0):
        raise ValueError("propagation needs t_next > t_k")

    y = z.copy()
    P = z[:, :, None] * z[:, None, :]
    if isinstance(policy, Adaptive):
        y, P, accepted, failed = _propagate_adaptive(
            model, theta, t_from, t_to, y, P, policy, beta
        )
    else:
        if isinstance(policy, Uniform):
            counts = _uniform_counts(gaps, policy.h)
        elif isinstance(policy, Conventional):
            counts = np.ones(K, dtype=int)
        else:
            raise TypeError(f"unknown discretization policy {policy!r}")
        y, P = _propagate_fixed(model, theta, t_from, y, P, gaps, counts, beta)
        accepted, failed = counts, np.zeros(K, dtype=int)

    sigma = _symmetrize(P - y[:, :, None] * y[:, None, :])
    return y, sigma, accepted, failed


def propagate(model: SdeModel, theta, z_k, t_k: float, t_next: float,
              policy: Policy, beta: int = 1):
    """Single-interval form of :func:`propagate_batch`.

    Returns ``(mu, Sigma, StepStats)``.
    """
    mu, sigma, acc, fail = propagate_batch(
        model, theta, np.asarray(z_k, dtype=float)[None], t_k, t_next, policy, beta
    )
    return mu[0], sigma[0], StepStats(int(acc[0]), int(fail[0]))
