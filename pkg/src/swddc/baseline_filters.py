"""Augmented-state baselines: particle filter and ensemble Kalman filter.

Both filters estimate the stacked vector ``S = [X; alpha]``. The state block
follows the Euler-Maruyama dynamics, the parameter block only receives jitter,
and the parameter is learned indirectly through its effect on the state.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .direct_filter import (
    DegenerateLikelihoodError,
    DegenerateLikelihoodWarning,
    JitterSpec,
    ParticleCloud,
    _psd_sqrt,
    bayes_update_log,
    systematic_resample,
)
from .sde import ControlledModel, RngStream, TemporalGrid, matvec


@dataclass
class AugmentedCloud:
    """Weighted samples of ``[X; alpha]``; the first ``dim_state`` columns are the state."""

    particles: np.ndarray
    dim_state: int
    weights: np.ndarray | None = None
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        inner = ParticleCloud(self.particles, self.weights)
        self.particles, self.weights = inner.particles, inner.weights
        if not 1 <= self.dim_state < self.particles.shape[1]:
            raise ValueError("dim_state must leave at least one parameter column")

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.particles[:, : self.dim_state]

    @property
    def params(self) -> np.ndarray:
        return self.particles[:, self.dim_state :]

    def param_mean(self) -> np.ndarray:
        return self.weights @ self.params

    @classmethod
    def from_prior(cls, x0, lower, upper, size: int, rng: RngStream) -> "AugmentedCloud":
        """State block at ``x0``, parameter block uniform on ``[lower, upper]``."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
        params = ParticleCloud.uniform_prior(lower, upper, size, rng).particles
        return cls(np.hstack([np.tile(x0, (size, 1)), params]), x0.size)


@dataclass
class Ensemble:
    """Equally weighted ensemble of ``[X; alpha]`` members."""

    members: np.ndarray
    dim_state: int

    def __post_init__(self):
        m = np.ascontiguousarray(self.members, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError(f"an ensemble needs shape (N, d+q) with N >= 2, got {m.shape}")
        if not 1 <= self.dim_state < m.shape[1]:
            raise ValueError("dim_state must leave at least one parameter column")
        self.members = m

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.members[:, : self.dim_state]

    @property
    def params(self) -> np.ndarray:
        return self.members[:, self.dim_state :]

    def param_mean(self) -> np.ndarray:
        return self.params.mean(axis=0)

    @classmethod
    def from_prior(cls, x0, lower, upper, size: int, rng: RngStream) -> "Ensemble":
        c = AugmentedCloud.from_prior(x0, lower, upper, size, rng)
        return cls(c.particles, c.dim_state)


@numba.njit
def _propagate(fns, t, dt, S, d, u, sig, dw):
    drift = fns[0]
    out = S.copy()
    for i in range(S.shape[0]):
        x = S[i, :d].copy()
        a = S[i, d:].copy()
        out[i, :d] = x + drift(t, x, u, a) * dt + matvec(sig, dw[i])
    return out


def _forecast(S, d, model: ControlledModel, t_n, u_n, jitter: JitterSpec, grid: TemporalGrid, rng: RngStream):
    n = grid.index_of(t_n)
    N = S.shape[0]
    dw = rng.generator.normal(0.0, np.sqrt(grid.dt), size=(N, d))
    sig = np.ascontiguousarray(model.diffusion(t_n), dtype=np.float64)
    out = _propagate(model.callbacks, float(t_n), grid.dt, S, d, model.check_control(u_n), sig, dw)
    out[:, d:] += jitter.sample(n, N, rng)
    return out


def _check_obs(model, M_next, Sigma):
    d = model.dim_state
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    if Sigma.shape != (d, d):
        raise ValueError(f"Sigma must have shape ({d}, {d}), got {Sigma.shape}")
    return model.check_state(M_next, "M_next"), Sigma


def augpf_step(
    cloud: AugmentedCloud,
    model: ControlledModel,
    t_n: float,
    u_n,
    M_next,
    Sigma,
    jitter: JitterSpec,
    grid: TemporalGrid,
    rng: RngStream,
) -> tuple[AugmentedCloud, np.ndarray]:
    """Augmented particle filter step.

    Propagates each particle's state block one Euler-Maruyama step under its
    own parameter, jitters the parameter block, weights by the Gaussian
    observation density ``N(M_next; X, Sigma)`` and resamples systematically.

    Returns
    -------
    cloud : AugmentedCloud
        Equally weighted after resampling.
    alpha_hat : ndarray, shape (q,)
        Mean of the parameter block.
    """
    d = cloud.dim_state
    if d != model.dim_state or cloud.params.shape[1] != model.dim_param:
        raise ValueError("cloud block sizes do not match the model")
    M_next, Sigma = _check_obs(model, M_next, Sigma)
    S = _forecast(cloud.particles, d, model, t_n, u_n, jitter, grid, rng)
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("AugPF needs a positive definite observation covariance") from exc
    z = np.linalg.solve(L, (M_next - S[:, :d]).T)
    logw = -0.5 * np.sum(z * z, axis=0)
    flat = ParticleCloud(S, cloud.weights)
    try:
        post = bayes_update_log(flat, logw)
    except DegenerateLikelihoodError:
        warnings.warn(f"degenerate likelihood at t={t_n}; keeping uniform weights", DegenerateLikelihoodWarning)
        post = ParticleCloud(S, None, degenerate=True)
    res = systematic_resample(post, rng)
    out = AugmentedCloud(res.particles, d, None, res.degenerate)
    return out, out.param_mean()


class SingularInnovationWarning(RuntimeWarning):
    pass


def augenkf_step(
    ensemble: Ensemble,
    model: ControlledModel,
    t_n: float,
    u_n,
    M_next,
    Sigma,
    jitter: JitterSpec,
    grid: TemporalGrid,
    rng: RngStream,
) -> tuple[Ensemble, np.ndarray]:
    """Stochastic (perturbed-observation) ensemble Kalman filter step.

    The observation operator picks the state block, ``H = [I_d, 0]``. The
    gain is ``P_xy (P_yy + Sigma)^-1`` from forecast sample covariances. A
    singular innovation covariance is regularised with ``1e-10 * trace``
    times the identity (``1e-10`` when the trace is zero), with a warning.
    """
    d = ensemble.dim_state
    if d != model.dim_state or ensemble.params.shape[1] != model.dim_param:
        raise ValueError("ensemble block sizes do not match the model")
    M_next, Sigma = _check_obs(model, M_next, Sigma)
    S = _forecast(ensemble.members, d, model, t_n, u_n, jitter, grid, rng)
    N = S.shape[0]
    A = S - S.mean(axis=0)
    Ax = A[:, :d]
    P_xy = A.T @ Ax / (N - 1)
    C = Ax.T @ Ax / (N - 1) + Sigma
    if np.linalg.matrix_rank(C) < d:
        tr = np.trace(C)
        eps = 1e-10 * tr if tr > 0 else 1e-10
        warnings.warn(f"singular innovation covariance at t={t_n}; adding {eps:.3g} I", SingularInnovationWarning)
        C = C + eps * np.eye(d)
    K = np.linalg.solve(C, P_xy.T).T  # P_xy C^-1, C symmetric
    perturb = rng.generator.standard_normal((N, d)) @ _psd_sqrt(Sigma).T
    innov = M_next + perturb - S[:, :d]
    out = Ensemble(S + innov @ K.T, d)
    return out, out.param_mean()
