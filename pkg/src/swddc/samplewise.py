"""Sample-wise adjoint and stochastic gradient descent for the optimal control.

Each SGD iteration draws one parameter particle and one Brownian path,
integrates the adjoint backward along that single path and takes a
gradient step. No conditional expectation is ever approximated.

Adjoint convention
------------------
``Y[N_T] = h_x(X[N_T])`` always. By default the recursion below it is the
exact reverse-mode derivative of the left-point discretised cost
``sum_k f(t_k, X_k, u_k) dt + h(X_N)``: ``Y[N_T - 1] = Y[N_T]`` and, for
``k <= N_T - 2``::

    Y[k] = Y[k+1] + (b_x(t_{k+1}, X_{k+1}, u_{k+1}, a)^T Y[k+1] + f_x(t_{k+1}, X_{k+1}, u_{k+1})) dt

so ``b_u^T Y[k] + f_u`` is the pathwise gradient divided by ``dt``. With
``terminal_increment=True`` the step into ``N_T - 1`` also carries the
right-point increment at ``t_N``, evaluated with the last control value.
Both versions agree to ``O(dt)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .direct_filter import ParticleCloud
from .sde import (
    ControlledModel,
    ControlTrajectory,
    RngStream,
    StatePath,
    TemporalGrid,
    _control_window,
    forward_path,
    matTvec,
)

STATUS_OK = 0
STATUS_NONFINITE = 1


@dataclass
class AdjointPath:
    start_index: int
    values: np.ndarray  # (N_T - start_index + 1, d)


@dataclass
class GradientTrajectory:
    start_index: int
    values: np.ndarray  # (N_T - start_index, m)
    stderr: np.ndarray | None = None


@dataclass(frozen=True)
class SgdSchedule:
    """Step sizes ``rho_l = rho0 / (1 + l / l0)`` for ``l = 0 .. L-1``.

    ``l0`` defaults to ``L / 2``. ``batch_size`` independent
    (particle, path) draws are averaged per iteration. ``grad_clip``, when
    set, bounds every gradient component to ``[-grad_clip, grad_clip]``; it
    keeps early iterations stable while the cloud still holds parameters
    with explosive dynamics.
    """

    n_iterations: int
    rho0: float = 0.1
    l0: float | None = None
    batch_size: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.l0 is not None and not self.l0 > 0:
            raise ValueError("l0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")

    @property
    def decay(self) -> float:
        return self.l0 if self.l0 is not None else max(self.n_iterations / 2, 1.0)

    def rate(self, l: int) -> float:
        return self.rho0 / (1.0 + l / self.decay)

    def rates(self) -> np.ndarray:
        return self.rho0 / (1.0 + np.arange(self.n_iterations) / self.decay)


@numba.njit
def backward_kernel(fns, n, dt, X, u, a, terminal_increment):
    drift_dx = fns[1]
    run_cost_dx = fns[5]
    term_cost_dx = fns[8]
    K = u.shape[0]
    Y = np.empty((K + 1, X.shape[1]))
    Y[K] = term_cost_dx(X[K])
    if terminal_increment:
        t = (n + K) * dt
        inc = matTvec(drift_dx(t, X[K], u[K - 1], a), Y[K]) + run_cost_dx(t, X[K], u[K - 1])
        Y[K - 1] = Y[K] + inc * dt
    else:
        Y[K - 1] = Y[K]
    for k in range(K - 2, -1, -1):
        t = (n + k + 1) * dt
        inc = matTvec(drift_dx(t, X[k + 1], u[k + 1], a), Y[k + 1]) + run_cost_dx(t, X[k + 1], u[k + 1])
        Y[k] = Y[k + 1] + inc * dt
    return Y


@numba.njit
def gradient_kernel(fns, n, dt, X, Y, u, a):
    drift_du = fns[2]
    run_cost_du = fns[6]
    K = u.shape[0]
    g = np.empty_like(u)
    for k in range(K):
        t = (n + k) * dt
        g[k] = matTvec(drift_du(t, X[k], u[k], a), Y[k]) + run_cost_du(t, X[k], u[k])
    return g


@numba.njit
def _sgd_kernel(fns, n, dt, x0, u0, particles, picks, sig, noise, rates, terminal_increment, clip):
    u = u0.copy()
    L, B = picks.shape
    for l in range(L):
        g = np.zeros_like(u)
        for b in range(B):
            a = particles[picks[l, b]]
            X = forward_path(fns, n, dt, x0, u, a, sig, noise[l, b])
            Y = backward_kernel(fns, n, dt, X, u, a, terminal_increment)
            g += gradient_kernel(fns, n, dt, X, Y, u, a)
        g /= B
        if not np.all(np.isfinite(g)):
            return u, STATUS_NONFINITE, l
        if clip > 0.0:
            g = np.minimum(np.maximum(g, -clip), clip)
        u_new = u - rates[l] * g
        if not np.all(np.isfinite(u_new)):
            return u, STATUS_NONFINITE, l
        u = u_new
    return u, STATUS_OK, L


def _aligned(model: ControlledModel, path: StatePath, control: ControlTrajectory, alpha):
    if path.values.ndim != 2 or path.values.shape[1] != model.dim_state:
        raise ValueError("path values must have shape (steps + 1, d)")
    n = path.start_index
    N = n + len(path) - 1
    if N <= n:
        raise ValueError("path must span at least one step")
    u = _control_window(control, n, N, model.dim_control)
    return n, np.ascontiguousarray(path.values, dtype=np.float64), u, model.check_param(alpha)


def adjoint_backward(
    model: ControlledModel,
    path: StatePath,
    control: ControlTrajectory,
    alpha,
    dt: float,
    terminal_increment: bool = False,
) -> AdjointPath:
    """Backward adjoint recursion along one sampled path (see module docstring)."""
    n, X, u, a = _aligned(model, path, control, alpha)
    Y = backward_kernel(model.callbacks, n, float(dt), X, u, a, bool(terminal_increment))
    return AdjointPath(n, Y)


def samplewise_gradient(
    model: ControlledModel,
    path: StatePath,
    adjoint: AdjointPath,
    control: ControlTrajectory,
    alpha,
    dt: float,
) -> GradientTrajectory:
    """``g[k] = b_u(t_k, X_k, u_k, a)^T Y[k] + f_u(t_k, X_k, u_k)`` on the path's index range."""
    n, X, u, a = _aligned(model, path, control, alpha)
    if adjoint.start_index != n or adjoint.values.shape != X.shape:
        raise ValueError("adjoint and path are not aligned")
    g = gradient_kernel(model.callbacks, n, float(dt), X, np.ascontiguousarray(adjoint.values), u, a)
    return GradientTrajectory(n, g)


def draw_particles(cloud: ParticleCloud, n_iterations: int, batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """Particle indices for every (iteration, batch member): uniform if weights are equal, else by weight."""
    if np.all(cloud.weights == cloud.weights[0]):
        return gen.integers(0, cloud.size, size=(n_iterations, batch_size))
    return gen.choice(cloud.size, size=(n_iterations, batch_size), p=cloud.weights)


def sgd_optimize(
    model: ControlledModel,
    grid: TemporalGrid,
    n: int,
    x_n,
    cloud: ParticleCloud,
    control_init: ControlTrajectory,
    schedule: SgdSchedule,
    rng: RngStream,
    terminal_increment: bool = False,
) -> ControlTrajectory:
    """Sample-wise SGD for the control on indices ``n .. N_T - 1``.

    Every iteration draws a particle from ``cloud`` (uniformly when the
    weights are equal, by weight otherwise), simulates one path from
    ``x_n``, and steps against the averaged sample-wise gradient. If an
    update becomes non-finite the last finite iterate is returned with
    ``status='nonfinite'``.
    """
    x_n = model.check_state(x_n, "x_n")
    if cloud.dim != model.dim_param:
        raise ValueError(f"cloud dimension {cloud.dim} != model parameter dimension {model.dim_param}")
    K = grid.n_steps - n
    if K < 1:
        raise ValueError(f"index {n} leaves no control steps")
    u0 = _control_window(control_init, n, grid.n_steps, model.dim_control).copy()
    L, B = schedule.n_iterations, schedule.batch_size
    gen = rng.generator
    picks = draw_particles(cloud, L, B, gen)
    noise = gen.normal(0.0, np.sqrt(grid.dt), size=(L, B, K, model.dim_state))
    sig = model.diffusions(n, K, grid.dt)
    u, status, _ = _sgd_kernel(
        model.callbacks,
        n,
        grid.dt,
        x_n,
        u0,
        cloud.particles,
        picks,
        sig,
        noise,
        schedule.rates(),
        bool(terminal_increment),
        float(schedule.grad_clip or 0.0),
    )
    return ControlTrajectory(n, u, "ok" if status == STATUS_OK else "nonfinite")
