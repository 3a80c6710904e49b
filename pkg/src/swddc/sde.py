"""Temporal grid, controlled model, random streams and Euler-Maruyama simulation.

Every other module goes through the objects defined here. Model callbacks are
numba-compiled so that the serial inner loops (one simulated path per
gradient step, one drift evaluation per particle) run at native speed.

Callback signatures (all arrays are float64)::

    drift(t, x, u, a)        -> (d,)
    drift_dx(t, x, u, a)     -> (d, d)
    drift_du(t, x, u, a)     -> (d, m)
    diffusion(t)             -> (d, d)
    run_cost(t, x, u)        -> float
    run_cost_dx(t, x, u)     -> (d,)
    run_cost_du(t, x, u)     -> (m,)
    term_cost(x)             -> float
    term_cost_dx(x)          -> (d,)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from numba.core.registry import CPUDispatcher

CALLBACKS = (
    "drift",
    "drift_dx",
    "drift_du",
    "diffusion",
    "run_cost",
    "run_cost_dx",
    "run_cost_du",
    "term_cost",
    "term_cost_dx",
)


@dataclass(frozen=True)
class TemporalGrid:
    """Uniform partition of ``[0, horizon]`` into ``n_steps`` intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def t(self, n: int) -> float:
        return n * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        k = round(t / self.dt)
        if abs(k * self.dt - t) > tol * max(1.0, abs(t)) or not 0 <= k <= self.n_steps:
            raise ValueError(f"time {t} is not a point of the grid (dt={self.dt})")
        return int(k)


@dataclass(frozen=True, eq=False)
class ControlledModel:
    """Controlled SDE ``dX = b(t, X, u, a) dt + sigma(t) dW`` with running and
    terminal costs, plus the partial derivatives the adjoint equation needs.

    Plain Python callbacks are compiled with :func:`numba.njit` on
    construction, so they must be written in the numba-supported numpy subset.
    """

    dim_state: int
    dim_control: int
    dim_param: int
    drift: Callable
    drift_dx: Callable
    drift_du: Callable
    diffusion: Callable
    run_cost: Callable
    run_cost_dx: Callable
    run_cost_du: Callable
    term_cost: Callable
    term_cost_dx: Callable
    name: str = "model"

    def __post_init__(self):
        for dim in ("dim_state", "dim_control", "dim_param"):
            if getattr(self, dim) < 1:
                raise ValueError(f"{dim} must be >= 1")
        for cb in CALLBACKS:
            fn = getattr(self, cb)
            if not isinstance(fn, CPUDispatcher):
                object.__setattr__(self, cb, numba.njit(fn))

    @property
    def callbacks(self) -> tuple:
        """Callbacks in the fixed order the compiled kernels unpack them."""
        return tuple(getattr(self, cb) for cb in CALLBACKS)

    def check_state(self, x, name="x") -> np.ndarray:
        return _as_vector(x, self.dim_state, name)

    def check_control(self, u, name="u") -> np.ndarray:
        return _as_vector(u, self.dim_control, name)

    def check_param(self, a, name="alpha") -> np.ndarray:
        return _as_vector(a, self.dim_param, name)

    def diffusions(self, n: int, count: int, dt: float) -> np.ndarray:
        """Stack of ``sigma(t_k)`` for ``k = n .. n+count-1``, shape (count, d, d)."""
        d = self.dim_state
        out = np.empty((count, d, d))
        for k in range(count):
            out[k] = self.diffusion((n + k) * dt)
        return out


def _as_vector(v, size: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have shape ({size},), got {arr.shape}")
    return arr


class RngStream:
    """Named, reproducible random stream.

    Streams are keyed by ``(seed, stream_id)`` through numpy's
    :class:`~numpy.random.SeedSequence` spawn keys: equal keys give equal
    draws, distinct keys give independent ones. ``spawn`` derives a child
    stream by extending the key, which is how trials, filters and optimizers
    get their own streams.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        key = tuple(stream_id) if isinstance(stream_id, tuple) else (int(stream_id),)
        self.seed = int(seed)
        self.stream_id = key
        seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(k) for k in key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass
class StatePath:
    """One simulated state path on indices ``start_index .. N_T``."""

    start_index: int
    values: np.ndarray  # (N_T - start_index + 1, d)

    def __len__(self):
        return len(self.values)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


@dataclass
class ControlTrajectory:
    """Piecewise-constant control values for indices ``start_index .. N_T - 1``."""

    start_index: int
    values: np.ndarray  # (N_T - start_index, m)
    status: str = field(default="ok", compare=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("control values must be a 2-D array (steps, m)")

    def __len__(self):
        return len(self.values)

    @property
    def end_index(self) -> int:
        return self.start_index + len(self.values)

    @classmethod
    def zeros(cls, start_index: int, n_steps: int, dim_control: int) -> "ControlTrajectory":
        return cls(start_index, np.zeros((n_steps - start_index, dim_control)))

    def tail(self) -> "ControlTrajectory":
        """Drop the first value: the warm start for the next time step."""
        return ControlTrajectory(self.start_index + 1, self.values[1:].copy())

    def copy(self) -> "ControlTrajectory":
        return ControlTrajectory(self.start_index, self.values.copy(), self.status)


def brownian_increments(rng: RngStream, d: int, dt: float, size: tuple = ()) -> np.ndarray:
    """Draw increments ``dW ~ N(0, dt I_d)``; shape ``size + (d,)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return rng.generator.normal(0.0, math.sqrt(dt), size=tuple(size) + (d,))


def euler_step(model: ControlledModel, t: float, x, u, alpha, dW, dt: float) -> np.ndarray:
    """One Euler-Maruyama step ``x + b(t, x, u, alpha) dt + sigma(t) dW``."""
    x = model.check_state(x)
    u = model.check_control(u)
    alpha = model.check_param(alpha)
    dW = model.check_state(dW, "dW")
    return x + model.drift(t, x, u, alpha) * dt + model.diffusion(t) @ dW


def simulate_path(
    model: ControlledModel,
    grid: TemporalGrid,
    start_index: int,
    x_start,
    control: ControlTrajectory,
    alpha,
    rng: RngStream,
) -> StatePath:
    """Simulate ``X_n .. X_N`` from ``x_start`` under a piecewise-constant control."""
    x_start = model.check_state(x_start, "x_start")
    alpha = model.check_param(alpha)
    count = grid.n_steps - start_index
    if count < 1:
        raise ValueError(f"start_index {start_index} leaves no steps on the grid")
    u = _control_window(control, start_index, grid.n_steps, model.dim_control)
    dw = brownian_increments(rng, model.dim_state, grid.dt, (count,))
    sig = model.diffusions(start_index, count, grid.dt)
    values = forward_path(model.callbacks, start_index, grid.dt, x_start, u, alpha, sig, dw)
    return StatePath(start_index, values)


def _control_window(control: ControlTrajectory, start: int, n_steps: int, m: int) -> np.ndarray:
    if control.values.shape[1] != m:
        raise ValueError(f"control dimension {control.values.shape[1]} != model dimension {m}")
    if control.start_index > start or control.end_index < n_steps:
        raise ValueError(
            f"control covers [{control.start_index}, {control.end_index}) but indices "
            f"[{start}, {n_steps}) are required"
        )
    lo = start - control.start_index
    return np.ascontiguousarray(control.values[lo : lo + n_steps - start])


# Compiled kernels shared by the solvers and filters. ``fns`` is
# ``ControlledModel.callbacks``; indices follow ``CALLBACKS``.


@numba.njit(cache=False)
def matvec(A, x):
    out = np.zeros(A.shape[0])
    for i in range(A.shape[0]):
        s = 0.0
        for j in range(A.shape[1]):
            s += A[i, j] * x[j]
        out[i] = s
    return out


@numba.njit(cache=False)
def matTvec(A, y):
    out = np.zeros(A.shape[1])
    for j in range(A.shape[1]):
        s = 0.0
        for i in range(A.shape[0]):
            s += A[i, j] * y[i]
        out[j] = s
    return out


@numba.njit
def forward_path(fns, n, dt, x0, u, a, sig, dw):
    """Euler-Maruyama path of ``len(u)`` steps starting at grid index ``n``."""
    drift = fns[0]
    K = u.shape[0]
    X = np.empty((K + 1, x0.shape[0]))
    X[0] = x0
    for k in range(K):
        X[k + 1] = X[k] + drift((n + k) * dt, X[k], u[k], a) * dt + matvec(sig[k], dw[k])
    return X


@numba.njit
def path_cost(fns, n, dt, X, u):
    """Left-point discretised cost of one path: sum f(t_k, X_k, u_k) dt + h(X_K)."""
    run_cost = fns[4]
    term_cost = fns[7]
    K = u.shape[0]
    s = 0.0
    for k in range(K):
        s += run_cost((n + k) * dt, X[k], u[k]) * dt
    return s + term_cost(X[K])
