"""Mesh-based Monte Carlo solver used as the fully calculated baseline.

The adjoint is tabulated on a uniform state mesh at every time index by
Monte Carlo one-step conditional expectations. Off-node values come from
multilinear interpolation, clamped at the mesh boundary. The gradient then
averages ``b_u^T Y + f_u`` over ``Q`` full forward paths.

The recursion follows the same index convention as
:mod:`swddc.samplewise`, so that on the same control both solvers estimate
the same gradient.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .samplewise import GradientTrajectory, SgdSchedule
from .sde import (
    ControlledModel,
    ControlTrajectory,
    RngStream,
    TemporalGrid,
    _control_window,
    forward_path,
    matTvec,
    matvec,
)

CLAMP_WARN_FRACTION = 0.05


class MeshTooSmallWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class StateMesh:
    """Uniform lattice with spacing ``spacing`` covering ``[lower, upper]``.

    ``upper`` is rounded up to the next lattice point. Only ``d <= 2`` is
    supported since the node count grows exponentially with dimension.
    """

    lower: np.ndarray
    upper: np.ndarray
    spacing: float

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if lo.size > 2:
            raise ValueError(f"the mesh solver supports d <= 2, got d={lo.size}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if np.any(hi < lo):
            raise ValueError("upper must be >= lower")
        counts = np.floor((hi - lo) / self.spacing + 1 - 1e-9).astype(np.int64) + 1
        counts = np.maximum(counts, 2)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", lo + (counts - 1) * self.spacing)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    @property
    def strides(self) -> np.ndarray:
        s = np.ones(self.dim, dtype=np.int64)
        for j in range(self.dim - 2, -1, -1):
            s[j] = s[j + 1] * self.counts[j + 1]
        return s

    @property
    def nodes(self) -> np.ndarray:
        axes = [self.lower[j] + self.spacing * np.arange(self.counts[j]) for j in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.ascontiguousarray(np.stack([g.ravel() for g in grids], axis=1))

    def interpolate(self, table: np.ndarray, x) -> np.ndarray:
        """Multilinear interpolation of node values ``table`` (n_nodes, k) at ``x``."""
        v, _ = _interp(np.ascontiguousarray(table, dtype=np.float64), np.asarray(x, dtype=np.float64),
                       self.lower, self.spacing, self.counts, self.strides)
        return v


@dataclass
class ValueTable:
    """Adjoint values per time index and node: ``values[k]`` belongs to index ``start_index + k``."""

    start_index: int
    values: np.ndarray  # (K + 1, n_nodes, d)
    mesh: StateMesh
    clamp_fraction: float = 0.0

    def at(self, n: int) -> np.ndarray:
        return self.values[n - self.start_index]


@numba.njit
def _interp(table, x, lower, h, counts, strides):
    d = x.shape[0]
    i0 = np.empty(d, dtype=np.int64)
    fr = np.empty(d)
    clamped = False
    for j in range(d):
        s = (x[j] - lower[j]) / h
        top = counts[j] - 1
        if s < 0.0:
            s = 0.0
            clamped = True
        elif s > top:
            s = float(top)
            clamped = True
        i = int(np.floor(s))
        if i > top - 1:
            i = top - 1
        i0[j] = i
        fr[j] = s - i
    out = np.zeros(table.shape[1])
    for c in range(1 << d):
        w = 1.0
        idx = 0
        for j in range(d):
            if (c >> j) & 1:
                w *= fr[j]
                idx += (i0[j] + 1) * strides[j]
            else:
                w *= 1.0 - fr[j]
                idx += i0[j] * strides[j]
        if w != 0.0:
            out += w * table[idx]
    return out, clamped


@numba.njit
def _backward_step(fns, t, t_next, dt, nodes, V_next, u_k, u_next, a, sig, dw, lower, h, counts, strides, plain):
    drift = fns[0]
    drift_dx = fns[1]
    run_cost_dx = fns[5]
    n_nodes, P = dw.shape[0], dw.shape[1]
    V = np.zeros((n_nodes, V_next.shape[1]))
    clamps = 0
    for i in range(n_nodes):
        x = nodes[i]
        mean = x + drift(t, x, u_k, a) * dt
        acc = np.zeros(V_next.shape[1])
        for p in range(P):
            x1 = mean + matvec(sig, dw[i, p])
            y1, c = _interp(V_next, x1, lower, h, counts, strides)
            if c:
                clamps += 1
            if plain:
                acc += y1
            else:
                acc += y1 + (matTvec(drift_dx(t_next, x1, u_next, a), y1) + run_cost_dx(t_next, x1, u_next)) * dt
        V[i] = acc / P
    return V, clamps


@numba.njit
def _gradient_paths(fns, n, dt, x0, u, a, sig, noise, table, lower, h, counts, strides):
    drift_du = fns[2]
    run_cost_du = fns[6]
    Q = noise.shape[0]
    K, m = u.shape
    s1 = np.zeros((K, m))
    s2 = np.zeros((K, m))
    clamps = 0
    for q in range(Q):
        X = forward_path(fns, n, dt, x0, u, a, sig, noise[q])
        for k in range(K):
            y, c = _interp(table[k], X[k], lower, h, counts, strides)
            if c:
                clamps += 1
            g = matTvec(drift_du((n + k) * dt, X[k], u[k], a), y) + run_cost_du((n + k) * dt, X[k], u[k])
            s1[k] += g
            s2[k] += g * g
    return s1, s2, clamps


def _warn_clamps(clamps: int, total: int, where: str) -> float:
    frac = clamps / max(total, 1)
    if frac > CLAMP_WARN_FRACTION:
        warnings.warn(f"{where}: {100 * frac:.1f}% of samples left the mesh and were clamped", MeshTooSmallWarning)
    return frac


def mc_backward_value(
    model: ControlledModel,
    mesh: StateMesh,
    grid: TemporalGrid,
    control: ControlTrajectory,
    alpha,
    n_mc_P: int,
    rng: RngStream,
    terminal_increment: bool = False,
) -> ValueTable:
    """Tabulate the adjoint on ``mesh`` for indices ``control.start_index .. N_T``.

    ``terminal_increment`` selects the same two terminal conventions as
    :func:`swddc.samplewise.adjoint_backward`.
    """
    if mesh.dim != model.dim_state:
        raise ValueError(f"mesh dimension {mesh.dim} != state dimension {model.dim_state}")
    if n_mc_P < 1:
        raise ValueError("n_mc_P must be >= 1")
    n = control.start_index
    u = _control_window(control, n, grid.n_steps, model.dim_control)
    a = model.check_param(alpha)
    K = u.shape[0]
    nodes = mesh.nodes
    d = model.dim_state
    table = np.empty((K + 1, mesh.n_nodes, d))
    for i in range(mesh.n_nodes):
        table[K, i] = model.term_cost_dx(nodes[i])
    fns = model.callbacks
    clamps = 0
    sqdt = np.sqrt(grid.dt)
    for k in range(K - 1, -1, -1):
        t = (n + k) * grid.dt
        dw = rng.generator.normal(0.0, sqdt, size=(mesh.n_nodes, n_mc_P, d))
        u_next = u[k + 1] if k + 1 < K else u[K - 1]
        plain = k == K - 1 and not terminal_increment
        V, c = _backward_step(
            fns, t, t + grid.dt, grid.dt, nodes, table[k + 1], u[k], u_next, a,
            np.ascontiguousarray(model.diffusion(t), dtype=np.float64), dw,
            mesh.lower, mesh.spacing, mesh.counts, mesh.strides, plain,
        )
        table[k] = V
        clamps += c
    frac = _warn_clamps(clamps, K * mesh.n_nodes * n_mc_P, "mc_backward_value")
    return ValueTable(n, table, mesh, frac)


def mc_gradient(
    model: ControlledModel,
    table: ValueTable,
    mesh: StateMesh,
    grid: TemporalGrid,
    x_n,
    control: ControlTrajectory,
    alpha,
    n_mc_Q: int,
    rng: RngStream,
) -> GradientTrajectory:
    """Monte Carlo gradient from ``Q`` forward paths started at ``x_n``.

    The returned trajectory carries the per-index standard error in
    ``stderr``.
    """
    if n_mc_Q < 1:
        raise ValueError("n_mc_Q must be >= 1")
    n = table.start_index
    if control.start_index > n:
        raise ValueError("control does not cover the table's index range")
    u = _control_window(control, n, grid.n_steps, model.dim_control)
    K = u.shape[0]
    if table.values.shape[0] != K + 1:
        raise ValueError("value table and control cover different index ranges")
    x_n = model.check_state(x_n, "x_n")
    noise = rng.generator.normal(0.0, np.sqrt(grid.dt), size=(n_mc_Q, K, model.dim_state))
    s1, s2, clamps = _gradient_paths(
        model.callbacks, n, grid.dt, x_n, u, model.check_param(alpha),
        model.diffusions(n, K, grid.dt), noise, table.values,
        mesh.lower, mesh.spacing, mesh.counts, mesh.strides,
    )
    _warn_clamps(clamps, n_mc_Q * K, "mc_gradient")
    mean = s1 / n_mc_Q
    if n_mc_Q > 1:
        var = np.maximum(s2 - n_mc_Q * mean**2, 0.0) / (n_mc_Q - 1)
        se = np.sqrt(var / n_mc_Q)
    else:
        se = np.full_like(mean, np.nan)
    return GradientTrajectory(n, mean, se)


def auto_mesh(
    model: ControlledModel,
    grid: TemporalGrid,
    n: int,
    x_n,
    control: ControlTrajectory,
    alpha,
    spacing: float,
    rng: RngStream,
    n_pilot: int = 1000,
    margin: float = 0.2,
) -> StateMesh:
    """Mesh bounds from pilot paths: min/max widened by ``margin`` of the span each side."""
    x_n = model.check_state(x_n, "x_n")
    u = _control_window(control, n, grid.n_steps, model.dim_control)
    K = u.shape[0]
    a = model.check_param(alpha)
    sig = model.diffusions(n, K, grid.dt)
    noise = rng.generator.normal(0.0, np.sqrt(grid.dt), size=(n_pilot, K, model.dim_state))
    lo = x_n.copy()
    hi = x_n.copy()
    for p in range(n_pilot):
        X = forward_path(model.callbacks, n, grid.dt, x_n, u, a, sig, noise[p])
        lo = np.minimum(lo, X.min(axis=0))
        hi = np.maximum(hi, X.max(axis=0))
    span = np.maximum(hi - lo, spacing)
    return StateMesh(lo - margin * span, hi + margin * span, spacing)


def gd_optimize(
    model: ControlledModel,
    mesh: StateMesh | None,
    grid: TemporalGrid,
    n: int,
    x_n,
    alpha_hat,
    control_init: ControlTrajectory,
    schedule: SgdSchedule,
    n_mc_P: int,
    n_mc_Q: int,
    rng: RngStream,
    spacing: float | None = None,
    terminal_increment: bool = False,
) -> ControlTrajectory:
    """Full gradient descent with a freshly rebuilt value table every iteration.

    With ``mesh=None`` the mesh is sized once from pilot paths under the
    initial control, using ``spacing``.
    """
    x_n = model.check_state(x_n, "x_n")
    alpha_hat = model.check_param(alpha_hat)
    u = _control_window(control_init, n, grid.n_steps, model.dim_control).copy()
    if mesh is None:
        if spacing is None:
            raise ValueError("either a mesh or a mesh spacing is required")
        mesh = auto_mesh(model, grid, n, x_n, ControlTrajectory(n, u), alpha_hat, spacing, rng.spawn(0))
    rates = schedule.rates()
    status = "ok"
    with warnings.catch_warnings():
        warnings.simplefilter("once", MeshTooSmallWarning)
        for l in range(schedule.n_iterations):
            ctrl = ControlTrajectory(n, u)
            table = mc_backward_value(model, mesh, grid, ctrl, alpha_hat, n_mc_P, rng, terminal_increment)
            g = mc_gradient(model, table, mesh, grid, x_n, ctrl, alpha_hat, n_mc_Q, rng)
            gv = g.values
            if not np.all(np.isfinite(gv)):
                status = "nonfinite"
                break
            if schedule.grad_clip is not None:
                gv = np.clip(gv, -schedule.grad_clip, schedule.grad_clip)
            u_new = u - rates[l] * gv
            if not np.all(np.isfinite(u_new)):
                status = "nonfinite"
                break
            u = u_new
    return ControlTrajectory(n, u, status)
