"""Benchmark problems: linear-quadratic family with Riccati oracle, and a drone.

LQ drift matrices are written as ``A(t) = A0 + sin(t) A_sin + cos(t) A_cos``
with selected entries multiplied by the unknown parameters. That covers every
LQ case shipped here and keeps the callbacks compilable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .sde import ControlledModel, ControlTrajectory, RngStream, TemporalGrid, _control_window, forward_path, matvec, path_cost


class FiniteEscapeError(ArithmeticError):
    """The Riccati solution blew up before reaching ``t = 0``."""


def _mat(a, shape=None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if shape is not None and m.shape != shape:
        raise ValueError(f"expected shape {shape}, got {m.shape}")
    return np.ascontiguousarray(m)


@dataclass(frozen=True, eq=False)
class LqSpec:
    """Coefficients of ``dX = (A(t, a) X + B u) dt + C dW`` with cost
    ``1/2 int (X'QX + u'Ru) dt + 1/2 X_T' F X_T``.

    ``param_slots`` maps parameter index ``j`` to the ``(row, col)`` entry of
    ``A`` that is multiplied by ``a[j]``.
    """

    A0: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    F: np.ndarray
    A_sin: np.ndarray | None = None
    A_cos: np.ndarray | None = None
    param_slots: dict = field(default_factory=lambda: {0: (0, 0)})

    def __post_init__(self):
        A0 = _mat(self.A0)
        d = A0.shape[0]
        if A0.shape != (d, d):
            raise ValueError("A0 must be square")
        B = np.asarray(self.B, dtype=np.float64)
        B = _mat(B.reshape(d, -1) if B.ndim < 2 else B)
        if B.shape[0] != d:
            raise ValueError(f"B must have {d} rows, got shape {B.shape}")
        m = B.shape[1]
        vals = dict(
            A0=A0,
            B=B,
            C=_mat(self.C, (d, d)),
            Q=_mat(self.Q, (d, d)),
            R=_mat(self.R, (m, m)),
            F=_mat(self.F, (d, d)),
            A_sin=np.zeros((d, d)) if self.A_sin is None else _mat(self.A_sin, (d, d)),
            A_cos=np.zeros((d, d)) if self.A_cos is None else _mat(self.A_cos, (d, d)),
        )
        for k, v in vals.items():
            object.__setattr__(self, k, v)
        for name in ("Q", "F", "R"):
            M = vals[name]
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(vals["Q"]).min() < -1e-12 or np.linalg.eigvalsh(vals["F"]).min() < -1e-12:
            raise ValueError("Q and F must be positive semidefinite")
        if np.linalg.eigvalsh(vals["R"]).min() <= 0:
            raise ValueError("R must be positive definite")
        slots = {int(j): (int(r), int(c)) for j, (r, c) in dict(self.param_slots).items()}
        if sorted(slots) != list(range(len(slots))) or not slots:
            raise ValueError("param_slots keys must be 0 .. q-1")
        for r, c in slots.values():
            if not (0 <= r < d and 0 <= c < d):
                raise ValueError(f"slot ({r}, {c}) outside a {d}x{d} matrix")
        object.__setattr__(self, "param_slots", slots)

    @property
    def dim_state(self) -> int:
        return self.A0.shape[0]

    @property
    def dim_control(self) -> int:
        return self.B.shape[1]

    @property
    def dim_param(self) -> int:
        return len(self.param_slots)

    def A(self, t: float, alpha) -> np.ndarray:
        alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
        A = self.A0 + math.sin(t) * self.A_sin + math.cos(t) * self.A_cos
        for j, (r, c) in self.param_slots.items():
            A[r, c] *= alpha[j]
        return A

    def key(self) -> tuple:
        arrs = (self.A0, self.A_sin, self.A_cos, self.B, self.C, self.Q, self.R, self.F)
        return tuple(a.tobytes() for a in arrs) + (self.A0.shape, self.B.shape, tuple(sorted(self.param_slots.items())))


@dataclass
class RiccatiSolution:
    """``P[n]`` is the Riccati matrix at grid time ``t_n``."""

    P: np.ndarray  # (N_T + 1, d, d)
    grid: TemporalGrid


_LQ_CACHE: dict = {}


def lq_model(spec: LqSpec, param_slots: dict | None = None, name: str = "lq") -> ControlledModel:
    """Compiled controlled model for ``spec``.

    Models are cached by coefficient values, so repeated calls with equal
    coefficients reuse the compiled callbacks.
    """
    if param_slots is not None:
        spec = LqSpec(spec.A0, spec.B, spec.C, spec.Q, spec.R, spec.F, spec.A_sin, spec.A_cos, param_slots)
    key = spec.key()
    if key in _LQ_CACHE:
        return _LQ_CACHE[key]
    d, m, q = spec.dim_state, spec.dim_control, spec.dim_param
    A0, As, Ac = spec.A0.copy(), spec.A_sin.copy(), spec.A_cos.copy()
    B, C = spec.B.copy(), spec.C.copy()
    Qs = 0.5 * (spec.Q + spec.Q.T)
    Rs = 0.5 * (spec.R + spec.R.T)
    Fs = 0.5 * (spec.F + spec.F.T)
    rows = np.array([spec.param_slots[j][0] for j in range(q)], dtype=np.int64)
    cols = np.array([spec.param_slots[j][1] for j in range(q)], dtype=np.int64)

    @numba.njit
    def A_of(t, a):
        M = A0 + math.sin(t) * As + math.cos(t) * Ac
        for j in range(rows.shape[0]):
            M[rows[j], cols[j]] *= a[j]
        return M

    @numba.njit
    def quad(M, v):
        return v @ matvec(M, v)

    def drift(t, x, u, a):
        return matvec(A_of(t, a), x) + matvec(B, u)

    def drift_dx(t, x, u, a):
        return A_of(t, a)

    def drift_du(t, x, u, a):
        return B.copy()

    def diffusion(t):
        return C.copy()

    def run_cost(t, x, u):
        return 0.5 * (quad(Qs, x) + quad(Rs, u))

    def run_cost_dx(t, x, u):
        return matvec(Qs, x)

    def run_cost_du(t, x, u):
        return matvec(Rs, u)

    def term_cost(x):
        return 0.5 * quad(Fs, x)

    def term_cost_dx(x):
        return matvec(Fs, x)

    model = ControlledModel(
        d, m, q, drift, drift_dx, drift_du, diffusion,
        run_cost, run_cost_dx, run_cost_du, term_cost, term_cost_dx, name=name,
    )
    _LQ_CACHE[key] = model
    return model


def riccati_solve(spec: LqSpec, alpha_true, grid: TemporalGrid, substeps: int = 10) -> RiccatiSolution:
    """Integrate ``P' = -PA - A'P + P B R^-1 B' P - Q``, ``P(T) = F`` backward with RK4.

    Raises
    ------
    FiniteEscapeError
        If ``|P|`` exceeds ``1e12``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    alpha_true = np.atleast_1d(np.asarray(alpha_true, dtype=np.float64))
    if alpha_true.size != spec.dim_param:
        raise ValueError(f"alpha_true must have {spec.dim_param} entries")
    S = spec.B @ np.linalg.solve(spec.R, spec.B.T)
    Q = spec.Q

    def rhs(t, P):
        A = spec.A(t, alpha_true)
        return -P @ A - A.T @ P + P @ S @ P - Q

    N = grid.n_steps
    h = grid.dt / substeps
    out = np.empty((N + 1, spec.dim_state, spec.dim_state))
    P = spec.F.copy()
    out[N] = P
    for n in range(N, 0, -1):
        t = n * grid.dt
        for s in range(substeps):
            ts = t - s * h
            k1 = rhs(ts, P)
            k2 = rhs(ts - h / 2, P - h / 2 * k1)
            k3 = rhs(ts - h / 2, P - h / 2 * k2)
            k4 = rhs(ts - h, P - h * k3)
            P = P - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(P)) or np.abs(P).max() > 1e12:
                raise FiniteEscapeError(f"Riccati solution escapes near t={ts - h:.6g}")
        out[n - 1] = P
    return RiccatiSolution(out, grid)


def lq_analytic_control(riccati: RiccatiSolution, spec: LqSpec, n: int, x) -> np.ndarray:
    """Optimal feedback ``-R^-1 B' P(t_n) x``."""
    if not 0 <= n <= riccati.grid.n_steps:
        raise ValueError(f"index {n} outside the grid")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return -np.linalg.solve(spec.R, spec.B.T @ (riccati.P[n] @ x))


@dataclass(frozen=True)
class DroneParams:
    """Drone with unknown mass. ``mass`` is the true value used for the synthetic truth."""

    mass: float = 1.0
    gravity: float = 9.8
    mu: float = 0.1
    sigma: float = 0.2
    target: tuple = (6.0, 7.0, 8.0)
    terminal_weight: float = 10.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if len(self.target) != 3:
            raise ValueError("target must have three coordinates")
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))


_DRONE_CACHE: dict = {}


def drone_model(params: DroneParams) -> ControlledModel:
    """State ``(X, Y, Z, theta)``, control ``(steer, thrust)``, parameter ``(mass,)``."""
    key = (params.gravity, params.mu, params.sigma, params.target, params.terminal_weight)
    if key in _DRONE_CACHE:
        return _DRONE_CACHE[key]
    g, mu, s, w = params.gravity, params.mu, params.sigma, params.terminal_weight
    target = np.array(params.target)
    sig = np.diag([s, s, s, s * s])

    def drift(t, x, u, a):
        out = np.empty(4)
        out[0] = math.sin(x[3])
        out[1] = math.cos(x[3])
        out[2] = u[1] - a[0] * g
        out[3] = u[0] - mu * a[0]
        return out

    def drift_dx(t, x, u, a):
        out = np.zeros((4, 4))
        out[0, 3] = math.cos(x[3])
        out[1, 3] = -math.sin(x[3])
        return out

    def drift_du(t, x, u, a):
        out = np.zeros((4, 2))
        out[2, 1] = 1.0
        out[3, 0] = 1.0
        return out

    def diffusion(t):
        return sig.copy()

    def run_cost(t, x, u):
        return 0.5 * (u[0] * u[0] + u[1] * u[1])

    def run_cost_dx(t, x, u):
        return np.zeros(4)

    def run_cost_du(t, x, u):
        return u.copy()

    def term_cost(x):
        s2 = 0.0
        for i in range(3):
            s2 += (x[i] - target[i]) ** 2
        return w * s2

    def term_cost_dx(x):
        out = np.zeros(4)
        for i in range(3):
            out[i] = 2.0 * w * (x[i] - target[i])
        return out

    model = ControlledModel(
        4, 2, 1, drift, drift_dx, drift_du, diffusion,
        run_cost, run_cost_dx, run_cost_du, term_cost, term_cost_dx, name="drone",
    )
    _DRONE_CACHE[key] = model
    return model


@numba.njit
def _mc_costs(fns, n, dt, x0, u, a, sig, noise):
    out = np.empty(noise.shape[0])
    for p in range(noise.shape[0]):
        X = forward_path(fns, n, dt, x0, u, a, sig, noise[p])
        out[p] = path_cost(fns, n, dt, X, u)
    return out


def evaluate_cost(
    model: ControlledModel,
    grid: TemporalGrid,
    n: int,
    x_n,
    control: ControlTrajectory,
    alpha_true,
    n_mc: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the discretised cost from ``(t_n, x_n)``."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    u = _control_window(control, n, grid.n_steps, model.dim_control)
    K = u.shape[0]
    noise = rng.generator.normal(0.0, math.sqrt(grid.dt), size=(n_mc, K, model.dim_state))
    costs = _mc_costs(
        model.callbacks, n, grid.dt, model.check_state(x_n), u, model.check_param(alpha_true),
        model.diffusions(n, K, grid.dt), noise,
    )
    se = costs.std(ddof=1) / math.sqrt(n_mc) if n_mc > 1 else float("nan")
    return float(costs.mean()), float(se)


# Problem registry ----------------------------------------------------------


def lq_case1_spec() -> LqSpec:
    return LqSpec(A0=[[1.0]], B=[[0.5]], C=[[0.01]], Q=[[1.0]], R=[[0.1]], F=[[1.0]])


def lq_case1_exp2_spec() -> LqSpec:
    return LqSpec(A0=[[0.0]], A_sin=[[2.0]], B=[[0.5]], C=[[0.01]], Q=[[1.0]], R=[[0.1]], F=[[1.0]])


def lq_case2_spec() -> LqSpec:
    return LqSpec(
        A0=np.zeros((2, 2)),
        A_sin=np.diag([1.0, 0.0]),
        A_cos=np.diag([0.0, 1.0]),
        B=[[0.5], [0.5]],
        C=0.1 * np.eye(2),
        Q=np.eye(2),
        R=[[1.0]],
        F=np.eye(2),
    )


def lq_case3_spec() -> LqSpec:
    return LqSpec(
        A0=np.diag([0.0, 0.0, 1.0, 1.0]),
        A_sin=np.diag([1.0, 0.0, 0.0, 0.0]),
        A_cos=np.diag([0.0, 1.0, 0.0, 0.0]),
        B=[[0.5, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 0.0]],
        C=0.1 * np.eye(4),
        Q=np.eye(4),
        R=np.eye(2),
        F=np.eye(4),
        param_slots={0: (2, 2), 1: (3, 3)},
    )


@dataclass(frozen=True)
class Problem:
    """A benchmark with its default experiment settings."""

    id: str
    lq: LqSpec | None = None
    drone: DroneParams | None = None
    defaults: dict = field(default_factory=dict)

    @property
    def model(self) -> ControlledModel:
        if self.lq is not None:
            return lq_model(self.lq, name=self.id)
        return drone_model(self.drone)


def _drone_obs_cov(R: float = 0.01) -> list:
    return np.diag([R**2, R**2, R**2, (0.1 * R) ** 2]).tolist()


PROBLEMS = {
    "lq-case1": Problem(
        "lq-case1",
        lq=lq_case1_spec(),
        defaults=dict(horizon=1.0, n_steps=50, x0=[2.0], obs_noise_cov=[[1e-6]],
                      prior_lower=[-2.0], prior_upper=[8.0], alpha_true=[1.0],
                      alpha_switch_time=0.5, alpha_after_switch=[5.0]),
    ),
    "lq-case1-exp2": Problem(
        "lq-case1-exp2",
        lq=lq_case1_exp2_spec(),
        defaults=dict(horizon=1.0, n_steps=20, x0=[2.0], obs_noise_cov=[[1e-6]],
                      prior_lower=[-2.0], prior_upper=[8.0], alpha_true=[1.0]),
    ),
    "lq-case2": Problem(
        "lq-case2",
        lq=lq_case2_spec(),
        defaults=dict(horizon=1.0, n_steps=50, x0=[2.0, -2.0], obs_noise_cov=(1e-8 * np.eye(2)).tolist(),
                      prior_lower=[-2.0], prior_upper=[8.0], alpha_true=[1.0]),
    ),
    "lq-case3": Problem(
        "lq-case3",
        lq=lq_case3_spec(),
        defaults=dict(horizon=1.0, n_steps=40, x0=[1.0, 2.0, -1.0, 2.0], obs_noise_cov=(1e-8 * np.eye(4)).tolist(),
                      prior_lower=[-2.0, -2.0], prior_upper=[8.0, 8.0], alpha_true=[1.0, 2.0]),
    ),
    "drone": Problem(
        "drone",
        drone=DroneParams(),
        defaults=dict(horizon=1.0, n_steps=50, x0=[0.0, 0.0, 5.0, 0.0], obs_noise_cov=_drone_obs_cov(),
                      prior_lower=[0.1], prior_upper=[5.0], alpha_true=[1.0]),
    ),
}


def get_problem(problem_id: str, sigma: float | None = None) -> Problem:
    """Look up a registered problem; ``sigma`` overrides the drone noise level."""
    if problem_id not in PROBLEMS:
        raise KeyError(f"unknown problem {problem_id!r}; known: {', '.join(PROBLEMS)}")
    p = PROBLEMS[problem_id]
    if sigma is not None and p.drone is not None:
        d = p.drone
        p = Problem(p.id, drone=DroneParams(d.mass, d.gravity, d.mu, sigma, d.target, d.terminal_weight), defaults=p.defaults)
    return p
