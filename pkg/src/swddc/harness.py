"""Closed-loop runs, repeated trials and CSV output.

Each trial alternates control optimisation, one step of the hidden truth, a
new observation, and one filter step. Random streams are keyed per trial and
per purpose, so changing the filter size never changes the truth or the
observations.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba.core.errors import NumbaWarning

from .baseline_filters import AugmentedCloud, Ensemble, augenkf_step, augpf_step
from .benchmarks import Problem, get_problem, lq_analytic_control, riccati_solve
from .config import ExperimentConfig
from .direct_filter import JitterSpec, ParticleCloud, _psd_sqrt, df_step
from .fullgrid import StateMesh, gd_optimize
from .samplewise import SgdSchedule, sgd_optimize
from .sde import ControlTrajectory, RngStream, TemporalGrid, euler_step

log = logging.getLogger(__name__)

STREAM_TRUTH, STREAM_OBS, STREAM_FILTER, STREAM_SOLVER, STREAM_INIT = range(5)
PHASES = ("solver", "truth", "filter")


@dataclass
class RunRecord:
    """Everything one closed-loop trial produced.

    Index ``n`` of ``alpha_hat``, ``states`` and ``observations`` refers to
    grid time ``t_n``; ``controls[n]`` is applied on ``[t_n, t_{n+1})``.
    ``alpha_hat[0]`` is the prior mean.
    """

    times: np.ndarray
    alpha_hat: np.ndarray
    alpha_std: np.ndarray
    alpha_true: np.ndarray
    controls: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    timings: dict
    total_time: float
    realized_cost: float
    reference_controls: np.ndarray | None = None
    terminal_distance: float | None = None
    flags: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.controls)


def generate_observation(x_true, Sigma, rng: RngStream) -> np.ndarray:
    """``x_true`` plus Gaussian noise with covariance ``Sigma``."""
    x_true = np.atleast_1d(np.asarray(x_true, dtype=np.float64))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    if Sigma.shape != (x_true.size, x_true.size):
        raise ValueError(f"Sigma must be {x_true.size}x{x_true.size}")
    return x_true + _psd_sqrt(Sigma) @ rng.generator.standard_normal(x_true.size)


def true_parameter(cfg: ExperimentConfig, grid: TemporalGrid, n: int) -> np.ndarray:
    if cfg.alpha_switch_time is not None and n >= grid.index_of(cfg.alpha_switch_time):
        return np.asarray(cfg.alpha_after_switch, dtype=np.float64)
    return np.asarray(cfg.alpha_true, dtype=np.float64)


class _Filter:
    """Uniform face over the three filters for the closed loop."""

    def __init__(self, cfg: ExperimentConfig, problem: Problem, x0, rng: RngStream):
        self.kind = cfg.filter
        lo, hi = cfg.prior_lower, cfg.prior_upper
        self.jitter = JitterSpec.from_prior(lo, hi, cfg.jitter_scale, cfg.jitter_decay)
        if self.kind == "direct":
            self.state = ParticleCloud.uniform_prior(lo, hi, cfg.particles, rng)
        elif self.kind == "augpf":
            self.state = AugmentedCloud.from_prior(x0, lo, hi, cfg.particles, rng)
        else:
            self.state = Ensemble.from_prior(x0, lo, hi, cfg.particles, rng)

    def parameter_cloud(self) -> ParticleCloud:
        if self.kind == "direct":
            return self.state
        if self.kind == "augpf":
            return ParticleCloud(self.state.params, self.state.weights)
        return ParticleCloud(self.state.params)

    def step(self, model, t_n, x_est, u_n, M_next, Sigma, grid, rng):
        if self.kind == "direct":
            self.state, est = df_step(self.state, model, t_n, x_est, u_n, M_next, Sigma, self.jitter, grid, rng)
        elif self.kind == "augpf":
            self.state, est = augpf_step(self.state, model, t_n, u_n, M_next, Sigma, self.jitter, grid, rng)
        else:
            self.state, est = augenkf_step(self.state, model, t_n, u_n, M_next, Sigma, self.jitter, grid, rng)
        return est

    @property
    def degenerate(self) -> bool:
        return bool(getattr(self.state, "degenerate", False))


def run_swddc(cfg: ExperimentConfig, trial: int = 0) -> RunRecord:
    """Run one closed-loop trial of ``cfg`` (which must be resolved)."""
    problem = get_problem(cfg.problem, cfg.drone_sigma)
    model = problem.model
    grid = TemporalGrid(cfg.horizon, cfg.n_steps)
    N, d, m, q = grid.n_steps, model.dim_state, model.dim_control, model.dim_param
    Sigma = np.asarray(cfg.obs_noise_cov, dtype=np.float64)
    x0 = np.asarray(cfg.x0, dtype=np.float64)

    base = RngStream(cfg.seed, (trial,))
    rng_truth, rng_obs = base.spawn(STREAM_TRUTH), base.spawn(STREAM_OBS)
    rng_filter, rng_solver = base.spawn(STREAM_FILTER), base.spawn(STREAM_SOLVER)
    filt = _Filter(cfg, problem, x0, base.spawn(STREAM_INIT))
    schedule = SgdSchedule(cfg.sgd_iterations, cfg.sgd_rho0, cfg.sgd_l0, cfg.batch_size, cfg.sgd_grad_clip)
    mesh = None
    if cfg.solver == "fullgrid" and cfg.mesh_lower is not None:
        mesh = StateMesh(cfg.mesh_lower, cfg.mesh_upper, cfg.mesh_spacing)

    alpha_hat = np.empty((N + 1, q))
    alpha_std = np.empty((N + 1, q))
    alpha_true = np.array([true_parameter(cfg, grid, n) for n in range(N + 1)])
    states = np.empty((N + 1, d))
    obs = np.empty((N + 1, d))
    controls = np.empty((N, m))
    timings = {p: np.zeros(N) for p in PHASES}
    flags = []

    cloud0 = filt.parameter_cloud()
    alpha_hat[0], alpha_std[0] = cloud0.weights @ cloud0.particles, cloud0.std()
    states[0] = obs[0] = x0  # the initial state is known exactly
    control = ControlTrajectory.zeros(0, N, m)
    dw_truth = rng_truth.generator.normal(0.0, math.sqrt(grid.dt), size=(N, d))

    t_start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for n in range(N):
            t_n = grid.t(n)
            tic = time.perf_counter()
            if cfg.solver == "samplewise":
                control = sgd_optimize(model, grid, n, obs[n], filt.parameter_cloud(), control, schedule,
                                       rng_solver.spawn(n), cfg.terminal_increment)
            else:
                control = gd_optimize(model, mesh, grid, n, obs[n], alpha_hat[n], control, schedule,
                                      cfg.mc_P, cfg.mc_Q, rng_solver.spawn(n), cfg.mesh_spacing,
                                      cfg.terminal_increment)
            if control.status != "ok":
                flags.append((n, f"solver:{control.status}"))
            controls[n] = control.values[0]
            toc = time.perf_counter()
            timings["solver"][n] = toc - tic

            states[n + 1] = euler_step(model, t_n, states[n], controls[n], alpha_true[n], dw_truth[n], grid.dt)
            obs[n + 1] = generate_observation(states[n + 1], Sigma, rng_obs)
            tic, toc = toc, time.perf_counter()
            timings["truth"][n] = toc - tic

            filt.step(model, t_n, obs[n], controls[n], obs[n + 1], Sigma, grid, rng_filter)
            if filt.degenerate:
                flags.append((n, "filter:degenerate"))
            pc = filt.parameter_cloud()
            alpha_hat[n + 1], alpha_std[n + 1] = pc.weights @ pc.particles, pc.std()
            timings["filter"][n] = time.perf_counter() - toc
            if n + 1 < N:
                control = control.tail()
    total = time.perf_counter() - t_start
    for w in caught:
        if not issubclass(w.category, (DeprecationWarning, NumbaWarning)):
            flags.append((-1, f"warning:{w.category.__name__}:{w.message}"))

    cost = _realized_cost(model, grid, states, controls)
    rec = RunRecord(grid.times, alpha_hat, alpha_std, alpha_true, controls, states, obs, timings, total, cost,
                    flags=flags)
    if problem.lq is not None:
        rec.reference_controls = _reference_controls(cfg, problem, grid, states, alpha_true)
    if problem.drone is not None:
        rec.terminal_distance = float(np.linalg.norm(states[N, :3] - np.asarray(problem.drone.target)))
    return rec


def _realized_cost(model, grid, states, controls) -> float:
    s = sum(model.run_cost(grid.t(n), states[n], controls[n]) for n in range(len(controls)))
    return float(s * grid.dt + model.term_cost(states[-1]))


def _reference_controls(cfg, problem, grid, states, alpha_true) -> np.ndarray:
    """Analytic feedback along the realised truth, solved with the parameter in force at ``t_n``."""
    spec = problem.lq
    cache = {}
    out = np.empty((grid.n_steps, spec.dim_control))
    for n in range(grid.n_steps):
        key = tuple(alpha_true[n])
        if key not in cache:
            cache[key] = riccati_solve(spec, alpha_true[n], grid)
        out[n] = lq_analytic_control(cache[key], spec, n, states[n])
    return out


def rmse(series, reference) -> np.ndarray:
    """Per-index RMSE across trials.

    ``series`` has shape ``(trials, index)`` or ``(trials, index, k)``;
    ``reference`` matches it or drops the leading trial axis. The error is
    Euclidean over the last axis when present.
    """
    s = np.asarray(series, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if r.ndim == s.ndim - 1:
        r = r[None]
    if s.ndim not in (2, 3) or r.ndim != s.ndim or r.shape[1:] != s.shape[1:] or r.shape[0] not in (1, s.shape[0]):
        raise ValueError(f"series shape {s.shape} does not match reference shape {np.shape(reference)}")
    err2 = (s - r) ** 2
    if s.ndim == 3:
        err2 = err2.sum(axis=2)
    return np.sqrt(err2.mean(axis=0))


@dataclass
class TrialSummary:
    config: ExperimentConfig
    records: dict  # trial -> RunRecord
    failures: dict  # trial -> error message
    param_rmse: np.ndarray | None = None
    control_rmse: np.ndarray | None = None

    @property
    def completed(self) -> list:
        return sorted(self.records)

    def mean_param_rmse(self, lo: int, hi: int) -> float:
        """Mean of the per-step parameter RMSE over steps ``lo .. hi`` inclusive."""
        return float(np.mean(self.param_rmse[lo : hi + 1]))

    def metrics(self) -> dict:
        recs = [self.records[k] for k in self.completed]
        out = {"trials": len(recs) + len(self.failures), "completed": len(recs)}
        if not recs:
            return out
        out["mean_param_rmse"] = float(np.mean(self.param_rmse[1:]))
        if self.control_rmse is not None:
            out["mean_control_rmse"] = float(np.mean(self.control_rmse))
        out["mean_realized_cost"] = float(np.mean([r.realized_cost for r in recs]))
        if recs[0].terminal_distance is not None:
            out["mean_terminal_distance"] = float(np.mean([r.terminal_distance for r in recs]))
        out["flagged_steps"] = sum(1 for r in recs for n, _ in r.flags if n >= 0)
        return out


def run_trials(cfg: ExperimentConfig, n_trials: int | None = None, out_dir=None) -> TrialSummary:
    """Run independent trials ``0 .. n_trials-1`` and optionally write CSVs to ``out_dir``.

    A failing trial is logged and skipped; summaries use the completed ones.
    """
    n_trials = cfg.trials if n_trials is None else n_trials
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    records, failures = {}, {}
    for k in range(n_trials):
        try:
            records[k] = run_swddc(cfg, k)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("trial %d failed: %s", k, exc)
            failures[k] = f"{type(exc).__name__}: {exc}"
    summary = TrialSummary(cfg, records, failures)
    if records:
        recs = [records[k] for k in sorted(records)]
        summary.param_rmse = rmse([r.alpha_hat for r in recs], [r.alpha_true for r in recs])
        if recs[0].reference_controls is not None:
            summary.control_rmse = rmse([r.controls for r in recs], [r.reference_controls for r in recs])
    if out_dir is not None:
        write_outputs(summary, out_dir)
    return summary


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_outputs(summary: TrialSummary, out_dir) -> Path:
    """Write one CSV per series plus the resolved config.

    Every file except ``timings.csv`` is a deterministic function of the
    config and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = summary.config
    cfg.dump(out / "config.yaml")
    trials = summary.completed
    recs = [summary.records[k] for k in trials]
    if not recs:
        _write(out / "summary.csv", ["metric", "value"], summary.metrics().items())
        return out
    q = recs[0].alpha_hat.shape[1]
    m = recs[0].controls.shape[1]
    d = recs[0].states.shape[1]

    _write(
        out / "parameter_estimates.csv",
        ["trial", "step", "time"] + [f"alpha_hat_{j}" for j in range(q)] + [f"alpha_std_{j}" for j in range(q)]
        + [f"alpha_true_{j}" for j in range(q)],
        ([k, n, r.times[n], *r.alpha_hat[n], *r.alpha_std[n], *r.alpha_true[n]]
         for k, r in zip(trials, recs) for n in range(len(r.times))),
    )
    has_ref = recs[0].reference_controls is not None
    _write(
        out / "controls.csv",
        ["trial", "step", "time"] + [f"u_{j}" for j in range(m)] + ([f"u_ref_{j}" for j in range(m)] if has_ref else []),
        ([k, n, r.times[n], *r.controls[n], *(r.reference_controls[n] if has_ref else [])]
         for k, r in zip(trials, recs) for n in range(r.n_steps)),
    )
    _write(
        out / "states.csv",
        ["trial", "step", "time"] + [f"x_{j}" for j in range(d)] + [f"obs_{j}" for j in range(d)],
        ([k, n, r.times[n], *r.states[n], *r.observations[n]] for k, r in zip(trials, recs) for n in range(len(r.times))),
    )
    N = recs[0].n_steps
    ctrl = summary.control_rmse
    _write(
        out / "rmse.csv",
        ["step", "time", "param_rmse", "control_rmse"],
        ([n, recs[0].times[n], summary.param_rmse[n], ctrl[n] if ctrl is not None and n < N else None]
         for n in range(N + 1)),
    )
    trial_rows = [
        [k, r.realized_cost, r.terminal_distance, len([f for f in r.flags if f[0] >= 0])]
        for k, r in zip(trials, recs)
    ]
    _write(out / "trials.csv", ["trial", "realized_cost", "terminal_distance", "flagged_steps"], trial_rows)
    rows = list(summary.metrics().items()) + [(f"failed_trial_{k}", msg) for k, msg in summary.failures.items()]
    _write(out / "summary.csv", ["metric", "value"], rows)
    _write(
        out / "timings.csv",
        ["trial", "step"] + [f"{p}_s" for p in PHASES] + ["step_s"],
        [
            row
            for k, r in zip(trials, recs)
            for row in (
                [[k, n] + [r.timings[p][n] for p in PHASES] + [sum(r.timings[p][n] for p in PHASES)] for n in range(N)]
                + [[k, "total"] + [float(r.timings[p].sum()) for p in PHASES] + [r.total_time]]
            )
        ],
    )
    return out
