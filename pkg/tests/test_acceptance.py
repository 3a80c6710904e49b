"""End-to-end acceptance checks, one per criterion.

Each test prints a ``[PASS]`` or ``[FAIL]`` line (also repeated in the
terminal summary) and then asserts the criterion at its stated tolerance.
Wall-clock figures are measured after a short warm-up run, so that JIT
compilation of a freshly built model is not charged to the solver.
"""
import dataclasses
import math
import time
import warnings

import numpy as np
import pytest

from conftest import lq1, report
from swddc.baseline_filters import Ensemble, augenkf_step
from swddc.benchmarks import get_problem, lq_analytic_control, lq_model, riccati_solve
from swddc.cli import builtin_experiments
from swddc.config import config_from_dict, load_config
from swddc.direct_filter import JitterSpec, ParticleCloud, bayes_update, systematic_resample
from swddc.fullgrid import MeshTooSmallWarning, StateMesh, mc_backward_value
from swddc.harness import run_swddc, run_trials
from swddc.samplewise import SgdSchedule, adjoint_backward, samplewise_gradient, sgd_optimize
from swddc.sde import (
    ControlledModel,
    ControlTrajectory,
    RngStream,
    StatePath,
    TemporalGrid,
    forward_path,
    path_cost,
    simulate_path,
)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def experiment(name, **overrides):
    cfg = load_config(builtin_experiments()[name])
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def warm_up(cfg):
    """Compile every kernel the config touches with a short run."""
    run_swddc(dataclasses.replace(cfg, sgd_iterations=2, n_steps=min(cfg.n_steps, 10), alpha_switch_time=None,
                                  alpha_after_switch=None), 0)


def timed_trials(cfg):
    warm_up(cfg)
    tic = time.perf_counter()
    summary = run_trials(cfg)
    return summary, time.perf_counter() - tic


def test_criterion_1_riccati_equivalence():
    spec = lq1(c=1e-6)
    model = lq_model(spec)
    grid = TemporalGrid(1.0, 50)
    x0 = [2.0]
    tic = time.perf_counter()
    u = sgd_optimize(model, grid, 0, x0, ParticleCloud([1.0]), ControlTrajectory.zeros(0, 50, 1),
                     SgdSchedule(10_000, 0.1, grad_clip=100.0), RngStream(0))
    elapsed = time.perf_counter() - tic
    X = forward_path(model.callbacks, 0, grid.dt, np.array(x0), u.values, np.array([1.0]),
                     model.diffusions(0, 50, grid.dt), RngStream(1).generator.normal(0, math.sqrt(grid.dt), (50, 1)))
    ric = riccati_solve(spec, [1.0], grid)
    ref = np.array([lq_analytic_control(ric, spec, n, X[n])[0] for n in range(50)])
    rel = np.abs(u.values[:, 0] - ref).max() / np.abs(ref).max()
    ok = rel < 0.05 and elapsed < 30
    assert report("1", ok, f"relative sup deviation {rel:.4f} (< 0.05), {elapsed:.1f} s (< 30 s)")


def test_criterion_2_efficiency_ratio():
    sw = experiment("lq-case1-exp2")
    fine = experiment("lq-case1-exp2-fullgrid-fine")
    warm_up(sw)
    warm_up(fine)
    rec_sw, rec_fine = run_swddc(sw, 0), run_swddc(fine, 0)
    ratio = rec_fine.total_time / rec_sw.total_time
    err_sw = np.abs(rec_sw.controls - rec_sw.reference_controls).max()
    err_fine = np.abs(rec_fine.controls - rec_fine.reference_controls).max()
    ok = ratio >= 10 and err_sw <= err_fine
    assert report("2", ok, f"wall-clock fine mesh {rec_fine.total_time:.1f} s / sample-wise {rec_sw.total_time:.1f} s "
                           f"= {ratio:.1f}x (>= 10); control sup error {err_sw:.3f} vs {err_fine:.3f} (no larger)")


def test_criterion_3_parameter_switch():
    summary, elapsed = timed_trials(experiment("lq-case1"))
    good = 0
    for rec in summary.records.values():
        before = abs(rec.alpha_hat[15:25, 0].mean() - 1.0)
        after = abs(rec.alpha_hat[40:50, 0].mean() - 5.0)
        good += before < 0.2 and after < 0.5
    ok = good >= 18 and elapsed < 120
    assert report("3", ok, f"{good}/20 trials track 1 then 5 (>= 18), {elapsed:.1f} s (< 120 s)")


def test_criterion_4_filter_ordering_2d():
    tic = time.perf_counter()
    rmse = {}
    for name in ("lq-case2", "lq-case2-augpf-1000", "lq-case2-augpf-20000"):
        summary, _ = timed_trials(experiment(name))
        rmse[name] = summary.mean_param_rmse(25, 50)
    elapsed = time.perf_counter() - tic
    d, a1, a20 = rmse["lq-case2"], rmse["lq-case2-augpf-1000"], rmse["lq-case2-augpf-20000"]
    ok = d < a1 and a20 < a1 and elapsed < 600
    assert report("4", ok, f"RMSE direct-100 {d:.3f} < AugPF-1000 {a1:.3f}; AugPF-20000 {a20:.3f} < AugPF-1000; "
                           f"{elapsed:.0f} s (< 600 s)")


def test_criterion_5_filter_ordering_4d():
    direct, _ = timed_trials(experiment("lq-case3"))
    augpf, _ = timed_trials(experiment("lq-case3-augpf-20000"))
    N = direct.config.n_steps
    r_d, r_a = direct.mean_param_rmse(1, N), augpf.mean_param_rmse(1, N)
    t_d = sum(r.total_time for r in direct.records.values())
    t_a = sum(r.total_time for r in augpf.records.values())
    ok = r_d < r_a and t_d < t_a
    assert report("5", ok, f"RMSE direct-500 {r_d:.3f} < AugPF-20000 {r_a:.3f}; "
                           f"wall-clock {t_d:.1f} s < {t_a:.1f} s")


@pytest.fixture(scope="module")
def drone_runs():
    direct, t_d = timed_trials(experiment("drone"))
    enkf, t_e = timed_trials(experiment("drone-augenkf"))
    dist = lambda s: float(np.mean([r.terminal_distance for r in s.records.values()]))
    return dist(direct), dist(enkf), t_d, t_e


def test_criterion_6a_drone_reaches_target(drone_runs):
    d, _, t_d, _ = drone_runs
    ok = d < 1.0 and t_d < 600
    assert report("6a", ok, f"mean terminal distance direct-200 {d:.3f} (< 1.0), {t_d:.0f} s (< 600 s)")


def test_criterion_6b_drone_ordering(drone_runs):
    d, e, _, t_e = drone_runs
    ok = e > d and t_e < 600
    assert report("6b", ok, f"mean terminal distance AugEnKF-50 {e:.4f} > direct-200 {d:.4f}, {t_e:.0f} s (< 600 s)")


def test_criterion_7_gradient_matches_finite_differences():
    model = lq_model(lq1())
    grid = TemporalGrid(1.0, 50)
    rng = np.random.default_rng(7)
    x0, a, eps = np.array([2.0]), np.array([1.0]), 1e-5
    u = rng.normal(size=(50, 1))
    dw = rng.normal(0, math.sqrt(grid.dt), size=(50, 1))
    sig = model.diffusions(0, 50, grid.dt)

    def cost(v):
        return path_cost(model.callbacks, 0, grid.dt, forward_path(model.callbacks, 0, grid.dt, x0, v, a, sig, dw), v)

    path = StatePath(0, forward_path(model.callbacks, 0, grid.dt, x0, u, a, sig, dw))
    ctrl = ControlTrajectory(0, u)
    g = samplewise_gradient(model, path, adjoint_backward(model, path, ctrl, a, grid.dt), ctrl, a, grid.dt).values
    fd = np.empty(50)
    for k in range(50):
        up, dn = u.copy(), u.copy()
        up[k, 0] += eps
        dn[k, 0] -= eps
        fd[k] = (cost(up) - cost(dn)) / (2 * eps) / grid.dt
    rel = np.abs(g[:, 0] - fd) / np.abs(fd)
    assert report("7", rel.max() < 1e-3, f"max relative error over 50 indices {rel.max():.2e} (< 1e-3)")


def _bias_model():
    """dX = (-0.7 X + alpha) dt + 0.3 dW: linear-Gaussian in [X; alpha]."""

    def drift(t, x, u, a):
        return -0.7 * x + a[0]

    def drift_dx(t, x, u, a):
        return np.full((1, 1), -0.7)

    def drift_du(t, x, u, a):
        return np.zeros((1, 1))

    def diffusion(t):
        return np.full((1, 1), 0.3)

    def zero_cost(t, x, u):
        return 0.0

    def zero_vec(t, x, u):
        return np.zeros(1)

    def term_cost(x):
        return 0.0

    def term_cost_dx(x):
        return np.zeros(1)

    return ControlledModel(1, 1, 1, drift, drift_dx, drift_du, diffusion,
                           zero_cost, zero_vec, zero_vec, term_cost, term_cost_dx, name="bias")


def test_criterion_8_oracle_equivalences():
    # value table against P(t) x; with B = 0 the adjoint of any control is exactly P(t) x
    spec = lq1(a=1.0, b=0.0, c=0.01, q=1.0, f=1.0)
    grid = TemporalGrid(1.0, 50)
    mesh = StateMesh([-2.0], [2.0], 0.05)
    table = mc_backward_value(lq_model(spec), mesh, grid, ControlTrajectory.zeros(0, 50, 1), [-1.0], 100_000,
                              RngStream(8))
    P = riccati_solve(spec, [-1.0], grid).P
    x = mesh.nodes[:, 0]
    value_err = max(np.abs(table.values[k, :, 0] - P[k, 0, 0] * x).max() / np.abs(P[k, 0, 0] * x).max()
                    for k in range(51))

    # one ensemble analysis against the exact Kalman filter on [X; alpha]
    dt = 0.02
    N = 10_000
    mean0, cov0 = np.array([1.0, 0.5]), np.array([[0.04, 0.01], [0.01, 0.25]])
    R, obs = np.array([[0.01]]), np.array([1.2])
    rng = RngStream(8, 1)
    ens = Ensemble(rng.spawn(0).generator.multivariate_normal(mean0, cov0, size=N), 1)
    out, _ = augenkf_step(ens, _bias_model(), 0.0, [0.0], obs, R, JitterSpec.none(1), TemporalGrid(1.0, 50),
                          rng.spawn(1))
    F = np.array([[1 - 0.7 * dt, dt], [0.0, 1.0]])
    m = F @ mean0
    Pf = F @ cov0 @ F.T + np.diag([0.09 * dt, 0.0])
    H = np.array([[1.0, 0.0]])
    K = Pf @ H.T / (H @ Pf @ H.T + R)
    m_kf, P_kf = m + (K * (obs - H @ m)).ravel(), (np.eye(2) - K @ H) @ Pf
    z_mean = np.abs(out.members.mean(axis=0) - m_kf) / np.sqrt(np.diag(P_kf) / N)
    z_var = np.abs(out.members.var(axis=0, ddof=1) - np.diag(P_kf)) / (np.diag(P_kf) * math.sqrt(2 / (N - 1)))
    ok = value_err < 0.02 and z_mean.max() < 3 and z_var.max() < 3
    assert report("8", ok, f"value table relative sup error {value_err:.4f} (< 0.02); EnKF vs Kalman "
                           f"max |z| mean {z_mean.max():.2f}, variance {z_var.max():.2f} (< 3)")


def test_criterion_9_invariants():
    failures = []
    rng = np.random.default_rng(9)

    for _ in range(100):
        M = int(rng.integers(1, 400))
        c = bayes_update(ParticleCloud(rng.normal(size=M)), rng.exponential(size=M) * 10.0 ** rng.uniform(-200, 200))
        if abs(c.weights.sum() - 1) > 1e-12:
            failures.append("weight normalisation")
            break

    for s in range(50):
        M = 8
        counts = rng.multinomial(M, np.full(M, 1 / M))
        out = systematic_resample(ParticleCloud(np.arange(M, dtype=float), counts / M), RngStream(s))
        if not np.array_equal(np.bincount(out.particles[:, 0].astype(int), minlength=M), counts):
            failures.append("resampling integer count")
            break

    case1 = get_problem("lq-case1").model
    grid = TemporalGrid(1.0, 50)
    ctrl = ControlTrajectory(0, rng.normal(size=(50, 1)))
    path = simulate_path(case1, grid, 0, [2.0], ctrl, [1.0], RngStream(1))
    Y = adjoint_backward(case1, path, ctrl, [1.0], grid.dt)
    if not np.array_equal(Y.values[-1], case1.term_cost_dx(path.values[-1])):
        failures.append("terminal adjoint")
    mesh = StateMesh([-3.0], [7.0], 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MeshTooSmallWarning)
        table = mc_backward_value(case1, mesh, TemporalGrid(1.0, 10), ControlTrajectory.zeros(0, 10, 1), [1.0], 10,
                                  RngStream(2))
    if not np.array_equal(table.at(10)[:, 0], [case1.term_cost_dx(x)[0] for x in mesh.nodes]):
        failures.append("terminal value table")

    for pid, alpha in (("lq-case2", [1.0]), ("lq-case3", [1.0, 2.0])):
        P = riccati_solve(get_problem(pid).lq, alpha, grid).P
        if np.abs(P - P.transpose(0, 2, 1)).max() >= 1e-10:
            failures.append(f"Riccati symmetry {pid}")

    cfg = config_from_dict(dict(problem="lq-case2", n_steps=10, particles=30, sgd_iterations=50, seed=4))
    a, b = run_swddc(cfg, 2), run_swddc(cfg, 2)
    if not all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("alpha_hat", "controls", "states", "observations")):
        failures.append("seeded determinism")

    assert report("9", not failures, "all invariants hold" if not failures else "broken: " + ", ".join(failures))
