"""Benchmark problems: LQ models, Riccati oracle, drone, cost evaluation."""
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import lq1
from swddc.benchmarks import (
    PROBLEMS,
    DroneParams,
    FiniteEscapeError,
    LqSpec,
    drone_model,
    evaluate_cost,
    get_problem,
    lq_analytic_control,
    lq_model,
    riccati_solve,
)
from swddc.sde import ControlTrajectory, RngStream, TemporalGrid


def riccati_reference(spec, alpha, grid):
    """Independent backward integration of the Riccati ODE (scipy, tight tolerances)."""
    d = spec.dim_state
    S = spec.B @ np.linalg.solve(spec.R, spec.B.T)

    def rhs(t, p):
        P = p.reshape(d, d)
        A = spec.A(t, alpha)
        return (-P @ A - A.T @ P + P @ S @ P - spec.Q).ravel()

    ts = grid.times[::-1]
    sol = solve_ivp(rhs, (ts[0], ts[-1]), spec.F.ravel(), t_eval=ts, method="DOP853", rtol=1e-12, atol=1e-14)
    return sol.y.T[::-1].reshape(-1, d, d)


def closed_loop_controls(spec, model, ric, grid, x0, alpha):
    """Feedback controls applied along the noise-free path, recorded as an open-loop trajectory."""
    x = np.array(x0, dtype=float)
    us = []
    for n in range(grid.n_steps):
        u = lq_analytic_control(ric, spec, n, x)
        us.append(u)
        x = x + grid.dt * model.drift(grid.t(n), x, u, np.asarray(alpha, dtype=float))
    return ControlTrajectory(0, np.array(us))


class TestLqSpec:
    def test_parameter_slots_scale_entries(self):
        spec = get_problem("lq-case3").lq
        A = spec.A(0.0, [3.0, 5.0])
        assert np.allclose(A, np.diag([0.0, 1.0, 3.0, 5.0]))

    def test_time_varying(self):
        A = get_problem("lq-case2").lq.A(0.7, [2.0])
        assert np.allclose(A, np.diag([2 * math.sin(0.7), math.cos(0.7)]))

    @pytest.mark.parametrize("kw", [dict(R=[[0.0]]), dict(Q=[[-1.0]]), dict(F=[[-1.0]])])
    def test_rejects_bad_weights(self, kw):
        args = dict(A0=[[1.0]], B=[[1.0]], C=[[0.0]], Q=[[1.0]], R=[[1.0]], F=[[1.0]])
        args.update(kw)
        with pytest.raises(ValueError):
            LqSpec(**args)

    def test_rejects_bad_slot(self):
        with pytest.raises(ValueError):
            LqSpec(A0=[[1.0]], B=[[1.0]], C=[[0.0]], Q=[[1.0]], R=[[1.0]], F=[[1.0]], param_slots={0: (1, 0)})

    def test_model_partials(self):
        spec = get_problem("lq-case3").lq
        model = lq_model(spec)
        rng = np.random.default_rng(0)
        x, u, a = rng.normal(size=4), rng.normal(size=2), np.array([1.5, -0.5])
        assert np.allclose(model.drift(0.3, x, u, a), spec.A(0.3, a) @ x + spec.B @ u)
        assert np.allclose(model.drift_dx(0.3, x, u, a), spec.A(0.3, a))
        assert np.allclose(model.drift_du(0.3, x, u, a), spec.B)
        assert model.run_cost(0.3, x, u) == pytest.approx(0.5 * (x @ x + u @ u))
        assert np.allclose(model.term_cost_dx(x), x)

    def test_models_cached(self):
        assert lq_model(lq1()) is lq_model(lq1())


class TestRiccati:
    def test_no_dynamics_no_running_cost(self):
        spec = lq1(a=0.0, b=0.0, q=0.0, f=3.0)
        P = riccati_solve(spec, [1.0], TemporalGrid(1.0, 20)).P
        assert np.all(P == 3.0)

    def test_pure_growth(self):
        a, f = 0.8, 2.0
        grid = TemporalGrid(1.0, 20)
        P = riccati_solve(lq1(a=a, b=0.0, q=0.0, f=f), [1.0], grid).P[:, 0, 0]
        assert np.allclose(P, f * np.exp(2 * a * (1.0 - grid.times)), rtol=1e-9)

    def test_case1_against_independent_integrator(self, case1_spec):
        grid = TemporalGrid(1.0, 50)
        P = riccati_solve(case1_spec, [1.0], grid).P
        assert np.abs(P - riccati_reference(case1_spec, [1.0], grid)).max() < 1e-8

    @pytest.mark.parametrize("pid,alpha", [("lq-case2", [1.0]), ("lq-case3", [1.0, 2.0])])
    def test_matrix_case_against_independent_integrator(self, pid, alpha):
        spec = get_problem(pid).lq
        grid = TemporalGrid(1.0, 40)
        P = riccati_solve(spec, alpha, grid).P
        assert np.abs(P - riccati_reference(spec, alpha, grid)).max() < 1e-8

    @pytest.mark.parametrize("pid,alpha", [("lq-case2", [1.0]), ("lq-case3", [1.0, 2.0])])
    def test_symmetric(self, pid, alpha):
        P = riccati_solve(get_problem(pid).lq, alpha, TemporalGrid(1.0, 50)).P
        assert np.abs(P - P.transpose(0, 2, 1)).max() < 1e-10

    def test_substep_convergence(self, case1_spec):
        grid = TemporalGrid(1.0, 50)
        P10 = riccati_solve(case1_spec, [1.0], grid, substeps=10).P
        P100 = riccati_solve(case1_spec, [1.0], grid, substeps=100).P
        assert np.abs(P10 - P100).max() < 1e-6

    def test_finite_escape(self):
        # negligible control authority lets the unstable mode grow past the cap
        with pytest.raises(FiniteEscapeError):
            riccati_solve(lq1(a=50.0, b=1e-6, r=1.0), [1.0], TemporalGrid(1.0, 50))

    def test_validation(self, case1_spec):
        with pytest.raises(ValueError):
            riccati_solve(case1_spec, [1.0, 2.0], TemporalGrid(1.0, 5))
        with pytest.raises(ValueError):
            riccati_solve(case1_spec, [1.0], TemporalGrid(1.0, 5), substeps=0)


class TestAnalyticControl:
    def test_terminal_value(self, case1_spec):
        ric = riccati_solve(case1_spec, [1.0], TemporalGrid(1.0, 50))
        # P(T) = 1, so u = -(0.5 / 0.1) * 1 * 2
        assert lq_analytic_control(ric, case1_spec, 50, [2.0])[0] == pytest.approx(-10.0)

    def test_zero_state(self, case1_spec):
        ric = riccati_solve(case1_spec, [1.0], TemporalGrid(1.0, 50))
        assert np.all(lq_analytic_control(ric, case1_spec, 10, [0.0]) == 0.0)

    def test_linear_in_state(self):
        spec = get_problem("lq-case3").lq
        ric = riccati_solve(spec, [1.0, 2.0], TemporalGrid(1.0, 40))
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=4), rng.normal(size=4)
        lhs = lq_analytic_control(ric, spec, 7, 2 * x - 3 * y)
        rhs = 2 * lq_analytic_control(ric, spec, 7, x) - 3 * lq_analytic_control(ric, spec, 7, y)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_index_checked(self, case1_spec):
        ric = riccati_solve(case1_spec, [1.0], TemporalGrid(1.0, 10))
        with pytest.raises(ValueError):
            lq_analytic_control(ric, case1_spec, 11, [1.0])


class TestEvaluateCost:
    def test_null_model_terminal_state(self, null_model):
        grid = TemporalGrid(1.0, 10)
        mean, se = evaluate_cost(null_model, grid, 0, [0.7], ControlTrajectory.zeros(0, 10, 1), [0.0], 5, RngStream(0))
        assert mean == 0.7 and se == 0.0

    def test_deterministic_quadratic(self):
        # no noise, no drift: cost is 1/2 sum u^2 dt + 1/2 x^2
        model = lq_model(lq1(a=0.0, b=0.0, c=0.0, q=0.0, r=2.0, f=1.0))
        grid = TemporalGrid(1.0, 10)
        u = ControlTrajectory(0, np.full((10, 1), 3.0))
        mean, _ = evaluate_cost(model, grid, 0, [1.5], u, [1.0], 3, RngStream(0))
        assert mean == pytest.approx(0.5 * 2.0 * 9.0 + 0.5 * 1.5**2)

    def test_analytic_beats_zero_control(self, case1_spec, case1):
        grid = TemporalGrid(1.0, 50)
        ric = riccati_solve(case1_spec, [1.0], grid)
        u_opt = closed_loop_controls(case1_spec, case1, ric, grid, [2.0], [1.0])
        j_opt, se_opt = evaluate_cost(case1, grid, 0, [2.0], u_opt, [1.0], 10_000, RngStream(0))
        j_zero, se_zero = evaluate_cost(case1, grid, 0, [2.0], ControlTrajectory.zeros(0, 50, 1), [1.0], 10_000,
                                        RngStream(0))
        assert j_opt + 3 * se_opt < j_zero - 3 * se_zero

    @pytest.mark.parametrize("delta", [0.1, -0.1])
    def test_perturbation_raises_cost(self, case1_spec, case1, delta):
        grid = TemporalGrid(1.0, 50)
        ric = riccati_solve(case1_spec, [1.0], grid)
        u_opt = closed_loop_controls(case1_spec, case1, ric, grid, [2.0], [1.0])
        u_pert = ControlTrajectory(0, u_opt.values + delta)
        j_opt, se = evaluate_cost(case1, grid, 0, [2.0], u_opt, [1.0], 10_000, RngStream(1))
        j_pert, _ = evaluate_cost(case1, grid, 0, [2.0], u_pert, [1.0], 10_000, RngStream(1))
        assert j_pert - j_opt > 3 * se

    def test_tail_start(self, null_model):
        grid = TemporalGrid(1.0, 10)
        mean, _ = evaluate_cost(null_model, grid, 6, [0.2], ControlTrajectory.zeros(6, 10, 1), [0.0], 2, RngStream(0))
        assert mean == 0.2

    def test_rejects_zero_samples(self, null_model):
        with pytest.raises(ValueError):
            evaluate_cost(null_model, TemporalGrid(1.0, 4), 0, [0.0], ControlTrajectory.zeros(0, 4, 1), [0.0], 0,
                          RngStream(0))


@pytest.fixture(scope="module")
def drone():
    return drone_model(DroneParams())


class TestDrone:
    def test_heading_zero_moves_along_y(self, drone):
        f = drone.drift(0.0, np.array([1.0, 2.0, 3.0, 0.0]), np.zeros(2), np.array([1.0]))
        assert np.allclose(f[:2], [0.0, 1.0])

    def test_hover(self, drone):
        f = drone.drift(0.0, np.zeros(4), np.array([0.1, 9.8]), np.array([1.0]))
        assert f[2] == pytest.approx(0.0) and f[3] == pytest.approx(0.0)

    def test_drift_partials_by_finite_differences(self, drone):
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(100):
            x, u, a = rng.normal(size=4) * 3, rng.normal(size=2) * 5, rng.uniform(0.1, 5.0, size=1)
            Jx, Ju = drone.drift_dx(0.0, x, u, a), drone.drift_du(0.0, x, u, a)
            for i in range(4):
                e = np.zeros(4)
                e[i] = eps
                fd = (drone.drift(0.0, x + e, u, a) - drone.drift(0.0, x - e, u, a)) / (2 * eps)
                assert np.allclose(fd, Jx[:, i], rtol=1e-6, atol=1e-8)
            for i in range(2):
                e = np.zeros(2)
                e[i] = eps
                fd = (drone.drift(0.0, x, u + e, a) - drone.drift(0.0, x, u - e, a)) / (2 * eps)
                assert np.allclose(fd, Ju[:, i], rtol=1e-6, atol=1e-8)

    def test_cost_partials_by_finite_differences(self, drone):
        rng = np.random.default_rng(3)
        x, u = rng.normal(size=4) * 3, rng.normal(size=2)
        eps = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = eps
            fd = (drone.term_cost(x + e) - drone.term_cost(x - e)) / (2 * eps)
            assert fd == pytest.approx(drone.term_cost_dx(x)[i], rel=1e-6, abs=1e-8)
        assert np.allclose(drone.run_cost_du(0.0, x, u), u)
        assert np.all(drone.run_cost_dx(0.0, x, u) == 0)

    def test_terminal_cost_ignores_heading(self, drone):
        assert drone.term_cost(np.array([6.0, 7.0, 8.0, 1.3])) == 0.0
        assert drone.term_cost(np.array([6.0, 7.0, 9.0, 0.0])) == pytest.approx(10.0)

    def test_diffusion(self, drone):
        assert np.allclose(drone.diffusion(0.0), np.diag([0.2, 0.2, 0.2, 0.04]))

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            DroneParams(mass=0.0)
        with pytest.raises(ValueError):
            DroneParams(target=(1.0, 2.0))


class TestRegistry:
    def test_known_problems(self):
        assert set(PROBLEMS) == {"lq-case1", "lq-case1-exp2", "lq-case2", "lq-case3", "drone"}

    def test_unknown(self):
        with pytest.raises(KeyError):
            get_problem("nope")

    def test_sigma_override(self):
        p = get_problem("drone", sigma=0.05)
        assert p.drone.sigma == 0.05 and get_problem("drone").drone.sigma == 0.2

    def test_case_dimensions(self):
        for pid, (d, m, q) in {"lq-case1": (1, 1, 1), "lq-case2": (2, 1, 1), "lq-case3": (4, 2, 2),
                               "drone": (4, 2, 1)}.items():
            model = get_problem(pid).model
            assert (model.dim_state, model.dim_control, model.dim_param) == (d, m, q)
            assert len(get_problem(pid).defaults["x0"]) == d
