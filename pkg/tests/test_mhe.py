import math

import numpy as np
import pytest

from conftest import exact_steady_window, make_models, make_params
from vmhe import mhe, residuals
from vmhe.mhe import (
    ACCEPTED, DEFERRED, REJECTED,
    ImuFrame, MheConfig, SolverSettings, SteeringFrame, Window, solve,
)
from vmhe.radar import RadarDetection, RadarScan
from vmhe.vehicle import IX_DM, IX_GAMMA, PARAM_DIM, STATE_DIM


@pytest.fixture
def window(tire_params):
    return Window(MheConfig(n=6, dt=0.01), tire_params, t0=1.0)


class TestPushMeasurement:
    def test_exact_node_time(self, window):
        frame = ImuFrame(1.03, 0.0, 0.0, 0.0)
        assert window.push_measurement(frame) == ACCEPTED
        assert window.buckets[3].imu == [frame]

    def test_stale_rejected(self, window):
        assert window.push_measurement(ImuFrame(0.99, 0, 0, 0)) == REJECTED
        assert window.dropped_stale == 1

    def test_future_deferred(self, window):
        frame = ImuFrame(1.2, 0, 0, 0)
        assert window.push_measurement(frame) == DEFERRED
        assert window.deferred == [frame]

    def test_nearest_node_rule(self, window):
        assert window.push_measurement(ImuFrame(1.024, 0, 0, 0)) == ACCEPTED
        assert len(window.buckets[2].imu) == 1
        assert window.push_measurement(ImuFrame(1.026, 0, 0, 0)) == ACCEPTED
        assert len(window.buckets[3].imu) == 1

    def test_nearest_node_enumeration(self, window):
        dt = window.config.dt
        for node in range(6):
            for frac in np.linspace(0.05, 0.95, 19):
                w = Window(window.config, window.params, t0=1.0)
                t = 1.0 + (node + frac) * dt
                w.push_measurement(ImuFrame(t, 0, 0, 0))
                expect = node if frac < 0.5 else node + 1
                assert len(w.buckets[expect].imu) == 1

    def test_tie_goes_to_earlier_node(self, window):
        window.push_measurement(ImuFrame(1.025, 0, 0, 0))
        assert len(window.buckets[2].imu) == 1

    def test_radar_latency_shifts_association(self, window):
        scan = RadarScan((RadarDetection(1.0, 0.0, 0.0),), "radar0",
                         timestamp=1.05, latency=0.02)
        window.push_measurement(scan)
        assert window.buckets[3].scans == [scan]

    def test_non_finite_rejected(self, window):
        with pytest.raises(ValueError):
            window.push_measurement(ImuFrame(math.nan, 0, 0, 0))


class TestAdvance:
    def test_prior_becomes_second_state(self, models, tire_params):
        config = MheConfig(n=4, dt=0.01)
        window = Window(config, tire_params, t0=0.0,
                        x0=np.linspace(1.0, 13.0, STATE_DIM))
        window.states = np.arange(5 * STATE_DIM, dtype=float).reshape(5, STATE_DIM)
        window.states[:, 0] = 30.0  # keep the speed floor satisfied
        expected_prior = window.states[1].copy()
        window.advance(models)
        np.testing.assert_array_equal(window.prior_state, expected_prior)
        assert window.t0 == pytest.approx(0.01)

    def test_two_advances_drop_two_buckets(self, models, tire_params):
        config = MheConfig(n=4, dt=0.01)
        window = Window(config, tire_params, t0=0.0)
        marks = []
        for k in range(5):
            frame = ImuFrame(k * 0.01, float(k), 0, 0)
            window.push_measurement(frame)
            marks.append(frame)
        window.advance(models)
        window.advance(models)
        remaining = [b.imu[0] for b in window.buckets if b.imu]
        assert remaining == marks[2:]

    def test_deferred_frames_land_after_advance(self, models, tire_params):
        config = MheConfig(n=3, dt=0.01)
        window = Window(config, tire_params, t0=0.0)
        frame = ImuFrame(0.04, 1.0, 2.0, 3.0)
        assert window.push_measurement(frame) == DEFERRED
        window.advance(models)
        assert window.deferred == []
        assert window.buckets[3].imu == [frame]

    def test_carry_preserves_inputs_after_drop(self, models, tire_params):
        config = MheConfig(n=3, dt=0.01)
        window = Window(config, tire_params, t0=0.0)
        window.push_measurement(SteeringFrame(0.0, 0.07))
        window.advance(models)
        window.advance(models)
        inputs = residuals.resolve_inputs(window, models)
        assert np.all(inputs.delta == 0.07)

    def test_terminal_seed_integrates_previous_terminal(self, models, tire_params):
        config = MheConfig(n=3, dt=0.01)
        window = Window(config, tire_params, t0=0.0)
        window.states[:] = 0.0
        window.states[:, 0] = 30.0
        window.states[:, 2] = 2.0  # constant longitudinal acceleration
        window.advance(models)
        assert window.states[-1, 0] == pytest.approx(30.02, abs=1e-9)


class TestSolve:
    def make_rig(self, n=6, tight=False):
        models = make_models()
        params = make_params()
        solver = SolverSettings(max_iterations=60, gradient_tol=1e-8,
                                step_tol=1e-12) if tight else SolverSettings()
        config = MheConfig(n=n, dt=0.01, solver=solver)
        window, x_star = exact_steady_window(models, params, config)
        return models, params, config, window, x_star

    def test_zero_iterations_at_optimum(self):
        models, params, config, window, x_star = self.make_rig()
        report = solve(window, models)
        assert report.iterations <= 1
        assert report.converged
        assert report.cost < 1e-12

    def test_recovers_exact_state_from_perturbation(self):
        models, params, config, window, x_star = self.make_rig(tight=True)
        rng = np.random.default_rng(5)
        scale = np.array([0.5, 0.2, 0.3, 0.3, 0.05, 0.02, 0.02, 0.005,
                          1.0, 1.0, 300.0, 0.1, 30.0])
        window.states = window.states + rng.normal(0, 1, window.states.shape) * scale
        report = solve(window, models)
        assert report.converged
        np.testing.assert_allclose(window.states,
                                   np.tile(x_star, (config.n + 1, 1)),
                                   rtol=0, atol=1e-6)
        assert report.cost < 1e-10

    def test_solve_never_increases_cost(self):
        models, params, config, window, x_star = self.make_rig(tight=True)
        rng = np.random.default_rng(9)
        window.states = window.states + rng.normal(0, 0.1, window.states.shape)
        prep = residuals.prepare(window, models)
        initial = residuals.assemble(window.states, window.params.as_array(),
                                     prep, with_jacobian=False).cost
        report = solve(window, models)
        assert report.cost <= initial

    def test_parameters_stay_inside_box(self):
        models, params, config, window, x_star = self.make_rig()
        # start at the very edge of the box; the solve must keep every
        # reported parameter inside it
        edge = params.with_values(params.upper - 1e-12)
        window.params = edge
        window.prior_params = edge.as_array().copy()
        solve(window, models)
        p = window.params.as_array()
        assert np.all(p >= params.lower) and np.all(p <= params.upper)

    def test_gamma_and_dm_bounds_respected(self):
        models, params, config, window, x_star = self.make_rig()
        window.states[:, IX_GAMMA] = 0.9
        window.states[:, IX_DM] = 500.0
        solve(window, models)
        assert np.all(window.states[:, IX_GAMMA] >= 0.0)
        assert np.all(window.states[:, IX_GAMMA] <= 1.0)
        # yaw rate is positive in this window, so dm is capped by the LSD bound
        assert np.all(window.states[:, IX_DM] >= 0.0)
        assert np.all(window.states[:, IX_DM] <= 150.2)

    def test_report_forces_consistent_with_state(self):
        models, params, config, window, x_star = self.make_rig()
        report = solve(window, models)
        assert report.fx_rl + report.fx_rr == pytest.approx(report.state.fx_r)
        assert report.fx_rl == pytest.approx(report.state.gamma * report.state.fx_r)
        from vmhe.vehicle import pacejka_lateral_force
        fz_f = models.geom.m * models.geom.g * models.geom.l_r / models.geom.wheelbase
        assert report.f_y_f == pytest.approx(
            pacejka_lateral_force(report.alpha_f, report.params.front, fz_f))

    def test_whitening_invariance_of_optimum(self):
        # scaling every sigma by a common factor must not move the argmin
        models, params, _, _, _ = self.make_rig()
        results = []
        for factor in (1.0, 3.0):
            solver = SolverSettings(max_iterations=80, gradient_tol=1e-10,
                                    step_tol=1e-14)
            config = MheConfig(n=4, dt=0.01, solver=solver)
            config.sigma_prior = config.sigma_prior * factor
            config.sigma_param_prior = config.sigma_param_prior * factor
            config.sigma_process = config.sigma_process * factor
            for name in ("sigma_imu_accel", "sigma_imu_gyro", "sigma_doppler",
                         "sigma_wheel_speed", "sigma_rear_force",
                         "sigma_yaw_moment", "sigma_lateral_balance"):
                setattr(config, name, getattr(config, name) * factor)
            window, _ = exact_steady_window(models, params, config)
            rng = np.random.default_rng(3)
            window.states = window.states + rng.normal(0, 0.05, window.states.shape)
            solve(window, models)
            results.append(window.states.copy())
        np.testing.assert_allclose(results[0], results[1], atol=1e-8)
