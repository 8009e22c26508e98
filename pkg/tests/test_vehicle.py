import math

import numpy as np
import pytest

from vmhe import vehicle
from vmhe.errors import LowSpeedDomain, StepTooLarge
from vmhe.vehicle import (
    PacejkaAxleParams,
    ParamVector,
    ProcessInputs,
    VehicleCoreState,
    VehicleParams,
    body_slip_angle,
    discretize_step,
    imu_measurement_model,
    pacejka_force_grads,
    pacejka_lateral_force,
    process_derivative,
    slip_angles,
)


@pytest.fixture
def geom():
    return VehicleParams(l_f=1.6, l_r=1.4, t_r=1.5, m=800.0, i_z=1000.0,
                         i_w=1.2, r_e_rl=0.3, r_e_rr=0.3)


@pytest.fixture
def tire():
    return PacejkaAxleParams(b=10.0, c=1.5, d=1.2, e=0.97)


def test_vehicle_params_validation():
    with pytest.raises(ValueError):
        VehicleParams(l_f=-1.0, l_r=1.4, t_r=1.5, m=800.0, i_z=1000.0,
                      i_w=1.2, r_e_rl=0.3, r_e_rr=0.3)


def test_front_radius_defaults_to_rear_mean(geom):
    assert geom.r_e_f == pytest.approx(0.3)


class TestSlipAngles:
    def test_straight_driving_is_zero(self, geom):
        s = VehicleCoreState(v_x=30.0)
        assert slip_angles(s, 0.0, geom) == (0.0, 0.0)

    def test_closed_form(self, geom):
        s = VehicleCoreState(v_x=30.0, v_y=0.5, r=0.2)
        a_f, a_r = slip_angles(s, 0.05, geom)
        assert a_f == pytest.approx(0.022673470629283026, abs=1e-15)
        assert a_r == pytest.approx(-0.0073332018807847205, abs=1e-15)

    def test_front_reduces_to_steer_when_lever_cancels(self, geom):
        r = 0.3
        s = VehicleCoreState(v_x=25.0, v_y=-geom.l_f * r, r=r)
        a_f, _ = slip_angles(s, 0.1, geom)
        assert a_f == pytest.approx(0.1, abs=1e-15)

    def test_low_speed_raises(self, geom):
        with pytest.raises(LowSpeedDomain):
            slip_angles(VehicleCoreState(v_x=2.0), 0.0, geom)


class TestBodySlip:
    def test_zero_lateral(self):
        assert body_slip_angle(VehicleCoreState(v_x=20.0)) == 0.0

    def test_45_degrees(self):
        assert body_slip_angle(VehicleCoreState(v_x=7.0, v_y=7.0)) == pytest.approx(math.pi / 4)

    def test_scalar_oracle(self):
        assert body_slip_angle(VehicleCoreState(v_x=30.0, v_y=-1.5)) == pytest.approx(
            -0.04995839572194276, abs=1e-15)

    def test_low_speed_raises(self):
        with pytest.raises(LowSpeedDomain):
            body_slip_angle(VehicleCoreState(v_x=1.0, v_y=0.5))


class TestPacejka:
    def test_shifted_zero_crossing(self):
        p = PacejkaAxleParams(b=8.0, c=1.4, d=1.0, e=0.5, s_h=0.01, s_v=0.0)
        assert pacejka_lateral_force(-0.01, p, 4000.0) == pytest.approx(0.0, abs=1e-12)

    def test_odd_symmetry(self, tire):
        for a in np.linspace(-0.5, 0.5, 101):
            f_pos = pacejka_lateral_force(a, tire, 4000.0)
            f_neg = pacejka_lateral_force(-a, tire, 4000.0)
            assert abs(f_pos + f_neg) < 1e-12 * 4000.0 * tire.d

    def test_reference_value(self, tire):
        assert pacejka_lateral_force(0.05, tire, 4000.0) == pytest.approx(
            2914.681106564233, rel=1e-12)

    def test_peak_bound(self):
        p = PacejkaAxleParams(b=12.0, c=1.6, d=1.3, e=0.9, s_h=0.01, s_v=0.05)
        alphas = np.linspace(-0.5, 0.5, 2001)
        forces = pacejka_lateral_force(alphas, p, 5000.0)
        assert np.all(np.abs(forces) <= 5000.0 * (p.d + abs(p.s_v)) + 1e-9)

    def test_linear_regime_slope(self):
        p = PacejkaAxleParams(b=9.0, c=1.4, d=1.1, e=0.8, s_h=0.004, s_v=0.02)
        f_z = 3500.0
        h = 1e-7
        slope_fd = (pacejka_lateral_force(-p.s_h + h, p, f_z)
                    - pacejka_lateral_force(-p.s_h - h, p, f_z)) / (2 * h)
        assert slope_fd == pytest.approx(f_z * p.d * p.b * p.c, rel=1e-4)

    def test_gradients_match_finite_differences(self, tire):
        p = np.array([10.0, 1.5, 1.2, 0.97, 0.003, 0.01])
        alpha, f_z = 0.07, 4200.0
        _, d_alpha, d_params = pacejka_force_grads(alpha, p, f_z)

        h = 1e-7
        fd_alpha = (pacejka_lateral_force(alpha + h, PacejkaAxleParams.from_array(p), f_z)
                    - pacejka_lateral_force(alpha - h, PacejkaAxleParams.from_array(p), f_z)) / (2 * h)
        assert d_alpha == pytest.approx(fd_alpha, rel=1e-6)
        for i in range(6):
            dp = p.copy(); dp[i] += h
            dm = p.copy(); dm[i] -= h
            fd = (pacejka_lateral_force(alpha, PacejkaAxleParams.from_array(dp), f_z)
                  - pacejka_lateral_force(alpha, PacejkaAxleParams.from_array(dm), f_z)) / (2 * h)
            assert d_params[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_validation(self):
        with pytest.raises(ValueError):
            PacejkaAxleParams(b=-1.0, c=1.5, d=1.0, e=0.5)
        with pytest.raises(ValueError):
            PacejkaAxleParams(b=10.0, c=3.5, d=1.0, e=0.5)
        with pytest.raises(ValueError):
            PacejkaAxleParams(b=10.0, c=1.5, d=1.0, e=1.5)


class TestParamVector:
    def test_round_trip(self, tire):
        pv = ParamVector(front=tire, rear=PacejkaAxleParams(b=11.0, c=1.4, d=1.3, e=0.9))
        arr = pv.as_array()
        assert pv.with_values(arr).as_array() == pytest.approx(arr)

    def test_bounds_enforced(self, tire):
        with pytest.raises(ValueError):
            ParamVector(front=tire, rear=tire,
                        lower=np.full(12, 0.0), upper=np.full(12, 0.5))


class TestProcessDerivative:
    def test_zero_fixed_point(self, geom):
        d = process_derivative(VehicleCoreState(), ProcessInputs(), geom)
        assert np.all(d == 0.0)

    def test_centripetal_coupling(self, geom):
        s = VehicleCoreState(v_x=50.0, r=0.1)
        d = process_derivative(s, ProcessInputs(), geom)
        assert d[vehicle.IX_VX] == pytest.approx(0.0)
        assert d[vehicle.IX_VY] == pytest.approx(-5.0)

    def test_wheel_balance(self):
        geom = VehicleParams(l_f=1.6, l_r=1.4, t_r=1.5, m=800.0, i_z=1000.0,
                             i_w=1.2, r_e_rl=0.3, r_e_rr=0.3)
        s = VehicleCoreState(fx_r=1000.0, gamma=0.5)
        d = process_derivative(s, ProcessInputs(t_eng=400.0), geom)
        assert d[vehicle.IX_WRL] == pytest.approx(41.66666666666667)
        assert d[vehicle.IX_WRR] == pytest.approx(41.66666666666667)

    def test_force_split_closure(self):
        for gamma in np.linspace(0.0, 1.0, 11):
            s = VehicleCoreState(fx_r=1234.5, gamma=float(gamma))
            fx_rl, fx_rr = s.wheel_forces()
            assert fx_rl + fx_rr == 1234.5


class TestDiscretize:
    def test_small_step_first_order(self, geom):
        s = VehicleCoreState(v_x=20.0, v_y=1.0, a_x=1.5, a_y=-0.5, r=0.3)
        aux = ProcessInputs(f_y_f=500.0, f_y_r=-200.0)
        dt = 1e-7
        nxt = discretize_step(s, aux, geom, dt)
        d = process_derivative(s, aux, geom)
        np.testing.assert_allclose(nxt.as_array(), s.as_array() + dt * d,
                                   rtol=0.0, atol=1e-12)

    def test_constant_acceleration(self, geom):
        s = VehicleCoreState(v_x=10.0, a_x=2.0)
        nxt = discretize_step(s, ProcessInputs(), geom, 0.01)
        assert nxt.v_x == pytest.approx(10.02, abs=1e-14)

    def test_matches_fine_euler(self, geom):
        s = VehicleCoreState(v_x=40.0, v_y=0.8, a_x=2.0, a_y=6.0, r=0.4,
                             b_x=0.1, b_y=-0.05, b_r=0.01,
                             w_rl=130.0, w_rr=132.0, fx_r=1500.0,
                             gamma=0.45, dm=80.0)
        aux = ProcessInputs(t_eng=600.0, t_brk_rl=20.0, t_brk_rr=25.0,
                            delta=0.04, f_y_f=3000.0, f_y_r=2500.0)
        dt = 0.005
        rk4 = discretize_step(s, aux, geom, dt).as_array()

        n_sub = 10000
        x = s.as_array()
        for _ in range(n_sub):
            x = x + (dt / n_sub) * process_derivative(
                VehicleCoreState.from_array(x), aux, geom)
        # 1e-8 relative on the state vector; the Euler oracle's own
        # truncation error dominates any finer comparison
        assert np.linalg.norm(rk4 - x) <= 1e-8 * (1.0 + np.linalg.norm(x))

    def test_biases_pass_through(self, geom):
        s = VehicleCoreState(v_x=30.0, b_x=0.2, b_y=-0.1, b_r=0.03)
        nxt = discretize_step(s, ProcessInputs(), geom, 0.01)
        assert (nxt.b_x, nxt.b_y, nxt.b_r) == (0.2, -0.1, 0.03)

    def test_step_too_large(self, geom):
        with pytest.raises(StepTooLarge):
            discretize_step(VehicleCoreState(), ProcessInputs(), geom, 0.2)

    def test_speed_conservation_order(self, geom):
        # with zero acceleration and fixed yaw rate the exact flow conserves
        # speed; RK4's defect per step should shrink ~ dt^5
        aux = ProcessInputs()
        s = VehicleCoreState(v_x=30.0, v_y=2.0, r=0.5)
        speed0 = math.hypot(s.v_x, s.v_y)
        defects = []
        for dt in (0.04, 0.02):
            nxt = discretize_step(s, aux, geom, dt)
            defects.append(abs(math.hypot(nxt.v_x, nxt.v_y) - speed0))
        assert defects[0] < 1e-10
        # defect must shrink at least 5th order under dt refinement
        assert defects[0] / defects[1] > 2 ** 4.5


class TestRk4Jacobians:
    def test_against_central_differences(self, geom):
        x = np.array([[35.0, 1.2, 1.0, 8.0, 0.35, 0.1, -0.05, 0.01,
                       118.0, 120.0, 1800.0, 0.55, 60.0]])
        args = (np.array([3200.0]), np.array([2700.0]), np.array([500.0]),
                np.array([15.0]), np.array([18.0]), np.array([0.05]))
        dt = 0.01
        _, d_state, d_forces = vehicle.rk4_step_with_jacobians(x, *args, geom, dt)

        for j in range(vehicle.STATE_DIM):
            h = max(1e-6, 1e-8 * abs(x[0, j]))
            xp = x.copy(); xp[0, j] += h
            xm = x.copy(); xm[0, j] -= h
            fd = (vehicle.rk4_step_array(xp, *args, geom, dt)
                  - vehicle.rk4_step_array(xm, *args, geom, dt)) / (2 * h)
            np.testing.assert_allclose(d_state[0, :, j], fd[0], rtol=1e-6, atol=1e-8)

        for j in (0, 1):
            h = 1e-3
            argp = [a.copy() for a in args]; argp[j] = argp[j] + h
            argm = [a.copy() for a in args]; argm[j] = argm[j] - h
            fd = (vehicle.rk4_step_array(x, *argp, geom, dt)
                  - vehicle.rk4_step_array(x, *argm, geom, dt)) / (2 * h)
            np.testing.assert_allclose(d_forces[0, :, j], fd[0], rtol=1e-6, atol=1e-11)


class TestImuModel:
    def test_zero_bias(self):
        s = VehicleCoreState(a_x=1.0, a_y=-2.0, r=0.3)
        assert imu_measurement_model(s) == (1.0, -2.0, 0.3)

    def test_bias_adds(self):
        s = VehicleCoreState(a_x=1.0, b_x=0.1)
        assert imu_measurement_model(s)[0] == pytest.approx(1.1)

    def test_jacobian_identity_in_biases(self):
        s = VehicleCoreState(v_x=20.0, a_x=1.0, a_y=2.0, r=0.3,
                             b_x=0.1, b_y=0.2, b_r=0.01)
        h = 1e-6
        base = np.array(imu_measurement_model(s))
        for row, name in enumerate(("b_x", "b_y", "b_r")):
            x = s.as_array()
            x[vehicle.STATE_NAMES.index(name)] += h
            bumped = np.array(imu_measurement_model(VehicleCoreState.from_array(x)))
            grad = (bumped - base) / h
            expected = np.zeros(3)
            expected[row] = 1.0
            np.testing.assert_allclose(grad, expected, atol=1e-9)
