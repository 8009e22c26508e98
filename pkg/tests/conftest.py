"""Shared test rig: a plausible rear-drive race car with two RADARs."""

import math

import numpy as np
import pytest

from vmhe import longitudinal, mhe, radar
from vmhe.longitudinal import BrakeParams, EngineTorqueMap, LossModelParams, LsdParams
from vmhe.mhe import (
    BrakePressureFrame, ImuFrame, MheConfig, SlopeFrame, SteeringFrame,
    ThrottleFrame, VehicleModels, VerticalLoadFrame, WheelSpeedFrame, Window,
)
from vmhe.radar import RadarDetection, RadarExtrinsics, RadarScan, predicted_doppler
from vmhe.vehicle import (
    PacejkaAxleParams, ParamVector, VehicleCoreState, VehicleParams,
    pacejka_lateral_force,
)


def make_geom():
    return VehicleParams(l_f=1.6, l_r=1.4, t_r=1.5, m=800.0, i_z=1000.0,
                         i_w=1.2, r_e_rl=0.33, r_e_rr=0.33, r_e_f=0.33)


def make_params():
    return ParamVector(
        front=PacejkaAxleParams(b=11.0, c=1.45, d=3.1, e=0.9),
        rear=PacejkaAxleParams(b=12.0, c=1.5, d=3.15, e=0.92),
    )


def make_engine_map():
    speeds = np.array([0.0, 400.0, 800.0, 1200.0, 1600.0, 2000.0])
    throttles = np.array([0.0, 0.5, 1.0])
    peak = np.array([1500.0, 1500.0, 1450.0, 1350.0, 1250.0, 1150.0])
    torques = np.outer(peak, [0.0, 0.5, 1.0])
    return EngineTorqueMap(speeds, throttles, torques)


def make_models(extrinsics=None):
    if extrinsics is None:
        extrinsics = {
            "radar0": RadarExtrinsics(np.eye(3), [1.5, 0.5, 0.2]),
            "radar1": RadarExtrinsics(np.eye(3), [1.5, -0.5, 0.2]),
        }
    return VehicleModels(
        geom=make_geom(),
        brakes=BrakeParams(mu_p=0.45, a_piston=2e-3, r_b=0.15, bias=0.6),
        lsd=LsdParams(m_0=50.0, xi=1.0, eps_drive=0.35, eps_coast=0.25),
        loss=LossModelParams(rho=1.2, c_x=0.9, a_front=1.1, c_r=0.012),
        engine_map=make_engine_map(),
        extrinsics=extrinsics,
    )


@pytest.fixture
def geom():
    return make_geom()


@pytest.fixture
def tire_params():
    return make_params()


@pytest.fixture
def models():
    return make_models()


@pytest.fixture
def mhe_config():
    return MheConfig(n=6, dt=0.01)


def _invert_pacejka(target, axle_params, f_z, hi=0.2):
    """Slip angle whose lateral force equals target (below the peak)."""
    lo = 0.0
    if target < 0.0:
        lo, hi = -hi, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pacejka_lateral_force(mid, axle_params, f_z) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def steady_cornering_state(models, params, v_x=32.0, delta=0.03):
    """Exact fixed point of the estimator model: steady cornering.

    Front/rear forces carry the centripetal load in the classic steady
    split (per-axle moment balance, so gamma = 0.5 and dm = 0), actuation
    holds the wheels at constant speed, and the rear force state equals
    the derived rear-force measurement. Every residual group evaluates to
    zero at the returned state.
    """
    geom = models.geom
    fz_f = geom.m * geom.g * geom.l_r / geom.wheelbase
    fz_r = geom.m * geom.g * geom.l_f / geom.wheelbase

    r = v_x * delta / geom.wheelbase
    alpha_f = alpha_r = 0.0
    for _ in range(200):
        f_r_target = geom.m * r * v_x * geom.l_f / geom.wheelbase
        f_f_target = geom.m * r * v_x * geom.l_r / (geom.wheelbase * math.cos(delta))
        alpha_f = _invert_pacejka(f_f_target, params.front, fz_f)
        alpha_r = _invert_pacejka(f_r_target, params.rear, fz_r)
        r_new = v_x * (math.tan(delta - alpha_f) + math.tan(alpha_r)) / geom.wheelbase
        if abs(r_new - r) < 1e-15:
            r = r_new
            break
        r = r_new
    v_y = v_x * math.tan(delta - alpha_f) - geom.l_f * r

    f_f = pacejka_lateral_force(alpha_f, params.front, fz_f)
    f_r = pacejka_lateral_force(alpha_r, params.rear, fz_r)
    a_y = (f_f * math.cos(delta) + f_r) / geom.m
    a_x = -r * v_y

    omega = v_x / geom.r_e_rl
    loads = (0.5 * fz_f, 0.5 * fz_f, 0.5 * fz_r, 0.5 * fz_r)
    rolling = 0.0
    for f_z, r_e in zip(loads, (geom.r_e_f, geom.r_e_f, geom.r_e_rl, geom.r_e_rr)):
        rolling += longitudinal.rolling_resistance(f_z, omega, r_e, models.loss)[0]
    aero = longitudinal.aero_drag(v_x, models.loss)
    corner = f_f * math.sin(alpha_f) + f_r * math.sin(alpha_r)
    m_eq = longitudinal.equivalent_mass(geom)
    fx_r = m_eq * a_x + aero + rolling + corner

    state = VehicleCoreState(
        v_x=v_x, v_y=v_y, a_x=a_x, a_y=a_y, r=r,
        b_x=0.05, b_y=-0.04, b_r=0.004,
        w_rl=omega, w_rr=omega, fx_r=fx_r, gamma=0.5, dm=0.0)
    actuation = {
        "t_eng": fx_r * geom.r_e_rl,
        "delta": delta,
        "loads": loads,
        "engine_speed": 800.0,
    }
    return state, actuation


def exact_steady_window(models, params, config, v_x=32.0, delta=0.03,
                        detections_per_scan=8, t0=0.0):
    """Window whose states and measurements are exactly consistent."""
    state, act = steady_cornering_state(models, params, v_x, delta)
    x_star = state.as_array()
    # pick throttle so the bilinear map reproduces the torque exactly:
    # engine_speed 800 lies on a grid row where torque is linear in throttle
    emap = models.engine_map
    full = emap(act["engine_speed"], 1.0)
    throttle = act["t_eng"] / full

    window = Window(config, params, t0=t0, x0=x_star)
    window.prior_state = x_star.copy()

    rng = np.random.default_rng(2024)
    for k in range(config.n + 1):
        t = t0 + k * config.dt
        window.push_measurement(ImuFrame(t, state.a_x + state.b_x,
                                         state.a_y + state.b_y,
                                         state.r + state.b_r))
        window.push_measurement(WheelSpeedFrame(
            t, state.w_rl, state.w_rr,
            v_x / models.geom.r_e_f, v_x / models.geom.r_e_f))
        window.push_measurement(SteeringFrame(t, delta))
        window.push_measurement(ThrottleFrame(t, throttle, act["engine_speed"]))
        window.push_measurement(BrakePressureFrame(t, 0.0, 0.0))
        window.push_measurement(VerticalLoadFrame(t, act["loads"]))
        window.push_measurement(SlopeFrame(t, 0.0))
        for sensor_id, ext in models.extrinsics.items():
            dets = []
            for _ in range(detections_per_scan):
                theta = rng.uniform(-1.0, 1.0)
                phi = rng.uniform(-0.25, 0.25)
                det = RadarDetection(0.0, theta, phi)
                v_d = predicted_doppler(state, det, ext)
                dets.append(RadarDetection(v_d, theta, phi, timestamp=t))
            window.push_measurement(RadarScan(tuple(dets), sensor_id=sensor_id,
                                              timestamp=t))
    return window, x_star
