"""Ground-truth tricycle plant and sensor synthesis.

The plant integrates [v_x, v_y, r, w_rl, w_rr] with RK4 at a fixed rate
(default 1 kHz). Lateral axle forces come from the same load-normalized
tire curve the estimator uses; rear longitudinal forces come from a
linear slip-ratio stiffness saturated smoothly at the friction limit,
which exists only to give the plant a generative law (the estimator
never sees it). The differential transfer moment opposes the wheel-speed
difference with the capacity formula shared with the estimator bounds.

Accelerometer channels are gravity-compensated body accelerations
(kinematic v_dot minus yaw coupling), so road slope enters the force
budget only through the slope term of the loss model, matching the
estimator's measurement conventions.

Every sensor sample is drawn from a single seeded generator in a fixed
channel order, making a run a pure function of (scenario, params, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PlantDiverged
from .mhe import (
    BrakePressureFrame, ImuFrame, MeasurementFrame, SlopeFrame,
    SteeringFrame, ThrottleFrame, VehicleModels, VerticalLoadFrame,
    WheelSpeedFrame,
)
from .radar import RadarDetection, RadarExtrinsics, RadarScan
from .vehicle import PacejkaAxleParams


@dataclass(frozen=True)
class Profile:
    """Scalar control profile over one segment: const, ramp or sine."""

    kind: str = "const"
    a: float = 0.0      # const value / ramp start / sine amplitude
    b: float = 0.0      # ramp end / sine frequency [Hz]
    c: float = 0.0      # sine bias

    def value(self, t: float, duration: float) -> float:
        if self.kind == "const":
            return self.a
        if self.kind == "ramp":
            frac = min(max(t / duration, 0.0), 1.0) if duration > 0 else 1.0
            return self.a + (self.b - self.a) * frac
        if self.kind == "sine":
            return self.c + self.a * math.sin(2.0 * math.pi * self.b * t)
        raise ValueError(f"unknown profile kind {self.kind!r}")


@dataclass(frozen=True)
class Segment:
    duration: float
    steer: Profile = field(default_factory=Profile)
    throttle: Profile = field(default_factory=Profile)
    brake: Profile = field(default_factory=Profile)
    slope: float = 0.0

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("segment duration must be positive")


@dataclass(frozen=True)
class Scenario:
    segments: tuple[Segment, ...]
    initial_speed: float = 30.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("scenario needs at least one segment")

    @property
    def duration(self) -> float:
        return sum(seg.duration for seg in self.segments)

    def controls(self, t: float) -> tuple[float, float, float, float]:
        """(steer, throttle, brake, slope) at absolute scenario time."""
        remaining = t
        last = len(self.segments) - 1
        for i, seg in enumerate(self.segments):
            # index comparison: segment objects may legitimately repeat
            if remaining <= seg.duration or i == last:
                return (seg.steer.value(remaining, seg.duration),
                        min(max(seg.throttle.value(remaining, seg.duration), 0.0), 1.0),
                        min(max(seg.brake.value(remaining, seg.duration), 0.0), 1.0),
                        seg.slope)
            remaining -= seg.duration
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class PlantTireParams:
    """Truth tire behavior: lateral curves plus the longitudinal law."""

    front: PacejkaAxleParams
    rear: PacejkaAxleParams
    kappa_stiffness: float = 30.0   # longitudinal stiffness per unit load
    mu_x: float = 2.5               # longitudinal friction limit


@dataclass(frozen=True)
class RadarSimConfig:
    sensor_id: str
    true_extrinsics: RadarExtrinsics
    rate: float = 20.0
    detections: int = 24
    sigma_doppler: float = 0.1
    sigma_angle: float = 0.002
    latency: float = 0.0
    outlier_fraction: float = 0.0
    outlier_spread: float = 15.0
    fov_azimuth: float = math.radians(60.0)
    fov_elevation: float = math.radians(15.0)

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must lie in [0, 1)")
        if self.rate <= 0.0:
            raise ValueError("radar rate must be positive")


@dataclass(frozen=True)
class SensorSuiteConfig:
    imu_rate: float = 100.0
    imu_sigma_accel: float = 0.05
    imu_sigma_gyro: float = 0.002
    imu_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    wheel_rate: float = 100.0
    wheel_sigma: float = 0.1
    wheel_fronts: bool = True
    steer_rate: float = 100.0
    steer_sigma: float = 0.0005
    actuation_rate: float = 100.0
    loads_rate: float = 100.0
    loads_sigma: float = 20.0
    radars: tuple[RadarSimConfig, ...] = ()
    gear_ratio: float = 8.0
    brake_pressure_scale: float = 1.5e7

    def __post_init__(self):
        object.__setattr__(self, "radars", tuple(self.radars))


@dataclass(frozen=True)
class TruthRecord:
    timestamp: float
    v_x: float
    v_y: float
    a_x: float
    a_y: float
    r: float
    b_x: float
    b_y: float
    b_r: float
    w_rl: float
    w_rr: float
    fx_r: float
    gamma: float
    dm: float
    alpha_f: float
    alpha_r: float
    beta: float
    f_y_f: float
    f_y_r: float
    fx_rl: float
    fx_rr: float


_V_GUARD = 0.5          # below this the plant zeroes tire slip quantities
_LSD_DEADBAND = 0.1     # rad/s wheel-speed difference for full engagement


class _Plant:
    """Continuous-time truth dynamics; state is (v_x, v_y, r, w_rl, w_rr).

    The hot path is evaluated a few hundred thousand times per run, so it
    sticks to plain float arithmetic (no array dispatch).
    """

    def __init__(self, models: VehicleModels, tires: PlantTireParams,
                 suite: SensorSuiteConfig):
        self.models = models
        self.tires = tires
        self.suite = suite
        geom = models.geom
        total = geom.m * geom.g
        fz_f = total * geom.l_r / geom.wheelbase
        fz_r = total * geom.l_f / geom.wheelbase
        self.loads = (0.5 * fz_f, 0.5 * fz_f, 0.5 * fz_r, 0.5 * fz_r)
        self.fz_front_axle = fz_f
        self.fz_rear_axle = fz_r
        self._front = (tires.front.b, tires.front.c, tires.front.d,
                       tires.front.e, tires.front.s_h, tires.front.s_v)
        self._rear = (tires.rear.b, tires.rear.c, tires.rear.d,
                      tires.rear.e, tires.rear.s_h, tires.rear.s_v)
        emap = models.engine_map
        self._espd = [float(s) for s in emap.speeds]
        self._ethr = [float(t) for t in emap.throttles]
        self._etor = [[float(v) for v in row] for row in emap.torques]
        loss = models.loss
        self._drag = 0.5 * loss.rho * loss.c_x * loss.a_front
        brakes = models.brakes
        self._brake_gain = brakes.mu_p * brakes.a_piston * brakes.r_b

    @staticmethod
    def _tire(alpha: float, p, f_z: float) -> float:
        b, c, d, e, s_h, s_v = p
        x = alpha + s_h
        bx = b * x
        u = bx - e * (bx - math.atan(bx))
        return f_z * (d * math.sin(c * math.atan(u)) + s_v)

    def _torque(self, engine_speed: float, throttle: float) -> float:
        espd, ethr, etor = self._espd, self._ethr, self._etor
        s = min(max(engine_speed, espd[0]), espd[-1])
        t = min(max(throttle, ethr[0]), ethr[-1])
        i = _cell(espd, s)
        j = _cell(ethr, t)
        fs = (s - espd[i]) / (espd[i + 1] - espd[i])
        ft = (t - ethr[j]) / (ethr[j + 1] - ethr[j])
        return ((1 - fs) * (1 - ft) * etor[i][j] + fs * (1 - ft) * etor[i + 1][j]
                + (1 - fs) * ft * etor[i][j + 1] + fs * ft * etor[i + 1][j + 1])

    def engine_torque(self, w_rl: float, w_rr: float, throttle: float) -> float:
        return self._torque(0.5 * (w_rl + w_rr) * self.suite.gear_ratio, throttle)

    def brake_pressures(self, brake_cmd: float) -> tuple[float, float]:
        scale = self.suite.brake_pressure_scale * brake_cmd
        bias = self.models.brakes.bias
        return 2.0 * bias * scale, 2.0 * (1.0 - bias) * scale

    def forces(self, state, controls) -> dict:
        """All force quantities at one state; for sampling, not the hot loop."""
        keys = ("alpha_f", "alpha_r", "f_y_f", "f_y_r", "fx_rl", "fx_rr",
                "t_eng", "dm", "t_brk_rear", "p_front", "p_rear",
                "f_x_front_brake", "f_loss", "throttle", "delta")
        return dict(zip(keys, self._eval(state, controls)))

    def _eval(self, state, controls):
        v_x, v_y, r, w_rl, w_rr = state
        delta, throttle, brake_cmd, _slope = controls
        geom = self.models.geom
        loss = self.models.loss

        if v_x > _V_GUARD:
            alpha_f = delta - math.atan2(v_y + geom.l_f * r, v_x)
            alpha_r = -math.atan2(v_y - geom.l_r * r, v_x)
        else:
            alpha_f = alpha_r = 0.0
        f_y_f = self._tire(alpha_f, self._front, self.fz_front_axle)
        f_y_r = self._tire(alpha_r, self._rear, self.fz_rear_axle)

        # rear longitudinal forces from smoothly saturated slip stiffness
        half_track = 0.5 * geom.t_r
        mu, k = self.tires.mu_x, self.tires.kappa_stiffness
        v_c = v_x - half_track * r
        kappa = (w_rl * geom.r_e_rl - v_c) / max(abs(v_c), 1.0)
        limit = mu * self.loads[2]
        fx_rl = limit * math.tanh(k * self.loads[2] * kappa / limit)
        v_c = v_x + half_track * r
        kappa = (w_rr * geom.r_e_rr - v_c) / max(abs(v_c), 1.0)
        limit = mu * self.loads[3]
        fx_rr = limit * math.tanh(k * self.loads[3] * kappa / limit)

        t_eng = self._torque(0.5 * (w_rl + w_rr) * self.suite.gear_ratio, throttle)
        p_front, p_rear = self.brake_pressures(brake_cmd)
        t_brk_rear = self._brake_gain * p_rear
        t_brk_front = self._brake_gain * p_front
        f_x_front_brake = (-2.0 * t_brk_front / geom.r_e_f) if v_x > 0.0 else 0.0

        lsd = self.models.lsd
        eps = lsd.eps_drive if throttle > 0.01 else lsd.eps_coast
        capacity = lsd.xi * max(lsd.m_0, eps * abs(t_eng))
        dm = capacity * math.tanh((w_rl - w_rr) / _LSD_DEADBAND)

        rolling = 0.0
        ref = loss.rolling_ref_speed
        omega_f = v_x / geom.r_e_f
        for f_z, omega, r_e in ((self.loads[0], omega_f, geom.r_e_f),
                                (self.loads[1], omega_f, geom.r_e_f),
                                (self.loads[2], w_rl, geom.r_e_rl),
                                (self.loads[3], w_rr, geom.r_e_rr)):
            if omega > loss.omega_min:
                rolling += loss.c_r * f_z * math.exp(-ref / (omega * r_e))
        aero = self._drag * v_x * v_x
        corner = f_y_f * math.sin(alpha_f) + f_y_r * math.sin(alpha_r)
        slope_force = geom.m * geom.g * math.sin(_slope)
        f_loss = aero + rolling + corner + slope_force

        return (alpha_f, alpha_r, f_y_f, f_y_r, fx_rl, fx_rr, t_eng, dm,
                t_brk_rear, p_front, p_rear, f_x_front_brake, f_loss,
                throttle, delta)

    def derivative(self, state, controls):
        v_x, v_y, r, _, _ = state
        geom = self.models.geom
        (_, _, f_y_f, f_y_r, fx_rl, fx_rr, t_eng, dm, t_brk_rear,
         _, _, f_x_front_brake, f_loss, _, delta) = self._eval(state, controls)
        cos_d = math.cos(delta)
        # free-rolling fronts are spun up by the road, so their spin inertia
        # loads the body; the driven wheels are spun by the engine and carry
        # their own angular-momentum equations instead
        m_eff = geom.m + 2.0 * geom.i_w / (geom.r_e_f * geom.r_e_f)
        a_x = (fx_rl + fx_rr + f_x_front_brake - f_loss) / m_eff
        a_y = (f_y_f * cos_d + f_y_r) / geom.m
        rdot = (f_y_f * cos_d * geom.l_f - f_y_r * geom.l_r
                + 0.5 * (fx_rr - fx_rl) * geom.t_r) / geom.i_z
        wdot_rl = (0.5 * (t_eng - dm) - t_brk_rear - fx_rl * geom.r_e_rl) / geom.i_w
        wdot_rr = (0.5 * (t_eng + dm) - t_brk_rear - fx_rr * geom.r_e_rr) / geom.i_w
        return (a_x + r * v_y, a_y - r * v_x, rdot, wdot_rl, wdot_rr), (a_x, a_y)


def _cell(axis: list, value: float) -> int:
    """Index of the grid cell containing value (clamped)."""
    lo, hi = 0, len(axis) - 2
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if axis[mid] <= value:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _rk4(plant: _Plant, state, controls, dt):
    k1, _ = plant.derivative(state, controls)
    s2 = tuple(s + 0.5 * dt * k for s, k in zip(state, k1))
    k2, _ = plant.derivative(s2, controls)
    s3 = tuple(s + 0.5 * dt * k for s, k in zip(state, k2))
    k3, _ = plant.derivative(s3, controls)
    s4 = tuple(s + dt * k for s, k in zip(state, k3))
    k4, _ = plant.derivative(s4, controls)
    return tuple(s + dt / 6.0 * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4))


def simulate(scenario: Scenario, models: VehicleModels,
             tires: PlantTireParams, suite: SensorSuiteConfig,
             plant_rate: float = 1000.0, truth_rate: float = 100.0,
             seed: int | None = None,
             initial_state: tuple[float, ...] | None = None):
    """Run the plant and synthesize sensors.

    Returns (truth_records, frames); frames are sorted by arrival
    timestamp (RADAR scans arrive late by their latency). The plant
    starts rolling straight at the scenario's initial speed unless a
    full (v_x, v_y, r, w_rl, w_rr) ``initial_state`` is given. Raises
    PlantDiverged when the state leaves its sanity bounds.
    """
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    plant = _Plant(models, tires, suite)
    geom = models.geom
    dt = 1.0 / plant_rate
    n_steps = int(round(scenario.duration * plant_rate))

    def decim(rate: float) -> int:
        d = plant_rate / rate
        if abs(d - round(d)) > 1e-9:
            raise ValueError(f"sensor rate {rate} must divide plant rate {plant_rate}")
        return int(round(d))

    truth_every = decim(truth_rate)
    imu_every = decim(suite.imu_rate)
    wheel_every = decim(suite.wheel_rate)
    steer_every = decim(suite.steer_rate)
    act_every = decim(suite.actuation_rate)
    loads_every = decim(suite.loads_rate)
    radar_every = [decim(rc.rate) for rc in suite.radars]

    b_x, b_y, b_r = suite.imu_bias
    v0 = scenario.initial_speed
    state = (v0, 0.0, 0.0, v0 / geom.r_e_rl, v0 / geom.r_e_rr)
    if initial_state is not None:
        state = tuple(float(s) for s in initial_state)

    truth: list[TruthRecord] = []
    frames: list[MeasurementFrame] = []
    scan_counter = 0

    for i in range(n_steps + 1):
        t = i * dt
        controls = scenario.controls(min(t, scenario.duration))
        v_x, v_y, r, w_rl, w_rr = state
        if abs(v_x) > 120.0 or abs(r) > 5.0:
            raise PlantDiverged(f"plant left sanity bounds at t={t:.3f}s "
                                f"(v_x={v_x:.1f}, r={r:.2f})")
        f = plant.forces(state, controls)
        _, (a_x, a_y) = plant.derivative(state, controls)

        if i % truth_every == 0:
            fx_sum = f["fx_rl"] + f["fx_rr"]
            beta = math.atan2(v_y, v_x) if v_x > _V_GUARD else 0.0
            truth.append(TruthRecord(
                timestamp=t, v_x=v_x, v_y=v_y, a_x=a_x, a_y=a_y, r=r,
                b_x=b_x, b_y=b_y, b_r=b_r, w_rl=w_rl, w_rr=w_rr,
                fx_r=fx_sum,
                gamma=f["fx_rl"] / fx_sum if abs(fx_sum) > 1e-9 else 0.5,
                dm=f["dm"], alpha_f=f["alpha_f"], alpha_r=f["alpha_r"],
                beta=beta, f_y_f=f["f_y_f"], f_y_r=f["f_y_r"],
                fx_rl=f["fx_rl"], fx_rr=f["fx_rr"]))

        if i % imu_every == 0:
            frames.append(ImuFrame(
                t,
                a_x + b_x + rng.normal(0.0, suite.imu_sigma_accel),
                a_y + b_y + rng.normal(0.0, suite.imu_sigma_accel),
                r + b_r + rng.normal(0.0, suite.imu_sigma_gyro)))
        if i % wheel_every == 0:
            noise = rng.normal(0.0, suite.wheel_sigma, 4)
            w_front = v_x / geom.r_e_f
            frames.append(WheelSpeedFrame(
                t, w_rl + noise[0], w_rr + noise[1],
                w_front + noise[2] if suite.wheel_fronts else math.nan,
                w_front + noise[3] if suite.wheel_fronts else math.nan))
        if i % steer_every == 0:
            frames.append(SteeringFrame(
                t, controls[0] + rng.normal(0.0, suite.steer_sigma)))
        if i % act_every == 0:
            engine_speed = 0.5 * (w_rl + w_rr) * suite.gear_ratio
            frames.append(ThrottleFrame(t, f["throttle"], engine_speed))
            frames.append(BrakePressureFrame(t, f["p_front"], f["p_rear"]))
        if i % loads_every == 0:
            noise = rng.normal(0.0, suite.loads_sigma, 4)
            frames.append(VerticalLoadFrame(
                t, tuple(max(load + eta, 0.0)
                         for load, eta in zip(plant.loads, noise))))
            frames.append(SlopeFrame(t, controls[3]))
        for rc, every in zip(suite.radars, radar_every):
            if i % every == 0:
                frames.append(_make_scan(rc, state, t, rng, scan_counter))
                scan_counter += 1

        if i < n_steps:
            state = _rk4(plant, state, controls, dt)

    frames.sort(key=lambda fr: fr.timestamp)
    return truth, frames


def _make_scan(rc: RadarSimConfig, state, t: float, rng, counter: int) -> RadarScan:
    v_x, v_y, r, _, _ = state
    ext = rc.true_extrinsics
    v_body = np.array([v_x - r * ext.translation[1],
                       v_y + r * ext.translation[0],
                       0.0])
    v_sensor = ext.rotation.T @ v_body
    theta = rng.uniform(-rc.fov_azimuth, rc.fov_azimuth, rc.detections)
    phi = rng.uniform(-rc.fov_elevation, rc.fov_elevation, rc.detections)
    bear = np.stack([np.cos(phi) * np.cos(theta),
                     np.cos(phi) * np.sin(theta),
                     np.sin(phi)], axis=-1)
    v_d = -(bear @ v_sensor)
    if rc.sigma_doppler > 0.0:
        v_d = v_d + rng.normal(0.0, rc.sigma_doppler, rc.detections)
    if rc.outlier_fraction > 0.0:
        hits = rng.random(rc.detections) < rc.outlier_fraction
        v_d = v_d + hits * rng.uniform(-rc.outlier_spread, rc.outlier_spread,
                                       rc.detections)
    if rc.sigma_angle > 0.0:
        theta = theta + rng.normal(0.0, rc.sigma_angle, rc.detections)
        phi = phi + rng.normal(0.0, rc.sigma_angle, rc.detections)
    dets = tuple(RadarDetection(float(v), float(th), float(ph), timestamp=t)
                 for v, th, ph in zip(v_d, theta, phi))
    return RadarScan(dets, sensor_id=rc.sensor_id,
                     timestamp=t + rc.latency, latency=rc.latency)
