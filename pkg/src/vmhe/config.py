"""Flat key-value configuration files.

Format: one ``key = value`` pair per line, ``#`` comments, whitespace-
separated value tokens, SI units throughout. Unknown keys are rejected so
typos fail loudly. ``resolved_text`` writes back every effective setting;
re-loading that text reproduces the setup exactly.

Sections (see the README for the full key list):
  vehicle.*        geometry and inertia
  tire.*           nominal tire parameters and their bounds
  brake.* lsd.* loss.*  longitudinal models
  engine.map       path to the torque grid, relative to the config file
  radar.<id>.*     assumed extrinsics per sensor
  calibration.*    online rotation calibration settings
  mhe.*            horizon, noise levels, solver settings
  sim.*            sensor suite, true extrinsics and plant truth overrides
  scenario.*       driving scenario segments
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .harness import CalibrationSettings
from .longitudinal import BrakeParams, EngineTorqueMap, LossModelParams, LsdParams
from .mhe import MheConfig, SolverSettings, VehicleModels
from .radar import CalibrationGates, RadarExtrinsics
from .simulator import (
    PlantTireParams, Profile, RadarSimConfig, Scenario, Segment,
    SensorSuiteConfig,
)
from .vehicle import (
    PARAM_DIM, STATE_NAMES, PacejkaAxleParams, ParamVector, VehicleParams,
)

_TIRE_FIELDS = ("b", "c", "d", "e", "s_h", "s_v")


def parse_kv(path) -> dict[str, list[str]]:
    """Read ``key = value`` lines into a token dict."""
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            tokens = value.split()
            if not key or not tokens:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = tokens
    return out


class _Reader:
    """Tracks key consumption so leftovers can be rejected."""

    def __init__(self, raw: dict[str, list[str]], path):
        self.raw = raw
        self.path = path
        self.used: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self.raw

    def tokens(self, key: str, default=None):
        if key in self.raw:
            self.used.add(key)
            return self.raw[key]
        return default

    def scalar(self, key: str, default=None, required=False) -> float:
        tok = self.tokens(key)
        if tok is None:
            if required:
                raise ConfigError(f"{self.path}: missing required key {key!r}")
            return default
        if len(tok) != 1:
            raise ConfigError(f"{self.path}: {key} expects one value")
        try:
            return float(tok[0])
        except ValueError as exc:
            raise ConfigError(f"{self.path}: {key}: {exc}") from exc

    def integer(self, key: str, default=None) -> int:
        value = self.scalar(key, default)
        return int(value) if value is not None else None

    def flag(self, key: str, default: bool) -> bool:
        tok = self.tokens(key)
        if tok is None:
            return default
        if tok[0] not in ("true", "false"):
            raise ConfigError(f"{self.path}: {key} expects true or false")
        return tok[0] == "true"

    def string(self, key: str, default=None) -> str | None:
        tok = self.tokens(key)
        if tok is None:
            return default
        return " ".join(tok)

    def prefixed_ids(self, prefix: str) -> list[str]:
        ids = []
        for key in self.raw:
            if key.startswith(prefix):
                ident = key[len(prefix):].split(".", 1)[0]
                if ident not in ids:
                    ids.append(ident)
        return ids

    def finish(self):
        leftover = sorted(set(self.raw) - self.used)
        if leftover:
            raise ConfigError(f"{self.path}: unknown keys: {', '.join(leftover)}")


@dataclass
class Setup:
    """Everything a run needs, resolved from one configuration file."""

    models: VehicleModels
    params: ParamVector
    mhe: MheConfig
    calibration: CalibrationSettings
    suite: SensorSuiteConfig
    scenario: Scenario | None
    plant_tires: PlantTireParams
    true_extrinsics: dict[str, RadarExtrinsics]
    min_convergence_rate: float
    engine_map_path: str


def _axle(reader: _Reader, prefix: str, default: PacejkaAxleParams | None):
    values = {}
    for name in _TIRE_FIELDS:
        fallback = getattr(default, name) if default is not None else None
        required = default is None and name in ("b", "c", "d", "e")
        value = reader.scalar(f"{prefix}.{name}",
                              fallback if fallback is not None else 0.0,
                              required=required)
        values[name] = value
    return PacejkaAxleParams(**values)


def _extrinsics(reader: _Reader, prefix: str,
                default: RadarExtrinsics | None = None) -> RadarExtrinsics:
    base_ypr = (0.0, 0.0, 0.0)
    base_t = (0.0, 0.0, 0.0)
    if default is not None:
        from . import rotations
        base_ypr = rotations.to_ypr(default.rotation)
        base_t = tuple(default.translation)
    yaw = reader.scalar(f"{prefix}.yaw", base_ypr[0])
    pitch = reader.scalar(f"{prefix}.pitch", base_ypr[1])
    roll = reader.scalar(f"{prefix}.roll", base_ypr[2])
    x = reader.scalar(f"{prefix}.x", base_t[0])
    y = reader.scalar(f"{prefix}.y", base_t[1])
    z = reader.scalar(f"{prefix}.z", base_t[2])
    return RadarExtrinsics.from_ypr(yaw, pitch, roll, (x, y, z))


def _profile(reader: _Reader, key: str) -> Profile:
    tok = reader.tokens(key, ["const", "0.0"])
    kind = tok[0]
    args = [float(t) for t in tok[1:]]
    if kind == "const" and len(args) == 1:
        return Profile("const", a=args[0])
    if kind == "ramp" and len(args) == 2:
        return Profile("ramp", a=args[0], b=args[1])
    if kind == "sine" and len(args) in (2, 3):
        bias = args[2] if len(args) == 3 else 0.0
        return Profile("sine", a=args[0], b=args[1], c=bias)
    raise ConfigError(f"{key}: bad profile {' '.join(tok)!r} "
                      "(const v | ramp a b | sine amp freq [bias])")


def load_setup(path) -> Setup:
    reader = _Reader(parse_kv(path), path)
    base_dir = os.path.dirname(os.path.abspath(path))

    geom = VehicleParams(
        l_f=reader.scalar("vehicle.l_f", required=True),
        l_r=reader.scalar("vehicle.l_r", required=True),
        t_r=reader.scalar("vehicle.t_r", required=True),
        m=reader.scalar("vehicle.m", required=True),
        i_z=reader.scalar("vehicle.i_z", required=True),
        i_w=reader.scalar("vehicle.i_w", required=True),
        r_e_rl=reader.scalar("vehicle.r_e_rl", required=True),
        r_e_rr=reader.scalar("vehicle.r_e_rr", required=True),
        r_e_f=reader.scalar("vehicle.r_e_f", 0.0),
        g=reader.scalar("vehicle.g", 9.81),
    )

    front = _axle(reader, "tire.front", None)
    rear = _axle(reader, "tire.rear", None)
    lower = np.array([reader.scalar(f"tire.lower.{n}", v)
                      for n, v in zip(_TIRE_FIELDS,
                                      ParamVector(front, rear).lower[:6])])
    upper = np.array([reader.scalar(f"tire.upper.{n}", v)
                      for n, v in zip(_TIRE_FIELDS,
                                      ParamVector(front, rear).upper[:6])])
    params = ParamVector(front=front, rear=rear,
                         lower=np.tile(lower, 2), upper=np.tile(upper, 2))

    brakes = BrakeParams(
        mu_p=reader.scalar("brake.mu_p", required=True),
        a_piston=reader.scalar("brake.a_piston", required=True),
        r_b=reader.scalar("brake.r_b", required=True),
        bias=reader.scalar("brake.bias", required=True),
    )
    lsd = LsdParams(
        m_0=reader.scalar("lsd.m_0", 50.0),
        xi=reader.scalar("lsd.xi", 1.0),
        eps_drive=reader.scalar("lsd.eps_drive", 0.35),
        eps_coast=reader.scalar("lsd.eps_coast", 0.25),
    )
    loss = LossModelParams(
        rho=reader.scalar("loss.rho", 1.2),
        c_x=reader.scalar("loss.c_x", required=True),
        a_front=reader.scalar("loss.a_front", required=True),
        c_r=reader.scalar("loss.c_r", required=True),
        rolling_ref_speed=reader.scalar("loss.rolling_ref_speed", 2.0),
        omega_min=reader.scalar("loss.omega_min", 1.0),
    )
    map_rel = reader.string("engine.map")
    if map_rel is None:
        raise ConfigError(f"{path}: missing required key 'engine.map'")
    map_path = map_rel if os.path.isabs(map_rel) else os.path.join(base_dir, map_rel)
    engine_map = EngineTorqueMap.load(map_path)

    extrinsics = {}
    for ident in reader.prefixed_ids("radar."):
        extrinsics[ident] = _extrinsics(reader, f"radar.{ident}")
    models = VehicleModels(geom=geom, brakes=brakes, lsd=lsd, loss=loss,
                           engine_map=engine_map, extrinsics=extrinsics)

    calibration = CalibrationSettings(
        enabled=reader.flag("calibration.enabled", True),
        weight=reader.scalar("calibration.weight", 0.08),
        gates=CalibrationGates(
            max_yaw_rate=reader.scalar("calibration.max_yaw_rate", 0.02),
            max_steer=reader.scalar("calibration.max_steer", 0.01),
            min_speed=reader.scalar("calibration.min_speed", 10.0),
        ),
        reject_outliers=reader.flag("calibration.reject_outliers", True),
    )

    mhe = MheConfig(
        n=reader.integer("mhe.n", 30),
        dt=reader.scalar("mhe.dt", 0.01),
    )
    for i, name in enumerate(STATE_NAMES):
        mhe.sigma_prior[i] = reader.scalar(f"mhe.sigma_prior.{name}",
                                           mhe.sigma_prior[i])
        mhe.sigma_process[i] = reader.scalar(f"mhe.sigma_process.{name}",
                                             mhe.sigma_process[i])
        mhe.x0[i] = reader.scalar(f"mhe.x0.{name}", mhe.x0[i])
    for i, name in enumerate(_TIRE_FIELDS):
        sigma = reader.scalar(f"mhe.sigma_param.{name}",
                              mhe.sigma_param_prior[i])
        mhe.sigma_param_prior[i] = sigma
        mhe.sigma_param_prior[i + 6] = sigma
    mhe.sigma_imu_accel = reader.scalar("mhe.sigma.imu_accel", mhe.sigma_imu_accel)
    mhe.sigma_imu_gyro = reader.scalar("mhe.sigma.imu_gyro", mhe.sigma_imu_gyro)
    mhe.sigma_doppler = reader.scalar("mhe.sigma.doppler", mhe.sigma_doppler)
    mhe.sigma_wheel_speed = reader.scalar("mhe.sigma.wheel_speed",
                                          mhe.sigma_wheel_speed)
    mhe.sigma_rear_force = reader.scalar("mhe.sigma.rear_force",
                                         mhe.sigma_rear_force)
    mhe.sigma_yaw_moment = reader.scalar("mhe.sigma.yaw_moment",
                                         mhe.sigma_yaw_moment)
    mhe.sigma_lateral_balance = reader.scalar("mhe.sigma.lateral_balance",
                                              mhe.sigma_lateral_balance)
    mhe.v_x_min = reader.scalar("mhe.v_x_min", mhe.v_x_min)
    mhe.x0_speed_from_wheels = reader.flag("mhe.x0_speed_from_wheels", True)
    inertia = reader.string("mhe.inertia_wheels", "all")
    if inertia not in ("all", "rear"):
        raise ConfigError(f"{path}: mhe.inertia_wheels must be all or rear")
    mhe.inertia_wheels = inertia
    mhe.solver = SolverSettings(
        max_iterations=reader.integer("mhe.max_iterations", 25),
        gradient_tol=reader.scalar("mhe.gradient_tol", 1e-3),
        step_tol=reader.scalar("mhe.step_tol", 1e-9),
        ftol=reader.scalar("mhe.ftol", 1e-5),
    )
    min_convergence = reader.scalar("mhe.min_convergence_rate", 0.95)

    # simulation section
    radars = []
    true_extrinsics = {}
    for ident in sorted(set(reader.prefixed_ids("sim.radar.")) | set(extrinsics)):
        assumed = extrinsics.get(ident)
        true_ext = _extrinsics(reader, f"sim.radar.{ident}", default=assumed)
        true_extrinsics[ident] = true_ext
        radars.append(RadarSimConfig(
            sensor_id=ident,
            true_extrinsics=true_ext,
            rate=reader.scalar(f"sim.radar.{ident}.rate", 20.0),
            detections=reader.integer(f"sim.radar.{ident}.detections", 24),
            sigma_doppler=reader.scalar(f"sim.radar.{ident}.sigma_doppler", 0.1),
            sigma_angle=reader.scalar(f"sim.radar.{ident}.sigma_angle", 0.002),
            latency=reader.scalar(f"sim.radar.{ident}.latency", 0.0),
            outlier_fraction=reader.scalar(
                f"sim.radar.{ident}.outlier_fraction", 0.0),
        ))
    suite = SensorSuiteConfig(
        imu_rate=reader.scalar("sim.imu_rate", 100.0),
        imu_sigma_accel=reader.scalar("sim.imu_sigma_accel", 0.05),
        imu_sigma_gyro=reader.scalar("sim.imu_sigma_gyro", 0.002),
        imu_bias=(reader.scalar("sim.imu_bias_x", 0.0),
                  reader.scalar("sim.imu_bias_y", 0.0),
                  reader.scalar("sim.imu_bias_r", 0.0)),
        wheel_rate=reader.scalar("sim.wheel_rate", 100.0),
        wheel_sigma=reader.scalar("sim.wheel_sigma", 0.1),
        wheel_fronts=reader.flag("sim.wheel_fronts", True),
        steer_rate=reader.scalar("sim.steer_rate", 100.0),
        steer_sigma=reader.scalar("sim.steer_sigma", 0.0005),
        actuation_rate=reader.scalar("sim.actuation_rate", 100.0),
        loads_rate=reader.scalar("sim.loads_rate", 100.0),
        loads_sigma=reader.scalar("sim.loads_sigma", 20.0),
        radars=tuple(radars),
        gear_ratio=reader.scalar("sim.gear_ratio", 8.0),
        brake_pressure_scale=reader.scalar("sim.brake_pressure_scale", 1.5e7),
    )
    plant_tires = PlantTireParams(
        front=_axle(reader, "sim.tire.front", front),
        rear=_axle(reader, "sim.tire.rear", rear),
        kappa_stiffness=reader.scalar("sim.kappa_stiffness", 30.0),
        mu_x=reader.scalar("sim.mu_x", 2.5),
    )

    scenario = None
    seg_ids = reader.prefixed_ids("scenario.segment.")
    if seg_ids:
        segments = []
        for ident in sorted(seg_ids, key=int):
            prefix = f"scenario.segment.{ident}"
            segments.append(Segment(
                duration=reader.scalar(f"{prefix}.duration", required=True),
                steer=_profile(reader, f"{prefix}.steer"),
                throttle=_profile(reader, f"{prefix}.throttle"),
                brake=_profile(reader, f"{prefix}.brake"),
                slope=reader.scalar(f"{prefix}.slope", 0.0),
            ))
        scenario = Scenario(
            segments=tuple(segments),
            initial_speed=reader.scalar("scenario.initial_speed", 30.0),
            seed=reader.integer("scenario.seed", 0),
        )

    reader.finish()
    return Setup(models=models, params=params, mhe=mhe,
                 calibration=calibration, suite=suite, scenario=scenario,
                 plant_tires=plant_tires, true_extrinsics=true_extrinsics,
                 min_convergence_rate=min_convergence,
                 engine_map_path=os.path.abspath(map_path))


def resolved_text(setup: Setup) -> str:
    """Serialize the effective configuration; re-loadable and exact."""
    from . import rotations

    lines: list[str] = ["# resolved configuration"]

    def put(key, value):
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, (int, np.integer)):
            lines.append(f"{key} = {int(value)}")
        elif isinstance(value, str):
            lines.append(f"{key} = {value}")
        else:
            lines.append(f"{key} = {float(value)!r}")

    geom = setup.models.geom
    for name in ("l_f", "l_r", "t_r", "m", "i_z", "i_w",
                 "r_e_rl", "r_e_rr", "r_e_f", "g"):
        put(f"vehicle.{name}", getattr(geom, name))
    for axle, obj in (("front", setup.params.front), ("rear", setup.params.rear)):
        for name in _TIRE_FIELDS:
            put(f"tire.{axle}.{name}", getattr(obj, name))
    for i, name in enumerate(_TIRE_FIELDS):
        put(f"tire.lower.{name}", setup.params.lower[i])
        put(f"tire.upper.{name}", setup.params.upper[i])
    brakes = setup.models.brakes
    for name in ("mu_p", "a_piston", "r_b", "bias"):
        put(f"brake.{name}", getattr(brakes, name))
    lsd = setup.models.lsd
    for name in ("m_0", "xi", "eps_drive", "eps_coast"):
        put(f"lsd.{name}", getattr(lsd, name))
    loss = setup.models.loss
    for name in ("rho", "c_x", "a_front", "c_r", "rolling_ref_speed",
                 "omega_min"):
        put(f"loss.{name}", getattr(loss, name))
    put("engine.map", setup.engine_map_path)

    for ident, ext in sorted(setup.models.extrinsics.items()):
        yaw, pitch, roll = rotations.to_ypr(ext.rotation)
        put(f"radar.{ident}.yaw", yaw)
        put(f"radar.{ident}.pitch", pitch)
        put(f"radar.{ident}.roll", roll)
        put(f"radar.{ident}.x", ext.translation[0])
        put(f"radar.{ident}.y", ext.translation[1])
        put(f"radar.{ident}.z", ext.translation[2])

    cal = setup.calibration
    put("calibration.enabled", cal.enabled)
    put("calibration.weight", cal.weight)
    put("calibration.max_yaw_rate", cal.gates.max_yaw_rate)
    put("calibration.max_steer", cal.gates.max_steer)
    put("calibration.min_speed", cal.gates.min_speed)
    put("calibration.reject_outliers", cal.reject_outliers)

    mhe = setup.mhe
    put("mhe.n", mhe.n)
    put("mhe.dt", mhe.dt)
    for i, name in enumerate(STATE_NAMES):
        put(f"mhe.sigma_prior.{name}", mhe.sigma_prior[i])
        put(f"mhe.sigma_process.{name}", mhe.sigma_process[i])
        put(f"mhe.x0.{name}", mhe.x0[i])
    for i, name in enumerate(_TIRE_FIELDS):
        put(f"mhe.sigma_param.{name}", mhe.sigma_param_prior[i])
    put("mhe.sigma.imu_accel", mhe.sigma_imu_accel)
    put("mhe.sigma.imu_gyro", mhe.sigma_imu_gyro)
    put("mhe.sigma.doppler", mhe.sigma_doppler)
    put("mhe.sigma.wheel_speed", mhe.sigma_wheel_speed)
    put("mhe.sigma.rear_force", mhe.sigma_rear_force)
    put("mhe.sigma.yaw_moment", mhe.sigma_yaw_moment)
    put("mhe.sigma.lateral_balance", mhe.sigma_lateral_balance)
    put("mhe.v_x_min", mhe.v_x_min)
    put("mhe.x0_speed_from_wheels", mhe.x0_speed_from_wheels)
    put("mhe.inertia_wheels", mhe.inertia_wheels)
    put("mhe.max_iterations", mhe.solver.max_iterations)
    put("mhe.gradient_tol", mhe.solver.gradient_tol)
    put("mhe.step_tol", mhe.solver.step_tol)
    put("mhe.ftol", mhe.solver.ftol)
    put("mhe.min_convergence_rate", setup.min_convergence_rate)

    suite = setup.suite
    put("sim.imu_rate", suite.imu_rate)
    put("sim.imu_sigma_accel", suite.imu_sigma_accel)
    put("sim.imu_sigma_gyro", suite.imu_sigma_gyro)
    put("sim.imu_bias_x", suite.imu_bias[0])
    put("sim.imu_bias_y", suite.imu_bias[1])
    put("sim.imu_bias_r", suite.imu_bias[2])
    put("sim.wheel_rate", suite.wheel_rate)
    put("sim.wheel_sigma", suite.wheel_sigma)
    put("sim.wheel_fronts", suite.wheel_fronts)
    put("sim.steer_rate", suite.steer_rate)
    put("sim.steer_sigma", suite.steer_sigma)
    put("sim.actuation_rate", suite.actuation_rate)
    put("sim.loads_rate", suite.loads_rate)
    put("sim.loads_sigma", suite.loads_sigma)
    put("sim.gear_ratio", suite.gear_ratio)
    put("sim.brake_pressure_scale", suite.brake_pressure_scale)
    for rc in suite.radars:
        prefix = f"sim.radar.{rc.sensor_id}"
        yaw, pitch, roll = rotations.to_ypr(rc.true_extrinsics.rotation)
        put(f"{prefix}.yaw", yaw)
        put(f"{prefix}.pitch", pitch)
        put(f"{prefix}.roll", roll)
        put(f"{prefix}.x", rc.true_extrinsics.translation[0])
        put(f"{prefix}.y", rc.true_extrinsics.translation[1])
        put(f"{prefix}.z", rc.true_extrinsics.translation[2])
        put(f"{prefix}.rate", rc.rate)
        put(f"{prefix}.detections", rc.detections)
        put(f"{prefix}.sigma_doppler", rc.sigma_doppler)
        put(f"{prefix}.sigma_angle", rc.sigma_angle)
        put(f"{prefix}.latency", rc.latency)
        put(f"{prefix}.outlier_fraction", rc.outlier_fraction)
    plant = setup.plant_tires
    for axle, obj in (("front", plant.front), ("rear", plant.rear)):
        for name in _TIRE_FIELDS:
            put(f"sim.tire.{axle}.{name}", getattr(obj, name))
    put("sim.kappa_stiffness", plant.kappa_stiffness)
    put("sim.mu_x", plant.mu_x)

    if setup.scenario is not None:
        sc = setup.scenario
        put("scenario.initial_speed", sc.initial_speed)
        put("scenario.seed", sc.seed)
        for i, seg in enumerate(sc.segments):
            prefix = f"scenario.segment.{i}"
            put(f"{prefix}.duration", seg.duration)
            for name in ("steer", "throttle", "brake"):
                prof = getattr(seg, name)
                if prof.kind == "const":
                    value = f"const {prof.a!r}"
                elif prof.kind == "ramp":
                    value = f"ramp {prof.a!r} {prof.b!r}"
                else:
                    value = f"sine {prof.a!r} {prof.b!r} {prof.c!r}"
                put(f"{prefix}.{name}", value)
            put(f"{prefix}.slope", seg.slope)
    return "\n".join(lines) + "\n"
