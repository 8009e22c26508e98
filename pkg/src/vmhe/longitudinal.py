"""Engine map, brake model, limited-slip differential bounds and loss forces.

Wheel ordering throughout is (fl, fr, rl, rr). Brake hydraulics are split
into a front and a rear circuit; the bias coefficient is the fraction of
total braking force carried by the front axle.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .vehicle import VehicleParams

WHEELS = ("fl", "fr", "rl", "rr")

DRIVING = "driving"
BRAKING = "braking"
COASTING = "coasting"

#: Mode classification thresholds.
BRAKE_PRESSURE_THRESHOLD = 1e5   # Pa
DRIVE_TORQUE_THRESHOLD = 5.0     # N*m


class EngineTorqueMap:
    """Bilinear map (engine speed, throttle) -> delivered rear-axle torque.

    Queries outside the grid hull are clamped to the nearest edge.
    """

    def __init__(self, speeds: np.ndarray, throttles: np.ndarray,
                 torques: np.ndarray):
        speeds = np.asarray(speeds, dtype=float)
        throttles = np.asarray(throttles, dtype=float)
        torques = np.asarray(torques, dtype=float)
        if speeds.ndim != 1 or throttles.ndim != 1:
            raise ValueError("grid axes must be 1-D")
        if np.any(np.diff(speeds) <= 0.0) or np.any(np.diff(throttles) <= 0.0):
            raise ValueError("grid axes must be strictly increasing")
        if torques.shape != (speeds.size, throttles.size):
            raise ValueError("torque grid shape must be (n_speeds, n_throttles)")
        self.speeds = speeds
        self.throttles = throttles
        self.torques = torques
        # plain-float copies for the scalar hot path
        self._speeds = [float(v) for v in speeds]
        self._throttles = [float(v) for v in throttles]
        self._torques = [[float(v) for v in row] for row in torques]

    def __call__(self, engine_speed: float, throttle: float) -> float:
        return engine_torque(self, engine_speed, throttle)

    @staticmethod
    def load(path) -> "EngineTorqueMap":
        """Read the plain-text grid format.

        First non-comment row lists the throttle breakpoints; every
        following row is an engine speed followed by one torque per
        throttle breakpoint.
        """
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    rows.append([float(tok) for tok in line.split()])
        if len(rows) < 3:
            raise ValueError("engine map needs a throttle row and >= 2 speed rows")
        throttles = np.array(rows[0])
        speeds = np.array([row[0] for row in rows[1:]])
        torques = np.array([row[1:] for row in rows[1:]])
        return EngineTorqueMap(speeds, throttles, torques)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(" ".join(repr(float(t)) for t in self.throttles) + "\n")
            for speed, row in zip(self.speeds, self.torques):
                fh.write(" ".join(repr(float(v)) for v in (speed, *row)) + "\n")


def engine_torque(emap: EngineTorqueMap, engine_speed: float,
                  throttle: float) -> float:
    """Bilinear interpolation on the torque grid, clamped at the edges."""
    speeds, throttles, z = emap._speeds, emap._throttles, emap._torques
    s = min(max(engine_speed, speeds[0]), speeds[-1])
    t = min(max(throttle, throttles[0]), throttles[-1])
    i = min(bisect.bisect_right(speeds, s) - 1, len(speeds) - 2)
    j = min(bisect.bisect_right(throttles, t) - 1, len(throttles) - 2)
    fs = (s - speeds[i]) / (speeds[i + 1] - speeds[i])
    ft = (t - throttles[j]) / (throttles[j + 1] - throttles[j])
    return ((1 - fs) * (1 - ft) * z[i][j] + fs * (1 - ft) * z[i + 1][j]
            + (1 - fs) * ft * z[i][j + 1] + fs * ft * z[i + 1][j + 1])


@dataclass(frozen=True)
class BrakeParams:
    """Pad friction, caliper piston area, disc radius and front bias."""

    mu_p: float
    a_piston: float
    r_b: float
    bias: float

    def __post_init__(self):
        for name in ("mu_p", "a_piston", "r_b"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"BrakeParams.{name} must be positive")
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError("brake bias must lie in [0, 1]")


def brake_torque(pressure: float, p: BrakeParams) -> float:
    """Braking torque at one wheel from its circuit pressure."""
    return p.mu_p * pressure * p.a_piston * p.r_b


@dataclass(frozen=True)
class LsdParams:
    """Limited-slip differential: preload, engagement, transfer fractions."""

    m_0: float
    xi: float
    eps_drive: float
    eps_coast: float

    def __post_init__(self):
        if self.m_0 < 0.0:
            raise ValueError("preload moment must be non-negative")
        for name in ("xi", "eps_drive", "eps_coast"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"LsdParams.{name} must lie in [0, 1]")


def lsd_bounds(t_eng: float, yaw_rate: float, mode: str,
               p: LsdParams) -> tuple[float, float]:
    """Admissible (min, max) range of the differential transfer moment.

    The transfer capacity is xi * max(preload, eps * |t_eng|) directed by
    the turning side, with eps chosen per driving/coasting phase; the
    bounds always contain zero and collapse to {0} when the yaw rate is
    zero. Engine-braking torque enters through its magnitude so the sign
    of the bound comes from the yaw rate alone.
    """
    eps = p.eps_drive if mode == DRIVING else p.eps_coast
    dm_diff = p.xi * max(p.m_0, eps * abs(t_eng)) * float(np.sign(yaw_rate))
    return min(0.0, dm_diff), max(0.0, dm_diff)


@dataclass(frozen=True)
class LossModelParams:
    """Aerodynamic drag, rolling resistance and the rolling-term constants.

    ``rolling_ref_speed`` is the constant in the low-speed attenuation
    exp(-ref / (omega * r_e)) of the rolling term; ``omega_min`` guards
    the exponential against the divergence at standstill.
    """

    rho: float
    c_x: float
    a_front: float
    c_r: float
    rolling_ref_speed: float = 2.0
    omega_min: float = 1.0

    def __post_init__(self):
        for name in ("rho", "c_x", "a_front", "c_r"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"LossModelParams.{name} must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    aero: float
    rolling: tuple[float, float, float, float]
    corner: float
    slope: float
    rolling_valid: tuple[bool, bool, bool, bool]

    @property
    def rolling_total(self) -> float:
        return sum(self.rolling)

    @property
    def total(self) -> float:
        return self.aero + self.rolling_total + self.corner + self.slope


def aero_drag(v_x: float, params: LossModelParams) -> float:
    return 0.5 * params.rho * params.c_x * params.a_front * v_x * v_x


def rolling_resistance(f_z: float, omega: float, r_e: float,
                       params: LossModelParams) -> tuple[float, bool]:
    """Rolling loss of one wheel; returns (force, valid).

    Below ``omega_min`` the exponential diverges and the component is
    reported as 0 with valid=False.
    """
    if omega <= params.omega_min:
        return 0.0, False
    return params.c_r * f_z * math.exp(-params.rolling_ref_speed / (omega * r_e)), True


def loss_forces(v_x: float,
                f_z_wheels,
                omega_wheels,
                slope: float,
                f_y_f: float, f_y_r: float,
                alpha_f: float, alpha_r: float,
                geom: VehicleParams,
                params: LossModelParams) -> LossBreakdown:
    """Resistive-force breakdown: drag, per-wheel rolling, cornering, slope.

    ``f_z_wheels`` and ``omega_wheels`` are measured per-wheel channels in
    (fl, fr, rl, rr) order; slope is the road grade angle.
    """
    radii = (geom.r_e_f, geom.r_e_f, geom.r_e_rl, geom.r_e_rr)
    rolling = []
    valid = []
    for f_z, omega, r_e in zip(f_z_wheels, omega_wheels, radii):
        force, ok = rolling_resistance(f_z, omega, r_e, params)
        rolling.append(force)
        valid.append(ok)
    return LossBreakdown(
        aero=aero_drag(v_x, params),
        rolling=tuple(rolling),
        corner=f_y_f * math.sin(alpha_f) + f_y_r * math.sin(alpha_r),
        slope=geom.m * geom.g * math.sin(slope),
        rolling_valid=tuple(valid),
    )


def rear_force_measurement(a_x: float, f_loss: float, mode: str,
                           geom: VehicleParams, brakes: BrakeParams,
                           inertia_wheels: str = "all") -> float:
    """Derived measurement of the total rear-axle longitudinal force.

    Under traction the vehicle mass is augmented by the spin inertia of
    the wheels (all four by default, ``inertia_wheels="rear"`` restricts
    the sum to the driven pair); under braking the inertial force is
    split between the axles by the brake bias.
    """
    if mode == BRAKING:
        return (1.0 - brakes.bias) * (geom.m * a_x + f_loss)
    return equivalent_mass(geom, inertia_wheels) * a_x + f_loss


def equivalent_mass(geom: VehicleParams, inertia_wheels: str = "all") -> float:
    radii = [geom.r_e_rl, geom.r_e_rr]
    if inertia_wheels == "all":
        radii += [geom.r_e_f, geom.r_e_f]
    elif inertia_wheels != "rear":
        raise ValueError("inertia_wheels must be 'all' or 'rear'")
    return geom.m + sum(geom.i_w / (r * r) for r in radii)


def classify_drive_mode(throttle: float, brake_pressures, t_eng: float,
                        pressure_threshold: float = BRAKE_PRESSURE_THRESHOLD,
                        torque_threshold: float = DRIVE_TORQUE_THRESHOLD) -> str:
    """Driving / braking / coasting split used by the rear-force measurement."""
    if max(brake_pressures) > pressure_threshold:
        return BRAKING
    if t_eng > torque_threshold:
        return DRIVING
    return COASTING
