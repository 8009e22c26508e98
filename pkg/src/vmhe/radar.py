"""Doppler RADAR measurement model, per-scan ego-velocity, online rotation calibration.

Bearing convention: azimuth is measured about +z from the sensor +x axis,
elevation positive upward, so the unit bearing of a detection is
b = [cos(phi) cos(theta), cos(phi) sin(theta), sin(phi)].

A static world point seen from a sensor moving with velocity v (expressed
in the sensor frame) produces the Doppler reading v_d = -b . v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rotations
from .errors import DegenerateGeometry, TooFewDetections

FORWARD = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class RadarDetection:
    """One detection: Doppler (radial closing) velocity plus bearing angles."""

    v_d: float
    theta: float
    phi: float
    timestamp: float = 0.0


@dataclass(frozen=True)
class RadarScan:
    """All detections of one sensor sweep, sharing a timestamp epoch."""

    detections: tuple[RadarDetection, ...]
    sensor_id: str = "radar0"
    timestamp: float = 0.0
    latency: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if self.latency < 0.0:
            raise ValueError("scan latency must be non-negative")

    def bearings(self) -> np.ndarray:
        """(n, 3) unit bearing matrix."""
        theta = np.array([d.theta for d in self.detections])
        phi = np.array([d.phi for d in self.detections])
        return bearing_vector(theta, phi)

    def dopplers(self) -> np.ndarray:
        return np.array([d.v_d for d in self.detections])


@dataclass(frozen=True)
class RadarExtrinsics:
    """Pose of a RADAR with respect to the body frame.

    ``rotation`` maps sensor-frame vectors into the body frame;
    ``translation`` is the sensor origin in body coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        trans = np.asarray(self.translation, dtype=float)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not rotations.is_rotation(rot):
            raise ValueError("extrinsic rotation is not orthonormal / right-handed")
        if trans.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @staticmethod
    def from_ypr(yaw: float, pitch: float, roll: float,
                 translation=(0.0, 0.0, 0.0)) -> "RadarExtrinsics":
        return RadarExtrinsics(rotations.from_ypr(yaw, pitch, roll),
                               np.asarray(translation, dtype=float))


def bearing_vector(theta, phi) -> np.ndarray:
    """Unit bearing(s) for azimuth/elevation; broadcasts to (..., 3)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack(
        [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)],
        axis=-1,
    )


def sensor_velocity(v_x: float, v_y: float, yaw_rate: float,
                    ext: RadarExtrinsics) -> np.ndarray:
    """Sensor-frame velocity of the RADAR origin including the yaw lever arm."""
    v_body = np.array([v_x, v_y, 0.0])
    omega = np.array([0.0, 0.0, yaw_rate])
    return ext.rotation.T @ (v_body + np.cross(omega, ext.translation))


def predicted_doppler(state, det: RadarDetection, ext: RadarExtrinsics) -> float:
    """Doppler reading predicted for a static world point."""
    v_r = sensor_velocity(state.v_x, state.v_y, state.r, ext)
    return float(-bearing_vector(det.theta, det.phi) @ v_r)


@dataclass(frozen=True)
class EgoVelocityEstimate:
    velocity: np.ndarray            # sensor-frame, m/s
    inlier_count: int
    residual_rms: float
    inlier_mask: np.ndarray
    condition: float


def estimate_ego_velocity(scan: RadarScan,
                          reject_outliers: bool = True,
                          irls_rounds: int = 3,
                          inlier_floor: float = 0.05,
                          max_condition: float = 1e6) -> EgoVelocityEstimate:
    """Least-squares sensor-frame ego-velocity from one scan.

    Stacks b_i . v = -v_d,i over all detections and solves the linear
    system. Non-static returns are suppressed by iteratively reweighted
    least squares (Huber weights, MAD scale) followed by a plain solve on
    the surviving inliers; set ``reject_outliers=False`` for the raw solve.

    Raises TooFewDetections (< 3 usable rows) or DegenerateGeometry
    (bearing matrix condition above ``max_condition``).
    """
    n = len(scan.detections)
    if n < 3:
        raise TooFewDetections(f"{n} detections, need >= 3")
    bmat = scan.bearings()
    rhs = -scan.dopplers()

    _check_conditioning(bmat, max_condition)
    vel = np.linalg.lstsq(bmat, rhs, rcond=None)[0]
    mask = np.ones(n, dtype=bool)

    if reject_outliers:
        for _ in range(irls_rounds):
            res = bmat @ vel - rhs
            scale = 1.4826 * np.median(np.abs(res - np.median(res)))
            thresh = max(3.0 * scale, inlier_floor)
            w = np.minimum(1.0, thresh / np.maximum(np.abs(res), 1e-30))
            wb = bmat * w[:, None]
            vel = np.linalg.lstsq(wb, w * rhs, rcond=None)[0]
        res = bmat @ vel - rhs
        scale = 1.4826 * np.median(np.abs(res - np.median(res)))
        mask = np.abs(res) <= max(3.0 * scale, inlier_floor)
        if int(mask.sum()) < 3:
            raise TooFewDetections(f"only {int(mask.sum())} inliers remain")
        _check_conditioning(bmat[mask], max_condition)
        vel = np.linalg.lstsq(bmat[mask], rhs[mask], rcond=None)[0]

    res = bmat[mask] @ vel - rhs[mask]
    sing = np.linalg.svd(bmat[mask], compute_uv=False)
    return EgoVelocityEstimate(
        velocity=vel,
        inlier_count=int(mask.sum()),
        residual_rms=float(np.sqrt(np.mean(res**2))),
        inlier_mask=mask,
        condition=float(sing[0] / sing[-1]),
    )


def _check_conditioning(bmat: np.ndarray, max_condition: float) -> None:
    sing = np.linalg.svd(bmat, compute_uv=False)
    if sing[-1] <= 0.0 or sing[0] / sing[-1] > max_condition:
        raise DegenerateGeometry(
            f"bearing matrix condition {sing[0] / max(sing[-1], 1e-300):.3g} "
            f"exceeds {max_condition:.3g}")


@dataclass(frozen=True)
class CalibrationGates:
    """Straight-line driving gates for the rotation calibration.

    ``dwell`` is the number of consecutive gate-passing scans required
    before corrections apply. An instantaneous yaw-rate zero crossing in a
    weave satisfies the pointwise gates while the sideslip is at its peak;
    requiring a sustained straight rejects those moments.
    """

    max_yaw_rate: float = 0.02   # rad/s
    max_steer: float = 0.01      # rad
    min_speed: float = 10.0      # m/s
    dwell: int = 10              # scans


class CalibrationFilter:
    """Recursive two-vector alignment of a RADAR rotation.

    During straight driving the body velocity lies along +x, so the
    body-frame direction of the measured sensor velocity should be the
    forward axis. Each accepted scan computes the minimal geodesic rotation
    taking that direction onto [1, 0, 0] and applies a fraction ``weight``
    of it to the extrinsic rotation (spherical interpolation toward the
    full correction). The step axis is always orthogonal to the forward
    axis, so the roll of the sensor about body x is never altered; only
    yaw and pitch are observable.

    One filter instance per sensor; not thread-safe.
    """

    def __init__(self, weight: float = 0.08,
                 gates: CalibrationGates | None = None):
        if not 0.0 < weight <= 1.0:
            raise ValueError("smoothing weight must lie in (0, 1]")
        self.weight = weight
        self.gates = gates if gates is not None else CalibrationGates()
        self.accumulated = np.eye(3)
        self.samples = 0
        self.streak = 0      # consecutive gate-passing scans

    @property
    def accumulated_angle(self) -> float:
        """Total correction applied so far, radians."""
        return rotations.rotation_angle(self.accumulated)


@dataclass(frozen=True)
class CalibrationUpdate:
    status: str                  # "updated" | "gate_closed" | "antipodal"
    extrinsics: RadarExtrinsics  # corrected when updated, input otherwise
    step_angle: float            # applied step, radians


def calibration_update(filt: CalibrationFilter,
                       v_radar: np.ndarray,
                       ext: RadarExtrinsics,
                       yaw_rate: float,
                       steer: float,
                       speed: float | None = None) -> CalibrationUpdate:
    """One calibration step from a sensor-frame ego-velocity estimate.

    ``yaw_rate`` and ``steer`` are the gating signals (measured values are
    fine; calibration only needs them near zero). ``speed`` defaults to
    the magnitude of ``v_radar``. When any gate fails the filter and
    extrinsics are returned unchanged.
    """
    v_radar = np.asarray(v_radar, dtype=float)
    norm = float(np.linalg.norm(v_radar))
    if speed is None:
        speed = norm
    gates = filt.gates
    if (abs(yaw_rate) >= gates.max_yaw_rate or abs(steer) >= gates.max_steer
            or speed <= gates.min_speed or norm <= 0.0):
        filt.streak = 0
        return CalibrationUpdate("gate_closed", ext, 0.0)
    filt.streak += 1
    if filt.streak < gates.dwell:
        return CalibrationUpdate("gate_closed", ext, 0.0)

    u = ext.rotation @ (v_radar / norm)
    cos_angle = float(u @ FORWARD)
    if cos_angle < -1.0 + 1e-9:
        return CalibrationUpdate("antipodal", ext, 0.0)

    axis = np.cross(u, FORWARD)
    sin_angle = float(np.linalg.norm(axis))
    filt.samples += 1
    if sin_angle < 1e-15:
        return CalibrationUpdate("updated", ext, 0.0)

    angle = float(np.arctan2(sin_angle, cos_angle))
    step = rotations.axis_angle(axis / sin_angle, filt.weight * angle)
    filt.accumulated = step @ filt.accumulated
    corrected = rotations.orthonormalize(step @ ext.rotation)
    new_ext = RadarExtrinsics(corrected, ext.translation)
    return CalibrationUpdate("updated", new_ext, filt.weight * angle)
