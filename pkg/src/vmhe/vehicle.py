"""Vehicle geometry, tricycle kinematics, lateral tire model and process dynamics.

Frame convention is ISO body-fixed: x forward, y left, z up. Positive
steering angle is a left steer, positive yaw rate is counterclockwise seen
from above. All quantities are SI (m, s, rad, N, kg).

The estimator state vector has 13 entries, laid out as in ``STATE_NAMES``:
body velocities and accelerations, yaw rate, IMU biases, rear wheel speeds,
total rear longitudinal force, its left/right split coefficient and the
differential transfer moment. The last five are random-walk states: their
nominal time derivative is zero and they move only through process noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LowSpeedDomain, StepTooLarge

STATE_NAMES = (
    "v_x", "v_y", "a_x", "a_y", "r",
    "b_x", "b_y", "b_r",
    "w_rl", "w_rr", "fx_r", "gamma", "dm",
)
STATE_DIM = len(STATE_NAMES)

(IX_VX, IX_VY, IX_AX, IX_AY, IX_R,
 IX_BX, IX_BY, IX_BR,
 IX_WRL, IX_WRR, IX_FXR, IX_GAMMA, IX_DM) = range(STATE_DIM)

PARAM_NAMES = ("b", "c", "d", "e", "s_h", "s_v")
PARAM_DIM = 2 * len(PARAM_NAMES)  # front axle then rear axle

#: Longitudinal speed floor below which slip angles are undefined and
#: tire-model residuals are dropped from the estimation cost.
V_X_MIN = 3.0

#: Largest admissible integration step for the fixed-step integrator.
DT_MAX = 0.05


@dataclass(frozen=True)
class VehicleParams:
    """Geometry and inertia of the vehicle.

    l_f / l_r are the distances from the center of gravity to the front and
    rear axles, t_r the rear track width. r_e_* are effective rolling radii;
    the front radius defaults to the mean of the rear ones and is used only
    for free-rolling wheel-speed channels and rolling-resistance terms.
    """

    l_f: float
    l_r: float
    t_r: float
    m: float
    i_z: float
    i_w: float
    r_e_rl: float
    r_e_rr: float
    r_e_f: float = 0.0
    g: float = 9.81

    def __post_init__(self):
        if self.r_e_f == 0.0:
            object.__setattr__(self, "r_e_f", 0.5 * (self.r_e_rl + self.r_e_rr))
        for name in ("l_f", "l_r", "t_r", "m", "i_z", "i_w",
                     "r_e_rl", "r_e_rr", "r_e_f", "g"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"VehicleParams.{name} must be strictly positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


def static_axle_loads(geom: VehicleParams) -> tuple[float, float]:
    """Static (front_axle, rear_axle) vertical loads from geometry alone."""
    total = geom.m * geom.g
    return total * geom.l_r / geom.wheelbase, total * geom.l_f / geom.wheelbase


@dataclass(frozen=True)
class VehicleCoreState:
    """One estimator state node. See module docstring for the layout.

    The split coefficient ``gamma`` maps the total rear force to per-wheel
    forces as fx_rl = gamma * fx_r, fx_rr = (1 - gamma) * fx_r. Constraints
    on gamma and dm are enforced by the estimator, not the constructor.
    """

    v_x: float = 0.0
    v_y: float = 0.0
    a_x: float = 0.0
    a_y: float = 0.0
    r: float = 0.0
    b_x: float = 0.0
    b_y: float = 0.0
    b_r: float = 0.0
    w_rl: float = 0.0
    w_rr: float = 0.0
    fx_r: float = 0.0
    gamma: float = 0.5
    dm: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES])

    @staticmethod
    def from_array(x: np.ndarray) -> "VehicleCoreState":
        return VehicleCoreState(**{n: float(x[i]) for i, n in enumerate(STATE_NAMES)})

    def wheel_forces(self) -> tuple[float, float]:
        """(fx_rl, fx_rr) from the gamma split; sums to fx_r exactly."""
        return self.gamma * self.fx_r, (1.0 - self.gamma) * self.fx_r


@dataclass(frozen=True)
class PacejkaAxleParams:
    """Macro-parameters of the lateral tire curve for one axle.

    The peak factor d and vertical shift s_v are normalized per unit
    vertical load; the model output scales the whole curve by the axle
    load, so identified values stay meaningful under load transfer.
    """

    b: float
    c: float
    d: float
    e: float
    s_h: float = 0.0
    s_v: float = 0.0

    def __post_init__(self):
        if self.b <= 0.0:
            raise ValueError("stiffness factor b must be positive")
        if not 0.0 < self.c <= 3.0:
            raise ValueError("shape factor c must lie in (0, 3]")
        if self.d <= 0.0:
            raise ValueError("peak factor d must be positive")
        if self.e > 1.0:
            raise ValueError("curvature factor e must be <= 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.b, self.c, self.d, self.e, self.s_h, self.s_v])

    @staticmethod
    def from_array(p: np.ndarray) -> "PacejkaAxleParams":
        return PacejkaAxleParams(*(float(v) for v in p))


# Default per-entry box for one axle, order (b, c, d, e, s_h, s_v).
DEFAULT_PARAM_LOWER = np.array([2.0, 0.8, 0.3, -2.0, -0.05, -0.2])
DEFAULT_PARAM_UPPER = np.array([25.0, 2.5, 3.5, 1.0, 0.05, 0.2])


@dataclass(frozen=True)
class ParamVector:
    """Front and rear axle tire parameters with an element-wise box."""

    front: PacejkaAxleParams
    rear: PacejkaAxleParams
    lower: np.ndarray = field(default_factory=lambda: np.tile(DEFAULT_PARAM_LOWER, 2))
    upper: np.ndarray = field(default_factory=lambda: np.tile(DEFAULT_PARAM_UPPER, 2))

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != (PARAM_DIM,) or upper.shape != (PARAM_DIM,):
            raise ValueError(f"bounds must have shape ({PARAM_DIM},)")
        if np.any(lower >= upper):
            raise ValueError("lower bounds must be strictly below upper bounds")
        p = self.as_array()
        if np.any(p < lower) or np.any(p > upper):
            raise ValueError("tire parameters violate their configured bounds")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.front.as_array(), self.rear.as_array()])

    def with_values(self, p: np.ndarray) -> "ParamVector":
        return ParamVector(
            front=PacejkaAxleParams.from_array(p[:6]),
            rear=PacejkaAxleParams.from_array(p[6:]),
            lower=self.lower,
            upper=self.upper,
        )


@dataclass(frozen=True)
class ProcessInputs:
    """Exogenous inputs to the process dynamics over one interval.

    Axle lateral forces are supplied by the caller (computed from the
    current tire parameters by the estimator, or by the plant model in the
    simulator) and held constant across the integration step.
    """

    t_eng: float = 0.0
    t_brk_rl: float = 0.0
    t_brk_rr: float = 0.0
    delta: float = 0.0
    f_y_f: float = 0.0
    f_y_r: float = 0.0


# ---------------------------------------------------------------------------
# Kinematics


def slip_angles(state: VehicleCoreState, delta: float, geom: VehicleParams,
                v_x_min: float = V_X_MIN) -> tuple[float, float]:
    """Front and rear axle slip angles for the single-track kinematics.

    Raises LowSpeedDomain below the speed floor, where the angles are
    ill-defined.
    """
    if state.v_x <= v_x_min:
        raise LowSpeedDomain(f"v_x={state.v_x:.2f} m/s <= floor {v_x_min:.2f} m/s")
    a_f = delta - math.atan2(state.v_y + geom.l_f * state.r, state.v_x)
    a_r = -math.atan2(state.v_y - geom.l_r * state.r, state.v_x)
    return a_f, a_r


def slip_angles_raw(v_x, v_y, r, delta, geom: VehicleParams):
    """Array-friendly slip angles without the low-speed guard."""
    a_f = delta - np.arctan2(v_y + geom.l_f * r, v_x)
    a_r = -np.arctan2(v_y - geom.l_r * r, v_x)
    return a_f, a_r


def slip_angle_grads(v_x, v_y, r, geom: VehicleParams):
    """Partial derivatives of (alpha_f, alpha_r) w.r.t. (v_x, v_y, r).

    Returns two stacked arrays of shape (..., 3).
    """
    w_f = v_y + geom.l_f * r
    w_r = v_y - geom.l_r * r
    q_f = v_x * v_x + w_f * w_f
    q_r = v_x * v_x + w_r * w_r
    d_af = np.stack([w_f / q_f, -v_x / q_f, -geom.l_f * v_x / q_f], axis=-1)
    d_ar = np.stack([w_r / q_r, -v_x / q_r, geom.l_r * v_x / q_r], axis=-1)
    return d_af, d_ar


def body_slip_angle(state: VehicleCoreState, v_x_min: float = V_X_MIN) -> float:
    """Angle between the velocity vector and the body x axis."""
    if state.v_x <= v_x_min:
        raise LowSpeedDomain(f"v_x={state.v_x:.2f} m/s <= floor {v_x_min:.2f} m/s")
    return math.atan2(state.v_y, state.v_x)


# ---------------------------------------------------------------------------
# Lateral tire model


def pacejka_lateral_force(alpha, p: PacejkaAxleParams, f_z):
    """Lateral axle force from slip angle and vertical load.

    F = F_z * (d * sin(c * atan(b*x - e*(b*x - atan(b*x)))) + s_v) with
    x = alpha + s_h. Accepts scalars or arrays for alpha / f_z.
    """
    x = alpha + p.s_h
    bx = p.b * x
    u = bx - p.e * (bx - np.arctan(bx))
    return f_z * (p.d * np.sin(p.c * np.arctan(u)) + p.s_v)


def pacejka_force_grads(alpha, p: np.ndarray, f_z):
    """Force plus derivatives w.r.t. slip angle and the 6 parameters.

    ``p`` is the parameter array (b, c, d, e, s_h, s_v). Returns
    (force, d_alpha, d_params) where d_params has trailing dimension 6.
    Broadcasts over alpha / f_z.
    """
    b, c, d, e, s_h, s_v = p
    x = np.asarray(alpha) + s_h
    bx = b * x
    atan_bx = np.arctan(bx)
    u = bx - e * (bx - atan_bx)
    atan_u = np.arctan(u)
    sin_cu = np.sin(c * atan_u)
    cos_cu = np.cos(c * atan_u)
    force = f_z * (d * sin_cu + s_v)

    one_over_1pu2 = 1.0 / (1.0 + u * u)
    one_over_1pbx2 = 1.0 / (1.0 + bx * bx)
    # common factor dF/du
    df_du = f_z * d * cos_cu * c * one_over_1pu2
    du_dx = b * (1.0 - e * (1.0 - one_over_1pbx2))
    d_alpha = df_du * du_dx

    du_db = x * (1.0 - e * (1.0 - one_over_1pbx2))
    d_b = df_du * du_db
    d_c = f_z * d * cos_cu * atan_u
    d_d = f_z * sin_cu
    d_e = df_du * (-(bx - atan_bx))
    d_sh = d_alpha
    d_sv = f_z * np.ones_like(x)
    d_params = np.stack([d_b, d_c, d_d, d_e, d_sh, d_sv], axis=-1)
    return force, d_alpha, d_params


# ---------------------------------------------------------------------------
# Process dynamics


def process_derivative(state: VehicleCoreState, aux: ProcessInputs,
                       geom: VehicleParams) -> np.ndarray:
    """Continuous-time state derivative, in STATE_NAMES order.

    Velocities integrate the acceleration states with yaw coupling; the yaw
    rate follows the moment balance of the axle forces and the left/right
    longitudinal split; driven wheels follow the angular-momentum balance of
    engine, differential-transfer and brake torques against the tire force.
    Accelerations, biases, total rear force, split coefficient and transfer
    moment are random walks (zero nominal derivative).
    """
    x = state.as_array()
    return _xdot_array(x[None, :],
                       np.array([aux.f_y_f]), np.array([aux.f_y_r]),
                       np.array([aux.t_eng]), np.array([aux.t_brk_rl]),
                       np.array([aux.t_brk_rr]), np.array([aux.delta]),
                       geom)[0]


def _xdot_array(x, f_y_f, f_y_r, t_eng, t_brk_rl, t_brk_rr, delta,
                geom: VehicleParams):
    """Vectorized state derivative for a batch of states, shape (K, 13)."""
    out = np.zeros_like(x)
    v_x, v_y, r = x[:, IX_VX], x[:, IX_VY], x[:, IX_R]
    fx_r, gamma, dm = x[:, IX_FXR], x[:, IX_GAMMA], x[:, IX_DM]
    fx_rl = gamma * fx_r
    fx_rr = (1.0 - gamma) * fx_r
    out[:, IX_VX] = x[:, IX_AX] + r * v_y
    out[:, IX_VY] = x[:, IX_AY] - r * v_x
    out[:, IX_R] = (f_y_f * np.cos(delta) * geom.l_f - f_y_r * geom.l_r
                    + 0.5 * (fx_rr - fx_rl) * geom.t_r) / geom.i_z
    out[:, IX_WRL] = (0.5 * (t_eng - dm) - t_brk_rl - fx_rl * geom.r_e_rl) / geom.i_w
    out[:, IX_WRR] = (0.5 * (t_eng + dm) - t_brk_rr - fx_rr * geom.r_e_rr) / geom.i_w
    return out


def _xdot_jacobian_array(x, delta, geom: VehicleParams):
    """d(xdot)/d(state) at fixed axle lateral forces, shape (K, 13, 13)."""
    k = x.shape[0]
    jac = np.zeros((k, STATE_DIM, STATE_DIM))
    v_x, v_y, r = x[:, IX_VX], x[:, IX_VY], x[:, IX_R]
    fx_r, gamma = x[:, IX_FXR], x[:, IX_GAMMA]
    jac[:, IX_VX, IX_AX] = 1.0
    jac[:, IX_VX, IX_R] = v_y
    jac[:, IX_VX, IX_VY] = r
    jac[:, IX_VY, IX_AY] = 1.0
    jac[:, IX_VY, IX_R] = -v_x
    jac[:, IX_VY, IX_VX] = -r
    # yaw moment split term: 0.5 * (1 - 2*gamma) * fx_r * t_r / i_z
    jac[:, IX_R, IX_FXR] = 0.5 * (1.0 - 2.0 * gamma) * geom.t_r / geom.i_z
    jac[:, IX_R, IX_GAMMA] = -fx_r * geom.t_r / geom.i_z
    jac[:, IX_WRL, IX_FXR] = -gamma * geom.r_e_rl / geom.i_w
    jac[:, IX_WRL, IX_GAMMA] = -fx_r * geom.r_e_rl / geom.i_w
    jac[:, IX_WRL, IX_DM] = -0.5 / geom.i_w
    jac[:, IX_WRR, IX_FXR] = -(1.0 - gamma) * geom.r_e_rr / geom.i_w
    jac[:, IX_WRR, IX_GAMMA] = fx_r * geom.r_e_rr / geom.i_w
    jac[:, IX_WRR, IX_DM] = 0.5 / geom.i_w
    return jac


def _xdot_force_jacobian(delta, geom: VehicleParams, k: int):
    """d(xdot)/d(f_y_f, f_y_r); only the yaw-rate row is non-zero."""
    jac = np.zeros((k, STATE_DIM, 2))
    jac[:, IX_R, 0] = np.cos(delta) * geom.l_f / geom.i_z
    jac[:, IX_R, 1] = -geom.l_r / geom.i_z
    return jac


def discretize_step(state: VehicleCoreState, aux: ProcessInputs,
                    geom: VehicleParams, dt: float,
                    dt_max: float = DT_MAX) -> VehicleCoreState:
    """One explicit RK4 step of the process dynamics.

    Inputs (including the lateral forces) are held constant across the
    step; random-walk states pass through unchanged by construction.
    """
    if not 0.0 < dt <= dt_max:
        raise StepTooLarge(f"dt={dt} outside (0, {dt_max}]")
    x = state.as_array()[None, :]
    x_next = rk4_step_array(
        x, np.array([aux.f_y_f]), np.array([aux.f_y_r]), np.array([aux.t_eng]),
        np.array([aux.t_brk_rl]), np.array([aux.t_brk_rr]), np.array([aux.delta]),
        geom, dt)
    return VehicleCoreState.from_array(x_next[0])


def rk4_step_array(x, f_y_f, f_y_r, t_eng, t_brk_rl, t_brk_rr, delta,
                   geom: VehicleParams, dt: float):
    """Vectorized RK4 step for a batch of states with fixed inputs."""
    args = (f_y_f, f_y_r, t_eng, t_brk_rl, t_brk_rr, delta, geom)
    k1 = _xdot_array(x, *args)
    k2 = _xdot_array(x + 0.5 * dt * k1, *args)
    k3 = _xdot_array(x + 0.5 * dt * k2, *args)
    k4 = _xdot_array(x + dt * k3, *args)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_jacobians(x, f_y_f, f_y_r, t_eng, t_brk_rl, t_brk_rr, delta,
                            geom: VehicleParams, dt: float):
    """RK4 step plus its Jacobians w.r.t. the start state and the forces.

    Returns (x_next, d_state (K,13,13), d_forces (K,13,2)). The force
    Jacobian treats (f_y_f, f_y_r) as constants over the step, matching
    ``rk4_step_array``; callers compose it with the force model's own
    state/parameter gradients.
    """
    args = (f_y_f, f_y_r, t_eng, t_brk_rl, t_brk_rr, delta, geom)
    k = x.shape[0]
    eye = np.broadcast_to(np.eye(STATE_DIM), (k, STATE_DIM, STATE_DIM))
    gf = _xdot_force_jacobian(delta, geom, k)

    k1 = _xdot_array(x, *args)
    a1 = _xdot_jacobian_array(x, delta, geom)
    b1 = gf

    z2 = x + 0.5 * dt * k1
    k2 = _xdot_array(z2, *args)
    g2 = _xdot_jacobian_array(z2, delta, geom)
    a2 = g2 @ (eye + 0.5 * dt * a1)
    b2 = gf + 0.5 * dt * (g2 @ b1)

    z3 = x + 0.5 * dt * k2
    k3 = _xdot_array(z3, *args)
    g3 = _xdot_jacobian_array(z3, delta, geom)
    a3 = g3 @ (eye + 0.5 * dt * a2)
    b3 = gf + 0.5 * dt * (g3 @ b2)

    z4 = x + dt * k3
    k4 = _xdot_array(z4, *args)
    g4 = _xdot_jacobian_array(z4, delta, geom)
    a4 = g4 @ (eye + dt * a3)
    b4 = gf + dt * (g4 @ b3)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    d_state = eye + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    d_forces = (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return x_next, d_state, d_forces


def imu_measurement_model(state: VehicleCoreState) -> tuple[float, float, float]:
    """Predicted IMU reading: bias-corrupted accelerations and yaw rate."""
    return state.a_x + state.b_x, state.a_y + state.b_y, state.r + state.b_r
