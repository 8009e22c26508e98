"""Residual evaluation and normal-equation assembly for the window solve.

Residual groups, in the order they appear in the stacked vector:

  prior           whitened deviation of node 0 from the shifted prior
  param_prior     whitened deviation of the tire parameters from their prior
  process         x_k - f(x_{k-1}, u_{k-1}) per interval, f being one RK4
                  step with axle forces evaluated at the interval start
  imu             accelerometer/gyro rows, bias-corrupted direct observation
  wheel_speed     direct observation of the rear wheel speeds
  doppler         one row per RADAR detection, linear in (v_x, v_y, r)
  rear_force      derived total rear-axle force against the fx_r state
  yaw_moment      gyro-differenced yaw acceleration against the moment balance
  lateral_balance axle lateral forces against the a_y state

Tire-model rows and the force terms inside the process model are dropped
at nodes below the speed floor, where slip angles are undefined.

Everything here is pure with respect to the window: ``prepare`` captures
the measurement content once per solve, ``assemble`` evaluates cost and
(optionally) the block normal equations at an iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import longitudinal
from .errors import ConfigError
from .longitudinal import BRAKING, rolling_resistance
from .vehicle import (
    IX_AX, IX_AY, IX_BR, IX_BX, IX_BY, IX_DM, IX_FXR, IX_GAMMA, IX_R,
    IX_VX, IX_VY, IX_WRL, IX_WRR, PARAM_DIM, STATE_DIM,
    pacejka_force_grads, rk4_step_array, rk4_step_with_jacobians,
    slip_angle_grads, slip_angles_raw,
)

GROUP_NAMES = ("prior", "param_prior", "process", "imu", "wheel_speed",
               "doppler", "rear_force", "yaw_moment", "lateral_balance")


@dataclass
class ResolvedInputs:
    """Per-node exogenous inputs, forward-filled across buckets."""

    delta: np.ndarray           # (K,)
    t_eng: np.ndarray           # (K,)
    t_brk_rl: np.ndarray        # (K,)
    t_brk_rr: np.ndarray        # (K,)
    fz_wheels: np.ndarray       # (K, 4)
    fz_front_axle: np.ndarray   # (K,)
    fz_rear_axle: np.ndarray    # (K,)
    rolling_const: np.ndarray   # (K,) summed rolling resistance from channels
    slope_force: np.ndarray     # (K,) m g sin(slope)
    mode: list[str]             # drive mode per node
    loads_measured: bool


def resolve_inputs(window, models) -> ResolvedInputs:
    """Forward-fill actuation and measured channels onto the node grid.

    Cached per window content version; solve and the following advance
    share one resolution.
    """
    cached = getattr(window, "_inputs_cache", None)
    if cached is not None and cached[0] == (window.input_version, id(models)):
        return cached[1]
    geom = models.geom
    k = window.config.n + 1
    carry = window.carry
    fz_f_static, fz_r_static = _static_wheel_loads(geom)

    delta = np.empty(k)
    t_eng = np.empty(k)
    t_brk_rl = np.empty(k)
    t_brk_rr = np.empty(k)
    fz = np.empty((k, 4))
    rolling = np.empty(k)
    slope_f = np.empty(k)
    mode: list[str] = []

    cur = dict(carry)
    loads_measured = carry["loads"] is not None
    radii = (geom.r_e_f, geom.r_e_f, geom.r_e_rl, geom.r_e_rr)
    for i, bucket in enumerate(window.buckets):
        if bucket.steer is not None:
            cur["delta"] = bucket.steer
        if bucket.throttle is not None:
            cur["throttle"] = bucket.throttle.throttle
            cur["engine_speed"] = bucket.throttle.engine_speed
        if bucket.brakes is not None:
            cur["p_front"] = bucket.brakes.p_front
            cur["p_rear"] = bucket.brakes.p_rear
        if bucket.loads is not None:
            cur["loads"] = bucket.loads
            loads_measured = True
        if bucket.slope is not None:
            cur["slope"] = bucket.slope
        if bucket.wheel_aux is not None:
            cur["wheel_aux"] = bucket.wheel_aux

        delta[i] = cur["delta"]
        torque = models.engine_map(cur["engine_speed"], cur["throttle"])
        t_eng[i] = torque
        t_brk_rl[i] = longitudinal.brake_torque(cur["p_rear"], models.brakes)
        t_brk_rr[i] = t_brk_rl[i]
        loads = cur["loads"]
        if loads is None:
            loads = (0.5 * fz_f_static, 0.5 * fz_f_static,
                     0.5 * fz_r_static, 0.5 * fz_r_static)
        fz[i] = loads
        slope_f[i] = geom.m * geom.g * math.sin(cur["slope"])
        mode.append(longitudinal.classify_drive_mode(
            cur["throttle"], (cur["p_front"], cur["p_rear"]), torque))

        aux = cur["wheel_aux"]
        total = 0.0
        if aux is not None:
            omegas = (aux.w_fl, aux.w_fr, aux.w_rl, aux.w_rr)
            for f_z, omega, r_e in zip(loads, omegas, radii):
                if math.isfinite(omega):
                    force, ok = rolling_resistance(f_z, omega, r_e, models.loss)
                    if ok:
                        total += force
        rolling[i] = total

    result = ResolvedInputs(
        delta=delta, t_eng=t_eng, t_brk_rl=t_brk_rl, t_brk_rr=t_brk_rr,
        fz_wheels=fz,
        fz_front_axle=fz[:, 0] + fz[:, 1],
        fz_rear_axle=fz[:, 2] + fz[:, 3],
        rolling_const=rolling, slope_force=slope_f, mode=mode,
        loads_measured=loads_measured,
    )
    window._inputs_cache = ((window.input_version, id(models)), result)
    return result


def _static_wheel_loads(geom):
    total = geom.m * geom.g
    return (total * geom.l_r / geom.wheelbase,
            total * geom.l_f / geom.wheelbase)


def propagate_terminal(x_last: np.ndarray, params, inputs: ResolvedInputs,
                       models, cfg) -> np.ndarray:
    """Seed for a freshly appended node: one step from the old terminal."""
    x = x_last[None, :]
    f_y_f, f_y_r = 0.0, 0.0
    if x_last[IX_VX] > cfg.v_x_min:
        a_f, a_r = slip_angles_raw(x_last[IX_VX], x_last[IX_VY], x_last[IX_R],
                                   inputs.delta[-1], models.geom)
        f_y_f = float(pacejka_force_grads(a_f, params.as_array()[:6],
                                          inputs.fz_front_axle[-1])[0])
        f_y_r = float(pacejka_force_grads(a_r, params.as_array()[6:],
                                          inputs.fz_rear_axle[-1])[0])
    return rk4_step_array(
        x, np.array([f_y_f]), np.array([f_y_r]),
        np.array([inputs.t_eng[-1]]), np.array([inputs.t_brk_rl[-1]]),
        np.array([inputs.t_brk_rr[-1]]), np.array([inputs.delta[-1]]),
        models.geom, cfg.dt)[0]


# ---------------------------------------------------------------------------
# Per-solve preparation


@dataclass
class Prepared:
    """Window content frozen for one solve."""

    cfg: object
    geom: object
    models: object
    inputs: ResolvedInputs
    prior_state: np.ndarray
    prior_params: np.ndarray
    imu_node: np.ndarray        # (Mi,)
    imu_meas: np.ndarray        # (Mi, 3)
    wheel_node: np.ndarray      # (Mw,)
    wheel_meas: np.ndarray      # (Mw, 2)
    dop_node: np.ndarray        # (Md,)
    dop_coef: np.ndarray        # (Md, 3) coefficients on (v_x, v_y, r)
    dop_meas: np.ndarray        # (Md,)
    ym_node: np.ndarray         # (My,) interval start node
    ym_rdot: np.ndarray         # (My,) gyro-differenced yaw acceleration


def prepare(window, models) -> Prepared:
    cfg = window.config
    inputs = resolve_inputs(window, models)

    imu_node, imu_meas = [], []
    wheel_node, wheel_meas = [], []
    dop_node, dop_coef, dop_meas = [], [], []
    for k, bucket in enumerate(window.buckets):
        for fr in bucket.imu:
            imu_node.append(k)
            imu_meas.append((fr.a_x, fr.a_y, fr.r))
        for fr in bucket.wheels:
            wheel_node.append(k)
            wheel_meas.append((fr.w_rl, fr.w_rr))
        for sensor_id, bearings, dopplers in bucket.scan_arrays:
            try:
                ext = models.extrinsics[sensor_id]
            except KeyError:
                raise ConfigError(
                    f"no extrinsics configured for sensor {sensor_id!r}")
            c_body = bearings @ ext.rotation.T
            t_x, t_y = ext.translation[0], ext.translation[1]
            lever = c_body[:, 1] * t_x - c_body[:, 0] * t_y
            coef = np.column_stack([c_body[:, 0], c_body[:, 1], lever])
            dop_node.extend([k] * bearings.shape[0])
            dop_coef.append(coef)
            dop_meas.append(dopplers)

    # gyro-differenced yaw acceleration per interval with IMU at both ends
    ym_node, ym_rdot = [], []
    if cfg.sigma_yaw_moment > 0.0:
        for k in range(cfg.n):
            here, there = window.buckets[k].imu, window.buckets[k + 1].imu
            if here and there:
                ym_node.append(k)
                ym_rdot.append((there[0].r - here[0].r) / cfg.dt)

    return Prepared(
        cfg=cfg, geom=models.geom, models=models, inputs=inputs,
        prior_state=window.prior_state.copy(),
        prior_params=window.prior_params.copy(),
        imu_node=np.array(imu_node, dtype=int),
        imu_meas=np.array(imu_meas, dtype=float).reshape(-1, 3),
        wheel_node=np.array(wheel_node, dtype=int),
        wheel_meas=np.array(wheel_meas, dtype=float).reshape(-1, 2),
        dop_node=np.array(dop_node, dtype=int),
        dop_coef=(np.concatenate(dop_coef, axis=0) if dop_coef
                  else np.zeros((0, 3))),
        dop_meas=(np.concatenate(dop_meas) if dop_meas else np.zeros(0)),
        ym_node=np.array(ym_node, dtype=int),
        ym_rdot=np.array(ym_rdot, dtype=float),
    )


# ---------------------------------------------------------------------------
# Row evaluation


@dataclass
class GroupRows:
    """One measurement group: single-node rows with dense state Jacobians."""

    name: str
    node: np.ndarray           # (M,)
    resid: np.ndarray          # (M,) whitened
    jx: np.ndarray | None      # (M, 13) d resid / d state(node)
    jp: np.ndarray | None      # (M, 12) d resid / d params


@dataclass
class Evaluated:
    prior_resid: np.ndarray
    prior_w: np.ndarray
    param_resid: np.ndarray
    param_w: np.ndarray
    process_resid: np.ndarray      # (N, 13) whitened
    process_w: np.ndarray          # (13,)
    process_a: np.ndarray | None   # (N, 13, 13) d f / d x_{k-1}
    process_b: np.ndarray | None   # (N, 13, 12) d f / d params
    groups: list[GroupRows]


class _TireEval:
    """Axle forces and gradients at every node, zeroed below the speed floor."""

    def __init__(self, x, p, prep, with_jac):
        inputs = prep.inputs
        geom = prep.geom
        v_x, v_y, r = x[:, IX_VX], x[:, IX_VY], x[:, IX_R]
        self.active = v_x > prep.cfg.v_x_min
        a_f, a_r = slip_angles_raw(v_x, v_y, r, inputs.delta, geom)
        f_f, df_f, dp_f = pacejka_force_grads(a_f, p[:6], inputs.fz_front_axle)
        f_r, df_r, dp_r = pacejka_force_grads(a_r, p[6:], inputs.fz_rear_axle)
        off = ~self.active
        for arr in (f_f, f_r, df_f, df_r):
            arr[off] = 0.0
        dp_f[off] = 0.0
        dp_r[off] = 0.0
        self.alpha_f, self.alpha_r = a_f, a_r
        self.f_f, self.f_r = f_f, f_r
        self.dp_f, self.dp_r = dp_f, dp_r
        k = x.shape[0]
        if with_jac:
            d_af, d_ar = slip_angle_grads(v_x, v_y, r, geom)
            d_af[off] = 0.0
            d_ar[off] = 0.0
            self.d_af, self.d_ar = d_af, d_ar
            # force gradients w.r.t. (v_x, v_y, r)
            self.df_f_state = df_f[:, None] * d_af
            self.df_r_state = df_r[:, None] * d_ar
        else:
            self.d_af = self.d_ar = None
            self.df_f_state = self.df_r_state = None

    def state_jacobian(self, rows_f, rows_r, sel):
        """rows_f * dF_f/d(vx,vy,r) + rows_r * dF_r/d(...) into (M, 13)."""
        out = np.zeros((sel.size, STATE_DIM))
        out[:, [IX_VX, IX_VY, IX_R]] = (
            rows_f[:, None] * self.df_f_state[sel]
            + rows_r[:, None] * self.df_r_state[sel])
        return out

    def param_jacobian(self, rows_f, rows_r, sel):
        out = np.zeros((sel.size, PARAM_DIM))
        out[:, :6] = rows_f[:, None] * self.dp_f[sel]
        out[:, 6:] = rows_r[:, None] * self.dp_r[sel]
        return out


def _evaluate(x: np.ndarray, p: np.ndarray, prep: Prepared,
              with_jac: bool) -> Evaluated:
    cfg = prep.cfg
    geom = prep.geom
    inputs = prep.inputs
    tire = _TireEval(x, p, prep, with_jac)

    prior_w = 1.0 / cfg.sigma_prior
    param_w = 1.0 / cfg.sigma_param_prior
    prior_resid = prior_w * (x[0] - prep.prior_state)
    param_resid = param_w * (p - prep.prior_params)

    # process intervals, forces frozen at the interval start
    proc_w = 1.0 / cfg.sigma_process
    xa = x[:-1]
    args = (tire.f_f[:-1], tire.f_r[:-1], inputs.t_eng[:-1],
            inputs.t_brk_rl[:-1], inputs.t_brk_rr[:-1], inputs.delta[:-1])
    if with_jac:
        x_pred, a_state, b_forces = rk4_step_with_jacobians(
            xa, *args, geom, cfg.dt)
        n = xa.shape[0]
        df_dx = np.zeros((n, 2, STATE_DIM))
        df_dx[:, 0, [IX_VX, IX_VY, IX_R]] = tire.df_f_state[:-1]
        df_dx[:, 1, [IX_VX, IX_VY, IX_R]] = tire.df_r_state[:-1]
        df_dp = np.zeros((n, 2, PARAM_DIM))
        df_dp[:, 0, :6] = tire.dp_f[:-1]
        df_dp[:, 1, 6:] = tire.dp_r[:-1]
        process_a = a_state + b_forces @ df_dx
        process_b = b_forces @ df_dp
    else:
        x_pred = rk4_step_array(xa, *args, geom, cfg.dt)
        process_a = process_b = None
    process_resid = proc_w * (x[1:] - x_pred)

    groups: list[GroupRows] = []
    groups.append(_imu_rows(x, prep, with_jac))
    groups.append(_wheel_rows(x, prep, with_jac))
    groups.append(_doppler_rows(x, prep, with_jac))
    groups.append(_rear_force_rows(x, prep, tire, with_jac))
    groups.append(_yaw_moment_rows(x, prep, tire, with_jac))
    groups.append(_lateral_balance_rows(x, prep, tire, with_jac))

    return Evaluated(prior_resid, prior_w, param_resid, param_w,
                     process_resid, proc_w, process_a, process_b, groups)


def _imu_rows(x, prep, with_jac) -> GroupRows:
    cfg = prep.cfg
    node = prep.imu_node
    m = node.size
    w = np.array([1.0 / cfg.sigma_imu_accel, 1.0 / cfg.sigma_imu_accel,
                  1.0 / cfg.sigma_imu_gyro])
    pred = np.column_stack([
        x[node, IX_AX] + x[node, IX_BX],
        x[node, IX_AY] + x[node, IX_BY],
        x[node, IX_R] + x[node, IX_BR],
    ]) if m else np.zeros((0, 3))
    resid = ((prep.imu_meas - pred) * w).ravel()
    node3 = np.repeat(node, 3)
    jx = None
    if with_jac:
        jx = np.zeros((3 * m, STATE_DIM))
        rows = np.arange(m)
        for offset, (ix_a, ix_b) in enumerate(((IX_AX, IX_BX), (IX_AY, IX_BY),
                                               (IX_R, IX_BR))):
            jx[3 * rows + offset, ix_a] = -w[offset]
            jx[3 * rows + offset, ix_b] = -w[offset]
    return GroupRows("imu", node3, resid, jx, None)


def _wheel_rows(x, prep, with_jac) -> GroupRows:
    cfg = prep.cfg
    node = prep.wheel_node
    m = node.size
    w = 1.0 / cfg.sigma_wheel_speed
    pred = x[node][:, [IX_WRL, IX_WRR]] if m else np.zeros((0, 2))
    resid = ((prep.wheel_meas - pred) * w).ravel()
    node2 = np.repeat(node, 2)
    jx = None
    if with_jac:
        jx = np.zeros((2 * m, STATE_DIM))
        rows = np.arange(m)
        jx[2 * rows, IX_WRL] = -w
        jx[2 * rows + 1, IX_WRR] = -w
    return GroupRows("wheel_speed", node2, resid, jx, None)


def _doppler_rows(x, prep, with_jac) -> GroupRows:
    cfg = prep.cfg
    node = prep.dop_node
    w = 1.0 / cfg.sigma_doppler
    if node.size:
        states = x[node][:, [IX_VX, IX_VY, IX_R]]
        pred = -np.einsum("mi,mi->m", prep.dop_coef, states)
        resid = w * (prep.dop_meas - pred)
    else:
        resid = np.zeros(0)
    jx = None
    if with_jac:
        jx = np.zeros((node.size, STATE_DIM))
        jx[:, [IX_VX, IX_VY, IX_R]] = w * prep.dop_coef
    return GroupRows("doppler", node, resid, jx, None)


def _rear_force_rows(x, prep, tire, with_jac) -> GroupRows:
    """Derived rear-axle force measurement against the fx_r state.

    Uses the estimated acceleration and tire states plus the measured
    rolling/slope channels; under braking the front axle's brake share is
    removed through the bias coefficient.
    """
    cfg = prep.cfg
    if cfg.sigma_rear_force <= 0.0:
        return GroupRows("rear_force", np.zeros(0, dtype=int), np.zeros(0),
                         np.zeros((0, STATE_DIM)) if with_jac else None,
                         np.zeros((0, PARAM_DIM)) if with_jac else None)
    geom = prep.geom
    models = prep.models
    inputs = prep.inputs
    k = x.shape[0]
    sel = np.arange(k)
    w = 1.0 / cfg.sigma_rear_force

    braking = np.array([mode == BRAKING for mode in inputs.mode])
    m_eq = longitudinal.equivalent_mass(geom, cfg.inertia_wheels)
    scale_a = np.where(braking, (1.0 - models.brakes.bias) * geom.m, m_eq)
    scale_loss = np.where(braking, 1.0 - models.brakes.bias, 1.0)

    drag_coef = 0.5 * models.loss.rho * models.loss.c_x * models.loss.a_front
    v_x = x[:, IX_VX]
    aero = drag_coef * v_x * v_x
    corner = (tire.f_f * np.sin(tire.alpha_f)
              + tire.f_r * np.sin(tire.alpha_r))
    f_loss = aero + inputs.rolling_const + inputs.slope_force + corner
    derived = scale_a * x[:, IX_AX] + scale_loss * f_loss
    resid = w * (derived - x[:, IX_FXR])

    jx = jp = None
    if with_jac:
        sin_f, cos_f = np.sin(tire.alpha_f), np.cos(tire.alpha_f)
        sin_r, cos_r = np.sin(tire.alpha_r), np.cos(tire.alpha_r)
        rows_f = scale_loss * sin_f
        rows_r = scale_loss * sin_r
        jx = tire.state_jacobian(rows_f, rows_r, sel)
        # F cos(alpha) d alpha/dz terms of the cornering loss
        extra = (scale_loss * tire.f_f * cos_f)[:, None] * tire.d_af \
            + (scale_loss * tire.f_r * cos_r)[:, None] * tire.d_ar
        jx[:, [IX_VX, IX_VY, IX_R]] += extra
        jx[:, IX_VX] += scale_loss * 2.0 * drag_coef * v_x
        jx[:, IX_AX] += scale_a
        jx[:, IX_FXR] += -1.0
        jx *= w
        jp = w * tire.param_jacobian(rows_f, rows_r, sel)
    return GroupRows("rear_force", sel, resid, jx, jp)


def _yaw_moment_rows(x, prep, tire, with_jac) -> GroupRows:
    """Gyro-differenced yaw acceleration vs the axle moment balance."""
    cfg = prep.cfg
    geom = prep.geom
    node = prep.ym_node
    active = node[tire.active[node]] if node.size else node
    w = 1.0 / cfg.sigma_yaw_moment if cfg.sigma_yaw_moment > 0.0 else 0.0
    if not active.size or w == 0.0:
        empty = np.zeros((0, STATE_DIM)) if with_jac else None
        emptyp = np.zeros((0, PARAM_DIM)) if with_jac else None
        return GroupRows("yaw_moment", np.zeros(0, dtype=int), np.zeros(0),
                         empty, emptyp)
    rdot_hat = prep.ym_rdot[tire.active[node]]
    cos_d = np.cos(prep.inputs.delta[active])
    gamma = x[active, IX_GAMMA]
    fx_r = x[active, IX_FXR]
    moment = (tire.f_f[active] * cos_d * geom.l_f
              - tire.f_r[active] * geom.l_r
              + 0.5 * (1.0 - 2.0 * gamma) * fx_r * geom.t_r) / geom.i_z
    resid = w * (rdot_hat - moment)
    jx = jp = None
    if with_jac:
        rows_f = -w * cos_d * geom.l_f / geom.i_z
        rows_r = np.full(active.size, w * geom.l_r / geom.i_z)
        jx = tire.state_jacobian(rows_f, rows_r, active)
        jx[:, IX_FXR] += -w * 0.5 * (1.0 - 2.0 * gamma) * geom.t_r / geom.i_z
        jx[:, IX_GAMMA] += w * fx_r * geom.t_r / geom.i_z
        jp = tire.param_jacobian(rows_f, rows_r, active)
    return GroupRows("yaw_moment", active, resid, jx, jp)


def _lateral_balance_rows(x, prep, tire, with_jac) -> GroupRows:
    """Single-track lateral force balance tying the a_y state to the axles.

    Without this row the magnitude of the lateral forces is pinned only in
    yaw transients; steady-state cornering would leave the force scale to
    the parameter prior alone.
    """
    cfg = prep.cfg
    geom = prep.geom
    w = 1.0 / cfg.sigma_lateral_balance if cfg.sigma_lateral_balance > 0.0 else 0.0
    active = np.flatnonzero(tire.active)
    if not active.size or w == 0.0:
        empty = np.zeros((0, STATE_DIM)) if with_jac else None
        emptyp = np.zeros((0, PARAM_DIM)) if with_jac else None
        return GroupRows("lateral_balance", np.zeros(0, dtype=int),
                         np.zeros(0), empty, emptyp)
    cos_d = np.cos(prep.inputs.delta[active])
    pred_ay = (tire.f_f[active] * cos_d + tire.f_r[active]) / geom.m
    resid = w * (pred_ay - x[active, IX_AY])
    jx = jp = None
    if with_jac:
        rows_f = w * cos_d / geom.m
        rows_r = np.full(active.size, w / geom.m)
        jx = tire.state_jacobian(rows_f, rows_r, active)
        jx[:, IX_AY] += -w
        jp = tire.param_jacobian(rows_f, rows_r, active)
    return GroupRows("lateral_balance", active, resid, jx, jp)


# ---------------------------------------------------------------------------
# Assembly


@dataclass
class Bundle:
    cost: float
    group_costs: dict[str, float]
    diag: np.ndarray | None = None      # (K, 13, 13)
    off: np.ndarray | None = None       # (K-1, 13, 13), block (k+1, k)
    cross: np.ndarray | None = None     # (K, 13, 12)
    pmat: np.ndarray | None = None      # (12, 12)
    grad_x: np.ndarray | None = None    # (K, 13)
    grad_p: np.ndarray | None = None    # (12,)


def assemble(x: np.ndarray, p: np.ndarray, prep: Prepared,
             with_jacobian: bool) -> Bundle:
    """Cost and, when requested, Gauss-Newton normal-equation blocks."""
    ev = _evaluate(x, p, prep, with_jacobian)
    k = x.shape[0]

    group_costs = {
        "prior": float(ev.prior_resid @ ev.prior_resid),
        "param_prior": float(ev.param_resid @ ev.param_resid),
        "process": float(np.sum(ev.process_resid ** 2)),
    }
    for g in ev.groups:
        group_costs[g.name] = float(g.resid @ g.resid)
    cost = float(sum(group_costs.values()))
    if not with_jacobian:
        return Bundle(cost=cost, group_costs=group_costs)

    diag = np.zeros((k, STATE_DIM, STATE_DIM))
    off = np.zeros((k - 1, STATE_DIM, STATE_DIM))
    cross = np.zeros((k, STATE_DIM, PARAM_DIM))
    pmat = np.zeros((PARAM_DIM, PARAM_DIM))
    grad_x = np.zeros((k, STATE_DIM))
    grad_p = np.zeros(PARAM_DIM)

    w0 = ev.prior_w
    diag[0][np.arange(STATE_DIM), np.arange(STATE_DIM)] += w0 * w0
    grad_x[0] += w0 * ev.prior_resid

    wp = ev.param_w
    pmat[np.arange(PARAM_DIM), np.arange(PARAM_DIM)] += wp * wp
    grad_p += wp * ev.param_resid

    # process intervals
    a, b = ev.process_a, ev.process_b
    w2 = ev.process_w ** 2
    wr = ev.process_w * ev.process_resid                    # (N, 13)
    at = a.transpose(0, 2, 1)
    w2a = w2[None, :, None] * a
    w2b = w2[None, :, None] * b
    diag[:-1] += at @ w2a
    diag[1:, np.arange(STATE_DIM), np.arange(STATE_DIM)] += w2
    off[:] += -w2a
    cross[:-1] += at @ w2b
    cross[1:] += -w2b
    pmat += (b.transpose(0, 2, 1) @ w2b).sum(axis=0)
    grad_x[:-1] += -(at @ wr[:, :, None])[:, :, 0]
    grad_x[1:] += wr
    grad_p += -(b.transpose(0, 2, 1) @ wr[:, :, None]).sum(axis=0)[:, 0]

    # single-node measurement rows, merged into two families so the
    # segment-sum scatter runs once with and once without parameter columns
    plain = [g for g in ev.groups if g.node.size and g.jp is None]
    with_p = [g for g in ev.groups if g.node.size and g.jp is not None]
    for family, has_p in ((plain, False), (with_p, True)):
        if not family:
            continue
        nodes = np.concatenate([g.node for g in family])
        resid = np.concatenate([g.resid for g in family])
        jx = np.concatenate([g.jx for g in family], axis=0)
        jp = np.concatenate([g.jp for g in family], axis=0) if has_p else None
        order = np.argsort(nodes, kind="stable")
        nodes, resid, jx = nodes[order], resid[order], jx[order]
        boundary = np.empty(nodes.size, dtype=bool)
        boundary[0] = True
        np.not_equal(nodes[1:], nodes[:-1], out=boundary[1:])
        starts = np.flatnonzero(boundary)
        uniq = nodes[starts]
        diag[uniq] += np.add.reduceat(jx[:, :, None] * jx[:, None, :],
                                      starts, axis=0)
        grad_x[uniq] += np.add.reduceat(jx * resid[:, None], starts, axis=0)
        if has_p:
            jp = jp[order]
            cross[uniq] += np.add.reduceat(jx[:, :, None] * jp[:, None, :],
                                           starts, axis=0)
            pmat += jp.T @ jp
            grad_p += jp.T @ resid

    return Bundle(cost=cost, group_costs=group_costs, diag=diag, off=off,
                  cross=cross, pmat=pmat, grad_x=grad_x, grad_p=grad_p)


# ---------------------------------------------------------------------------
# Stacked vector and dense Jacobian (testing / diagnostics surface)


def build_residuals(window, models, x: np.ndarray | None = None,
                    p: np.ndarray | None = None):
    """Stacked whitened residual vector plus its sparsity layout.

    The layout is a list of (group, node, start, stop) entries; process
    entries are labelled with the index of the later node of the interval.
    """
    prep = prepare(window, models)
    if x is None:
        x = window.states
    if p is None:
        p = window.params.as_array()
    ev = _evaluate(np.asarray(x, dtype=float), np.asarray(p, dtype=float),
                   prep, with_jac=False)
    return _stack(ev)


def _stack(ev: Evaluated):
    parts = [ev.prior_resid, ev.param_resid]
    layout = [("prior", 0, 0, STATE_DIM)]
    pos = STATE_DIM
    layout.append(("param_prior", -1, pos, pos + PARAM_DIM))
    pos += PARAM_DIM
    n = ev.process_resid.shape[0]
    for i in range(n):
        parts.append(ev.process_resid[i])
        layout.append(("process", i + 1, pos, pos + STATE_DIM))
        pos += STATE_DIM
    for g in ev.groups:
        for i in range(g.node.size):
            layout.append((g.name, int(g.node[i]), pos, pos + 1))
            pos += 1
        if g.node.size:
            parts.append(g.resid)
    vector = np.concatenate(parts) if parts else np.zeros(0)
    return vector, layout


def dense_jacobian(window, models, x: np.ndarray | None = None,
                   p: np.ndarray | None = None):
    """Dense Jacobian of ``build_residuals`` w.r.t. states then parameters.

    Columns are the window states in chronological order followed by the
    12 tire parameters. Intended for verification and small problems; the
    solver consumes the block form from ``assemble`` instead.
    """
    prep = prepare(window, models)
    if x is None:
        x = window.states
    if p is None:
        p = window.params.as_array()
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    ev = _evaluate(x, p, prep, with_jac=True)
    vector, layout = _stack(ev)
    k = x.shape[0]
    ncols = k * STATE_DIM + PARAM_DIM
    jac = np.zeros((vector.size, ncols))

    def scol(node):
        return slice(node * STATE_DIM, (node + 1) * STATE_DIM)

    pcol = slice(k * STATE_DIM, ncols)
    row = 0
    jac[row:row + STATE_DIM, scol(0)] = np.diag(ev.prior_w)
    row += STATE_DIM
    jac[row:row + PARAM_DIM, pcol] = np.diag(ev.param_w)
    row += PARAM_DIM
    n = ev.process_resid.shape[0]
    for i in range(n):
        block = slice(row, row + STATE_DIM)
        jac[block, scol(i)] = -ev.process_w[:, None] * ev.process_a[i]
        jac[block, scol(i + 1)] = np.diag(ev.process_w)
        jac[block, pcol] = -ev.process_w[:, None] * ev.process_b[i]
        row += STATE_DIM
    for g in ev.groups:
        for i in range(g.node.size):
            node = int(g.node[i])
            jac[row, scol(node)] = g.jx[i]
            if g.jp is not None:
                jac[row, pcol] = g.jp[i]
            row += 1
    return jac, vector, layout
