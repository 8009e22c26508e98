"""Receding-horizon estimator: configuration, measurement window, solve loop.

The window holds N+1 state nodes on a fixed time grid with spacing dt.
Measurements are bucketed to their nearest node (ties to the earlier
node); RADAR scans are first shifted back by their latency estimate.
Frames newer than the window are deferred for the next advance, frames
older than the window start are dropped with a counter.

Each advance shifts the grid one node: the state prior becomes the second
state of the previous solution and the parameter prior becomes the
previous parameter estimate, which is the plain prior-shift scheme (no
covariance recursion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from . import longitudinal, residuals
from .blocksolve import solve_arrowhead
from .errors import SingularNormalEquations
from .longitudinal import BrakeParams, EngineTorqueMap, LossModelParams, LsdParams
from .radar import RadarExtrinsics, RadarScan
from .vehicle import (
    IX_DM, IX_GAMMA, IX_VX, PARAM_DIM, STATE_DIM, STATE_NAMES,
    ParamVector, VehicleCoreState, VehicleParams, V_X_MIN,
    body_slip_angle, pacejka_lateral_force, slip_angles_raw,
)

ACCEPTED = "accepted"
DEFERRED = "deferred"
REJECTED = "rejected"


# ---------------------------------------------------------------------------
# Measurement frames


@dataclass(frozen=True)
class ImuFrame:
    timestamp: float
    a_x: float
    a_y: float
    r: float


@dataclass(frozen=True)
class SteeringFrame:
    timestamp: float
    delta: float


@dataclass(frozen=True)
class WheelSpeedFrame:
    """Wheel angular speeds; fronts are optional (nan when absent)."""
    timestamp: float
    w_rl: float
    w_rr: float
    w_fl: float = math.nan
    w_fr: float = math.nan


@dataclass(frozen=True)
class BrakePressureFrame:
    timestamp: float
    p_front: float
    p_rear: float


@dataclass(frozen=True)
class ThrottleFrame:
    timestamp: float
    throttle: float
    engine_speed: float


@dataclass(frozen=True)
class VerticalLoadFrame:
    """Per-wheel vertical loads in (fl, fr, rl, rr) order."""
    timestamp: float
    f_z: tuple[float, float, float, float]


@dataclass(frozen=True)
class SlopeFrame:
    timestamp: float
    slope: float


MeasurementFrame = Union[ImuFrame, SteeringFrame, WheelSpeedFrame,
                         BrakePressureFrame, ThrottleFrame,
                         VerticalLoadFrame, SlopeFrame, RadarScan]


def frame_time(frame: MeasurementFrame) -> float:
    """Association time of a frame: RADAR scans compensate their latency."""
    if isinstance(frame, RadarScan):
        return frame.timestamp - frame.latency
    return frame.timestamp


# ---------------------------------------------------------------------------
# Configuration


def _state_sigma(**overrides) -> np.ndarray:
    base = {
        "v_x": 0.3, "v_y": 0.3, "a_x": 1.0, "a_y": 1.0, "r": 0.05,
        "b_x": 0.02, "b_y": 0.015, "b_r": 1.5e-3,
        "w_rl": 1.0, "w_rr": 1.0, "fx_r": 500.0, "gamma": 0.1, "dm": 100.0,
    }
    base.update(overrides)
    return np.array([base[n] for n in STATE_NAMES])


def _process_sigma(**overrides) -> np.ndarray:
    # the velocity propagation is exact given the acceleration states, so
    # its noise floor is far below the random-walk and model-error channels
    base = {
        "v_x": 0.001, "v_y": 0.001, "a_x": 0.8, "a_y": 0.8, "r": 0.003,
        "b_x": 2e-5, "b_y": 2e-5, "b_r": 2e-6,
        "w_rl": 0.3, "w_rr": 0.3, "fx_r": 150.0, "gamma": 0.02, "dm": 30.0,
    }
    base.update(overrides)
    return np.array([base[n] for n in STATE_NAMES])


def _param_sigma() -> np.ndarray:
    # grip level (d) drifts with wear and temperature but must stay slower
    # than corner alternation, or it can absorb IMU bias within one-sided
    # windows; shape factors are construction properties and held tighter
    per_axle = np.array([3e-3, 3e-4, 3e-3, 5e-4, 5e-6, 5e-5])
    return np.tile(per_axle, 2)


@dataclass
class SolverSettings:
    """Damped Gauss-Newton settings with projected box handling.

    Convergence triggers on a small projected gradient, a small accepted
    step, or a relative cost decrease below ``ftol``; exhausting the
    damping schedule without a descent step counts as converged at the
    numerical floor.
    """

    max_iterations: int = 25
    gradient_tol: float = 1e-3
    step_tol: float = 1e-9
    ftol: float = 1e-5
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    lambda_min: float = 1e-13
    lambda_max: float = 1e10
    #: extra undamped steps after convergence; they land on the window's
    #: stationary point even along directions too flat for the cost-based
    #: acceptance test to resolve (reproducibility studies want 2)
    polish_steps: int = 0


@dataclass
class MheConfig:
    """Horizon layout, noise levels and solver settings.

    All sigma_* entries are standard deviations of the whitened residual
    groups; process sigmas are per node interval. ``sigma_yaw_moment`` is
    in yaw-acceleration units, ``sigma_lateral_balance`` in acceleration
    units; setting either to 0 disables that residual group.
    """

    n: int = 30
    dt: float = 0.01
    sigma_prior: np.ndarray = field(default_factory=_state_sigma)
    sigma_param_prior: np.ndarray = field(default_factory=_param_sigma)
    sigma_process: np.ndarray = field(default_factory=_process_sigma)
    sigma_imu_accel: float = 0.05
    sigma_imu_gyro: float = 0.002
    sigma_doppler: float = 0.1
    sigma_wheel_speed: float = 0.1
    sigma_rear_force: float = 150.0
    sigma_yaw_moment: float = 0.5
    sigma_lateral_balance: float = 0.03
    v_x_min: float = V_X_MIN
    x0: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))
    x0_speed_from_wheels: bool = True
    inertia_wheels: str = "rear"
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("horizon must have at least 2 intervals")
        if self.dt <= 0.0:
            raise ValueError("node spacing must be positive")
        for name in ("sigma_prior", "sigma_param_prior", "sigma_process"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} entries must be positive")


@dataclass(frozen=True)
class VehicleModels:
    """Bundle of the physical models the estimator consumes."""

    geom: VehicleParams
    brakes: BrakeParams
    lsd: LsdParams
    loss: LossModelParams
    engine_map: EngineTorqueMap
    extrinsics: dict[str, RadarExtrinsics]

    def with_extrinsics(self, sensor_id: str, ext: RadarExtrinsics) -> "VehicleModels":
        updated = dict(self.extrinsics)
        updated[sensor_id] = ext
        return replace(self, extrinsics=updated)


# ---------------------------------------------------------------------------
# Window


class _Bucket:
    """Measurements associated to one node."""

    __slots__ = ("imu", "wheels", "scans", "scan_arrays", "steer", "throttle",
                 "brakes", "loads", "slope", "wheel_aux")

    def __init__(self):
        self.imu: list[ImuFrame] = []
        self.wheels: list[WheelSpeedFrame] = []
        self.scans: list[RadarScan] = []
        self.scan_arrays: list[tuple] = []   # (sensor_id, bearings, dopplers)
        self.steer: float | None = None
        self.throttle: ThrottleFrame | None = None
        self.brakes: BrakePressureFrame | None = None
        self.loads: tuple[float, float, float, float] | None = None
        self.slope: float | None = None
        self.wheel_aux: WheelSpeedFrame | None = None


class Window:
    """Sliding estimation window over N+1 state nodes."""

    def __init__(self, config: MheConfig, params: ParamVector, t0: float,
                 x0: np.ndarray | None = None):
        self.config = config
        self.t0 = float(t0)
        k = config.n + 1
        init = config.x0 if x0 is None else np.asarray(x0, dtype=float)
        self.states = np.tile(init, (k, 1))
        self.params = params
        self.prior_state = init.copy()
        self.prior_params = params.as_array().copy()
        self.buckets = [_Bucket() for _ in range(k)]
        self.deferred: list[MeasurementFrame] = []
        self.dropped_stale = 0
        self.solved_once = False
        self.input_version = 0      # bumps on any content change
        # forward-fill state for input channels whose buckets have been dropped
        self.carry: dict = {
            "delta": 0.0, "throttle": 0.0, "engine_speed": 0.0,
            "p_front": 0.0, "p_rear": 0.0, "loads": None, "slope": 0.0,
            "wheel_aux": None,
        }

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def t_end(self) -> float:
        return self.t0 + self.config.n * self.config.dt

    def node_time(self, k: int) -> float:
        return self.t0 + k * self.config.dt

    def node_index(self, t: float) -> int:
        """Nearest node, ties resolved to the earlier node."""
        return math.ceil((t - self.t0) / self.config.dt - 0.5)

    def push_measurement(self, frame: MeasurementFrame) -> str:
        """Bucket a frame; returns ACCEPTED, DEFERRED or REJECTED."""
        t = frame_time(frame)
        if not math.isfinite(t):
            raise ValueError("non-finite frame timestamp")
        k = self.node_index(t)
        if k < 0:
            self.dropped_stale += 1
            return REJECTED
        if k > self.config.n:
            self.deferred.append(frame)
            return DEFERRED
        self._store(self.buckets[k], frame)
        self.input_version += 1
        return ACCEPTED

    @staticmethod
    def _store(bucket: _Bucket, frame: MeasurementFrame) -> None:
        if isinstance(frame, ImuFrame):
            bucket.imu.append(frame)
        elif isinstance(frame, WheelSpeedFrame):
            bucket.wheels.append(frame)
            bucket.wheel_aux = frame
        elif isinstance(frame, RadarScan):
            bucket.scans.append(frame)
            if frame.detections:
                bucket.scan_arrays.append(
                    (frame.sensor_id, frame.bearings(), frame.dopplers()))
        elif isinstance(frame, SteeringFrame):
            bucket.steer = frame.delta
        elif isinstance(frame, ThrottleFrame):
            bucket.throttle = frame
        elif isinstance(frame, BrakePressureFrame):
            bucket.brakes = frame
        elif isinstance(frame, VerticalLoadFrame):
            bucket.loads = tuple(frame.f_z)
        elif isinstance(frame, SlopeFrame):
            bucket.slope = frame.slope
        else:
            raise TypeError(f"unsupported frame type {type(frame)!r}")

    def advance(self, models: VehicleModels) -> None:
        """Shift the window one node forward.

        The new prior anchors to the second state of the current solution;
        the terminal state is seeded by integrating the old terminal node
        with its resolved inputs; the oldest measurement bucket is dropped
        and deferred frames that now fit are re-pushed.
        """
        cfg = self.config
        self.prior_state = self.states[1].copy()
        self.prior_params = self.params.as_array().copy()

        inputs = residuals.resolve_inputs(self, models)
        seed = residuals.propagate_terminal(self.states[-1], self.params,
                                            inputs, models, cfg)
        self.states[:-1] = self.states[1:]
        self.states[-1] = seed
        dropped = self.buckets.pop(0)
        self._merge_carry(dropped)
        self.buckets.append(_Bucket())
        self.t0 += cfg.dt
        self.input_version += 1

        pending, self.deferred = self.deferred, []
        for frame in pending:
            self.push_measurement(frame)

    def _merge_carry(self, bucket: _Bucket) -> None:
        if bucket.steer is not None:
            self.carry["delta"] = bucket.steer
        if bucket.throttle is not None:
            self.carry["throttle"] = bucket.throttle.throttle
            self.carry["engine_speed"] = bucket.throttle.engine_speed
        if bucket.brakes is not None:
            self.carry["p_front"] = bucket.brakes.p_front
            self.carry["p_rear"] = bucket.brakes.p_rear
        if bucket.loads is not None:
            self.carry["loads"] = bucket.loads
        if bucket.slope is not None:
            self.carry["slope"] = bucket.slope
        if bucket.wheel_aux is not None:
            self.carry["wheel_aux"] = bucket.wheel_aux


# ---------------------------------------------------------------------------
# Reports and solve


@dataclass(frozen=True)
class EstimateReport:
    """Estimator output for the newest window node."""

    timestamp: float
    state: VehicleCoreState
    alpha_f: float
    alpha_r: float
    beta: float
    f_y_f: float
    f_y_r: float
    fx_rl: float
    fx_rr: float
    params: ParamVector
    group_costs: dict[str, float]
    cost: float
    iterations: int
    converged: bool


def solve(window: Window, models: VehicleModels) -> EstimateReport:
    """Bounded damped Gauss-Newton solve of the current window.

    Minimizes the whitened residual sum of squares over all node states
    and tire parameters. Tire parameters, the split coefficient and the
    transfer moment obey box constraints enforced by projection after
    every accepted step; gradient components pointing into an active
    bound are ignored by the convergence test. The transfer-moment box is
    refreshed from the newest resolved engine torque and measured yaw
    rate and held fixed for this solve.
    """
    cfg = window.config
    settings = cfg.solver
    prep = residuals.prepare(window, models)
    dm_lo, dm_hi = _current_dm_bounds(window, prep, models)

    x = window.states.copy()
    p = window.params.as_array().copy()
    lower_p, upper_p = window.params.lower, window.params.upper
    _project(x, p, lower_p, upper_p, dm_lo, dm_hi)

    lam = settings.lambda_init
    bundle = residuals.assemble(x, p, prep, with_jacobian=True)
    cost = bundle.cost
    final = bundle
    iterations = 0
    converged = False

    for _ in range(settings.max_iterations):
        grad_inf = _projected_gradient_norm(bundle, x, p, lower_p, upper_p,
                                            dm_lo, dm_hi)
        if grad_inf < settings.gradient_tol:
            converged = True
            break

        # coordinates pressed against a bound are frozen in this step so
        # the free coordinates reach their conditional optimum directly
        mask_x, mask_p = _active_masks(bundle, x, p, lower_p, upper_p,
                                       dm_lo, dm_hi)
        stepped = False
        singular = False
        while lam <= settings.lambda_max:
            try:
                dx, dp = _damped_step(bundle, lam, mask_x, mask_p)
                singular = False
            except np.linalg.LinAlgError:
                singular = True
                lam *= settings.lambda_up
                continue
            x_new = x + dx
            p_new = p + dp
            _project(x_new, p_new, lower_p, upper_p, dm_lo, dm_hi)
            # evaluate with the Jacobian: an accepted candidate becomes the
            # next linearization point, so nothing is wasted on acceptance
            cand = residuals.assemble(x_new, p_new, prep, with_jacobian=True)
            if cand.cost < cost:
                step_norm = max(np.abs(x_new - x).max(),
                                np.abs(p_new - p).max(initial=0.0))
                decrease = cost - cand.cost
                x, p = x_new, p_new
                cost = cand.cost
                bundle = cand
                final = cand
                lam = max(lam / settings.lambda_down, settings.lambda_min)
                stepped = True
                iterations += 1
                if (step_norm < settings.step_tol
                        or decrease <= settings.ftol * max(cost, 1e-12)):
                    converged = True
                break
            lam *= settings.lambda_up
        if not stepped:
            if singular:
                raise SingularNormalEquations(
                    "normal equations singular at maximum damping")
            # no descent direction at the damping ceiling: numerical floor
            converged = True
            break
        if converged:
            break

    for _ in range(settings.polish_steps):
        mask_x, mask_p = _active_masks(bundle, x, p, lower_p, upper_p,
                                       dm_lo, dm_hi)
        try:
            dx, dp = _damped_step(bundle, settings.lambda_min, mask_x, mask_p)
        except np.linalg.LinAlgError:
            break
        x_new = x + dx
        p_new = p + dp
        _project(x_new, p_new, lower_p, upper_p, dm_lo, dm_hi)
        cand = residuals.assemble(x_new, p_new, prep, with_jacobian=True)
        if cand.cost > cost * (1.0 + 1e-9) + 1e-12:
            break
        x, p, cost, bundle, final = x_new, p_new, cand.cost, cand, cand

    window.states = x
    window.params = window.params.with_values(p)
    window.solved_once = True
    return _build_report(window, prep, models, final, iterations, converged)


def _current_dm_bounds(window: Window, prep, models: VehicleModels):
    """Transfer-moment box from the newest resolved torque and yaw rate."""
    inputs = prep.inputs
    t_eng = float(inputs.t_eng[-1])
    mode = inputs.mode[-1]
    yaw = _newest_measured_yaw_rate(window)
    if yaw is None:
        yaw = float(window.states[-1, 4])
    lsd_mode = longitudinal.DRIVING if mode == longitudinal.DRIVING else longitudinal.COASTING
    return longitudinal.lsd_bounds(t_eng, yaw, lsd_mode, models.lsd)


def _newest_measured_yaw_rate(window: Window):
    for bucket in reversed(window.buckets):
        if bucket.imu:
            return bucket.imu[-1].r
    return None


def _project(x: np.ndarray, p: np.ndarray, lower_p, upper_p,
             dm_lo: float, dm_hi: float) -> None:
    np.clip(x[:, IX_GAMMA], 0.0, 1.0, out=x[:, IX_GAMMA])
    np.clip(x[:, IX_DM], dm_lo, dm_hi, out=x[:, IX_DM])
    np.clip(p, lower_p, upper_p, out=p)


def _projected_gradient_norm(bundle, x, p, lower_p, upper_p,
                             dm_lo, dm_hi) -> float:
    gx = bundle.grad_x.copy()
    gp = bundle.grad_p.copy()
    eps = 1e-12
    # descent direction is -g; zero components blocked by an active bound
    at_lo = x[:, IX_GAMMA] <= 0.0 + eps
    at_hi = x[:, IX_GAMMA] >= 1.0 - eps
    gcol = gx[:, IX_GAMMA]
    gcol[at_lo & (gcol > 0.0)] = 0.0
    gcol[at_hi & (gcol < 0.0)] = 0.0
    at_lo = x[:, IX_DM] <= dm_lo + eps
    at_hi = x[:, IX_DM] >= dm_hi - eps
    gcol = gx[:, IX_DM]
    gcol[at_lo & (gcol > 0.0)] = 0.0
    gcol[at_hi & (gcol < 0.0)] = 0.0
    gp[(p <= lower_p + eps) & (gp > 0.0)] = 0.0
    gp[(p >= upper_p - eps) & (gp < 0.0)] = 0.0
    return max(np.abs(gx).max(), np.abs(gp).max(initial=0.0))


def _active_masks(bundle, x, p, lower_p, upper_p, dm_lo, dm_hi):
    """Boolean masks of coordinates held at an active bound this step."""
    eps = 1e-12
    mask_x = np.zeros(x.shape, dtype=bool)
    for col, lo, hi in ((IX_GAMMA, 0.0, 1.0), (IX_DM, dm_lo, dm_hi)):
        g = bundle.grad_x[:, col]
        mask_x[:, col] = (((x[:, col] <= lo + eps) & (g > 0.0))
                          | ((x[:, col] >= hi - eps) & (g < 0.0))
                          | (hi - lo <= eps))
    gp = bundle.grad_p
    mask_p = (((p <= lower_p + eps) & (gp > 0.0))
              | ((p >= upper_p - eps) & (gp < 0.0)))
    return mask_x, mask_p


def _damped_step(bundle, lam: float, mask_x=None, mask_p=None):
    diag = bundle.diag.copy()
    off = bundle.off.copy()
    cross = bundle.cross.copy()
    pmat = bundle.pmat.copy()
    grad_x = bundle.grad_x.copy()
    grad_p = bundle.grad_p.copy()
    k, n, _ = diag.shape

    if mask_x is not None and mask_x.any():
        rows, cols = np.nonzero(mask_x)
        diag[rows, cols, :] = 0.0
        diag[rows, :, cols] = 0.0
        diag[rows, cols, cols] = 1.0
        cross[rows, cols, :] = 0.0
        grad_x[rows, cols] = 0.0
        hi = rows < k - 1      # node appears as column block of off[node]
        off[rows[hi], :, cols[hi]] = 0.0
        lo = rows > 0          # node appears as row block of off[node-1]
        off[rows[lo] - 1, cols[lo], :] = 0.0
    if mask_p is not None and mask_p.any():
        idx = np.flatnonzero(mask_p)
        pmat[idx, :] = 0.0
        pmat[:, idx] = 0.0
        pmat[idx, idx] = 1.0
        cross[:, :, idx] = 0.0
        grad_p[idx] = 0.0

    idx = np.arange(n)
    diag[:, idx, idx] += lam * np.maximum(diag[:, idx, idx], 1e-8)
    idxp = np.arange(pmat.shape[0])
    pmat[idxp, idxp] += lam * np.maximum(pmat[idxp, idxp], 1e-8)
    return solve_arrowhead(diag, off, cross, pmat, -grad_x, -grad_p)


def _build_report(window: Window, prep, models: VehicleModels, bundle,
                  iterations: int, converged: bool) -> EstimateReport:
    cfg = window.config
    state = VehicleCoreState.from_array(window.states[-1])
    delta = float(prep.inputs.delta[-1])
    fz_f = float(prep.inputs.fz_front_axle[-1])
    fz_r = float(prep.inputs.fz_rear_axle[-1])
    if state.v_x > cfg.v_x_min:
        a_f, a_r = slip_angles_raw(state.v_x, state.v_y, state.r, delta,
                                   models.geom)
        a_f, a_r = float(a_f), float(a_r)
        beta = body_slip_angle(state, cfg.v_x_min)
        f_y_f = float(pacejka_lateral_force(a_f, window.params.front, fz_f))
        f_y_r = float(pacejka_lateral_force(a_r, window.params.rear, fz_r))
    else:
        a_f = a_r = beta = math.nan
        f_y_f = f_y_r = math.nan
    fx_rl, fx_rr = state.wheel_forces()
    return EstimateReport(
        timestamp=window.t_end,
        state=state,
        alpha_f=a_f, alpha_r=a_r, beta=beta,
        f_y_f=f_y_f, f_y_r=f_y_r,
        fx_rl=fx_rl, fx_rr=fx_rr,
        params=window.params,
        group_costs=bundle.group_costs,
        cost=bundle.cost,
        iterations=iterations,
        converged=converged,
    )
