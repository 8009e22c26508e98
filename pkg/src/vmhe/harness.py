"""Batch estimation driver: replay frames, calibrate inline, collect metrics.

The window advances on demand: when a frame arrives beyond the current
horizon the window is solved, a report is emitted, and the grid shifts by
one node spacing; this repeats until the frame fits. The result is one
solve per node interval, driven purely by frame timestamps, so batch and
paced replays produce identical estimates.

RADAR scans additionally feed the per-sensor rotation calibration before
entering the window; corrected extrinsics apply from the next solve on.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from . import metrics as metrics_mod
from .errors import DegenerateGeometry, TooFewDetections
from .logio import ESTIMATE_FIELDS, EstimateRecord
from .mhe import (
    EstimateReport, ImuFrame, MheConfig, SteeringFrame, VehicleModels,
    WheelSpeedFrame, Window, solve,
)
from .radar import CalibrationFilter, CalibrationGates, RadarScan, \
    calibration_update, estimate_ego_velocity
from .vehicle import IX_VX, IX_WRL, IX_WRR, ParamVector


@dataclass
class CalibrationSettings:
    enabled: bool = True
    weight: float = 0.08
    gates: CalibrationGates = field(default_factory=CalibrationGates)
    reject_outliers: bool = True


@dataclass
class RunResult:
    reports: list[EstimateReport]
    metrics: metrics_mod.MetricsReport | None
    models: VehicleModels            # extrinsics reflect final calibration
    filters: dict[str, CalibrationFilter]
    solve_seconds: list[float]
    dropped_stale: int
    calibration_trace: list[tuple[float, str, float]]  # (time, sensor, step)

    def estimate_records(self) -> list[EstimateRecord]:
        records = []
        for rep in self.reports:
            state = rep.state
            values = (state.v_x, state.v_y, state.a_x, state.a_y, state.r,
                      state.b_x, state.b_y, state.b_r, state.w_rl, state.w_rr,
                      state.fx_r, state.gamma, state.dm,
                      rep.alpha_f, rep.alpha_r, rep.beta,
                      rep.f_y_f, rep.f_y_r, rep.fx_rl, rep.fx_rr,
                      rep.cost, float(rep.iterations), float(rep.converged))
            assert len(values) == len(ESTIMATE_FIELDS)
            records.append(EstimateRecord(rep.timestamp, values))
        return records


def run_estimation(frames, models: VehicleModels, config: MheConfig,
                   params: ParamVector,
                   calibration: CalibrationSettings | None = None,
                   truth=None,
                   true_extrinsics=None,
                   collect_trace: bool = False) -> RunResult:
    """Replay a frame stream through the estimator.

    ``frames`` is any iterable ordered by arrival timestamp. When truth
    records are supplied, accuracy metrics are attached; when the true
    extrinsics are supplied (simulation studies), the final calibration
    angle errors are attached too.
    """
    calibration = calibration or CalibrationSettings()
    filters: dict[str, CalibrationFilter] = {}
    trace: list[tuple[float, str, float]] = []
    reports: list[EstimateReport] = []
    timings: list[float] = []

    window: Window | None = None
    last_gyro = 0.0
    last_steer = 0.0
    speed_initialized = not config.x0_speed_from_wheels

    for frame in frames:
        if window is None:
            window = Window(config, params, t0=_frame_time(frame))

        if isinstance(frame, ImuFrame):
            last_gyro = frame.r
        elif isinstance(frame, SteeringFrame):
            last_steer = frame.delta
        elif isinstance(frame, WheelSpeedFrame) and not speed_initialized:
            speed = 0.5 * (frame.w_rl * models.geom.r_e_rl
                           + frame.w_rr * models.geom.r_e_rr)
            window.states[:, IX_VX] = speed
            window.states[:, IX_WRL] = frame.w_rl
            window.states[:, IX_WRR] = frame.w_rr
            window.prior_state[IX_VX] = speed
            window.prior_state[IX_WRL] = frame.w_rl
            window.prior_state[IX_WRR] = frame.w_rr
            speed_initialized = True
        elif isinstance(frame, RadarScan) and calibration.enabled:
            models = _calibrate(frame, models, filters, calibration,
                                last_gyro, last_steer, trace, collect_trace)

        window.push_measurement(frame)
        while window.deferred:
            t0 = time.perf_counter()
            reports.append(solve(window, models))
            timings.append(time.perf_counter() - t0)
            window.advance(models)

    dropped = 0
    if window is not None:
        t0 = time.perf_counter()
        reports.append(solve(window, models))
        timings.append(time.perf_counter() - t0)
        dropped = window.dropped_stale

    result_metrics = None
    if truth is not None:
        result_metrics = metrics_mod.compute_metrics(reports, truth, timings)
        if true_extrinsics:
            metrics_mod.add_calibration_errors(result_metrics,
                                               models.extrinsics,
                                               true_extrinsics)
    return RunResult(reports=reports, metrics=result_metrics, models=models,
                     filters=filters, solve_seconds=timings,
                     dropped_stale=dropped, calibration_trace=trace)


def _frame_time(frame) -> float:
    from .mhe import frame_time
    return frame_time(frame)


def _calibrate(scan: RadarScan, models: VehicleModels, filters, settings,
               last_gyro, last_steer, trace, collect_trace) -> VehicleModels:
    if scan.sensor_id not in models.extrinsics:
        return models
    try:
        ego = estimate_ego_velocity(scan,
                                    reject_outliers=settings.reject_outliers)
    except (DegenerateGeometry, TooFewDetections):
        return models
    filt = filters.get(scan.sensor_id)
    if filt is None:
        filt = CalibrationFilter(weight=settings.weight, gates=settings.gates)
        filters[scan.sensor_id] = filt
    upd = calibration_update(filt, ego.velocity,
                             models.extrinsics[scan.sensor_id],
                             yaw_rate=last_gyro, steer=last_steer)
    if upd.status == "updated":
        models = models.with_extrinsics(scan.sensor_id, upd.extrinsics)
        if collect_trace:
            trace.append((scan.timestamp, scan.sensor_id, upd.step_angle))
    return models


def run_estimation_threaded(frames, models, config, params,
                            calibration: CalibrationSettings | None = None,
                            truth=None, true_extrinsics=None,
                            max_queue: int = 256) -> RunResult:
    """Producer/consumer variant; must match ``run_estimation`` exactly."""
    channel: queue.Queue = queue.Queue(maxsize=max_queue)
    done = object()

    def produce():
        for frame in frames:
            channel.put(frame)
        channel.put(done)

    def consume():
        while True:
            item = channel.get()
            if item is done:
                return
            yield item

    producer = threading.Thread(target=produce, daemon=True)
    producer.start()
    result = run_estimation(consume(), models, config, params,
                            calibration=calibration, truth=truth,
                            true_extrinsics=true_extrinsics)
    producer.join()
    return result
