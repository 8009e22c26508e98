"""Command-line harness.

Subcommands:
  simulate         scenario config -> measurement + truth log
  estimate         log + config -> estimate series, metrics, resolved config
  calibrate-check  log + config -> extrinsic error trajectory per sensor
  metrics          truth log + estimate log -> metrics report

Exit codes: 0 success, 2 log schema / config error, 3 solver convergence
rate below the configured threshold.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import logio, metrics as metrics_mod, rotations
from .errors import ConfigError, SchemaMismatch, VmheError
from .harness import run_estimation
from .radar import estimate_ego_velocity, calibration_update, CalibrationFilter
from .simulator import simulate

log = logging.getLogger("vmhe")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vmhe",
        description="Moving-horizon vehicle state and tire-force estimation.")
    parser.add_argument("--log-level", default="info",
                        choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the plant and write a log")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)

    p_est = sub.add_parser("estimate", help="run the estimator over a log")
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--log", required=True)
    p_est.add_argument("--out", required=True, help="output directory")
    p_est.add_argument("--no-calibration", action="store_true")
    p_est.add_argument("--horizon", type=int, default=None,
                       help="override mhe.n")

    p_cal = sub.add_parser("calibrate-check",
                           help="rotation calibration trajectory only")
    p_cal.add_argument("--config", required=True)
    p_cal.add_argument("--log", required=True)
    p_cal.add_argument("--out", required=True, help="output file")

    p_met = sub.add_parser("metrics", help="compare estimates against truth")
    p_met.add_argument("--truth", required=True, help="log with truth rows")
    p_met.add_argument("--estimates", required=True,
                       help="log with est rows (from estimate --out)")
    p_met.add_argument("--out", required=True, help="output file")

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, SchemaMismatch) as exc:
        log.error("%s", exc)
        return 2
    except VmheError as exc:
        log.error("%s", exc)
        return 1


def _dispatch(args) -> int:
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "estimate":
        return _cmd_estimate(args)
    if args.command == "calibrate-check":
        return _cmd_calibrate_check(args)
    if args.command == "metrics":
        return _cmd_metrics(args)
    raise AssertionError(args.command)


def _cmd_simulate(args) -> int:
    setup = config_mod.load_setup(args.config)
    if setup.scenario is None:
        raise ConfigError(f"{args.config}: no scenario.segment.* section")
    truth, frames = simulate(setup.scenario, setup.models, setup.plant_tires,
                             setup.suite, seed=args.seed)
    logio.export_log(frames, truth, args.out)
    log.info("wrote %d frames, %d truth records to %s",
             len(frames), len(truth), args.out)
    return 0


def _cmd_estimate(args) -> int:
    setup = config_mod.load_setup(args.config)
    if args.horizon is not None:
        setup.mhe.n = args.horizon
    if args.no_calibration:
        setup.calibration.enabled = False
    ingested = logio.ingest(args.log)
    for lineno, message in ingested.diagnostics.malformed:
        log.warning("%s:%d: %s", args.log, lineno, message)

    result = run_estimation(ingested.frames, setup.models, setup.mhe,
                            setup.params, calibration=setup.calibration,
                            truth=ingested.truth or None,
                            true_extrinsics=setup.true_extrinsics or None)
    os.makedirs(args.out, exist_ok=True)
    logio.export_log([], ingested.truth, os.path.join(args.out, "estimates.log"),
                     estimates=result.estimate_records())
    with open(os.path.join(args.out, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(config_mod.resolved_text(setup))
    report = result.metrics
    if report is None:
        report = metrics_mod.compute_metrics(result.reports, [],
                                             result.solve_seconds)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "timing.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"solver.mean_solve_seconds = {report.mean_solve_seconds!r}\n")
    log.info("%d solves, convergence rate %.3f, mean %.2f iterations",
             report.solves, report.convergence_rate, report.mean_iterations)
    if ingested.truth:
        for q in ("v_y", "alpha_f", "f_y_f", "fx_rl"):
            if q in report.rmse:
                log.info("rmse %-8s %.5g", q, report.rmse[q])
    if report.convergence_rate < setup.min_convergence_rate:
        log.error("convergence rate %.3f below threshold %.3f",
                  report.convergence_rate, setup.min_convergence_rate)
        return 3
    return 0


def _cmd_calibrate_check(args) -> int:
    setup = config_mod.load_setup(args.config)
    ingested = logio.ingest(args.log)
    filters = {}
    extrinsics = dict(setup.models.extrinsics)
    last_gyro = 0.0
    last_steer = 0.0
    rows = []
    from .mhe import ImuFrame, SteeringFrame
    from .radar import RadarScan
    from .errors import DegenerateGeometry, TooFewDetections
    for frame in ingested.frames:
        if isinstance(frame, ImuFrame):
            last_gyro = frame.r
        elif isinstance(frame, SteeringFrame):
            last_steer = frame.delta
        elif isinstance(frame, RadarScan) and frame.sensor_id in extrinsics:
            try:
                ego = estimate_ego_velocity(
                    frame, reject_outliers=setup.calibration.reject_outliers)
            except (DegenerateGeometry, TooFewDetections):
                continue
            filt = filters.setdefault(frame.sensor_id, CalibrationFilter(
                weight=setup.calibration.weight, gates=setup.calibration.gates))
            upd = calibration_update(filt, ego.velocity,
                                     extrinsics[frame.sensor_id],
                                     yaw_rate=last_gyro, steer=last_steer)
            if upd.status == "updated":
                extrinsics[frame.sensor_id] = upd.extrinsics
            true_ext = setup.true_extrinsics.get(frame.sensor_id)
            if true_ext is not None:
                yaw_err, pitch_err = metrics_mod.extrinsic_angle_errors(
                    extrinsics[frame.sensor_id].rotation, true_ext.rotation)
                rows.append((frame.timestamp, frame.sensor_id, upd.status,
                             yaw_err, pitch_err))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# time sensor status yaw_error pitch_error\n")
        for t, sensor, status, yaw_err, pitch_err in rows:
            fh.write(f"{t!r} {sensor} {status} {yaw_err!r} {pitch_err!r}\n")
    for sensor_id, ext in sorted(extrinsics.items()):
        true_ext = setup.true_extrinsics.get(sensor_id)
        if true_ext is None:
            continue
        yaw_err, pitch_err = metrics_mod.extrinsic_angle_errors(
            ext.rotation, true_ext.rotation)
        log.info("%s: final yaw error %.3e rad, pitch error %.3e rad",
                 sensor_id, yaw_err, pitch_err)
    return 0


def _cmd_metrics(args) -> int:
    truth = logio.ingest(args.truth).truth
    estimates = logio.ingest(args.estimates).estimates
    if not truth or not estimates:
        raise ConfigError("metrics needs truth rows and est rows")
    times = np.array([rec.timestamp for rec in estimates])
    report = metrics_mod.MetricsReport()
    report.solves = len(estimates)
    report.convergence_rate = float(np.mean(
        [rec.field("converged") for rec in estimates]))
    report.mean_iterations = float(np.mean(
        [rec.field("iterations") for rec in estimates]))
    t_truth = np.array([rec.timestamp for rec in truth])
    mask = (times >= t_truth[0]) & (times <= t_truth[-1])
    report.compared_samples = int(mask.sum())
    for q in metrics_mod.QUANTITIES:
        est = np.array([rec.field(q) for rec in estimates])[mask]
        ref = np.interp(times[mask], t_truth,
                        np.array([getattr(rec, q) for rec in truth]))
        valid = np.isfinite(est)
        if not np.any(valid):
            continue
        err = est[valid] - ref[valid]
        report.rmse[q] = float(np.sqrt(np.mean(err ** 2)))
        report.max_abs[q] = float(np.max(np.abs(err)))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    log.info("wrote %s", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
