"""Accuracy metrics of an estimation run against simulator truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rotations

QUANTITIES = ("v_x", "v_y", "beta", "alpha_f", "alpha_r",
              "f_y_f", "f_y_r", "fx_rl", "fx_rr", "b_x", "b_y", "b_r")

_TRUTH_ATTR = {q: q for q in QUANTITIES}


@dataclass
class MetricsReport:
    """Per-quantity RMSE / max-abs error plus solver and calibration stats."""

    rmse: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    calibration_yaw_error: dict[str, float] = field(default_factory=dict)
    calibration_pitch_error: dict[str, float] = field(default_factory=dict)
    mean_iterations: float = 0.0
    convergence_rate: float = 1.0
    mean_solve_seconds: float = 0.0
    solves: int = 0
    compared_samples: int = 0

    def to_text(self, include_timing: bool = False) -> str:
        """Flat key=value serialization.

        Wall-clock timing is excluded by default so the file stays
        bit-identical across reruns of the same (log, config).
        """
        lines = []
        for q in sorted(self.rmse):
            lines.append(f"rmse.{q} = {self.rmse[q]!r}")
        for q in sorted(self.max_abs):
            lines.append(f"max_abs.{q} = {self.max_abs[q]!r}")
        for sensor in sorted(self.calibration_yaw_error):
            lines.append(f"calibration.{sensor}.yaw_error = "
                         f"{self.calibration_yaw_error[sensor]!r}")
            lines.append(f"calibration.{sensor}.pitch_error = "
                         f"{self.calibration_pitch_error[sensor]!r}")
        lines.append(f"solver.mean_iterations = {self.mean_iterations!r}")
        lines.append(f"solver.convergence_rate = {self.convergence_rate!r}")
        if include_timing:
            lines.append(f"solver.mean_solve_seconds = {self.mean_solve_seconds!r}")
        lines.append(f"solver.solves = {self.solves}")
        lines.append(f"compared_samples = {self.compared_samples}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "MetricsReport":
        report = MetricsReport()
        for raw in text.splitlines():
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            key, _, value = raw.partition("=")
            key = key.strip()
            value = value.strip()
            if key.startswith("rmse."):
                report.rmse[key[5:]] = float(value)
            elif key.startswith("max_abs."):
                report.max_abs[key[8:]] = float(value)
            elif key.startswith("calibration."):
                _, sensor, which = key.split(".")
                if which == "yaw_error":
                    report.calibration_yaw_error[sensor] = float(value)
                else:
                    report.calibration_pitch_error[sensor] = float(value)
            elif key == "solver.mean_iterations":
                report.mean_iterations = float(value)
            elif key == "solver.convergence_rate":
                report.convergence_rate = float(value)
            elif key == "solver.mean_solve_seconds":
                report.mean_solve_seconds = float(value)
            elif key == "solver.solves":
                report.solves = int(value)
            elif key == "compared_samples":
                report.compared_samples = int(value)
            else:
                raise ValueError(f"unknown metrics key {key!r}")
        return report


def _interp_truth(truth, times):
    """Linear interpolation of every truth quantity at the given times."""
    t = np.array([rec.timestamp for rec in truth])
    out = {}
    for q in QUANTITIES:
        values = np.array([getattr(rec, _TRUTH_ATTR[q]) for rec in truth])
        out[q] = np.interp(times, t, values)
    return t, out


def estimate_series(reports):
    """Extract comparable series from EstimateReport objects."""
    times = np.array([rep.timestamp for rep in reports])
    series = {
        "v_x": np.array([rep.state.v_x for rep in reports]),
        "v_y": np.array([rep.state.v_y for rep in reports]),
        "beta": np.array([rep.beta for rep in reports]),
        "alpha_f": np.array([rep.alpha_f for rep in reports]),
        "alpha_r": np.array([rep.alpha_r for rep in reports]),
        "f_y_f": np.array([rep.f_y_f for rep in reports]),
        "f_y_r": np.array([rep.f_y_r for rep in reports]),
        "fx_rl": np.array([rep.fx_rl for rep in reports]),
        "fx_rr": np.array([rep.fx_rr for rep in reports]),
        "b_x": np.array([rep.state.b_x for rep in reports]),
        "b_y": np.array([rep.state.b_y for rep in reports]),
        "b_r": np.array([rep.state.b_r for rep in reports]),
    }
    return times, series


def compute_metrics(reports, truth, solve_seconds=None,
                    skip_initial: float = 0.0) -> MetricsReport:
    """Compare a report stream with truth records.

    Only report timestamps inside the truth time span are compared;
    ``skip_initial`` seconds can be excluded to ignore the estimator's
    cold-start transient. NaN estimate entries (for example slip angles
    below the speed floor) are skipped per quantity.
    """
    report = MetricsReport()
    report.solves = len(reports)
    if reports:
        report.mean_iterations = float(np.mean([r.iterations for r in reports]))
        report.convergence_rate = float(np.mean([r.converged for r in reports]))
    if solve_seconds:
        report.mean_solve_seconds = float(np.mean(solve_seconds))
    if not reports or not truth:
        return report

    times, series = estimate_series(reports)
    t_truth = np.array([rec.timestamp for rec in truth])
    lo = max(t_truth[0], times[0] + skip_initial)
    mask = (times >= lo) & (times <= t_truth[-1])
    if not np.any(mask):
        return report
    times = times[mask]
    _, interp = _interp_truth(truth, times)
    report.compared_samples = int(mask.sum())
    for q in QUANTITIES:
        est = series[q][mask]
        valid = np.isfinite(est)
        if not np.any(valid):
            continue
        err = est[valid] - interp[q][valid]
        report.rmse[q] = float(np.sqrt(np.mean(err ** 2)))
        report.max_abs[q] = float(np.max(np.abs(err)))
    return report


def extrinsic_angle_errors(estimated_rotation: np.ndarray,
                           true_rotation: np.ndarray) -> tuple[float, float]:
    """(yaw, pitch) of the residual rotation between estimate and truth.

    A residual that is a pure roll about the forward axis reports (0, 0),
    matching what the velocity-direction alignment can observe.
    """
    residual = estimated_rotation @ true_rotation.T
    yaw, pitch, _ = rotations.to_ypr(residual)
    return abs(yaw), abs(pitch)


def add_calibration_errors(report: MetricsReport, extrinsics, true_extrinsics):
    for sensor_id, true_ext in true_extrinsics.items():
        if sensor_id not in extrinsics:
            continue
        yaw, pitch = extrinsic_angle_errors(extrinsics[sensor_id].rotation,
                                            true_ext.rotation)
        report.calibration_yaw_error[sensor_id] = yaw
        report.calibration_pitch_error[sensor_id] = pitch
    return report
