"""Column-delimited text log: measurement frames, truth and estimates.

Layout: a header line ``# vmhe-log 1`` carrying the schema version, a
channel declaration, then one record per line, ``<channel> <timestamp>
<fields...>``. RADAR scans span multiple rows: a ``radar`` header row
declares sensor, scan id, latency and detection count, followed by one
``det`` row per detection keyed by the scan id. Floats are written with
``repr`` so a write/read cycle is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import MalformedLog, SchemaMismatch
from .mhe import (
    BrakePressureFrame, ImuFrame, MeasurementFrame, SlopeFrame,
    SteeringFrame, ThrottleFrame, VerticalLoadFrame, WheelSpeedFrame,
)
from .radar import RadarDetection, RadarScan
from .simulator import TruthRecord

SCHEMA_LINE = "# vmhe-log 1"

TRUTH_FIELDS = ("v_x", "v_y", "a_x", "a_y", "r", "b_x", "b_y", "b_r",
                "w_rl", "w_rr", "fx_r", "gamma", "dm", "alpha_f", "alpha_r",
                "beta", "f_y_f", "f_y_r", "fx_rl", "fx_rr")

ESTIMATE_FIELDS = ("v_x", "v_y", "a_x", "a_y", "r", "b_x", "b_y", "b_r",
                   "w_rl", "w_rr", "fx_r", "gamma", "dm", "alpha_f",
                   "alpha_r", "beta", "f_y_f", "f_y_r", "fx_rl", "fx_rr",
                   "cost", "iterations", "converged")


@dataclass(frozen=True)
class EstimateRecord:
    """Flattened estimator output row for export and plotting."""

    timestamp: float
    values: tuple[float, ...]   # ESTIMATE_FIELDS order

    def field(self, name: str) -> float:
        return self.values[ESTIMATE_FIELDS.index(name)]


@dataclass
class Diagnostics:
    malformed: list[tuple[int, str]]

    def __bool__(self):
        return bool(self.malformed)


def _fmt(value) -> str:
    return repr(float(value))


def export_log(frames, truth, path, estimates=None) -> None:
    """Write frames (arrival order), optional truth and estimate rows."""
    frames = list(frames)
    if not frames and not truth and not estimates:
        raise ValueError("refusing to write an empty log")
    scan_id = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        fh.write("# channels: imu wheels steer throttle brakes loads slope"
                 " radar truth est\n")
        for frame in frames:
            if isinstance(frame, ImuFrame):
                fh.write(f"imu {_fmt(frame.timestamp)} {_fmt(frame.a_x)}"
                         f" {_fmt(frame.a_y)} {_fmt(frame.r)}\n")
            elif isinstance(frame, WheelSpeedFrame):
                fh.write(f"wheels {_fmt(frame.timestamp)} {_fmt(frame.w_rl)}"
                         f" {_fmt(frame.w_rr)} {_fmt(frame.w_fl)}"
                         f" {_fmt(frame.w_fr)}\n")
            elif isinstance(frame, SteeringFrame):
                fh.write(f"steer {_fmt(frame.timestamp)} {_fmt(frame.delta)}\n")
            elif isinstance(frame, ThrottleFrame):
                fh.write(f"throttle {_fmt(frame.timestamp)} {_fmt(frame.throttle)}"
                         f" {_fmt(frame.engine_speed)}\n")
            elif isinstance(frame, BrakePressureFrame):
                fh.write(f"brakes {_fmt(frame.timestamp)} {_fmt(frame.p_front)}"
                         f" {_fmt(frame.p_rear)}\n")
            elif isinstance(frame, VerticalLoadFrame):
                fh.write(f"loads {_fmt(frame.timestamp)} "
                         + " ".join(_fmt(v) for v in frame.f_z) + "\n")
            elif isinstance(frame, SlopeFrame):
                fh.write(f"slope {_fmt(frame.timestamp)} {_fmt(frame.slope)}\n")
            elif isinstance(frame, RadarScan):
                fh.write(f"radar {_fmt(frame.timestamp)} {frame.sensor_id}"
                         f" {scan_id} {_fmt(frame.latency)}"
                         f" {len(frame.detections)}\n")
                for det in frame.detections:
                    fh.write(f"det {scan_id} {_fmt(det.timestamp)}"
                             f" {_fmt(det.v_d)} {_fmt(det.theta)}"
                             f" {_fmt(det.phi)}\n")
                scan_id += 1
            else:
                raise TypeError(f"cannot serialize frame {type(frame)!r}")
        for rec in truth or ():
            fields = " ".join(_fmt(getattr(rec, name)) for name in TRUTH_FIELDS)
            fh.write(f"truth {_fmt(rec.timestamp)} {fields}\n")
        for rec in estimates or ():
            fields = " ".join(_fmt(v) for v in rec.values)
            fh.write(f"est {_fmt(rec.timestamp)} {fields}\n")


@dataclass
class IngestResult:
    frames: list[MeasurementFrame]
    truth: list[TruthRecord]
    estimates: list[EstimateRecord]
    diagnostics: Diagnostics


def ingest(path, max_malformed: int = 100) -> IngestResult:
    """Parse a log file; frames come back sorted by arrival timestamp.

    Malformed rows are collected with their line numbers; more than
    ``max_malformed`` of them aborts with MalformedLog. A wrong or
    missing schema line raises SchemaMismatch.
    """
    frames: list[MeasurementFrame] = []
    truth: list[TruthRecord] = []
    estimates: list[EstimateRecord] = []
    bad: list[tuple[int, str]] = []
    pending: dict[int, dict] = {}

    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE:
            raise SchemaMismatch(f"expected {SCHEMA_LINE!r}, got {first!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                _parse_row(line, frames, truth, estimates, pending)
            except (ValueError, IndexError, KeyError) as exc:
                bad.append((lineno, f"{type(exc).__name__}: {exc}"))
                if len(bad) > max_malformed:
                    raise MalformedLog(
                        f"more than {max_malformed} malformed rows; first at "
                        f"line {bad[0][0]}") from exc
    for scan_id, scan in pending.items():
        bad.append((0, f"scan {scan_id} missing "
                       f"{scan['ndet'] - len(scan['dets'])} detections"))
    frames.sort(key=lambda fr: fr.timestamp)
    return IngestResult(frames, truth, estimates, Diagnostics(bad))


def _parse_row(line: str, frames, truth, estimates, pending) -> None:
    tok = line.split()
    kind = tok[0]
    if kind == "imu":
        _expect(tok, 5)
        frames.append(ImuFrame(*map(float, tok[1:5])))
    elif kind == "wheels":
        _expect(tok, 6)
        frames.append(WheelSpeedFrame(*map(float, tok[1:6])))
    elif kind == "steer":
        _expect(tok, 3)
        frames.append(SteeringFrame(float(tok[1]), float(tok[2])))
    elif kind == "throttle":
        _expect(tok, 4)
        frames.append(ThrottleFrame(float(tok[1]), float(tok[2]), float(tok[3])))
    elif kind == "brakes":
        _expect(tok, 4)
        frames.append(BrakePressureFrame(float(tok[1]), float(tok[2]),
                                         float(tok[3])))
    elif kind == "loads":
        _expect(tok, 6)
        frames.append(VerticalLoadFrame(float(tok[1]),
                                        tuple(map(float, tok[2:6]))))
    elif kind == "slope":
        _expect(tok, 3)
        frames.append(SlopeFrame(float(tok[1]), float(tok[2])))
    elif kind == "radar":
        _expect(tok, 6)
        scan_id = int(tok[3])
        if scan_id in pending:
            raise ValueError(f"duplicate scan id {scan_id}")
        pending[scan_id] = {
            "timestamp": float(tok[1]), "sensor": tok[2],
            "latency": float(tok[4]), "ndet": int(tok[5]), "dets": [],
        }
        _maybe_finish_scan(scan_id, pending, frames)
    elif kind == "det":
        _expect(tok, 6)
        scan_id = int(tok[1])
        scan = pending[scan_id]
        scan["dets"].append(RadarDetection(
            float(tok[3]), float(tok[4]), float(tok[5]),
            timestamp=float(tok[2])))
        _maybe_finish_scan(scan_id, pending, frames)
    elif kind == "truth":
        _expect(tok, 2 + len(TRUTH_FIELDS))
        values = list(map(float, tok[1:]))
        truth.append(TruthRecord(values[0], *values[1:]))
    elif kind == "est":
        _expect(tok, 2 + len(ESTIMATE_FIELDS))
        values = list(map(float, tok[1:]))
        estimates.append(EstimateRecord(values[0], tuple(values[1:])))
    else:
        raise ValueError(f"unknown channel {kind!r}")


def _expect(tok, count):
    if len(tok) != count:
        raise ValueError(f"{tok[0]} row needs {count} columns, got {len(tok)}")


def _maybe_finish_scan(scan_id, pending, frames) -> None:
    scan = pending[scan_id]
    if len(scan["dets"]) == scan["ndet"]:
        frames.append(RadarScan(tuple(scan["dets"]), sensor_id=scan["sensor"],
                                timestamp=scan["timestamp"],
                                latency=scan["latency"]))
        del pending[scan_id]
