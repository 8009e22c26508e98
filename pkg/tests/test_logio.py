import numpy as np
import pytest

from conftest import make_models, make_params
from vmhe import logio
from vmhe.errors import MalformedLog, SchemaMismatch
from vmhe.mhe import ImuFrame, RadarScan
from vmhe.radar import RadarExtrinsics
from vmhe.simulator import (
    PlantTireParams, Profile, RadarSimConfig, Scenario, Segment,
    SensorSuiteConfig, simulate,
)


@pytest.fixture(scope="module")
def sim_output():
    models = make_models()
    params = make_params()
    tires = PlantTireParams(front=params.front, rear=params.rear)
    suite = SensorSuiteConfig(radars=(
        RadarSimConfig("radar0", RadarExtrinsics(np.eye(3), [1.5, 0.5, 0.2]),
                       latency=0.03),
        RadarSimConfig("radar1", RadarExtrinsics(np.eye(3), [1.5, -0.5, 0.2])),
    ))
    scenario = Scenario(
        segments=(Segment(duration=1.5, steer=Profile("sine", a=0.02, b=0.5),
                          throttle=Profile("const", a=0.4),
                          slope=0.01),),
        initial_speed=30.0, seed=3)
    return simulate(scenario, models, tires, suite)


class TestRoundTrip:
    def test_bit_exact(self, sim_output, tmp_path):
        truth, frames = sim_output
        path = tmp_path / "run.log"
        logio.export_log(frames, truth, path)
        result = logio.ingest(path)
        assert not result.diagnostics
        assert result.frames == frames
        assert result.truth == truth

    def test_double_round_trip_identical_bytes(self, sim_output, tmp_path):
        truth, frames = sim_output
        p1 = tmp_path / "a.log"
        p2 = tmp_path / "b.log"
        logio.export_log(frames, truth, p1)
        result = logio.ingest(p1)
        logio.export_log(result.frames, result.truth, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_estimates_round_trip(self, tmp_path):
        recs = [logio.EstimateRecord(0.1 * i,
                                     tuple(float(i + j) for j in
                                           range(len(logio.ESTIMATE_FIELDS))))
                for i in range(5)]
        path = tmp_path / "est.log"
        logio.export_log([], [], path, estimates=recs)
        back = logio.ingest(path)
        assert back.estimates == recs

    def test_empty_log_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            logio.export_log([], [], tmp_path / "empty.log")


class TestRobustness:
    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "bad.log"
        path.write_text("# other-format 9\nimu 0.0 0 0 0\n")
        with pytest.raises(SchemaMismatch):
            logio.ingest(path)

    def test_corrupted_row_reported(self, sim_output, tmp_path):
        truth, frames = sim_output
        path = tmp_path / "run.log"
        logio.export_log(frames, truth, path)
        lines = path.read_text().splitlines()
        # corrupt one imu row
        idx = next(i for i, ln in enumerate(lines) if ln.startswith("imu"))
        lines[idx] = "imu 0.0 not_a_number 0 0"
        path.write_text("\n".join(lines) + "\n")
        result = logio.ingest(path)
        assert len(result.diagnostics.malformed) == 1
        assert result.diagnostics.malformed[0][0] == idx + 1
        assert len(result.frames) == len(frames) - 1

    def test_malformed_threshold(self, tmp_path):
        path = tmp_path / "junk.log"
        rows = [logio.SCHEMA_LINE] + ["garbage row"] * 20
        path.write_text("\n".join(rows) + "\n")
        with pytest.raises(MalformedLog):
            logio.ingest(path, max_malformed=10)

    def test_incomplete_scan_flagged(self, tmp_path):
        path = tmp_path / "cut.log"
        path.write_text(logio.SCHEMA_LINE + "\n"
                        "radar 0.0 radar0 0 0.0 3\n"
                        "det 0 0.0 -29.0 0.1 0.0\n")
        result = logio.ingest(path)
        assert result.frames == []
        assert result.diagnostics.malformed

    def test_frames_sorted_by_arrival(self, sim_output, tmp_path):
        truth, frames = sim_output
        path = tmp_path / "run.log"
        logio.export_log(frames, truth, path)
        result = logio.ingest(path)
        times = [fr.timestamp for fr in result.frames]
        assert times == sorted(times)
