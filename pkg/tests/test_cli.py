import os

import pytest

from vmhe import cli, logio
from vmhe.metrics import MetricsReport

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MAP_PATH = os.path.join(REPO, "configs", "engine_map.txt")


def small_config(tmp_path, extra=""):
    text = f"""
vehicle.l_f = 1.6
vehicle.l_r = 1.4
vehicle.t_r = 1.5
vehicle.m = 800
vehicle.i_z = 1000
vehicle.i_w = 1.2
vehicle.r_e_rl = 0.33
vehicle.r_e_rr = 0.33
tire.front.b = 11
tire.front.c = 1.45
tire.front.d = 2.9
tire.front.e = 0.9
tire.rear.b = 12
tire.rear.c = 1.5
tire.rear.d = 2.95
tire.rear.e = 0.92
brake.mu_p = 0.45
brake.a_piston = 2e-3
brake.r_b = 0.15
brake.bias = 0.6
loss.c_x = 0.9
loss.a_front = 1.1
loss.c_r = 0.012
engine.map = {MAP_PATH}
radar.radar0.x = 1.5
radar.radar0.y = 0.5
radar.radar1.x = 1.5
radar.radar1.y = -0.5
mhe.n = 10
mhe.dt = 0.02
scenario.initial_speed = 30.0
scenario.seed = 11
scenario.segment.0.duration = 2.0
scenario.segment.0.steer = sine 0.015 0.5
scenario.segment.0.throttle = const 0.3
{extra}
"""
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp)
    log_path = str(tmp / "sim.log")
    assert cli.main(["simulate", "--config", cfg, "--out", log_path]) == 0
    return tmp, cfg, log_path


class TestSimulate:
    def test_log_is_ingestable(self, workspace):
        _, _, log_path = workspace
        result = logio.ingest(log_path)
        assert len(result.frames) > 500
        assert len(result.truth) > 150

    def test_seed_override_changes_stream(self, workspace, tmp_path):
        _, cfg, log_path = workspace
        other = str(tmp_path / "other.log")
        assert cli.main(["simulate", "--config", cfg, "--out", other,
                         "--seed", "99"]) == 0
        assert open(other).read() != open(log_path).read()


class TestEstimate:
    def test_outputs_and_determinism(self, workspace, tmp_path):
        _, cfg, log_path = workspace
        out1 = str(tmp_path / "out1")
        out2 = str(tmp_path / "out2")
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", out1]) == 0
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", out2]) == 0
        for name in ("estimates.log", "metrics.txt", "resolved.cfg"):
            assert os.path.exists(os.path.join(out1, name))
            with open(os.path.join(out1, name)) as f1, \
                    open(os.path.join(out2, name)) as f2:
                assert f1.read() == f2.read()

    def test_rerun_on_resolved_config_reproduces_metrics(self, workspace, tmp_path):
        _, cfg, log_path = workspace
        out1 = str(tmp_path / "first")
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", out1]) == 0
        out2 = str(tmp_path / "second")
        resolved = os.path.join(out1, "resolved.cfg")
        assert cli.main(["estimate", "--config", resolved, "--log", log_path,
                         "--out", out2]) == 0
        with open(os.path.join(out1, "metrics.txt")) as f1, \
                open(os.path.join(out2, "metrics.txt")) as f2:
            assert f1.read() == f2.read()

    def test_metrics_file_round_trips(self, workspace, tmp_path):
        _, cfg, log_path = workspace
        out = str(tmp_path / "out")
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", out]) == 0
        text = open(os.path.join(out, "metrics.txt")).read()
        report = MetricsReport.from_text(text)
        assert report.to_text() == text
        assert report.rmse["v_y"] < 0.2

    def test_schema_error_exit_code(self, workspace, tmp_path):
        _, cfg, _ = workspace
        bad = tmp_path / "bad.log"
        bad.write_text("# not-a-log 1\n")
        assert cli.main(["estimate", "--config", cfg, "--log", str(bad),
                         "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_key_exit_code(self, workspace, tmp_path):
        _, _, log_path = workspace
        cfg = small_config(tmp_path, "nonsense.key = 1\n")
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", str(tmp_path / "o")]) == 2


class TestMetricsCommand:
    def test_metrics_from_exported_estimates(self, workspace, tmp_path):
        _, cfg, log_path = workspace
        out = str(tmp_path / "out")
        assert cli.main(["estimate", "--config", cfg, "--log", log_path,
                         "--out", out]) == 0
        report_path = str(tmp_path / "metrics2.txt")
        assert cli.main(["metrics", "--truth", log_path,
                         "--estimates", os.path.join(out, "estimates.log"),
                         "--out", report_path]) == 0
        report = MetricsReport.from_text(open(report_path).read())
        assert "v_x" in report.rmse


class TestCalibrateCheck:
    def test_writes_trajectory(self, tmp_path):
        cfg = small_config(
            tmp_path,
            "sim.radar.radar0.pitch = 0.26\n"
            "sim.radar.radar0.yaw = 0.087\n"
            "scenario.segment.1.duration = 6.0\n"
            "scenario.segment.1.steer = const 0.0\n"
            "scenario.segment.1.throttle = const 0.28\n")
        log_path = str(tmp_path / "sim.log")
        assert cli.main(["simulate", "--config", cfg, "--out", log_path]) == 0
        out = str(tmp_path / "cal.txt")
        assert cli.main(["calibrate-check", "--config", cfg, "--log", log_path,
                         "--out", out]) == 0
        lines = [ln for ln in open(out).read().splitlines()
                 if ln and not ln.startswith("#")]
        assert lines
        first_yaw = float(lines[0].split()[3])
        last = [ln for ln in lines if ln.split()[1] == "radar0"][-1]
        last_yaw = float(last.split()[3])
        last_pitch = float(last.split()[4])
        assert last_yaw < first_yaw * 0.05
        assert last_pitch < 0.01
