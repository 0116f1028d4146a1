import json
import signal
import subprocess
import sys

import pytest

from tms.cli import server_parser, sim_main, sim_parser
from tms.comms import DEFAULT_DISPATCHERS, DEFAULT_LOCAL_QUEUE_CAPACITY, DEFAULT_PORT

from tests.conftest import SCENARIOS


def test_server_defaults():
    args = server_parser().parse_args(["--config", "x.xml"])
    assert (args.port, args.dispatchers, args.local_queue_capacity) == (
        DEFAULT_PORT, DEFAULT_DISPATCHERS, DEFAULT_LOCAL_QUEUE_CAPACITY) == (7077, 4, 256)
    assert not args.sticky_dispatch and args.map is None


def test_server_rejects_bad_numbers():
    with pytest.raises(SystemExit):
        server_parser().parse_args(["--config", "x", "--dispatchers", "0"])
    with pytest.raises(SystemExit):
        server_parser().parse_args([])


def test_sim_parser():
    args = sim_parser().parse_args(["--scenario", "s", "--server", "h:1", "--seed", "4"])
    assert (args.scenario, args.server, args.seed, args.report) == ("s", "h:1", 4, None)


@pytest.mark.parametrize("server", ["nohost", "host:", ":99", "host:abc"])
def test_sim_bad_server(server, capsys):
    assert sim_main(["--scenario", "x", "--server", server]) == 2
    assert "HOST:PORT" in capsys.readouterr().err


def test_sim_missing_scenario(capsys):
    assert sim_main(["--scenario", "/nonexistent.scenario", "--server", "127.0.0.1:1"]) == 2


def test_sim_unreachable_server(tmp_path):
    sc = tmp_path / "s.scenario"
    sc.write_text(f"map {SCENARIOS / 'triangle.map'}\nduration 1\nvehicle v waypoints=A\n")
    assert sim_main(["--scenario", str(sc), "--server", "127.0.0.1:1"]) == 2


def test_server_missing_config_exits_2(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tms.cli", "--config", str(tmp_path / "no.xml"),
                           "--port", "0"], capture_output=True, text=True, timeout=30)
    assert proc.returncode == 2


@pytest.fixture
def server_process(tmp_path):
    proc = subprocess.Popen(
        [sys.executable, "-m", "tms.cli", "--config", str(SCENARIOS / "tms.xml"),
         "--map", str(SCENARIOS / "triangle.map"), "--port", "0", "--log-level", "WARNING"],
        cwd=tmp_path, stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    assert line.startswith("listening on ")
    yield line.split()[-1], proc
    if proc.poll() is None:
        proc.kill()
        proc.wait()


def test_end_to_end_cli(server_process, tmp_path, capsys):
    address, proc = server_process
    report = tmp_path / "report.jsonl"
    code = sim_main(["--scenario", str(SCENARIOS / "three_cybercars.scenario"),
                     "--server", address, "--seed", "1", "--report", str(report)])
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.strip().endswith("PASS")
    records = [json.loads(line) for line in report.read_text().splitlines()]
    assert [r.get("vehicle_id") for r in records[:3]] == ["car1", "car2", "car3"]
    assert records[-1]["passed"] is True

    bad = tmp_path / "bad.scenario"
    bad.write_text(f"map {SCENARIOS / 'triangle.map'}\nduration 0.3\nsettle 0\n"
                   "vehicle z waypoints=A period=100\nexpect z min_warnings 1\n")
    assert sim_main(["--scenario", str(bad), "--server", address]) == 1
    assert "FAIL: z min_warnings 1" in capsys.readouterr().out

    proc.send_signal(signal.SIGINT)
    assert proc.wait(timeout=10) == 0
    snapshot = json.loads((tmp_path / "fleet_snapshot.json").read_text())
    assert {v["vehicle_id"] for v in snapshot["vehicles"]} >= {"car1", "car2", "car3"}
