"""Fleet simulator: scripted RVTP clients that drive a running server.

Scenario files use the same line-record style as maps::

    map triangle.map                    # relative to the scenario file
    duration 10                         # seconds
    settle 1.0                          # optional wait for late replies
    vehicle v1 waypoints=A,B speeds=0:20,3:1 period=500 disconnect=5 noise=0
    expect v2 advisory A,B,C
    expect v2 min_advisories 2

``speeds`` is a piecewise-constant profile ``t0:v0,t1:v1,...`` (seconds:m/s).
Expectation kinds: advisory NODES, min_advisories N, max_advisories N,
min_warnings N, max_warnings N, min_received N.
"""

from __future__ import annotations

import json
import logging
import math
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .datastore import RoadGraph, haversine_m, load_road_graph
from .errors import AssertionFailure, ConnectError, EndOfStream, ParseError, ProtocolError
from .protocol import Message, MessageFactory, MsgType, marshal_frame, unmarshal_frame

log = logging.getLogger(__name__)

EXPECTATION_KINDS = ("advisory", "min_advisories", "max_advisories", "min_warnings",
                     "max_warnings", "min_received")


@dataclass
class VehicleConfig:
    vehicle_id: str
    waypoints: list[str]
    speeds: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    period_ms: int = 500
    disconnect_at: Optional[float] = None
    noise_m: float = 0.0

    def speed_at(self, t: float) -> float:
        v = 0.0
        for start, speed in self.speeds:
            if t >= start:
                v = speed
        return v

    def distance_at(self, t: float) -> float:
        """Metres travelled after ``t`` seconds under the speed profile."""
        total = 0.0
        for i, (start, speed) in enumerate(self.speeds):
            end = self.speeds[i + 1][0] if i + 1 < len(self.speeds) else math.inf
            if t <= start:
                break
            total += speed * (min(t, end) - start)
        return total


@dataclass
class Expectation:
    vehicle_id: str
    kind: str
    arg: str

    def __str__(self):
        return f"{self.vehicle_id} {self.kind} {self.arg}"


@dataclass
class Scenario:
    map_path: Path
    roads: RoadGraph
    vehicles: list[VehicleConfig]
    duration: float
    expectations: list[Expectation] = field(default_factory=list)
    settle: float = 1.0


def _kv(tokens, lineno):
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ParseError(f"line {lineno}: expected key=value, got {tok!r}")
        out[key] = value
    return out


def parse_speeds(text: str) -> list[tuple[float, float]]:
    profile = []
    for item in text.split(","):
        t, sep, v = item.partition(":")
        if not sep:
            raise ValueError(f"bad speed entry {item!r}")
        profile.append((float(t), float(v)))
    profile.sort()
    if not profile or profile[0][0] != 0:
        raise ValueError("speed profile must start at t=0")
    if any(v < 0 or not math.isfinite(v) for _, v in profile):
        raise ValueError("speeds must be finite and >= 0")
    return profile


def parse_scenario(text: str, base_dir=".", name="<scenario>") -> Scenario:
    map_path = None
    duration = None
    settle = 1.0
    vehicles: list[VehicleConfig] = []
    expectations = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        kind, args = tokens[0], tokens[1:]
        try:
            if kind == "map" and len(args) == 1:
                map_path = Path(base_dir) / args[0]
            elif kind == "duration" and len(args) == 1:
                duration = float(args[0])
            elif kind == "settle" and len(args) == 1:
                settle = float(args[0])
            elif kind == "vehicle" and args:
                kv = _kv(args[1:], lineno)
                unknown = set(kv) - {"waypoints", "speeds", "period", "disconnect", "noise"}
                if unknown:
                    raise ParseError(f"unknown vehicle fields {sorted(unknown)}")
                vehicles.append(VehicleConfig(
                    args[0],
                    [w for w in kv.get("waypoints", "").split(",") if w],
                    parse_speeds(kv.get("speeds", "0:0")),
                    int(kv.get("period", 500)),
                    float(kv["disconnect"]) if "disconnect" in kv else None,
                    float(kv.get("noise", 0.0)),
                ))
            elif kind == "expect" and len(args) >= 2:
                if args[1] not in EXPECTATION_KINDS:
                    raise ParseError(f"unknown expectation {args[1]!r}")
                expectations.append(Expectation(args[0], args[1], " ".join(args[2:])))
            else:
                raise ParseError(f"unrecognized record {raw.strip()!r}")
        except (ValueError, ParseError) as exc:
            raise ParseError(f"{name}:{lineno}: {exc}") from exc
    if map_path is None or duration is None:
        raise ParseError(f"{name}: scenario needs 'map' and 'duration' records")
    if duration <= 0:
        raise ParseError(f"{name}: duration must be > 0")
    roads = load_road_graph(map_path)
    seen = set()
    for v in vehicles:
        if v.vehicle_id in seen:
            raise ParseError(f"{name}: duplicate vehicle {v.vehicle_id}")
        seen.add(v.vehicle_id)
        if not v.waypoints:
            raise ParseError(f"{name}: vehicle {v.vehicle_id} has no waypoints")
        missing = [w for w in v.waypoints if w not in roads.nodes]
        if missing:
            raise ParseError(f"{name}: vehicle {v.vehicle_id} waypoints {missing} not in map")
        if v.period_ms <= 0:
            raise ParseError(f"{name}: vehicle {v.vehicle_id} period must be > 0")
    for e in expectations:
        if e.vehicle_id not in seen:
            raise ParseError(f"{name}: expectation for unknown vehicle {e.vehicle_id}")
    return Scenario(map_path, roads, vehicles, duration, expectations, settle)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_scenario(text, path.parent, str(path))


class RealClock:
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000

    def sleep_until(self, t_ms: int, stop: Optional[threading.Event] = None) -> None:
        delay = (t_ms - self.now_ms()) / 1000
        if delay > 0:
            if stop is not None:
                stop.wait(delay)
            else:
                time.sleep(delay)


class ManualClock:
    """Jumps straight to whatever time is slept until. One per vehicle."""

    def __init__(self, start_ms: int = 0):
        self.t = start_ms

    def now_ms(self) -> int:
        return self.t

    def sleep_until(self, t_ms: int, stop=None) -> None:
        self.t = max(self.t, t_ms)


@dataclass
class VehicleResult:
    vehicle_id: str
    sent: int = 0
    transcript: list[bytes] = field(default_factory=list)
    received: list[Message] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def advisories(self) -> list[tuple[str, ...]]:
        return [m.body.nodes for m in self.received if m.msg_type == MsgType.ROUTE_ADVISORY]

    @property
    def warnings(self) -> list[str]:
        return [m.body.text for m in self.received if m.msg_type == MsgType.WARNING]

    def to_dict(self):
        return {"vehicle_id": self.vehicle_id, "sent": self.sent,
                "received": len(self.received),
                "advisories": [list(a) for a in self.advisories],
                "warnings": self.warnings, "error": self.error}


class SimulatedVehicle:
    """A scripted vehicle moving in straight lines between waypoints."""

    def __init__(self, config: VehicleConfig, roads: RoadGraph, seed: int = 0):
        self.config = config
        self.points = [roads.nodes[w] for w in config.waypoints]
        self.legs = [haversine_m(*a, *b) for a, b in zip(self.points, self.points[1:])]
        self.rng = random.Random(f"{seed}:{config.vehicle_id}")
        self.messages = MessageFactory()

    def position_at(self, t: float) -> tuple[float, float, bool]:
        """(lat, lon, arrived) after ``t`` seconds."""
        d = self.config.distance_at(t)
        for (a, b), length in zip(zip(self.points, self.points[1:]), self.legs):
            if d < length:
                f = d / length
                return a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), False
            d -= length
        last = self.points[-1]
        return last[0], last[1], True

    def telemetry(self, tick: int, timestamp: int) -> Message:
        t = tick * self.config.period_ms / 1000
        lat, lon, arrived = self.position_at(t)
        speed = 0.0 if arrived else self.config.speed_at(t)
        if self.config.noise_m > 0:
            lat += math.degrees(self.rng.gauss(0, self.config.noise_m) / 6_371_000)
            lon += math.degrees(self.rng.gauss(0, self.config.noise_m)
                                / (6_371_000 * math.cos(math.radians(lat))))
            lat = max(-90.0, min(90.0, lat))
            lon = max(-180.0, min(180.0, lon))
        return self.messages.telemetry(self.config.vehicle_id, timestamp, lat, lon, speed)

    def ticks(self, duration: float) -> int:
        limit = duration if self.config.disconnect_at is None else min(
            duration, self.config.disconnect_at)
        return max(0, math.ceil(limit * 1000 / self.config.period_ms))

    def outbound_frames(self, duration: float, clock) -> list[bytes]:
        """The frames this vehicle sends over ``duration`` seconds, without a network."""
        start = clock.now_ms()
        frames = [marshal_frame(self.messages.login(self.config.vehicle_id))]
        for k in range(self.ticks(duration)):
            clock.sleep_until(start + k * self.config.period_ms)
            frames.append(marshal_frame(self.telemetry(k, clock.now_ms())))
        return frames

    def run(self, address, duration: float, clock=None, settle: float = 1.0,
            stop: Optional[threading.Event] = None, connect_timeout: float = 5.0) -> VehicleResult:
        clock = clock or RealClock()
        stop = stop or threading.Event()
        result = VehicleResult(self.config.vehicle_id)
        try:
            sock = socket.create_connection(address, timeout=connect_timeout)
        except OSError as exc:
            raise ConnectError(f"{self.config.vehicle_id}: cannot reach {address}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        reader = threading.Thread(target=self._read, args=(sock, result),
                                  name=f"sim-read-{self.config.vehicle_id}", daemon=True)
        reader.start()
        try:
            self._send(sock, result, marshal_frame(self.messages.login(self.config.vehicle_id)))
            start = clock.now_ms()
            for k in range(self.ticks(duration)):
                clock.sleep_until(start + k * self.config.period_ms, stop)
                if stop.is_set():
                    break
                self._send(sock, result, marshal_frame(self.telemetry(k, clock.now_ms())))
                result.sent += 1
            if self.config.disconnect_at is None:
                clock.sleep_until(start + int(duration * 1000), stop)
                stop.wait(settle)
            else:
                clock.sleep_until(start + int(self.config.disconnect_at * 1000), stop)
        except OSError as exc:
            result.error = f"{type(exc).__name__}: {exc}"
        finally:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            reader.join(5.0)
            sock.close()
        return result

    @staticmethod
    def _send(sock, result, frame):
        sock.sendall(frame)
        result.transcript.append(frame)

    def _read(self, sock, result):
        stream = sock.makefile("rb")
        try:
            while True:
                result.received.append(unmarshal_frame(stream))
        except EndOfStream:
            pass
        except (ProtocolError, OSError) as exc:
            log.debug("%s reader stopped: %s", self.config.vehicle_id, exc)
        finally:
            stream.close()


def simulated_vehicle(config: VehicleConfig, roads: RoadGraph, clock, address=None,
                      duration: float = 1.0, seed: int = 0):
    """Outbound transcript (frames) of one vehicle; over the network if
    ``address`` is given, otherwise generated offline."""
    sim = SimulatedVehicle(config, roads, seed)
    if address is None:
        return sim.outbound_frames(duration, clock)
    return sim.run(address, duration, clock).transcript


@dataclass
class Report:
    vehicles: dict[str, VehicleResult]
    failures: list[str]
    elapsed: float

    @property
    def passed(self):
        return not self.failures

    @property
    def frames_sent(self):
        return sum(v.sent for v in self.vehicles.values())

    def lines(self) -> list[str]:
        out = [json.dumps({"record": "vehicle", **v.to_dict()}, sort_keys=True)
               for _, v in sorted(self.vehicles.items())]
        out.append(json.dumps({"record": "summary", "passed": self.passed,
                               "failures": self.failures, "frames_sent": self.frames_sent,
                               "elapsed_s": round(self.elapsed, 3)}, sort_keys=True))
        return out

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    def summary(self) -> str:
        rows = [f"{vid}: sent={v.sent} received={len(v.received)} "
                f"advisories={[','.join(a) for a in v.advisories]} warnings={len(v.warnings)}"
                + (f" error={v.error}" if v.error else "")
                for vid, v in sorted(self.vehicles.items())]
        rows.append("PASS" if self.passed else "FAIL: " + "; ".join(self.failures))
        return "\n".join(rows)


def check_expectations(expectations, results: dict[str, VehicleResult]) -> list[str]:
    failures = []
    for e in expectations:
        r = results[e.vehicle_id]
        if e.kind == "advisory":
            want = tuple(n for n in e.arg.split(",") if n)
            ok = want in r.advisories
        else:
            n = int(e.arg)
            count = {"min_advisories": len(r.advisories), "max_advisories": len(r.advisories),
                     "min_warnings": len(r.warnings), "max_warnings": len(r.warnings),
                     "min_received": len(r.received)}[e.kind]
            ok = count >= n if e.kind.startswith("min") else count <= n
        if not ok:
            failures.append(str(e))
    for vid, r in results.items():
        if r.error:
            failures.append(f"{vid} error: {r.error}")
    return failures


def run_scenario(scenario: Scenario, address, seed: int = 0, clock_factory=RealClock,
                 report_path=None, check: bool = False) -> Report:
    """Run every vehicle on its own thread against the server at ``address``.

    Raises ConnectError if any vehicle cannot connect, and AssertionFailure
    when ``check`` is set and an expectation is unmet.
    """
    t0 = time.monotonic()
    results: dict[str, VehicleResult] = {}
    errors: list[BaseException] = []
    lock = threading.Lock()

    def drive(cfg):
        sim = SimulatedVehicle(cfg, scenario.roads, seed)
        try:
            res = sim.run(address, scenario.duration, clock_factory(), scenario.settle)
        except BaseException as exc:
            with lock:
                errors.append(exc)
            return
        with lock:
            results[cfg.vehicle_id] = res

    threads = [threading.Thread(target=drive, args=(cfg,), name=f"sim-{cfg.vehicle_id}")
               for cfg in scenario.vehicles]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    report = Report(results, check_expectations(scenario.expectations, results),
                    time.monotonic() - t0)
    if report_path is not None:
        report.write(report_path)
    if check and not report.passed:
        raise AssertionFailure(report.failures, report)
    return report
