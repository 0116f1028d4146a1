"""Reference decision modules: congestion model, route advisor, fleet logger
and a background proxy that pushes fleet snapshots to a file endpoint."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from .datastore import point_segment_distance_m
from .errors import QueueFull, UnknownVehicle, ValidationError
from .events import VEHICLE_LOGGED_IN, EventDescriptor
from .kernel import DecisionModule
from .protocol import Message, MsgType

log = logging.getLogger(__name__)


def _telemetry(ev: EventDescriptor):
    msg = ev.payload
    if isinstance(msg, Message) and msg.msg_type == MsgType.TELEMETRY:
        return msg.body
    return None


@dataclass(frozen=True)
class CongestionParams:
    window_seconds: float = 60.0
    slow_speed_threshold: float = 3.0
    penalty_factor: float = 2.0
    match_radius_m: float = 100.0

    def __post_init__(self):
        for name in ("window_seconds", "slow_speed_threshold", "penalty_factor", "match_radius_m"):
            if not getattr(self, name) > 0:
                raise ValidationError(name, "must be > 0")
        if self.penalty_factor < 1:
            raise ValidationError("penalty_factor", "must be >= 1")

    @classmethod
    def from_params(cls, params):
        known = cls.__dataclass_fields__
        return cls(**{k: float(v) for k, v in params.items() if k in known})


class CongestionModel(DecisionModule):
    """Slow probe reports penalize the nearest road segment.

    A report slower than the threshold sets both directions of the matched
    segment to base time x penalty. Segments without a slow report for longer
    than the window go back to base time; decay is checked on every event,
    against the event timestamp.
    """

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        self.cfg = CongestionParams.from_params(params)
        if api.roads is None:
            raise ValidationError("roads", "congestion model needs a road graph")
        self._penalized: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def nearest_segment(self, lat, lon):
        roads = self.api.roads
        best = None
        for e in roads.edges():
            pair = tuple(sorted((e.src, e.dst)))
            d = point_segment_distance_m(lat, lon, roads.nodes[pair[0]], roads.nodes[pair[1]])
            if best is None or (d, pair) < best:
                best = (d, pair)
        if best is None or best[0] > self.cfg.match_radius_m:
            return None
        return best[1]

    def _directions(self, pair):
        a, b = pair
        return [(s, d) for s, d in ((a, b), (b, a)) if self.api.roads.has_edge(s, d)]

    def on_event(self, ev):
        t = _telemetry(ev)
        with self._lock:
            self._decay(ev.timestamp)
            if t is None:
                return
            pair = self.nearest_segment(t.latitude, t.longitude)
            if pair is None:
                log.debug("telemetry from %s at (%f, %f) matches no road", ev.source_target,
                          t.latitude, t.longitude)
                return
            if t.speed >= self.cfg.slow_speed_threshold:
                return
            for s, d in self._directions(pair):
                base = self.api.roads.edge(s, d).base_travel_time
                self.api.roads.update_edge_weight(s, d, base * self.cfg.penalty_factor)
            self._penalized[pair] = ev.timestamp

    def _decay(self, now):
        window_ms = self.cfg.window_seconds * 1000
        for pair, last in list(self._penalized.items()):
            if now - last > window_ms:
                for s, d in self._directions(pair):
                    self.api.roads.reset_edge_weight(s, d)
                del self._penalized[pair]

    def penalized(self):
        with self._lock:
            return dict(self._penalized)


def parse_destinations(text: str) -> dict[str, str]:
    """``"v1:C, v2:B"`` -> {"v1": "C", "v2": "B"}."""
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        vid, sep, node = item.partition(":")
        if not sep or not vid or not node:
            raise ValidationError("destinations", f"bad entry {item!r}")
        out[vid.strip()] = node.strip()
    return out


UNREACHABLE = "unreachable"


class RouteAdvisor(DecisionModule):
    """Sends each vehicle with a destination its current best route, only when
    it differs from the last advisory that vehicle got. Declare the congestion
    module as a dependency so weights are updated before routing."""

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        if api.roads is None:
            raise ValidationError("roads", "route advisor needs a road graph")
        self.destinations = parse_destinations(params.get("destinations", ""))
        for vid, node in self.destinations.items():
            if node not in api.roads.nodes:
                raise ValidationError("destinations", f"{vid} -> unknown node {node}")
        self.warning_severity = int(params.get("warning_severity", 2))
        self._last: dict[str, object] = {}
        self._lock = threading.Lock()
        self.sent: list[Message] = []

    def set_destination(self, vehicle_id, node):
        with self._lock:
            self.destinations[vehicle_id] = node
            self._last.pop(vehicle_id, None)

    def on_event(self, ev):
        vid = ev.source_target
        if ev.event_type == VEHICLE_LOGGED_IN:
            with self._lock:
                self._last.pop(vid, None)
            return
        t = _telemetry(ev)
        if t is None:
            return
        with self._lock:
            dest = self.destinations.get(vid)
            if dest is None:
                return
            start = self.api.roads.nearest_node(t.latitude, t.longitude)
            route = self.api.roads.shortest_route(start, dest)
            key = route.nodes if route is not None else UNREACHABLE
            if self._last.get(vid) == key:
                return
            if route is not None:
                msg = self.api.messages.route_advisory(vid, route.nodes)
            else:
                msg = self.api.messages.warning(vid, self.warning_severity,
                                                f"destination {dest} unreachable from {start}")
            try:
                self.api.send_to_vehicle(vid, msg)
            except (UnknownVehicle, QueueFull) as exc:
                log.warning("advisory for %s not sent: %r", vid, exc)
                return
            self._last[vid] = key
            self.sent.append(msg)


def format_log_line(ev: EventDescriptor) -> str:
    return json.dumps({"timestamp": ev.timestamp, "event_type": ev.event_type,
                       "source_target": ev.source_target}, sort_keys=True)


def parse_log_line(line: str) -> tuple[int, str, str]:
    rec = json.loads(line)
    return rec["timestamp"], rec["event_type"], rec["source_target"]


class FleetLogger(DecisionModule):
    """Appends one JSON line per event, to ``path`` if given, always in memory."""

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        self.path = Path(params["path"]) if params.get("path") else None
        self.lines: list[str] = []
        self._lock = threading.Lock()

    def on_event(self, ev):
        line = format_log_line(ev)
        with self._lock:
            self.lines.append(line)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


class ProxyStub(DecisionModule):
    """Runs beside the server and periodically pushes the fleet snapshot to a
    JSON file, standing in for a feed to an external legacy system."""

    background = True

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        self.period = float(params.get("period_seconds", 5.0))
        if self.period <= 0:
            raise ValidationError("period_seconds", "must be > 0")
        self.path = Path(params.get("path", "fleet_snapshot.json"))
        self.writes = 0
        self.last_written = None
        self._stop = threading.Event()
        self._thread = None

    def start(self):
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name=f"tms-module-{self.module_id}",
                                        daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.wait(self.period):
            try:
                self.push_snapshot()
            except OSError as exc:
                log.error("%s: snapshot write failed: %s", self.module_id, exc)

    def push_snapshot(self):
        doc = {"written_at": self.api.clock(),
               "vehicles": [s.to_dict() for s in self.api.fleet.fleet_snapshot()]}
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.path)
        self.writes += 1
        self.last_written = doc
        return doc

    def stop(self, timeout=5.0):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)

    @property
    def running(self):
        return self._thread is not None and self._thread.is_alive()


BUILTIN_FACTORIES = {
    "congestion": CongestionModel,
    "route_advisor": RouteAdvisor,
    "fleet_logger": FleetLogger,
    "proxy_stub": ProxyStub,
}
