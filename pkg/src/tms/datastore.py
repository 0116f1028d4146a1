"""Fleet state and road-network (cartography) stores with synchronized access."""

from __future__ import annotations

import enum
import heapq
import math
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .errors import DanglingEdge, ParseError, UnknownEdge, UnknownNode, ValidationError

EARTH_RADIUS_M = 6_371_000.0


class Status(str, enum.Enum):
    LOGGED_IN = "LOGGED_IN"
    LOGGED_OUT = "LOGGED_OUT"


@dataclass(frozen=True)
class VehicleState:
    vehicle_id: str
    latitude: Optional[float]
    longitude: Optional[float]
    speed: float
    last_update: int
    status: Status = Status.LOGGED_IN

    @property
    def position(self):
        if self.latitude is None:
            return None
        return (self.latitude, self.longitude)

    def validate(self):
        if not self.vehicle_id:
            raise ValidationError("vehicle_id", "must be non-empty")
        if (self.latitude is None) != (self.longitude is None):
            raise ValidationError("position", "latitude and longitude must both be set")
        if self.latitude is not None:
            if not -90 <= self.latitude <= 90:
                raise ValidationError("latitude", f"{self.latitude} outside [-90, 90]")
            if not -180 <= self.longitude <= 180:
                raise ValidationError("longitude", f"{self.longitude} outside [-180, 180]")
        if not (math.isfinite(self.speed) and self.speed >= 0):
            raise ValidationError("speed", f"{self.speed} must be finite and >= 0")
        if self.last_update < 0:
            raise ValidationError("last_update", "must be >= 0")

    def to_dict(self):
        return {"vehicle_id": self.vehicle_id, "latitude": self.latitude,
                "longitude": self.longitude, "speed": self.speed,
                "last_update": self.last_update, "status": self.status.value}


APPLIED = "applied"
STALE = "stale"


class FleetStore:
    """Latest known state per vehicle.

    States are immutable and replaced whole under a lock, so readers never
    see a half-applied update. Newer-or-equal ``last_update`` wins.
    """

    def __init__(self):
        self._states: dict[str, VehicleState] = {}
        self._lock = threading.Lock()

    def update_vehicle_state(self, state: VehicleState) -> str:
        state.validate()
        with self._lock:
            old = self._states.get(state.vehicle_id)
            if old is not None and state.last_update < old.last_update:
                return STALE
            self._states[state.vehicle_id] = state
            return APPLIED

    def set_status(self, vehicle_id: str, status: Status) -> VehicleState:
        """Change the login status, keeping the last known position and time."""
        with self._lock:
            old = self._states.get(vehicle_id)
            if old is None:
                new = VehicleState(vehicle_id, None, None, 0.0, 0, status)
            else:
                new = replace(old, status=status)
            self._states[vehicle_id] = new
            return new

    def get_vehicle_state(self, vehicle_id: str) -> Optional[VehicleState]:
        with self._lock:
            return self._states.get(vehicle_id)

    def fleet_snapshot(self) -> list[VehicleState]:
        with self._lock:
            return sorted(self._states.values(), key=lambda s: s.vehicle_id)


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def _local_xy(lat, lon, lat0, lon0):
    # equirectangular projection around (lat0, lon0); fine at city scale
    x = math.radians(lon - lon0) * math.cos(math.radians(lat0)) * EARTH_RADIUS_M
    y = math.radians(lat - lat0) * EARTH_RADIUS_M
    return x, y


def point_segment_distance_m(lat, lon, a, b) -> float:
    ax, ay = _local_xy(a[0], a[1], lat, lon)
    bx, by = _local_xy(b[0], b[1], lat, lon)
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    t = 0.0 if length2 == 0 else max(0.0, min(1.0, -(ax * dx + ay * dy) / length2))
    return math.hypot(ax + t * dx, ay + t * dy)


@dataclass
class Edge:
    src: str
    dst: str
    base_travel_time: float
    current_weight: float


@dataclass(frozen=True)
class Route:
    nodes: tuple[str, ...]
    seconds: float


class RoadGraph:
    def __init__(self):
        self.nodes: dict[str, tuple[float, float]] = {}
        self._edges: dict[tuple[str, str], Edge] = {}
        self._out: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def add_node(self, node_id: str, lat: float, lon: float):
        if not -90 <= lat <= 90 or not -180 <= lon <= 180:
            raise ValidationError("position", f"node {node_id} at ({lat}, {lon}) is off the globe")
        self.nodes[node_id] = (lat, lon)
        self._out.setdefault(node_id, [])

    def add_edge(self, src: str, dst: str, seconds: float):
        if src not in self.nodes or dst not in self.nodes:
            raise DanglingEdge(src, dst)
        if not (math.isfinite(seconds) and seconds > 0):
            raise ValidationError("weight", f"{seconds} must be > 0")
        if (src, dst) not in self._edges:
            self._out[src].append(dst)
            self._out[src].sort()
        self._edges[(src, dst)] = Edge(src, dst, seconds, seconds)

    def edge(self, src, dst) -> Edge:
        with self._lock:
            e = self._edges.get((src, dst))
            if e is None:
                raise UnknownEdge(f"{src}->{dst}")
            return replace(e)

    def has_edge(self, src, dst) -> bool:
        return (src, dst) in self._edges

    def edges(self) -> list[Edge]:
        with self._lock:
            return [replace(e) for _, e in sorted(self._edges.items())]

    def weight(self, src, dst) -> float:
        return self.edge(src, dst).current_weight

    def update_edge_weight(self, src: str, dst: str, weight_seconds: float) -> None:
        if not (isinstance(weight_seconds, (int, float)) and math.isfinite(weight_seconds)
                and weight_seconds > 0):
            raise ValidationError("weight", f"{weight_seconds} must be > 0")
        with self._lock:
            e = self._edges.get((src, dst))
            if e is None:
                raise UnknownEdge(f"{src}->{dst}")
            e.current_weight = float(weight_seconds)

    def reset_edge_weight(self, src: str, dst: str) -> None:
        with self._lock:
            e = self._edges.get((src, dst))
            if e is None:
                raise UnknownEdge(f"{src}->{dst}")
            e.current_weight = e.base_travel_time

    def nearest_node(self, lat: float, lon: float) -> Optional[str]:
        if not self.nodes:
            return None
        return min(self.nodes, key=lambda n: (haversine_m(lat, lon, *self.nodes[n]), n))

    def shortest_route(self, src: str, dst: str) -> Optional[Route]:
        """Minimum total current weight; among equal costs the lexicographically
        smallest node sequence. None when ``dst`` is unreachable."""
        for n in (src, dst):
            if n not in self.nodes:
                raise UnknownNode(n)
        with self._lock:
            weights = {k: e.current_weight for k, e in self._edges.items()}
        # (cost, path) keys make the lexicographic tie-break part of the
        # priority; it is prefix-consistent, so settling each node once is exact
        heap = [(0.0, (src,))]
        settled = set()
        while heap:
            cost, path = heapq.heappop(heap)
            node = path[-1]
            if node in settled:
                continue
            if node == dst:
                return Route(path, cost)
            settled.add(node)
            for nxt in self._out[node]:
                if nxt not in settled:
                    heapq.heappush(heap, (cost + weights[(node, nxt)], path + (nxt,)))
        return None


def load_road_graph(path) -> RoadGraph:
    """Read the plain-text map format.

    One record per line, ``#`` starts a comment::

        node ID LAT LON
        edge FROM TO SECONDS      two-way road, both directions get SECONDS
        oneway FROM TO SECONDS    single directed edge
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_road_graph(text, str(path))


def parse_road_graph(text: str, name: str = "<map>") -> RoadGraph:
    g = RoadGraph()
    pending = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        kind, args = line[0], line[1:]
        try:
            if kind == "node" and len(args) == 3:
                if args[0] in g.nodes:
                    raise ParseError(f"duplicate node {args[0]}")
                g.add_node(args[0], float(args[1]), float(args[2]))
            elif kind in ("edge", "oneway") and len(args) == 3:
                pending.append((lineno, kind, args[0], args[1], float(args[2])))
            else:
                raise ParseError(f"unrecognized record {raw.strip()!r}")
        except (ValueError, ParseError) as exc:
            raise ParseError(f"{name}:{lineno}: {exc}") from exc
    if not g.nodes:
        raise ParseError(f"{name}: no nodes")
    for lineno, kind, a, b, secs in pending:
        if a not in g.nodes or b not in g.nodes:
            raise DanglingEdge(a, b)
        if a == b:
            raise ParseError(f"{name}:{lineno}: self-loop on {a}")
        try:
            g.add_edge(a, b, secs)
            if kind == "edge":
                g.add_edge(b, a, secs)
        except ValidationError as exc:
            raise ParseError(f"{name}:{lineno}: {exc}") from exc
    return g
