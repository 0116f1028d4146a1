"""Decision-module configuration, initialization order and the kernel API."""

from __future__ import annotations

import logging
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .comms import (DEFAULT_DISPATCHERS, DEFAULT_GRACE_SECONDS, DEFAULT_LOCAL_QUEUE_CAPACITY,
                    DEFAULT_PORT, CommsServer)
from .datastore import FleetStore, RoadGraph, Status, VehicleState
from .errors import (DuplicateModuleId, InitError, ParseError, UnknownDependency,
                     UnknownFactory, UnknownVehicle)
from .events import (VEHICLE_LOGGED_IN, VEHICLE_LOGGED_OUT, EventDescriptor, EventSourceNode,
                     ListenerRegistration, now_ms)
from .ordering import topological_order
from .protocol import Message, MessageFactory, MsgType, ProtocolHandler

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModuleSpec:
    module_id: str
    factory_id: str
    dependencies: tuple[str, ...] = ()
    params: Mapping[str, str] = field(default_factory=dict)


def parse_module_config(text: str, name: str = "<config>") -> list[ModuleSpec]:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ParseError(f"{name}: {exc}") from exc
    if root.tag != "tms":
        raise ParseError(f"{name}: root element must be <tms>, got <{root.tag}>")
    specs = []
    for el in root:
        if el.tag != "module":
            raise ParseError(f"{name}: unexpected element <{el.tag}>")
        mid, fid = el.get("id"), el.get("factory")
        if not mid or not fid:
            raise ParseError(f"{name}: <module> needs non-empty id and factory attributes")
        deps, params = [], {}
        for child in el:
            if child.tag == "depends":
                dep = (child.text or "").strip()
                if not dep:
                    raise ParseError(f"{name}: empty <depends> in module {mid}")
                if dep in deps:
                    raise ParseError(f"{name}: module {mid} lists {dep} twice")
                deps.append(dep)
            elif child.tag == "param":
                key = child.get("key")
                if not key or child.get("value") is None:
                    raise ParseError(f"{name}: <param> in {mid} needs key and value")
                params[key] = child.get("value")
            else:
                raise ParseError(f"{name}: unexpected <{child.tag}> in module {mid}")
        specs.append(ModuleSpec(mid, fid, tuple(deps), params))
    validate_specs(specs)
    return specs


def validate_specs(specs: Sequence[ModuleSpec]) -> None:
    seen = set()
    for s in specs:
        if s.module_id in seen:
            raise DuplicateModuleId(s.module_id)
        seen.add(s.module_id)
    for s in specs:
        if s.module_id in s.dependencies:
            raise UnknownDependency(f"{s.module_id} depends on itself")
        for d in s.dependencies:
            if d not in seen:
                raise UnknownDependency(d)


def load_module_config(path) -> list[ModuleSpec]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_module_config(text, str(path))


def topological_module_order(specs: Sequence[ModuleSpec]) -> list[str]:
    return topological_order({s.module_id: s.dependencies for s in specs})


class DecisionModule:
    """Base class for decision modules.

    The kernel calls ``init`` once, in dependency order, then registers
    ``on_event`` as a listener on the root event source. Modules that set
    ``background = True`` get ``start``/``stop`` calls around the server's
    lifetime. ``on_event`` may be called concurrently from several
    dispatchers.
    """

    background = False

    def init(self, api: "KernelApi", module_id: str, dependencies: Sequence[str],
             params: Mapping[str, str]) -> None:
        self.api = api
        self.module_id = module_id
        self.dependencies = tuple(dependencies)
        self.params = dict(params)

    def on_event(self, ev: EventDescriptor) -> None:
        pass

    def start(self) -> None:
        pass

    def stop(self, timeout: float = DEFAULT_GRACE_SECONDS) -> None:
        pass


Factory = Callable[[], DecisionModule]


class KernelApi:
    """What every decision module gets at init. One shared instance per kernel."""

    def __init__(self, kernel: "Kernel"):
        self._kernel = kernel
        self.fleet: FleetStore = kernel.fleet
        self.roads: Optional[RoadGraph] = kernel.roads
        self.root: EventSourceNode = kernel.root
        self.messages: MessageFactory = MessageFactory()
        self.clock = kernel.clock

    def send_to_vehicle(self, vehicle_id: str, msg: Message) -> None:
        self._kernel.send_to_vehicle(vehicle_id, msg)

    def broadcast(self, msg: Message) -> int:
        return self._kernel.broadcast(msg)

    def register_listener(self, listener_id, callback, dependencies=()):
        self.root.register_listener(ListenerRegistration(listener_id, callback, dependencies))

    def unregister_listener(self, listener_id):
        self.root.unregister_listener(listener_id)

    def logged_in(self) -> list[str]:
        return self._kernel.comms.logged_in() if self._kernel.comms else []


@dataclass
class KernelConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    dispatchers: int = DEFAULT_DISPATCHERS
    local_queue_capacity: int = DEFAULT_LOCAL_QUEUE_CAPACITY
    sticky_dispatch: bool = False
    grace_seconds: float = DEFAULT_GRACE_SECONDS


class Kernel:
    """Owns the stores, the root event source, the protocol handler, the
    comms server and the decision modules.

    Startup order: stores, comms bound but not accepting, modules, then
    connections are accepted, so no event fires before its listeners exist.
    """

    def __init__(self, specs: Sequence[ModuleSpec] = (),
                 factories: Optional[Mapping[str, Factory]] = None,
                 roads: Optional[RoadGraph] = None, config: Optional[KernelConfig] = None,
                 clock: Callable[[], int] = now_ms):
        validate_specs(specs)
        self.specs = list(specs)
        self.factories = dict(factories or {})
        self.config = config or KernelConfig()
        self.clock = clock
        self.fleet = FleetStore()
        self.roads = roads
        self.root = EventSourceNode("kernel", default_action=self._track_fleet)
        self.protocol = ProtocolHandler(EventSourceNode("protocol", parent=self.root),
                                        clock=clock)
        self.comms: Optional[CommsServer] = None
        self.api = KernelApi(self)
        self.modules: dict[str, DecisionModule] = {}
        self.init_order: list[str] = []
        self._started: list[DecisionModule] = []
        self._shutdown = False
        self._lock = threading.Lock()

    def register_factory(self, factory_id: str, factory: Factory):
        self.factories[factory_id] = factory

    def _track_fleet(self, ev: EventDescriptor):
        if ev.event_type == VEHICLE_LOGGED_IN:
            self.fleet.set_status(ev.source_target, Status.LOGGED_IN)
        elif ev.event_type == VEHICLE_LOGGED_OUT:
            self.fleet.set_status(ev.source_target, Status.LOGGED_OUT)
        elif isinstance(ev.payload, Message) and ev.payload.msg_type == MsgType.TELEMETRY:
            t = ev.payload.body
            self.fleet.update_vehicle_state(VehicleState(
                ev.source_target, t.latitude, t.longitude, t.speed, t.timestamp,
                Status.LOGGED_IN))

    def init_decision_modules(self) -> list[str]:
        for s in self.specs:
            if s.factory_id not in self.factories:
                raise UnknownFactory(s.factory_id)
        order = topological_module_order(self.specs)
        by_id = {s.module_id: s for s in self.specs}
        for mid in order:
            spec = by_id[mid]
            try:
                module = self.factories[spec.factory_id]()
                module.init(self.api, mid, spec.dependencies, dict(spec.params))
            except Exception as exc:
                self._unregister_modules()
                raise InitError(mid, exc) from exc
            self.modules[mid] = module
            self.init_order.append(mid)
            self.root.register_listener(ListenerRegistration(mid, module.on_event,
                                                             spec.dependencies))
        for mid in order:
            module = self.modules[mid]
            if module.background:
                try:
                    module.start()
                except Exception as exc:
                    self._stop_modules()
                    self._unregister_modules()
                    raise InitError(mid, exc) from exc
                self._started.append(module)
        return order

    def _unregister_modules(self):
        for mid in self.init_order:
            try:
                self.root.unregister_listener(mid)
            except Exception:
                pass
        self.modules.clear()
        self.init_order.clear()

    def _stop_modules(self):
        while self._started:
            module = self._started.pop()
            try:
                module.stop(self.config.grace_seconds)
            except Exception:
                log.exception("stopping %s failed", module.module_id)

    def start(self) -> "Kernel":
        c = self.config
        self.comms = CommsServer(self.protocol, c.host, c.port, c.dispatchers,
                                 c.local_queue_capacity, c.sticky_dispatch, c.grace_seconds)
        self.comms.bind()
        try:
            self.comms.start_dispatchers()
            self.init_decision_modules()
        except Exception:
            self.comms.stop()
            raise
        self.comms.start_accepting()
        log.info("TMS listening on %s:%d with modules %s", c.host, self.comms.port,
                 self.init_order)
        return self

    @property
    def port(self):
        return self.comms.port if self.comms else self.config.port

    def send_to_vehicle(self, vehicle_id: str, msg: Message) -> None:
        if self.comms is None:
            raise UnknownVehicle(vehicle_id)
        self.comms.enqueue_outbound(vehicle_id, msg)

    def broadcast(self, msg: Message) -> int:
        return self.comms.broadcast(msg) if self.comms else 0

    def shutdown(self) -> bool:
        with self._lock:
            if self._shutdown:
                return True
            self._shutdown = True
        self._stop_modules()
        ok = self.comms.stop() if self.comms else True
        return ok

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def init_decision_modules(specs, factories, api: KernelApi) -> list[str]:
    kernel = api._kernel
    kernel.specs = list(specs)
    kernel.factories.update(factories)
    return kernel.init_decision_modules()
