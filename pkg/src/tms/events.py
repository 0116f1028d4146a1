"""Event sources, dependency-ordered listeners and parent-chain propagation.

Propagating an event on a source runs, for that source and then for each of
its ancestors in turn: the source's default action, then its listeners in
dependency order. Handler failures are caught and recorded; they never stop
the propagation.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .errors import DuplicateListenerId, ParentCycle, UnknownListener, ValidationError
from .ordering import topological_order

log = logging.getLogger(__name__)

VEHICLE_LOGGED_IN = "vehicle_logged_in"
VEHICLE_LOGGED_OUT = "vehicle_logged_out"
MESSAGE_RECEIVED = "message_received"


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class EventDescriptor:
    event_type: str
    source_target: str
    payload: Any = None
    timestamp: int = field(default_factory=now_ms)

    def __post_init__(self):
        if not self.event_type:
            raise ValidationError("event_type", "must be non-empty")


Handler = Callable[[EventDescriptor], Any]


@dataclass(frozen=True)
class ListenerRegistration:
    listener_id: str
    callback: Handler
    dependencies: Sequence[str] = ()

    def __post_init__(self):
        if not self.listener_id:
            raise ValidationError("listener_id", "must be non-empty")
        deps = tuple(self.dependencies)
        if len(set(deps)) != len(deps):
            raise ValidationError("dependencies", "contains duplicates")
        if self.listener_id in deps:
            raise ValidationError("dependencies", "listener depends on itself")
        object.__setattr__(self, "dependencies", deps)


@dataclass(frozen=True)
class TraceEntry:
    source_id: str
    handler_id: str
    kind: str  # "default" or "listener"
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None


DEFAULT_ACTION = "<default>"

# guards the parent relation across all sources
_parent_lock = threading.Lock()


class EventSourceNode:
    def __init__(self, source_id: str, default_action: Optional[Handler] = None,
                 parent: Optional["EventSourceNode"] = None):
        if not source_id:
            raise ValidationError("source_id", "must be non-empty")
        self.source_id = source_id
        self.default_action = default_action
        self.parent: Optional[EventSourceNode] = None
        self.warnings: list[str] = []
        self._listeners: dict[str, ListenerRegistration] = {}
        self._order: Optional[list[str]] = None
        self._lock = threading.RLock()
        if parent is not None:
            set_source_parent(self, parent)

    def __repr__(self):
        return f"EventSourceNode({self.source_id!r})"

    @property
    def listener_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._listeners)

    def register_listener(self, reg: ListenerRegistration) -> None:
        with self._lock:
            if reg.listener_id in self._listeners:
                raise DuplicateListenerId(reg.listener_id)
            self._listeners[reg.listener_id] = reg
            self._order = None
            missing = [d for d in reg.dependencies if d not in self._listeners]
            if missing:
                msg = (f"{self.source_id}: listener {reg.listener_id!r} depends on "
                       f"unregistered {missing}; ignored for ordering until registered")
                self.warnings.append(msg)
                log.warning(msg)

    def add_listener(self, listener_id: str, callback: Handler,
                     dependencies: Sequence[str] = ()) -> None:
        self.register_listener(ListenerRegistration(listener_id, callback, dependencies))

    def unregister_listener(self, listener_id: str) -> None:
        with self._lock:
            if listener_id not in self._listeners:
                raise UnknownListener(listener_id)
            del self._listeners[listener_id]
            self._order = None

    def resolve_listener_order(self) -> list[str]:
        """Listener ids with every registered dependency first; lexicographic ties."""
        with self._lock:
            if self._order is None:
                self._order = topological_order(
                    {lid: reg.dependencies for lid, reg in self._listeners.items()})
            return list(self._order)

    def _plan(self):
        with self._lock:
            order = self.resolve_listener_order()
            return self.default_action, [self._listeners[lid] for lid in order]

    def propagate_event(self, ev: EventDescriptor) -> list[TraceEntry]:
        trace: list[TraceEntry] = []
        source: Optional[EventSourceNode] = self
        while source is not None:
            default, listeners = source._plan()
            if default is not None:
                trace.append(_invoke(source.source_id, DEFAULT_ACTION, "default", default, ev))
            for reg in listeners:
                trace.append(_invoke(source.source_id, reg.listener_id, "listener",
                                     reg.callback, ev))
            source = source.parent
        return trace


def _invoke(source_id, handler_id, kind, fn, ev):
    try:
        fn(ev)
    except Exception as exc:
        log.exception("%s/%s failed on %s from %s", source_id, handler_id,
                      ev.event_type, ev.source_target)
        return TraceEntry(source_id, handler_id, kind, f"{type(exc).__name__}: {exc}")
    return TraceEntry(source_id, handler_id, kind)


def set_source_parent(child: EventSourceNode, parent: Optional[EventSourceNode]) -> None:
    """Link ``child`` under ``parent`` (None detaches). Rejects cycles."""
    with _parent_lock:
        node = parent
        while node is not None:
            if node is child:
                raise ParentCycle(f"{child.source_id} -> {parent.source_id} would close a cycle")
            node = node.parent
        child.parent = parent


# functional spellings of the source methods

def register_listener(source: EventSourceNode, reg: ListenerRegistration) -> None:
    source.register_listener(reg)


def unregister_listener(source: EventSourceNode, listener_id: str) -> None:
    source.unregister_listener(listener_id)


def resolve_listener_order(source: EventSourceNode) -> list[str]:
    return source.resolve_listener_order()


def propagate_event(source: EventSourceNode, ev: EventDescriptor) -> list[TraceEntry]:
    return source.propagate_event(ev)
