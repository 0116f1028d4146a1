"""Communication subsystem: TCP accept loop, per-vehicle workers, dispatcher pool.

Each accepted connection gets a vehicle worker made of two threads: a reader
that decodes frames and pushes envelopes onto the global inbound queue
without blocking, and a writer that drains the worker's bounded local
outbound queue onto the socket. A pool of dispatcher threads consumes the
global queue and hands envelopes to the protocol handler.
"""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import queue
import socket
import threading
import time
import zlib
from typing import Optional

from .errors import (BindError, EndOfStream, ProtocolError, QueueFull, TruncatedStream,
                     UnknownVehicle)
from .events import VEHICLE_LOGGED_IN, VEHICLE_LOGGED_OUT, now_ms
from .protocol import InboundEnvelope, Message, MsgType, marshal_frame, unmarshal_frame

log = logging.getLogger(__name__)

DEFAULT_PORT = 7077
DEFAULT_DISPATCHERS = 4
DEFAULT_LOCAL_QUEUE_CAPACITY = 256
DEFAULT_GRACE_SECONDS = 5.0

_STOP = object()


class LocalQueue:
    """Bounded FIFO of outbound messages; put never blocks, get does."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        with self._cond:
            return len(self._items)

    def put(self, msg: Message) -> None:
        with self._cond:
            if self._closed:
                raise UnknownVehicle("worker is closing")
            if len(self._items) >= self.capacity:
                raise QueueFull(f"local queue at capacity {self.capacity}")
            self._items.append(msg)
            self._cond.notify()

    def get(self, timeout=None):
        """Next message, or None once closed and drained (or on timeout)."""
        with self._cond:
            self._cond.wait_for(lambda: self._items or self._closed, timeout)
            if self._items:
                return self._items.popleft()
            return None

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class GlobalQueue:
    """Unbounded inbound FIFO shared by all workers.

    With ``lanes > 1`` each vehicle id hashes to one lane, and each dispatcher
    owns a lane, so one vehicle's envelopes are handled in order.
    """

    def __init__(self, lanes: int = 1):
        self._lanes = [queue.SimpleQueue() for _ in range(max(1, lanes))]
        self._seq = itertools.count(1)
        self._lock = threading.Lock()

    @property
    def lanes(self):
        return len(self._lanes)

    def lane_for(self, vehicle_id: str) -> int:
        return zlib.crc32(vehicle_id.encode()) % len(self._lanes)

    def put(self, env: InboundEnvelope) -> InboundEnvelope:
        with self._lock:
            env = InboundEnvelope(env.vehicle_id, env.message, env.received_at, next(self._seq))
            self._lanes[self.lane_for(env.vehicle_id)].put(env)
        return env

    def get(self, lane: int = 0, timeout=None):
        return self._lanes[lane].get(timeout=timeout)

    def qsize(self):
        return sum(q.qsize() for q in self._lanes)

    def close(self, consumers_per_lane: int):
        # sentinels queue up behind everything already enqueued
        for q in self._lanes:
            for _ in range(consumers_per_lane):
                q.put(_STOP)


class WorkerState(enum.Enum):
    CONNECTED = "CONNECTED"
    LOGGED_IN = "LOGGED_IN"
    CLOSED = "CLOSED"


class VehicleWorker:
    def __init__(self, server: "CommsServer", conn: socket.socket, addr, capacity: int):
        self.server = server
        self.conn = conn
        self.addr = addr
        self.vehicle_id = ""
        self.state = WorkerState.CONNECTED
        self.local_queue = LocalQueue(capacity)
        self.superseded = False
        self.frames_in = 0
        self.frames_out = 0
        self._reader = threading.Thread(target=self._read_loop, name=f"tms-worker-r-{addr}",
                                        daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"tms-worker-w-{addr}",
                                        daemon=True)
        self._close_lock = threading.Lock()

    def start(self):
        # the reader joins the writer on exit, so the writer must exist first
        self._writer.start()
        self._reader.start()

    def enqueue(self, msg: Message):
        self.local_queue.put(msg)

    def close(self):
        with self._close_lock:
            if self.state is WorkerState.CLOSED:
                return
            self.state = WorkerState.CLOSED
        self.local_queue.close()
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def join(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in (self._reader, self._writer):
            if t.is_alive() and t is not threading.current_thread():
                t.join(None if deadline is None else max(0.0, deadline - time.monotonic()))

    @property
    def alive(self):
        return self._reader.is_alive() or self._writer.is_alive()

    def _read_loop(self):
        stream = self.conn.makefile("rb")
        try:
            first = unmarshal_frame(stream)
            if first.msg_type != MsgType.LOGIN:
                raise ProtocolError(f"first frame must be LOGIN, got {MsgType(first.msg_type).name}")
            self.server.login_vehicle(self, first.vehicle_id)
            while self.state is not WorkerState.CLOSED:
                msg = unmarshal_frame(stream)
                if msg.msg_type == MsgType.LOGIN:
                    if msg.vehicle_id != self.vehicle_id:
                        raise ProtocolError(
                            f"re-LOGIN as {msg.vehicle_id!r} on session {self.vehicle_id!r}")
                    log.info("ignoring repeated LOGIN from %s", self.vehicle_id)
                    continue
                self.frames_in += 1
                self.server.global_queue.put(InboundEnvelope(self.vehicle_id, msg, now_ms()))
        except EndOfStream:
            pass
        except (ProtocolError, TruncatedStream) as exc:
            if self.state is not WorkerState.CLOSED:
                log.warning("closing %s (%s): %s", self.addr, self.vehicle_id or "no login", exc)
        except OSError as exc:
            if self.state is not WorkerState.CLOSED:
                log.info("connection %s dropped: %s", self.addr, exc)
        finally:
            stream.close()
            self.close()
            self._writer.join()
            try:
                self.conn.close()
            except OSError:
                pass
            self.server._worker_finished(self)

    def _write_loop(self):
        while True:
            msg = self.local_queue.get()
            if msg is None:
                return
            try:
                self.conn.sendall(marshal_frame(msg))
                self.frames_out += 1
            except Exception as exc:
                log.info("write to %s failed: %s", self.vehicle_id or self.addr, exc)
                self.close()
                return


class CommsServer:
    """Accepts vehicle connections and feeds the dispatcher pool.

    ``handler`` must provide ``handle_inbound_message(env)`` and
    ``emit(event_type, vehicle_id)`` (see ProtocolHandler).
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 dispatcher_count: int = DEFAULT_DISPATCHERS,
                 local_queue_capacity: int = DEFAULT_LOCAL_QUEUE_CAPACITY,
                 sticky_dispatch: bool = False, grace_seconds: float = DEFAULT_GRACE_SECONDS):
        if dispatcher_count < 1:
            raise ValueError("dispatcher_count must be >= 1")
        self.handler = handler
        self.host = host
        self.port = port
        self.dispatcher_count = dispatcher_count
        self.local_queue_capacity = local_queue_capacity
        self.sticky_dispatch = sticky_dispatch
        self.grace_seconds = grace_seconds
        self.global_queue = GlobalQueue(dispatcher_count if sticky_dispatch else 1)
        self.dispatched = [0] * dispatcher_count
        self._registry: dict[str, VehicleWorker] = {}
        self._workers: set[VehicleWorker] = set()
        self._lock = threading.RLock()
        self._sock: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._dispatchers: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._stopped = False

    # lifecycle

    def bind(self):
        """Bind and listen without accepting yet."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind((self.host, self.port))
            sock.listen(128)
        except OSError as exc:
            sock.close()
            raise BindError(f"cannot listen on {self.host}:{self.port}: {exc}") from exc
        self._sock = sock
        self.port = sock.getsockname()[1]
        return self

    def start_dispatchers(self):
        for i in range(self.dispatcher_count):
            lane = i % self.global_queue.lanes
            t = threading.Thread(target=self.dispatch_loop, args=(i, lane),
                                 name=f"tms-dispatcher-{i}", daemon=True)
            t.start()
            self._dispatchers.append(t)

    def start_accepting(self):
        if self._sock is None:
            self.bind()
        self._accept_thread = threading.Thread(target=self._accept_loop, name="tms-accept",
                                               daemon=True)
        self._accept_thread.start()

    def start(self):
        if self._sock is None:
            self.bind()
        self.start_dispatchers()
        self.start_accepting()
        return self

    @property
    def address(self):
        return (self.host, self.port)

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                break
            if self._stopping.is_set():
                conn.close()
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            worker = VehicleWorker(self, conn, f"{addr[0]}:{addr[1]}", self.local_queue_capacity)
            with self._lock:
                self._workers.add(worker)
            worker.start()

    def dispatch_loop(self, index: int = 0, lane: int = 0):
        while True:
            env = self.global_queue.get(lane)
            if env is _STOP:
                return
            try:
                self.handler.handle_inbound_message(env)
            except Exception:
                log.exception("dispatcher %d: handler failed on envelope from %s",
                              index, env.vehicle_id)
            self.dispatched[index] += 1

    def stop(self, grace: Optional[float] = None) -> bool:
        """Stop accepting, close every connection, drain the inbound queue and
        join all threads. Returns True if everything joined within ``grace``."""
        if self._stopped:
            return True
        self._stopped = True
        grace = self.grace_seconds if grace is None else grace
        deadline = time.monotonic() + grace
        self._stopping.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        if self._accept_thread is not None:
            self._accept_thread.join(max(0.0, deadline - time.monotonic()))
        with self._lock:
            workers = list(self._workers)
        for w in workers:
            w.close()
        for w in workers:
            w.join(max(0.0, deadline - time.monotonic()))
        # readers are gone, so nothing new can arrive behind the sentinels
        consumers = self.dispatcher_count // self.global_queue.lanes
        self.global_queue.close(consumers)
        for t in self._dispatchers:
            t.join(max(0.0, deadline - time.monotonic()))
        leftover = [t.name for t in self.threads() if t.is_alive()]
        if leftover:
            log.error("threads still alive after %.1fs: %s", grace, leftover)
        return not leftover

    def threads(self) -> list[threading.Thread]:
        out = list(self._dispatchers)
        if self._accept_thread is not None:
            out.append(self._accept_thread)
        with self._lock:
            for w in self._workers:
                out += [w._reader, w._writer]
        return out

    # registry

    def login_vehicle(self, worker: VehicleWorker, vehicle_id: str):
        if worker.state is not WorkerState.CONNECTED:
            raise ProtocolError("login on a worker that is not in CONNECTED state")
        if not vehicle_id:
            raise ProtocolError("empty vehicle id")
        with self._lock:
            old = self._registry.get(vehicle_id)
            worker.vehicle_id = vehicle_id
            worker.state = WorkerState.LOGGED_IN
            self._registry[vehicle_id] = worker
        if old is not None:
            log.info("vehicle %s logged in again from %s; closing old connection %s",
                     vehicle_id, worker.addr, old.addr)
            old.superseded = True
            old.close()
        self.handler.emit(VEHICLE_LOGGED_IN, vehicle_id)

    def _worker_finished(self, worker: VehicleWorker):
        with self._lock:
            self._workers.discard(worker)
            mine = worker.vehicle_id and self._registry.get(worker.vehicle_id) is worker
            if mine:
                del self._registry[worker.vehicle_id]
        if mine:
            try:
                self.handler.emit(VEHICLE_LOGGED_OUT, worker.vehicle_id)
            except Exception:
                log.exception("vehicle_logged_out propagation failed for %s", worker.vehicle_id)

    def logged_in(self) -> list[str]:
        with self._lock:
            return sorted(self._registry)

    def worker_for(self, vehicle_id: str) -> Optional[VehicleWorker]:
        with self._lock:
            return self._registry.get(vehicle_id)

    def enqueue_outbound(self, vehicle_id: str, msg: Message) -> None:
        with self._lock:
            worker = self._registry.get(vehicle_id)
        if worker is None:
            raise UnknownVehicle(vehicle_id)
        worker.enqueue(msg)

    def broadcast(self, msg: Message) -> int:
        with self._lock:
            workers = list(self._registry.items())
        sent = full = 0
        for vid, worker in workers:
            try:
                worker.enqueue(msg)
                sent += 1
            except QueueFull:
                full += 1
            except UnknownVehicle:
                pass
        if full:
            log.warning("broadcast skipped %d vehicle(s) with full queues", full)
        return sent


def start_server(port: int, dispatcher_count: int, protocol_handler, host="127.0.0.1",
                 **kwargs) -> CommsServer:
    return CommsServer(protocol_handler, host, port, dispatcher_count, **kwargs).start()
