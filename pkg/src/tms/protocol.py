"""RVTP: a length-prefixed binary vehicle telematics protocol.

Frame layout (all integers big-endian)::

    u32  N            bytes following this field
    u8   msg_type
    u16  L            vehicle id length in bytes
    L    vehicle id   UTF-8
    ...  body         depends on msg_type

Bodies: LOGIN empty; TELEMETRY u64 timestamp_ms, f64 lat, f64 lon, f64 speed;
ROUTE_ADVISORY u16 count then count x (u16 len, UTF-8 node id);
WARNING u8 severity then UTF-8 text; ACK u32 sequence; APP raw bytes.
"""

from __future__ import annotations

import enum
import io
import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

from .errors import (DecodeError, EncodeError, EndOfStream, TruncatedStream,
                     ValidationError)
from .events import (MESSAGE_RECEIVED, VEHICLE_LOGGED_IN, EventDescriptor,
                     EventSourceNode, TraceEntry, now_ms)

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
MAX_VEHICLE_ID = 255

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_HEAD = struct.Struct(">BH")
_TELEMETRY = struct.Struct(">Qddd")
_WARNING = struct.Struct(">B")


class MsgType(enum.IntEnum):
    LOGIN = 0x01
    TELEMETRY = 0x02
    ROUTE_ADVISORY = 0x03
    WARNING = 0x04
    ACK = 0x05
    APP = 0x06


@dataclass(frozen=True)
class Telemetry:
    timestamp: int
    latitude: float
    longitude: float
    speed: float


@dataclass(frozen=True)
class RouteAdvisory:
    nodes: tuple[str, ...]


@dataclass(frozen=True)
class SafetyWarning:
    severity: int
    text: str


@dataclass(frozen=True)
class Ack:
    sequence: int


Body = Union[None, Telemetry, RouteAdvisory, SafetyWarning, Ack, bytes]

_BODY_TYPES = {
    MsgType.LOGIN: type(None),
    MsgType.TELEMETRY: Telemetry,
    MsgType.ROUTE_ADVISORY: RouteAdvisory,
    MsgType.WARNING: SafetyWarning,
    MsgType.ACK: Ack,
    MsgType.APP: bytes,
}


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    vehicle_id: str
    body: Body = None

    def marshal(self, out=None) -> bytes:
        data = marshal_frame(self)
        if out is not None:
            out.write(data)
        return data

    @staticmethod
    def unmarshal(stream) -> "Message":
        return unmarshal_frame(stream)


def check_message(msg: Message) -> Optional[tuple[str, str]]:
    """Return (field, reason) for the first constraint ``msg`` violates, else None."""
    try:
        mt = MsgType(msg.msg_type)
    except ValueError:
        return "msg_type", f"unknown type {msg.msg_type!r}"
    if not isinstance(msg.vehicle_id, str):
        return "vehicle_id", "must be a string"
    vid_len = len(msg.vehicle_id.encode("utf-8", "surrogatepass"))
    if vid_len > MAX_VEHICLE_ID:
        return "vehicle_id", f"{vid_len} bytes exceeds {MAX_VEHICLE_ID}"
    if not _valid_utf8(msg.vehicle_id):
        return "vehicle_id", "not encodable as UTF-8"
    if mt is MsgType.LOGIN and not msg.vehicle_id:
        return "vehicle_id", "LOGIN requires a vehicle id"
    body = msg.body
    if not isinstance(body, _BODY_TYPES[mt]):
        return "body", f"{mt.name} body must be {_BODY_TYPES[mt].__name__}"
    if mt is MsgType.TELEMETRY:
        if not isinstance(body.timestamp, int) or not 0 <= body.timestamp < 1 << 64:
            return "timestamp", "must be an unsigned 64-bit integer"
        if not _finite(body.latitude) or not -90 <= body.latitude <= 90:
            return "latitude", f"{body.latitude!r} outside [-90, 90]"
        if not _finite(body.longitude) or not -180 <= body.longitude <= 180:
            return "longitude", f"{body.longitude!r} outside [-180, 180]"
        if not _finite(body.speed) or body.speed < 0:
            return "speed", f"{body.speed!r} must be finite and >= 0"
    elif mt is MsgType.ROUTE_ADVISORY:
        if not isinstance(body.nodes, tuple) or len(body.nodes) > 0xFFFF:
            return "nodes", "must be a tuple of at most 65535 node ids"
        for n in body.nodes:
            if not isinstance(n, str) or not n or not _valid_utf8(n) or len(n.encode()) > 0xFFFF:
                return "nodes", f"bad node id {n!r}"
    elif mt is MsgType.WARNING:
        if not isinstance(body.severity, int) or not 0 <= body.severity <= 255:
            return "severity", "must fit in u8"
        if not isinstance(body.text, str) or not _valid_utf8(body.text):
            return "text", "must be UTF-8 text"
    elif mt is MsgType.ACK:
        if not isinstance(body.sequence, int) or not 0 <= body.sequence < 1 << 32:
            return "sequence", "must fit in u32"
    size = 3 + vid_len + _body_size(mt, body)
    if size > MAX_FRAME:
        return "body", f"frame of {size} bytes exceeds {MAX_FRAME}"
    return None


def _finite(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _valid_utf8(s):
    try:
        s.encode("utf-8")
    except UnicodeEncodeError:
        return False
    return True


def _body_size(mt, body):
    if mt is MsgType.TELEMETRY:
        return _TELEMETRY.size
    if mt is MsgType.ROUTE_ADVISORY:
        return 2 + sum(2 + len(n.encode()) for n in body.nodes)
    if mt is MsgType.WARNING:
        return 1 + len(body.text.encode())
    if mt is MsgType.ACK:
        return 4
    if mt is MsgType.APP:
        return len(body)
    return 0


def _encode_body(mt, body) -> bytes:
    if mt is MsgType.TELEMETRY:
        return _TELEMETRY.pack(body.timestamp, float(body.latitude),
                               float(body.longitude), float(body.speed))
    if mt is MsgType.ROUTE_ADVISORY:
        parts = [_U16.pack(len(body.nodes))]
        for n in body.nodes:
            raw = n.encode()
            parts += [_U16.pack(len(raw)), raw]
        return b"".join(parts)
    if mt is MsgType.WARNING:
        return _WARNING.pack(body.severity) + body.text.encode()
    if mt is MsgType.ACK:
        return _U32.pack(body.sequence)
    if mt is MsgType.APP:
        return bytes(body)
    return b""


def marshal_frame(msg: Message) -> bytes:
    problem = check_message(msg)
    if problem:
        raise EncodeError(f"{problem[0]}: {problem[1]}")
    vid = msg.vehicle_id.encode()
    payload = _HEAD.pack(msg.msg_type, len(vid)) + vid + _encode_body(MsgType(msg.msg_type), msg.body)
    return _U32.pack(len(payload)) + payload


def _read_exact(stream, n, started):
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if not started and remaining == n:
                raise EndOfStream("stream closed at frame boundary")
            raise TruncatedStream(f"stream closed with {remaining} of {n} bytes missing")
        chunks.append(chunk)
        remaining -= len(chunk)
        started = True
    return b"".join(chunks)


def unmarshal_frame(stream) -> Message:
    """Read one frame from a binary stream (anything with ``read(n)``).

    Consumes exactly the frame's bytes when the length prefix is acceptable.
    """
    (n,) = _U32.unpack(_read_exact(stream, 4, False))
    if n > MAX_FRAME:
        raise DecodeError(f"frame too large: {n} > {MAX_FRAME}")
    return decode_payload(_read_exact(stream, n, True))


def decode_frame(data: bytes) -> tuple[Message, int]:
    """Decode the frame at the start of ``data``; return it and the bytes consumed."""
    stream = io.BytesIO(data)
    msg = unmarshal_frame(stream)
    return msg, stream.tell()


def decode_payload(payload: bytes) -> Message:
    if len(payload) < _HEAD.size:
        raise DecodeError(f"frame body of {len(payload)} bytes is shorter than the header")
    code, vid_len = _HEAD.unpack_from(payload)
    try:
        mt = MsgType(code)
    except ValueError:
        raise DecodeError(f"unknown msg_type 0x{code:02x}") from None
    if vid_len > MAX_VEHICLE_ID:
        raise DecodeError(f"vehicle id length {vid_len} exceeds {MAX_VEHICLE_ID}")
    pos = _HEAD.size + vid_len
    if pos > len(payload):
        raise DecodeError("truncated vehicle id")
    vid = _utf8(payload[_HEAD.size:pos], "vehicle_id")
    body = _decode_body(mt, memoryview(payload)[pos:])
    msg = Message(mt, vid, body)
    problem = check_message(msg)
    if problem:
        raise DecodeError(f"{problem[0]}: {problem[1]}")
    return msg


def _utf8(raw, what):
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError:
        raise DecodeError(f"{what} is not valid UTF-8") from None


def _decode_body(mt, raw: memoryview):
    if mt is MsgType.LOGIN:
        if len(raw):
            raise DecodeError("LOGIN carries no body")
        return None
    if mt is MsgType.TELEMETRY:
        if len(raw) != _TELEMETRY.size:
            raise DecodeError(f"TELEMETRY body must be {_TELEMETRY.size} bytes, got {len(raw)}")
        return Telemetry(*_TELEMETRY.unpack(raw))
    if mt is MsgType.ROUTE_ADVISORY:
        if len(raw) < 2:
            raise DecodeError("truncated ROUTE_ADVISORY count")
        (count,) = _U16.unpack_from(raw)
        pos, nodes = 2, []
        for _ in range(count):
            if pos + 2 > len(raw):
                raise DecodeError("truncated ROUTE_ADVISORY node length")
            (k,) = _U16.unpack_from(raw, pos)
            pos += 2
            if pos + k > len(raw):
                raise DecodeError("truncated ROUTE_ADVISORY node id")
            nodes.append(_utf8(raw[pos:pos + k], "node id"))
            pos += k
        if pos != len(raw):
            raise DecodeError("trailing bytes after ROUTE_ADVISORY")
        return RouteAdvisory(tuple(nodes))
    if mt is MsgType.WARNING:
        if len(raw) < 1:
            raise DecodeError("truncated WARNING severity")
        return SafetyWarning(raw[0], _utf8(raw[1:], "warning text"))
    if mt is MsgType.ACK:
        if len(raw) != 4:
            raise DecodeError(f"ACK body must be 4 bytes, got {len(raw)}")
        return Ack(_U32.unpack(raw)[0])
    return bytes(raw)


class MessageFactory:
    """Builds validated RVTP messages and decodes them from streams."""

    def create_message(self, msg_type, vehicle_id: str, body: Any = None) -> Message:
        try:
            mt = MsgType(msg_type)
        except ValueError:
            raise ValidationError("msg_type", f"unknown type {msg_type!r}") from None
        if isinstance(body, Mapping):
            try:
                body = _BODY_TYPES[mt](**body)
            except TypeError as exc:
                raise ValidationError("body", str(exc)) from None
        if mt is MsgType.ROUTE_ADVISORY and isinstance(body, RouteAdvisory):
            body = RouteAdvisory(tuple(body.nodes))
        if mt is MsgType.APP and isinstance(body, (bytearray, memoryview)):
            body = bytes(body)
        if mt is MsgType.APP and body is None:
            body = b""
        msg = Message(mt, vehicle_id, body)
        problem = check_message(msg)
        if problem:
            raise ValidationError(*problem)
        return msg

    def login(self, vehicle_id):
        return self.create_message(MsgType.LOGIN, vehicle_id)

    def telemetry(self, vehicle_id, timestamp, latitude, longitude, speed):
        return self.create_message(MsgType.TELEMETRY, vehicle_id,
                                   Telemetry(timestamp, latitude, longitude, speed))

    def route_advisory(self, vehicle_id, nodes):
        return self.create_message(MsgType.ROUTE_ADVISORY, vehicle_id, RouteAdvisory(tuple(nodes)))

    def warning(self, vehicle_id, severity, text):
        return self.create_message(MsgType.WARNING, vehicle_id, SafetyWarning(severity, text))

    def ack(self, vehicle_id, sequence):
        return self.create_message(MsgType.ACK, vehicle_id, Ack(sequence))

    def app(self, vehicle_id, data=b""):
        return self.create_message(MsgType.APP, vehicle_id, data)

    def decode(self, stream) -> Message:
        return unmarshal_frame(stream)

    def encode(self, msg: Message) -> bytes:
        return marshal_frame(msg)


factory = MessageFactory()
create_message = factory.create_message


@dataclass(frozen=True)
class InboundEnvelope:
    vehicle_id: str
    message: Message
    received_at: int = field(default_factory=now_ms)
    seq: int = 0  # global enqueue counter, assigned by the queue


DEFAULT_EVENT_MAP = {
    MsgType.LOGIN: VEHICLE_LOGGED_IN,
    MsgType.TELEMETRY: MESSAGE_RECEIVED,
}


class ProtocolHandler:
    """Turns inbound envelopes into events on its own event source.

    ``event_map`` maps message types to event types; unmapped types produce
    ``default_event``. The event payload is the decoded Message, so its
    ``msg_type`` tells listeners the subtype.
    """

    factory = factory

    def __init__(self, source: Optional[EventSourceNode] = None,
                 event_map: Optional[Mapping[MsgType, str]] = None,
                 default_event: str = MESSAGE_RECEIVED, clock=now_ms):
        self.source = source if source is not None else EventSourceNode("protocol")
        self.event_map = dict(DEFAULT_EVENT_MAP if event_map is None else event_map)
        self.default_event = default_event
        self.clock = clock
        self.handled = 0
        self._count_lock = threading.Lock()

    def event_type_for(self, msg_type) -> str:
        return self.event_map.get(MsgType(msg_type), self.default_event)

    def handle_inbound_message(self, env: InboundEnvelope) -> EventDescriptor:
        ev = EventDescriptor(self.event_type_for(env.message.msg_type), env.vehicle_id,
                             env.message, self.clock())
        self.source.propagate_event(ev)
        with self._count_lock:
            self.handled += 1
        return ev

    def emit(self, event_type: str, source_target: str, payload=None) -> list[TraceEntry]:
        """Propagate a lifecycle event that has no message behind it."""
        return self.source.propagate_event(
            EventDescriptor(event_type, source_target, payload, self.clock()))
