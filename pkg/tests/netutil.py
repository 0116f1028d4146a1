import socket
import threading

from tms.protocol import marshal_frame, unmarshal_frame


class Client:
    """Blocking RVTP test client."""

    def __init__(self, address, timeout=5.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.stream = self.sock.makefile("rb")

    def send(self, *msgs):
        self.sock.sendall(b"".join(marshal_frame(m) for m in msgs))

    def send_raw(self, data):
        self.sock.sendall(data)

    def recv(self):
        return unmarshal_frame(self.stream)

    def closed_by_peer(self):
        try:
            return self.stream.read(1) == b""
        except (ConnectionResetError, socket.timeout):
            return False

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.stream.close()
        self.sock.close()


class RecordingHandler:
    """Stands in for ProtocolHandler: records envelopes and lifecycle events."""

    def __init__(self, delay=0.0):
        self.envelopes = []
        self.events = []
        self.delay = delay
        self._lock = threading.Lock()

    def handle_inbound_message(self, env):
        if self.delay:
            threading.Event().wait(self.delay)
        with self._lock:
            self.envelopes.append(env)

    def emit(self, event_type, vehicle_id, payload=None):
        with self._lock:
            self.events.append((event_type, vehicle_id))
