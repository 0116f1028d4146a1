"""Throughput and no-loss check: many vehicles streaming telemetry over TCP.

    python3 scripts/dispatch_load.py --vehicles 10 --frames 1000 --dispatchers 4 [--sticky]
"""

import argparse
import socket
import sys
import threading
import time
from collections import defaultdict

from tms.comms import CommsServer
from tms.protocol import MessageFactory, marshal_frame


class Tally:
    def __init__(self):
        self.lock = threading.Lock()
        self.seen = defaultdict(list)

    def handle_inbound_message(self, env):
        with self.lock:
            self.seen[env.vehicle_id].append((env.seq, env.message.body.timestamp))

    def emit(self, *args, **kwargs):
        pass


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vehicles", type=int, default=10)
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--dispatchers", type=int, default=4)
    p.add_argument("--sticky", action="store_true")
    args = p.parse_args(argv)

    mf = MessageFactory()
    tally = Tally()
    srv = CommsServer(tally, port=0, dispatcher_count=args.dispatchers,
                      sticky_dispatch=args.sticky).start()
    total = args.vehicles * args.frames

    def drive(i):
        vid = f"veh{i:03d}"
        with socket.create_connection(srv.address) as s:
            s.sendall(marshal_frame(mf.login(vid)))
            s.sendall(b"".join(marshal_frame(mf.telemetry(vid, k, 48.69, 6.18, 5.0))
                               for k in range(args.frames)))
            deadline = time.monotonic() + 60
            while len(tally.seen[vid]) < args.frames and time.monotonic() < deadline:
                time.sleep(0.01)

    t0 = time.monotonic()
    threads = [threading.Thread(target=drive, args=(i,)) for i in range(args.vehicles)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - t0
    srv.stop()

    handled = sum(len(v) for v in tally.seen.values())
    wire_ok = all([ts for _, ts in sorted(rows)] == list(range(args.frames))
                  for rows in tally.seen.values())
    handling_ok = all([ts for _, ts in rows] == list(range(args.frames))
                      for rows in tally.seen.values())
    print(f"handled {handled}/{total} in {elapsed:.2f} s ({handled / elapsed:,.0f} msg/s)")
    print(f"per-dispatcher: {srv.dispatched}")
    print(f"wire order preserved: {wire_ok}; handling order preserved: {handling_ok}")
    return 0 if handled == total and wire_ok and (handling_ok or not args.sticky) else 1


if __name__ == "__main__":
    sys.exit(main())
