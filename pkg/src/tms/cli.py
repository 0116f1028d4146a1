"""Command-line entry points: ``tms-server`` and ``fleet-sim``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from .comms import DEFAULT_DISPATCHERS, DEFAULT_LOCAL_QUEUE_CAPACITY, DEFAULT_PORT
from .datastore import load_road_graph
from .errors import AssertionFailure, TmsError
from .kernel import Kernel, KernelConfig, load_module_config
from .modules import BUILTIN_FACTORIES
from .sim import load_scenario, run_scenario

log = logging.getLogger("tms")


def _positive(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def server_parser():
    p = argparse.ArgumentParser(prog="tms-server",
                                description="Run the telematic management server.")
    p.add_argument("--config", required=True, help="decision-module XML file")
    p.add_argument("--map", help="road graph file (node/edge records)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--dispatchers", type=_positive, default=DEFAULT_DISPATCHERS)
    p.add_argument("--local-queue-capacity", type=_positive, default=DEFAULT_LOCAL_QUEUE_CAPACITY)
    p.add_argument("--sticky-dispatch", action="store_true",
                   help="pin each vehicle to one dispatcher for strict per-vehicle order")
    p.add_argument("--log-level", default="INFO")
    return p


def server_main(argv=None):
    args = server_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        specs = load_module_config(args.config)
        roads = load_road_graph(args.map) if args.map else None
        kernel = Kernel(specs, BUILTIN_FACTORIES, roads, KernelConfig(
            args.host, args.port, args.dispatchers, args.local_queue_capacity,
            args.sticky_dispatch))
        kernel.start()
    except TmsError as exc:
        log.error("%s", exc)
        return 2
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    print(f"listening on {args.host}:{kernel.port}", flush=True)
    done.wait()
    return 0 if kernel.shutdown() else 1


def sim_parser():
    p = argparse.ArgumentParser(prog="fleet-sim",
                                description="Drive a TMS server with scripted vehicles.")
    p.add_argument("--scenario", required=True)
    p.add_argument("--server", required=True, metavar="HOST:PORT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write line-delimited JSON results here")
    p.add_argument("--log-level", default="WARNING")
    return p


def sim_main(argv=None):
    args = sim_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    host, _, port = args.server.rpartition(":")
    if not host or not port.isdigit():
        print(f"fleet-sim: bad --server {args.server!r}, expected HOST:PORT", file=sys.stderr)
        return 2
    try:
        scenario = load_scenario(args.scenario)
        report = run_scenario(scenario, (host, int(port)), seed=args.seed,
                              report_path=args.report, check=True)
    except AssertionFailure as exc:
        print(exc.report.summary())
        return 1
    except TmsError as exc:
        print(f"fleet-sim: {exc}", file=sys.stderr)
        return 2
    print(report.summary())
    return 0


if __name__ == "__main__":
    sys.exit(server_main())
