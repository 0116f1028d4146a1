"""Run the three-cybercar scenario against an in-process server and print the report.

    python3 scripts/three_cybercars.py [--seed N] [--report out.jsonl] [--snapshot-dir DIR]
"""

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from tms.errors import AssertionFailure
from tms.kernel import Kernel, KernelConfig, ModuleSpec, load_module_config
from tms.modules import BUILTIN_FACTORIES
from tms.sim import load_scenario, run_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", default=str(SCENARIOS / "three_cybercars.scenario"))
    p.add_argument("--config", default=str(SCENARIOS / "tms.xml"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--snapshot-dir", help="where the proxy stub writes (default: a temp dir)")
    p.add_argument("--sticky-dispatch", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    snap_dir = Path(args.snapshot_dir or tempfile.mkdtemp(prefix="tms-"))
    scenario = load_scenario(args.scenario)
    specs = [ModuleSpec(s.module_id, s.factory_id, s.dependencies,
                        {**s.params, "path": str(snap_dir / "fleet_snapshot.json")})
             if s.factory_id == "proxy_stub" else s
             for s in load_module_config(args.config)]
    with Kernel(specs, BUILTIN_FACTORIES, scenario.roads,
                KernelConfig(port=0, sticky_dispatch=args.sticky_dispatch)) as kernel:
        try:
            report = run_scenario(scenario, ("127.0.0.1", kernel.port), seed=args.seed,
                                  report_path=args.report, check=True)
        except AssertionFailure as exc:
            print(exc.report.summary())
            return 1
        print(report.summary())
        print(f"dispatched={sum(kernel.comms.dispatched)} sent={report.frames_sent} "
              f"snapshot={snap_dir / 'fleet_snapshot.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
