"""Throw random and mutated frames at the decoder and tally the outcomes.

    python3 scripts/fuzz_codec.py --inputs 1000000 --seed 0
"""

import argparse
import random
import sys
import time
from collections import Counter

from tms.errors import TmsError
from tms.protocol import MessageFactory, decode_frame, marshal_frame


def seeds(mf):
    return [marshal_frame(m) for m in (
        mf.login("v1"), mf.telemetry("v1", 1, 48.69, 6.18, 3.5), mf.route_advisory("v1", "ABC"),
        mf.warning("v1", 2, "ice ahead"), mf.ack("v1", 7), mf.app("v1", b"\x00\x01\x02"))]


def mutate(rng, frame):
    buf = bytearray(frame)
    for _ in range(rng.randint(1, 4)):
        op = rng.random()
        if op < 0.6 and buf:
            buf[rng.randrange(len(buf))] = rng.randrange(256)
        elif op < 0.8:
            buf.insert(rng.randint(0, len(buf)), rng.randrange(256))
        elif buf:
            del buf[rng.randrange(len(buf))]
    return bytes(buf)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--inputs", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = random.Random(args.seed)
    corpus = seeds(MessageFactory())
    outcomes = Counter()
    t0 = time.monotonic()
    for _ in range(args.inputs):
        data = rng.randbytes(rng.randint(0, 64)) if rng.random() < 0.5 else \
            mutate(rng, rng.choice(corpus))
        try:
            decode_frame(data)
            outcomes["Message"] += 1
        except TmsError as exc:
            outcomes[type(exc).__name__] += 1
    # any other exception propagates and fails the run
    for name, n in outcomes.most_common():
        print(f"{name:>16} {n}")
    print(f"{args.inputs} inputs in {time.monotonic() - t0:.1f} s, no untyped failures")
    return 0


if __name__ == "__main__":
    sys.exit(main())
