"""Measure LDPC frame-error rates on multilevel planes.

For one SNR and slot width, each plane is decoded on its own with the true
lower planes as side information, at several code rates around its
conditional entropy h. The table shows which efficiency h / (1 - rate) the
codes sustain at a given frame-error rate; build_rate_table.py encodes the
result in ``syndrome_fraction``.

    python scripts/tune_ldpc.py --snr 3.0 --width 0.37 --n 100000 --frames 20
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from cvqkd.reconciliation import ldpc
from cvqkd.reconciliation.discretize import discretize, slot_codes, to_planes, uniform_boundaries
from cvqkd.reconciliation.multilevel import ChannelModel, plane_llr, slot_posteriors
from cvqkd.reconciliation.rate_table import plane_entropies

EFFICIENCIES = (0.85, 0.88, 0.91, 0.94)
MAPPING = "natural"


def frame(rng, snr, n, boundaries):
    s = rng.normal(0.0, math.sqrt(snr), n)
    y = s + rng.normal(0.0, 1.0, n)
    codes = slot_codes(MAPPING)[discretize(y, boundaries)]
    return s, to_planes(codes)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snr", type=float, default=3.0)
    ap.add_argument("--width", type=float, default=0.37, help="slot width in units of Bob's sd")
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    v_b = 1.0 + args.snr
    boundaries = uniform_boundaries(v_b, args.width)
    channel = ChannelModel(1.0, 1.0, v_b)
    cuts = (np.arange(1, 16) - 8) * args.width
    h_planes = plane_entropies(args.snr, cuts, MAPPING)["planes"]

    print("level  h      efficiency  rate    FER    mean_iter  s/frame")
    for level, h in enumerate(h_planes):
        if h > 0.9:
            print(f"{level:5d}  {h:.4f}  disclosed")
            continue
        for eff in EFFICIENCIES:
            rate = 1.0 - h / eff
            if rate <= 0.0:
                continue
            code = ldpc.build_code(args.n, rate, seed=args.seed, level=level)
            rng = np.random.default_rng(args.seed)
            failures, iters = 0, []
            t0 = time.perf_counter()
            for _ in range(args.frames):
                s, planes = frame(rng, args.snr, args.n, boundaries)
                syndrome = code.syndrome(planes[level])
                llr = plane_llr(slot_posteriors(s, channel, boundaries), planes, level, MAPPING)
                hard, its, ok = ldpc.decode(code, llr, syndrome)
                failures += not (ok and np.array_equal(hard, planes[level]))
                iters.append(its)
            per = (time.perf_counter() - t0) / args.frames
            print(f"{level:5d}  {h:.4f}  {eff:10.2f}  {code.rate:.4f}  "
                  f"{failures / args.frames:.2f}   {np.mean(iters):9.1f}  {per:.2f}")


if __name__ == "__main__":
    main()
