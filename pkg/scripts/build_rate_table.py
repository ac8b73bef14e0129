"""Generate the shipped multilevel rate table.

For each SNR on the grid, pick the uniform-quantizer slot width that
maximizes the predicted reconciliation efficiency, given per-plane
conditional entropies and an empirical model of how much syndrome the LDPC
codes need at 1e5 bits and ~10% frame-error rate (see scripts/tune_ldpc.py).

    python scripts/build_rate_table.py [--out src/cvqkd/reconciliation/rate_table_v1.json]
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from cvqkd.reconciliation.bch import BchCode
from cvqkd.reconciliation.rate_table import RateEntry, RateTable, label_entropy, plane_entropies

VERSION = 1
RATE_STEP = 0.005
MAX_RATE = 0.99
MIN_RATE = 0.05


def syndrome_fraction(h: float) -> float:
    """Syndrome bits per plane bit needed to decode a plane of conditional entropy h."""
    if h < 0.1:
        return 1.3 * h + 0.006
    return h / 0.91


def plane_rate(h: float) -> float:
    rate = 1.0 - syndrome_fraction(h)
    rate = math.floor(rate / RATE_STEP + 1e-9) * RATE_STEP
    if rate < MIN_RATE:
        return 0.0
    return round(min(rate, MAX_RATE), 4)


def evaluate(snr: float, width: float, mapping: str = "natural"):
    cuts = (np.arange(1, 16) - 8) * width
    ent = plane_entropies(snr, cuts, mapping)
    rates = tuple(plane_rate(h) for h in ent["planes"])
    leak = sum(1.0 if r == 0.0 else 1.0 - r for r in rates)
    bch = BchCode()
    n_coded = sum(1 for r in rates if r)
    leak += n_coded * bch.syndrome_bits / bch.n
    beta = (label_entropy(width) - leak) / ent["i_sy"]
    return rates, beta


def build(snr_grid, width_grid, mapping="natural") -> RateTable:
    entries = []
    for snr in snr_grid:
        best = max(((evaluate(snr, w, mapping), w) for w in width_grid), key=lambda x: x[0][1])
        (rates, beta), width = best
        entries.append(RateEntry(round(float(snr), 4), round(float(width), 4), mapping, rates,
                                 round(float(beta), 4)))
        print(f"snr {snr:5.2f}  width {width:.2f}  rates {rates}  beta {beta:.3f}", flush=True)
    return RateTable(VERSION, tuple(entries))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parents[1] / "src/cvqkd/reconciliation/rate_table_v1.json",
    )
    ap.add_argument("--snr-min", type=float, default=0.5)
    ap.add_argument("--snr-max", type=float, default=8.0)
    ap.add_argument("--snr-step", type=float, default=0.05)
    args = ap.parse_args()
    snr_grid = np.arange(args.snr_min, args.snr_max + 1e-9, args.snr_step)
    width_grid = np.arange(0.20, 0.80 + 1e-9, 0.01)
    table = build(snr_grid, width_grid)
    args.out.write_text(table.to_json() + "\n")
    print(f"wrote {len(table.entries)} entries to {args.out}")


if __name__ == "__main__":
    main()
