"""Per-plane code rates for multilevel reconciliation, indexed by SNR.

The table is generated offline by ``scripts/build_rate_table.py`` from the
conditional plane entropies below and an empirical code-efficiency model,
and shipped as JSON. Both parties look up the same entry from the shared
estimation summary, so rates never travel on the wire, only the table
version.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.stats import norm

from .discretize import N_PLANES, N_SLOTS, slot_codes, uniform_boundaries

DISCLOSE = 0.0
TABLE_FILE = "rate_table_v1.json"


@dataclass(frozen=True)
class RateEntry:
    snr: float
    width_sigmas: float  # slot width in units of Bob's standard deviation
    mapping: str
    rates: tuple[float, ...]  # per plane, LSB first; 0.0 means disclose
    predicted_beta: float = float("nan")

    def boundaries(self, v_b: float) -> np.ndarray:
        return uniform_boundaries(v_b, self.width_sigmas)


@dataclass(frozen=True)
class RateTable:
    version: int
    entries: tuple[RateEntry, ...]

    def select(self, snr: float) -> RateEntry:
        """Entry for the largest tabulated SNR not above ``snr`` (conservative side)."""
        below = [e for e in self.entries if e.snr <= snr + 1e-12]
        if not below:
            raise LookupError(f"SNR {snr:.3f} is below the rate table's range")
        return max(below, key=lambda e: e.snr)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "entries": [
                    {
                        "snr": e.snr,
                        "width_sigmas": e.width_sigmas,
                        "mapping": e.mapping,
                        "rates": list(e.rates),
                        "predicted_beta": e.predicted_beta,
                    }
                    for e in self.entries
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "RateTable":
        raw = json.loads(text)
        entries = tuple(
            RateEntry(e["snr"], e["width_sigmas"], e["mapping"], tuple(e["rates"]),
                      e.get("predicted_beta", float("nan")))
            for e in raw["entries"]
        )
        return cls(int(raw["version"]), tuple(sorted(entries, key=lambda e: e.snr)))


@lru_cache(maxsize=1)
def default_table() -> RateTable:
    text = resources.files(__package__).joinpath(TABLE_FILE).read_text()
    return RateTable.from_json(text)


def _h2(p):
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log2(p) + q * np.log2(q))


def plane_entropies(
    snr: float, boundaries_sigmas, mapping: str = "natural", n_grid: int = 1201
) -> dict:
    """Entropy budget of the four planes for Y = S + N, S ~ N(0, snr), N ~ N(0, 1).

    ``boundaries_sigmas`` are the 15 cut points in units of Bob's standard
    deviation sqrt(1 + snr). Returns H(Q), H(Q | S), I(S; Y) and, per plane,
    H(plane | S, lower planes), computed by Gauss-Hermite-free quadrature
    over S on a dense grid.
    """
    sd_b = math.sqrt(1.0 + snr)
    cuts = np.asarray(boundaries_sigmas, dtype=np.float64) * sd_b
    edges = np.concatenate(([-np.inf], cuts, [np.inf]))
    z = np.linspace(-8.0, 8.0, n_grid)
    w = norm.pdf(z)
    w /= w.sum()
    mean = math.sqrt(snr) * z
    lo = edges[None, :-1] - mean[:, None]
    hi = edges[None, 1:] - mean[:, None]
    p = np.where(lo > 0, norm.sf(lo) - norm.sf(hi), norm.cdf(hi) - norm.cdf(lo))
    p = np.maximum(p, 0.0)

    pq = w @ p
    pq_pos = pq[pq > 0]
    h_q = float(-(pq_pos * np.log2(pq_pos)).sum())
    pp = np.where(p > 0, p, 1.0)
    h_q_s = float(w @ (-(p * np.log2(pp)).sum(axis=1)))

    codes = slot_codes(mapping).astype(np.int64)
    planes = []
    for k in range(N_PLANES):
        mask_low = (1 << k) - 1
        total = 0.0
        for low in range(1 << k):
            sel = (codes & mask_low) == low
            p1 = p[:, sel & (((codes >> k) & 1) == 1)].sum(axis=1)
            p0 = p[:, sel & (((codes >> k) & 1) == 0)].sum(axis=1)
            s = p0 + p1
            frac = np.where(s > 0, p1 / np.where(s > 0, s, 1.0), 0.0)
            total += float(w @ (s * _h2(frac)))
        planes.append(total)
    return {
        "h_q": h_q,
        "h_q_given_s": h_q_s,
        "i_sy": 0.5 * math.log2(1.0 + snr),
        "planes": planes,
    }


def label_entropy(width_sigmas: float) -> float:
    """H(Q) of Bob's labels under a uniform quantizer (independent of SNR)."""
    cuts = (np.arange(1, N_SLOTS) - N_SLOTS // 2) * width_sigmas
    edges = np.concatenate(([-np.inf], cuts, [np.inf]))
    pq = np.diff(norm.cdf(edges))
    pq = pq[pq > 0]
    return float(-(pq * np.log2(pq)).sum())
