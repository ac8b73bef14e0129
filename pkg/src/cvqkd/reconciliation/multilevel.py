"""Multilevel reverse reconciliation.

Bob quantizes his normalized measurements into 16 slots and splits the 4-bit
labels into bit planes. Planes are processed least significant first: a
plane is either disclosed outright or Bob sends its LDPC syndrome, and Alice
decodes it with soft information from her own Gaussian value conditioned on
the planes already settled. Alice ends up with Bob's labels; the secret key
material is the concatenation of the coded planes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..estimation import EstimationResult
from ..model_core import Calibration, LeakageLedger
from . import ldpc
from .discretize import (
    N_PLANES,
    discretize,
    encode_labels,
    slot_codes,
    slot_probabilities,
    to_planes,
)
from .rate_table import DISCLOSE, RateEntry, RateTable, default_table, label_entropy

_LLR_CHUNK = 1 << 16


@dataclass(frozen=True)
class ChannelModel:
    """Alice's view of Bob's normalized value: y = amplitude * x + N(0, noise_var)."""

    amplitude: float
    noise_var: float
    v_b: float

    @property
    def snr(self) -> float:
        return (self.v_b - self.noise_var) / self.noise_var

    @classmethod
    def from_estimate(cls, est: EstimationResult, cal: Calibration) -> "ChannelModel":
        gain = cal.eta * min(est.t_hat, 1.0)
        noise = 1.0 + gain * max(est.epsilon_hat, 0.0) + cal.v_el
        return cls(math.sqrt(gain), noise, gain * est.v_a_hat + noise)


@dataclass(frozen=True)
class ReconciliationPlan:
    entry: RateEntry
    boundaries: np.ndarray = field(repr=False)
    n: int
    code_seed: int
    table_version: int

    @classmethod
    def for_channel(
        cls, channel: ChannelModel, n: int, code_seed: int, table: RateTable | None = None
    ) -> "ReconciliationPlan":
        table = table or default_table()
        entry = table.select(channel.snr)
        return cls(entry, entry.boundaries(channel.v_b), n, code_seed, table.version)

    @property
    def mapping(self) -> str:
        return self.entry.mapping

    @property
    def coded_levels(self) -> list[int]:
        return [k for k, r in enumerate(self.entry.rates) if r != DISCLOSE]

    def code(self, level: int) -> ldpc.LdpcCode:
        return _cached_code(self.n, self.entry.rates[level], self.code_seed, level)

    @property
    def label_entropy(self) -> float:
        return label_entropy(self.entry.width_sigmas)


@lru_cache(maxsize=16)
def _cached_code(n: int, rate: float, seed: int, level: int) -> ldpc.LdpcCode:
    return ldpc.build_code(n, rate, seed, level)


@dataclass(frozen=True)
class PlaneMessage:
    level: int
    disclosed: bool
    bits: np.ndarray = field(repr=False)  # the plane itself, or its syndrome

    @property
    def n_bits(self) -> int:
        return int(self.bits.size)


@dataclass
class ReconciliationOutcome:
    planes: np.ndarray = field(repr=False)  # Alice's (4, n) estimate of Bob's planes
    success: bool
    iterations: dict[int, int]
    level_success: dict[int, bool]
    bits_leaked: int
    label_entropy: float
    n: int
    coded_levels: list[int]

    def key_bits(self) -> np.ndarray:
        return key_material(self.planes, self.coded_levels)

    def measured_beta(self, i_ab: float, extra_leak_bits: int = 0) -> float:
        return measured_beta(self.label_entropy, self.bits_leaked + extra_leak_bits, self.n, i_ab)


def measured_beta(label_entropy: float, leaked_bits: int, n: int, i_ab: float) -> float:
    """Extracted information per pulse, H(Q) - leak/n, as a fraction of I_AB.

    A lucky decode on a short block can leak less than the conditional
    entropy; the result is capped at 1 so the key never exceeds the bound.
    """
    return min((label_entropy - leaked_bits / n) / i_ab, 1.0)


def key_material(planes: np.ndarray, coded_levels: list[int]) -> np.ndarray:
    if not coded_levels:
        return np.zeros(0, dtype=np.uint8)
    return np.concatenate([planes[k] for k in coded_levels]).astype(np.uint8)


def bob_labels(bob_values_snu: np.ndarray, plan: ReconciliationPlan) -> np.ndarray:
    return encode_labels(discretize(bob_values_snu, plan.boundaries), plan.mapping)


def bob_messages(codes: np.ndarray, plan: ReconciliationPlan) -> list[PlaneMessage]:
    """Bob's side: disclosed planes in full, syndromes for coded ones."""
    planes = to_planes(codes)
    msgs = []
    for k in range(N_PLANES):
        if plan.entry.rates[k] == DISCLOSE:
            msgs.append(PlaneMessage(k, True, planes[k].copy()))
        else:
            msgs.append(PlaneMessage(k, False, plan.code(k).syndrome(planes[k])))
    return msgs


def slot_posteriors(
    alice_values: np.ndarray, channel: ChannelModel, boundaries: np.ndarray
) -> np.ndarray:
    x = np.asarray(alice_values, dtype=np.float64)
    out = np.empty((x.size, boundaries.size + 1))
    sd = math.sqrt(channel.noise_var)
    for start in range(0, x.size, _LLR_CHUNK):
        sl = slice(start, start + _LLR_CHUNK)
        out[sl] = slot_probabilities(channel.amplitude * x[sl], sd, boundaries)
    return out


def plane_llr(
    posteriors: np.ndarray, known_planes: np.ndarray, level: int, mapping: str
) -> np.ndarray:
    """log P(bit=0)/P(bit=1) for plane ``level`` given Alice's value and the lower planes."""
    codes = slot_codes(mapping).astype(np.int64)
    low_mask = (1 << level) - 1
    low = np.zeros(posteriors.shape[0], dtype=np.int64)
    for k in range(level):
        low |= known_planes[k].astype(np.int64) << k
    # consistent[i, q]: slot q agrees with the lower planes settled for pulse i
    consistent = (codes[None, :] & low_mask) == low[:, None]
    bit = ((codes >> level) & 1).astype(bool)
    masked = np.where(consistent, posteriors, 0.0)
    p1 = masked[:, bit].sum(axis=1)
    p0 = masked[:, ~bit].sum(axis=1)
    tiny = 1e-300
    return np.log(p0 + tiny) - np.log(p1 + tiny)


def alice_reconcile(
    alice_values: np.ndarray,
    plan: ReconciliationPlan,
    channel: ChannelModel,
    messages: list[PlaneMessage],
    ledger: LeakageLedger | None = None,
    llr_sign: float = 1.0,
    max_iter: int = ldpc.MAX_ITERATIONS,
) -> ReconciliationOutcome:
    """Alice's side: recover Bob's planes from his messages and her soft values.

    ``llr_sign`` exists for negative-control tests; -1 inverts every
    log-likelihood ratio.
    """
    n = plan.n
    if np.asarray(alice_values).size != n:
        raise ValueError("Alice's value count does not match the plan")
    posteriors = slot_posteriors(alice_values, channel, plan.boundaries)
    planes = np.zeros((N_PLANES, n), dtype=np.uint8)
    iterations: dict[int, int] = {}
    level_ok: dict[int, bool] = {}
    leaked = 0
    for msg in sorted(messages, key=lambda m: m.level):
        k = msg.level
        leaked += msg.n_bits
        if ledger is not None:
            ledger.add("reconciliation_bits", msg.n_bits)
        if msg.disclosed:
            planes[k] = msg.bits
            continue
        llr = llr_sign * plane_llr(posteriors, planes, k, plan.mapping)
        hard, its, ok = ldpc.decode(plan.code(k), llr, msg.bits, max_iter)
        planes[k] = hard
        iterations[k] = int(its)
        level_ok[k] = bool(ok)
    return ReconciliationOutcome(
        planes=planes,
        success=all(level_ok.values()),
        iterations=iterations,
        level_success=level_ok,
        bits_leaked=leaked,
        label_entropy=plan.label_entropy,
        n=n,
        coded_levels=plan.coded_levels,
    )


def reconcile_reverse(
    alice_values: np.ndarray,
    bob_codes: np.ndarray,
    plan: ReconciliationPlan,
    channel: ChannelModel,
    ledger: LeakageLedger | None = None,
    llr_sign: float = 1.0,
) -> ReconciliationOutcome:
    """Run both sides of the reconciliation in-process."""
    return alice_reconcile(
        alice_values, plan, channel, bob_messages(bob_codes, plan), ledger, llr_sign
    )
