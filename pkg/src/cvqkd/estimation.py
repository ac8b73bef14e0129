"""Channel evaluation from a randomly disclosed half of the block.

Alice reveals both quadratures of the selected pulses (16 bits each); Bob
pairs every revealed pulse with his own measurement and estimates the
modulation variance, the channel transmittance and the excess noise from the
second moments. Standard errors follow from the Gaussian fourth moments by
the delta method.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .channel_sim import QuadratureBlock
from .model_core import Calibration, LeakageLedger, LinkParams
from .rng import StrongRandom
from .security_bound import SecurityQuantities, holevo_bound

QUANT_BITS = 16
QUANT_RANGE_SIGMAS = 5.0
MIN_PAIRS = 10_000


class EstimationError(ValueError):
    pass


class SecurityAbort(RuntimeError):
    """No secret key can be extracted from this block."""


@dataclass(frozen=True)
class Disclosure:
    disclosed_idx: np.ndarray = field(repr=False)
    key_idx: np.ndarray = field(repr=False)
    codes_x: np.ndarray = field(repr=False)  # uint16
    codes_p: np.ndarray = field(repr=False)
    full_range: float

    @property
    def n_disclosed(self) -> int:
        return int(self.disclosed_idx.size)

    @property
    def message_bits(self) -> int:
        return 2 * QUANT_BITS * self.n_disclosed

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        return dequantize(self.codes_x, self.full_range), dequantize(self.codes_p, self.full_range)


def quantize(values: np.ndarray, full_range: float) -> np.ndarray:
    """Uniform 16-bit code over [-full_range, full_range]; values outside are clamped."""
    levels = 2**QUANT_BITS - 1
    scaled = np.rint((np.asarray(values) + full_range) / (2.0 * full_range) * levels)
    return np.clip(scaled, 0, levels).astype(np.uint16)


def dequantize(codes: np.ndarray, full_range: float) -> np.ndarray:
    levels = 2**QUANT_BITS - 1
    return codes.astype(np.float64) / levels * 2.0 * full_range - full_range


def split_indices(n_pulses: int, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"disclosed fraction must lie strictly between 0 and 1, got {fraction}")
    k = int(round(fraction * n_pulses))
    if k == 0 or k == n_pulses:
        raise ValueError("disclosed fraction leaves one side of the split empty")
    keys = StrongRandom(seed, "disclosure").uint64(n_pulses)
    part = np.argpartition(keys, k - 1)  # uniform k-subset: the k smallest random keys
    return np.sort(part[:k]), np.sort(part[k:])


def disclose(
    block: QuadratureBlock,
    fraction: float,
    seed,
    ledger: LeakageLedger,
    v_a_nominal: float,
) -> Disclosure:
    """Alice's side: pick and quantize the pulses revealed for channel evaluation."""
    disclosed, key = split_indices(block.n_pulses, fraction, seed)
    full_range = QUANT_RANGE_SIGMAS * math.sqrt(v_a_nominal)
    d = Disclosure(
        disclosed,
        key,
        quantize(block.alice_x[disclosed], full_range),
        quantize(block.alice_p[disclosed], full_range),
        full_range,
    )
    ledger.add("estimation_bits", d.message_bits)
    return d


@dataclass(frozen=True)
class EstimationResult:
    v_a_hat: float
    t_hat: float
    epsilon_hat: float  # raw; may be slightly negative
    rho_squared: float
    v_b_hat: float  # Bob's variance, SNU
    n_disclosed: int
    ci_sigma: dict = field(default_factory=dict)

    @property
    def epsilon_flagged(self) -> bool:
        """True when the raw excess-noise estimate sits more than 3 sigma below zero."""
        return self.epsilon_hat < -3.0 * self.ci_sigma.get("epsilon", 0.0)

    def link_params(self, cal: Calibration, beta: float) -> LinkParams:
        """Parameters fed to the security bound: negative noise clamped, T capped at 1."""
        return LinkParams(
            v_a=self.v_a_hat,
            t=min(self.t_hat, 1.0),
            epsilon=max(self.epsilon_hat, 0.0),
            eta=cal.eta,
            v_el=cal.v_el,
            beta=beta,
        )

    _FMT = struct.Struct(">6dQ5d")
    _SIGMA_KEYS = ("v_a", "t", "epsilon", "rho_squared", "delta_i")

    def to_bytes(self) -> bytes:
        sig = [self.ci_sigma.get(k, float("nan")) for k in self._SIGMA_KEYS]
        return self._FMT.pack(
            self.v_a_hat, self.t_hat, self.epsilon_hat, self.rho_squared, self.v_b_hat, 0.0,
            self.n_disclosed, *sig,
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EstimationResult":
        v_a, t, eps, rho2, v_b, _, n, *sig = cls._FMT.unpack(raw)
        return cls(v_a, t, eps, rho2, v_b, n, dict(zip(cls._SIGMA_KEYS, sig)))


def _moment_cov(s_aa: float, s_ab: float, s_bb: float, n: int) -> np.ndarray:
    # covariance of the sample second moments of a zero-mean bivariate Gaussian
    return np.array([
        [2 * s_aa**2, 2 * s_aa * s_ab, 2 * s_ab**2],
        [2 * s_aa * s_ab, s_aa * s_bb + s_ab**2, 2 * s_bb * s_ab],
        [2 * s_ab**2, 2 * s_bb * s_ab, 2 * s_bb**2],
    ]) / n


def _delta_sigma(fn, moments: np.ndarray, cov: np.ndarray) -> float:
    grad = np.empty(3)
    for k in range(3):
        h = 1e-6 * max(abs(moments[k]), 1e-12)
        up, dn = moments.copy(), moments.copy()
        up[k] += h
        dn[k] -= h
        grad[k] = (fn(*up) - fn(*dn)) / (2 * h)
    return float(math.sqrt(max(grad @ cov @ grad, 0.0)))


def _params_from_moments(s_aa, s_ab, s_bb, cal: Calibration):
    # s_aa in SNU^2, s_ab in SNU * detector units, s_bb in detector units^2
    if s_aa <= 0:
        raise EstimationError("zero modulation variance: transmittance is not identifiable")
    root_n0 = math.sqrt(cal.n0)
    t_hat = (s_ab / (math.sqrt(cal.eta) * s_aa * root_n0)) ** 2
    v_b = s_bb / cal.n0
    if t_hat <= 0:
        raise EstimationError("estimated transmittance is not positive")
    eps_hat = (v_b - 1.0 - cal.v_el - cal.eta * t_hat * s_aa) / (cal.eta * t_hat)
    rho2 = s_ab**2 / (s_aa * s_bb)
    return s_aa, t_hat, eps_hat, rho2, v_b


def estimate(
    alice_x: np.ndarray,
    alice_p: np.ndarray,
    bob_choice: np.ndarray,
    bob_value: np.ndarray,
    cal: Calibration,
    beta: float = 0.9,
) -> EstimationResult:
    """Estimate channel parameters from disclosed Alice values and Bob's records.

    Parameters
    ----------
    alice_x, alice_p : ndarray
        Disclosed Alice quadratures (SNU), after de-quantization.
    bob_choice, bob_value : ndarray
        Bob's quadrature choice and raw detector value for the same pulses.
    cal : Calibration
        Bob's shot-noise calibration; supplies N0, eta and v_el.
    beta : float
        Reconciliation efficiency used only for the secret-fraction error bar.
    """
    a = np.where(np.asarray(bob_choice).astype(bool), alice_p, alice_x)
    b = np.asarray(bob_value, dtype=np.float64)
    n = a.size
    if n < MIN_PAIRS:
        raise EstimationError(f"only {n} matched pairs; need at least {MIN_PAIRS}")
    moments = np.array([np.mean(a * a), np.mean(a * b), np.mean(b * b)])
    v_a, t_hat, eps_hat, rho2, v_b = _params_from_moments(*moments, cal)

    cov = _moment_cov(*moments, n)
    sigma = {
        "v_a": _delta_sigma(lambda x, y, z: x, moments, cov),
        "t": _delta_sigma(lambda *m: _params_from_moments(*m, cal)[1], moments, cov),
        "epsilon": _delta_sigma(lambda *m: _params_from_moments(*m, cal)[2], moments, cov),
        "rho_squared": _delta_sigma(lambda *m: _params_from_moments(*m, cal)[3], moments, cov),
    }

    def delta_i(*m):
        _, t, e, _, _ = _params_from_moments(*m, cal)
        p = LinkParams(m[0], min(t, 1.0), max(e, 0.0), cal.eta, cal.v_el, beta)
        return holevo_bound(p).delta_i

    try:
        sigma["delta_i"] = _delta_sigma(delta_i, moments, cov)
    except ValueError:
        sigma["delta_i"] = float("nan")
    return EstimationResult(v_a, t_hat, eps_hat, rho2, v_b, n, sigma)


def estimate_from_disclosure(
    disclosure: Disclosure, bob_choice: np.ndarray, bob_value: np.ndarray, cal: Calibration,
    beta: float = 0.9,
) -> EstimationResult:
    """Bob's side: pair the de-quantized disclosure with his records of the same pulses."""
    ax, ap = disclosure.values()
    idx = disclosure.disclosed_idx
    return estimate(ax, ap, bob_choice[idx], bob_value[idx], cal, beta)


def check_modulation(est: EstimationResult, v_a_nominal: float, n_sigma: float = 5.0) -> bool:
    """Alice's sanity check of Bob's variance estimate against her modulation setting."""
    return abs(est.v_a_hat - v_a_nominal) <= n_sigma * max(est.ci_sigma.get("v_a", 0.0), 1e-12)


def agree_security(est: EstimationResult, cal: Calibration, beta: float) -> SecurityQuantities:
    """Security quantities both parties derive from the same estimation summary."""
    sq = holevo_bound(est.link_params(cal, beta))
    if sq.delta_i <= 0:
        raise SecurityAbort(f"secret fraction {sq.delta_i:.4f} <= 0; block cannot yield key")
    return sq
