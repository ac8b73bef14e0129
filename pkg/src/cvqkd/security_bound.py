"""Asymptotic secret-key-rate bound for reverse-reconciled coherent-state CVQKD.

Eve is assumed to hold the channel purification but not Bob's detector
noise ("realistic" model). All noise figures are in shot-noise units and
all information quantities in bits per pulse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_core import FiberModel, LinkParams, transmittance_from_db
from .session.duty import FIELD_DUTY, SINGLE_CORE_DUTY, DutyModel

DISCRIMINANT_TOL = 1e-9
EIGENVALUE_TOL = 1e-9
FIELD_EXCESS_NOISE = 0.04
FIELD_BETA = 0.9
DEFAULT_LOSS_GRID = np.round(np.arange(0.0, 6.0 + 1e-9, 0.05), 10)


class InconsistentParameters(ValueError):
    """The closed-form covariance data does not describe a physical state."""


@dataclass(frozen=True)
class SecurityQuantities:
    v: float
    chi_line: float
    chi_hom: float
    chi_tot: float
    a: float
    b: float
    c: float
    d: float
    lambdas: tuple[float, float, float, float]
    i_ab: float
    chi_be: float
    beta: float

    @property
    def delta_i(self) -> float:
        return self.beta * self.i_ab - self.chi_be


@dataclass(frozen=True)
class RateWaterfall:
    loss_db: np.ndarray
    distance_km: np.ndarray
    ideal_rate: np.ndarray
    rate_after_excess_noise: np.ndarray
    rate_after_beta: np.ndarray
    rate_after_duty: np.ndarray

    STAGES = ("ideal_rate", "rate_after_excess_noise", "rate_after_beta", "rate_after_duty")

    def rows(self):
        for k in range(self.loss_db.size):
            yield (self.loss_db[k], self.distance_km[k], *(getattr(self, s)[k] for s in self.STAGES))


def g_function(x: float) -> float:
    """Entropy of a thermal state with mean photon number ``x``, in bits."""
    if x < 0:
        raise ValueError(f"G is defined for x >= 0, got {x}")
    if x == 0:
        return 0.0
    if x < 1.0:
        return (x + 1.0) * math.log2(x + 1.0) - x * math.log2(x)
    # same expression rearranged; the direct form cancels badly for large x
    return math.log2(x + 1.0) + x * math.log1p(1.0 / x) / math.log(2.0)


def chi_line(t: float, epsilon: float) -> float:
    if not 0 < t <= 1:
        raise ValueError(f"transmittance must lie in (0, 1], got {t}")
    if epsilon < 0:
        raise ValueError("excess noise must be non-negative")
    return (1.0 - t) / t + epsilon


def chi_hom(eta: float, v_el: float) -> float:
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if v_el < 0:
        raise ValueError("electronic noise must be non-negative")
    return (1.0 + v_el) / eta - 1.0


def chi_tot(params: LinkParams) -> float:
    return chi_line(params.t, params.epsilon) + chi_hom(params.eta, params.v_el) / params.t


def mutual_information(params: LinkParams) -> float:
    total = chi_tot(params)
    return 0.5 * math.log2((params.v + total) / (1.0 + total))


def _eigen_pair(s: float, p: float, label: str, root_disc: float | None = None
                ) -> tuple[float, float]:
    # roots of x^2 - s x + p; the minus root uses p / plus-root to avoid cancellation
    if root_disc is None:
        disc = s * s - 4.0 * p
        if disc < -DISCRIMINANT_TOL * max(1.0, s * s):
            raise InconsistentParameters(f"negative discriminant {disc:.3e} for {label}")
        root_disc = math.sqrt(max(disc, 0.0))
    plus = 0.5 * (s + root_disc)
    minus = p / plus
    return math.sqrt(plus), math.sqrt(minus)


def holevo_bound(params: LinkParams) -> SecurityQuantities:
    """Holevo information between Eve and Bob's data, with every intermediate."""
    t = params.t
    v = params.v
    cl = chi_line(t, params.epsilon)
    ch = chi_hom(params.eta, params.v_el)
    ct = cl + ch / t
    a = v * v * (1.0 - 2.0 * t) + 2.0 * t + t * t * (v + cl) ** 2
    b = t * t * (v * cl + 1.0) ** 2
    sqrt_b = math.sqrt(b)
    denom = t * (v + ct)
    c = (v * sqrt_b + t * (v + cl) + a * ch) / denom
    d = sqrt_b * (v + sqrt_b * ch) / denom

    # Both discriminants are formed from factored pieces. Expanding C^2 - 4D
    # or A^2 - 4B directly cancels to nothing near T = 1, eps = 0, where the
    # eigenvalues crowd against 1.
    u = params.v_a * (1.0 - t) - t * params.epsilon  # V(1-T) - T chi_line
    w = params.v_a * (params.v_a + 2.0)  # V^2 - 1
    root_ab = abs(u) * math.sqrt(a + 2.0 * sqrt_b)
    r = t * t * (v + cl) ** 2 - 2.0 * t * v * v + 2.0 * t * v * cl + 4.0 * t + v * v
    s = (1.0 - t) * (2.0 + v * cl) + t * cl * cl
    num_cd = ch * ch * u * u * r + 2.0 * t * w * u * s * ch + (t * cl * w) ** 2
    root_cd = math.sqrt(max(num_cd, 0.0)) / denom
    l1, l2 = _eigen_pair(a, b, "A, B", root_ab)
    l3, l4 = _eigen_pair(c, d, "C, D", root_cd)
    lambdas = (l1, l2, l3, l4)
    if min(lambdas) < 1.0 - EIGENVALUE_TOL:
        raise InconsistentParameters(f"symplectic eigenvalue below 1: {lambdas}")

    def g_of(lam):
        return g_function(max(lam - 1.0, 0.0) / 2.0)

    chi_be = g_of(l1) + g_of(l2) - g_of(l3) - g_of(l4)
    i_ab = 0.5 * math.log2((v + ct) / (1.0 + ct))
    return SecurityQuantities(
        v=v, chi_line=cl, chi_hom=ch, chi_tot=ct, a=a, b=b, c=c, d=d,
        lambdas=lambdas, i_ab=i_ab, chi_be=max(chi_be, 0.0), beta=params.beta,
    )


def secret_fraction(params: LinkParams) -> float:
    """beta * I_AB - chi_BE in bits per pulse; non-positive means no key."""
    return holevo_bound(params).delta_i


def key_rate(params: LinkParams) -> float:
    """Secret key rate in bit/s at the optical pulse rate, floored at zero."""
    return max(secret_fraction(params), 0.0) * params.pulse_rate_hz


def max_distance(params: LinkParams, fiber: FiberModel, tol_km: float = 0.01) -> float:
    """Longest fibre (km) over which the secret fraction stays positive."""
    per_km = fiber.loss_db_per_km
    if per_km <= 0:
        raise ValueError("a lossless fibre has no finite range")

    def positive(d_km):
        return secret_fraction(params.with_(t=transmittance_from_db(d_km * per_km))) > 0

    if not positive(0.0):
        return 0.0
    lo, hi = 0.0, 10.0
    while positive(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e5:
            return math.inf
    while hi - lo > tol_km:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _rate_at(params: LinkParams, loss_db: float) -> float:
    return key_rate(params.with_(t=transmittance_from_db(loss_db)))


def rate_waterfall(
    params: LinkParams,
    fiber: FiberModel = FiberModel(),
    duty: DutyModel = SINGLE_CORE_DUTY,
    loss_grid=DEFAULT_LOSS_GRID,
    excess_noise: float = FIELD_EXCESS_NOISE,
    beta: float = FIELD_BETA,
) -> RateWaterfall:
    """Successive key-rate drops versus channel loss.

    Starts from the ideal link (no excess noise, perfect reconciliation) and
    applies, in order, the excess noise, the reconciliation efficiency and the
    post-processing duty factor. Apparatus values (V_A, eta, v_el, pulse rate)
    come from ``params``.
    """
    loss = np.asarray(loss_grid, dtype=np.float64)
    ideal_p = params.with_(epsilon=0.0, beta=1.0)
    noisy_p = params.with_(epsilon=excess_noise, beta=1.0)
    real_p = params.with_(epsilon=excess_noise, beta=beta)
    ideal = np.array([_rate_at(ideal_p, x) for x in loss])
    noisy = np.array([_rate_at(noisy_p, x) for x in loss])
    real = np.array([_rate_at(real_p, x) for x in loss])
    # excess noise can only lower the rate; guard against float ties
    noisy = np.minimum(noisy, ideal)
    real = np.minimum(real, noisy)
    distance = np.array([fiber.length_for_loss(x) for x in loss])
    return RateWaterfall(loss, distance, ideal, noisy, real, real * duty.duty)


def rate_vs_excess_noise(params: LinkParams, eps_grid) -> np.ndarray:
    """Key rate (bit/s, may be negative) at each excess-noise value, other parameters fixed."""
    eps = np.asarray(eps_grid, dtype=np.float64)
    if eps.size and (eps.min() < 0 or eps.max() > 0.1 + 1e-12):
        raise ValueError("excess-noise grid must lie within [0, 0.1]")
    return np.array([secret_fraction(params.with_(epsilon=float(e))) for e in eps]) * params.pulse_rate_hz
