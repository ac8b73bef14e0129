"""Shared link parameters, calibration arithmetic and unit conversions.

Everything downstream of :func:`normalize` works in shot-noise units (SNU):
the vacuum quadrature variance is 1.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass(frozen=True)
class LinkParams:
    v_a: float  # modulation variance, SNU
    t: float  # channel transmittance
    epsilon: float  # excess noise referred to the channel input, SNU
    eta: float  # Bob's detection efficiency
    v_el: float  # electronic noise, SNU
    beta: float = 0.9  # reconciliation efficiency
    pulse_rate_hz: float = 500e3

    def __post_init__(self):
        if not self.v_a >= 0:
            raise ValueError(f"v_a must be >= 0, got {self.v_a}")
        if not 0 < self.t <= 1:
            raise ValueError(f"t must lie in (0, 1], got {self.t}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.v_el >= 0:
            raise ValueError(f"v_el must be >= 0, got {self.v_el}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.pulse_rate_hz > 0:
            raise ValueError(f"pulse_rate_hz must be > 0, got {self.pulse_rate_hz}")

    @property
    def v(self) -> float:
        return self.v_a + 1.0

    @property
    def gain(self) -> float:
        """Overall amplitude-squared transmission eta*T seen at Bob."""
        return self.eta * self.t

    @property
    def conditional_noise(self) -> float:
        """Var(Bob | Alice) in SNU: shot noise plus attenuated excess and electronic noise."""
        return 1.0 + self.gain * self.epsilon + self.v_el

    @property
    def v_b(self) -> float:
        return self.gain * self.v_a + self.conditional_noise

    @property
    def snr(self) -> float:
        return self.gain * self.v_a / self.conditional_noise

    def with_(self, **changes) -> "LinkParams":
        return type(self)(**{**asdict(self), **changes})

    def digest(self) -> bytes:
        """Stable 16-byte hash of the parameter values."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:16]


# Field-test values: V_A = 10, T = 0.51, eta = 0.6, v_el = 0.01, epsilon ~ 0.01.
REFERENCE = LinkParams(v_a=10.0, t=0.51, epsilon=0.01, eta=0.6, v_el=0.01, beta=0.9)


@dataclass(frozen=True)
class Calibration:
    n0: float  # shot-noise variance, detector units
    v_el_raw: float  # electronic noise variance, detector units
    eta: float

    def __post_init__(self):
        if not self.n0 > 0:
            raise ValueError(f"n0 must be > 0, got {self.n0}")
        if not self.v_el_raw >= 0:
            raise ValueError(f"v_el_raw must be >= 0, got {self.v_el_raw}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")

    @property
    def v_el(self) -> float:
        return self.v_el_raw / self.n0


@dataclass(frozen=True)
class FiberModel:
    loss_db_per_km: float = 0.2
    length_km: float = 0.0

    def __post_init__(self):
        if self.loss_db_per_km < 0 or self.length_km < 0:
            raise ValueError("fibre loss and length must be non-negative")

    @property
    def loss_db(self) -> float:
        return self.loss_db_per_km * self.length_km

    @property
    def transmittance(self) -> float:
        return transmittance_from_db(self.loss_db)

    def length_for_loss(self, loss_db: float) -> float:
        if self.loss_db_per_km == 0:
            return math.inf if loss_db > 0 else 0.0
        return loss_db / self.loss_db_per_km


LEDGER_CATEGORIES = (
    "estimation_bits",
    "reconciliation_bits",
    "bch_bits",
    "verification_bits",
    "auth_bits",
)


@dataclass
class LeakageLedger:
    """Running count of bits revealed on the classical channel for one block.

    Counts only ever grow; use :meth:`snapshot` to freeze a copy.
    """

    estimation_bits: int = 0
    reconciliation_bits: int = 0
    bch_bits: int = 0
    verification_bits: int = 0
    auth_bits: int = 0
    history: list[tuple[str, int]] = field(default_factory=list, compare=False, repr=False)

    def add(self, category: str, bits: int) -> None:
        if category not in LEDGER_CATEGORIES:
            raise KeyError(f"unknown ledger category {category!r}")
        bits = int(bits)
        if bits < 0:
            raise ValueError("ledger counts are monotone; cannot add negative bits")
        setattr(self, category, getattr(self, category) + bits)
        self.history.append((category, bits))

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in LEDGER_CATEGORIES)

    def snapshot(self) -> "LeakageLedger":
        return LeakageLedger(**{c: getattr(self, c) for c in LEDGER_CATEGORIES})

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "history"}


def transmittance_from_db(loss_db: float) -> float:
    if loss_db < 0:
        raise ValueError(f"loss must be non-negative, got {loss_db} dB")
    return 10.0 ** (-loss_db / 10.0)


def db_from_transmittance(t: float) -> float:
    if not 0 < t <= 1:
        raise ValueError(f"transmittance must lie in (0, 1], got {t}")
    return -10.0 * math.log10(t)


def calibrate(lo_only_variance: float, dark_variance: float, eta: float) -> Calibration:
    """Shot-noise calibration from an LO-only frame and a dark frame.

    The LO-only variance is N0 + v_el (detector units) and the dark frame
    gives v_el alone, so N0 is their difference.
    """
    if dark_variance < 0:
        raise ValueError("dark-frame variance cannot be negative")
    n0 = lo_only_variance - dark_variance
    if n0 <= 0:
        raise ValueError(
            f"invalid calibration frames: LO-only variance {lo_only_variance} "
            f"does not exceed dark variance {dark_variance}"
        )
    return Calibration(n0=n0, v_el_raw=dark_variance, eta=eta)


def normalize(block_raw, cal: Calibration) -> np.ndarray:
    """Convert detector-unit samples to shot-noise units."""
    return np.asarray(block_raw, dtype=np.float64) / math.sqrt(cal.n0)
