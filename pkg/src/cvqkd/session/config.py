"""Session configuration shared by both endpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..channel_sim import NoiseScript
from ..model_core import REFERENCE, LinkParams
from .auth import AUTH_SCHEME
from .duty import DutyModel

RECONCILIATION_MODES = ("ldpc", "oracle")


@dataclass(frozen=True)
class SessionConfig:
    """Everything both parties must agree on before the first block.

    ``reconciliation="oracle"`` is a simulation shortcut: Bob still sends
    every syndrome and the leakage is charged in full, but Alice reads his
    labels from the simulator instead of running belief propagation. It keeps
    long statistical runs cheap.
    """

    link: LinkParams = REFERENCE
    seed: int = 0
    n_blocks: int = 5
    n_pulses: int = 2_000_000
    disclose_fraction: float = 0.5
    frame_pulses: int = 100_000
    code_seed: int = 1
    n0: float = 137.5
    calibration_samples: int = 10_000_000
    psk_bits: int = 4096
    auth_scheme: str = AUTH_SCHEME
    verify_sample: int = 200
    reconciliation: str = "ldpc"
    duty: DutyModel = DutyModel()
    noise_positions: tuple[float, ...] = ()
    noise_epsilons: tuple[float, ...] = ()

    def __post_init__(self):
        if self.reconciliation not in RECONCILIATION_MODES:
            raise ValueError(f"reconciliation must be one of {RECONCILIATION_MODES}")
        if not 0 < self.disclose_fraction < 1:
            raise ValueError("disclose_fraction must lie in (0, 1)")
        if self.n_pulses <= 0 or self.frame_pulses <= 0 or self.n_blocks < 0:
            raise ValueError("block sizes must be positive")
        if len(self.noise_positions) != len(self.noise_epsilons):
            raise ValueError("noise script positions and values differ in length")

    @property
    def noise_script(self) -> NoiseScript | None:
        if not self.noise_positions:
            return None
        return NoiseScript(tuple(self.noise_positions), tuple(self.noise_epsilons))

    @property
    def emission_s(self) -> float:
        return self.n_pulses / self.link.pulse_rate_hz

    def with_(self, **changes) -> "SessionConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_positions"] = list(self.noise_positions)
        d["noise_epsilons"] = list(self.noise_epsilons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        if "link" in d:
            d["link"] = LinkParams(**d["link"])
        if "duty" in d:
            d["duty"] = DutyModel(**d["duty"])
        for k in ("noise_positions", "noise_epsilons"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "SessionConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()

