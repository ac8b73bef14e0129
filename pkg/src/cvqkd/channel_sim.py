"""Statistical model of the optical layer.

Alice draws a bi-Gaussian displacement per pulse; the channel attenuates it by
sqrt(eta*T) and adds shot noise, attenuated excess noise and electronic noise;
Bob records one randomly chosen quadrature in detector units. The quadrature
Bob did not measure never appears in his record.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model_core import LinkParams
from .rng import StrongRandom, noise_rng

DEFAULT_BLOCK_PULSES = 2_000_000
MAX_SCRIPT_EPSILON = 0.1


@dataclass(frozen=True)
class NoiseScript:
    """Excess noise (SNU) as a piecewise-linear function of the global pulse index."""

    positions: tuple[float, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.epsilons) or not self.positions:
            raise ValueError("need matching, non-empty breakpoint lists")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("breakpoint positions must be strictly increasing")
        if any(not 0.0 <= e <= MAX_SCRIPT_EPSILON + 1e-12 for e in self.epsilons):
            raise ValueError(f"scripted excess noise must lie in [0, {MAX_SCRIPT_EPSILON}]")

    @classmethod
    def constant(cls, epsilon: float) -> "NoiseScript":
        return cls((0.0,), (float(epsilon),))

    def at(self, pulse_index) -> np.ndarray:
        return np.interp(pulse_index, self.positions, self.epsilons)

    def block_mean(self, start: int, n: int) -> float:
        """Average excess noise over pulses [start, start + n)."""
        grid = np.linspace(start, start + n - 1, 257)
        return float(np.mean(self.at(grid)))

    def peak(self) -> float:
        return max(self.epsilons)


@dataclass(frozen=True)
class QuadratureBlock:
    alice_x: np.ndarray = field(repr=False)
    alice_p: np.ndarray = field(repr=False)
    bob_choice: np.ndarray = field(repr=False)  # 0 -> X_0, 1 -> X_pi/2
    bob_value: np.ndarray = field(repr=False)  # detector units
    seed: int = 0
    n0: float = 1.0
    params_digest: bytes = b"\x00" * 16

    @property
    def n_pulses(self) -> int:
        return int(self.bob_value.size)

    def alice_measured(self) -> np.ndarray:
        """Alice's value for the quadrature Bob measured on each pulse."""
        return np.where(self.bob_choice.astype(bool), self.alice_p, self.alice_x)

    def subset(self, idx: np.ndarray) -> "QuadratureBlock":
        return QuadratureBlock(
            self.alice_x[idx], self.alice_p[idx], self.bob_choice[idx], self.bob_value[idx],
            self.seed, self.n0, self.params_digest,
        )


def generate_block(
    params: LinkParams,
    script: NoiseScript | None = None,
    seed: int = 0,
    n_pulses: int = DEFAULT_BLOCK_PULSES,
    n0: float = 1.0,
    start_pulse: int = 0,
) -> QuadratureBlock:
    """Simulate one block of pulses.

    ``script`` overrides ``params.epsilon`` pulse by pulse; ``start_pulse``
    places the block on the script's global pulse axis.
    """
    if n_pulses <= 0:
        raise ValueError("a block needs at least one pulse")
    strong = StrongRandom(seed, "alice-modulation")
    sd_a = math.sqrt(params.v_a)
    alice_x = strong.normal(n_pulses, sd_a)
    alice_p = strong.normal(n_pulses, sd_a)
    bob_choice = StrongRandom(seed, "bob-choice").bits(n_pulses)

    if script is None:
        eps = params.epsilon
    else:
        eps = script.at(np.arange(start_pulse, start_pulse + n_pulses, dtype=np.float64))
    gain = params.gain
    noise_sd = np.sqrt(1.0 + gain * eps + params.v_el)
    rng = noise_rng(seed, "channel")
    quad = np.where(bob_choice.astype(bool), alice_p, alice_x)
    snu = math.sqrt(gain) * quad + noise_sd * rng.standard_normal(n_pulses)
    return QuadratureBlock(
        alice_x, alice_p, bob_choice, snu * math.sqrt(n0), seed, n0, params.digest()
    )


def calibration_frames(
    params: LinkParams, seed: int = 0, n_samples: int = 1_000_000, n0: float = 1.0
) -> tuple[float, float]:
    """Empirical (LO-only, dark) detector variances.

    LO-only output is shot noise plus electronic noise; the dark frame is
    electronic noise alone.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per frame")
    rng = noise_rng(seed, "calibration")
    lo = rng.standard_normal(n_samples) * math.sqrt(n0 * (1.0 + params.v_el))
    dark = rng.standard_normal(n_samples) * math.sqrt(n0 * params.v_el)
    return float(np.mean(lo * lo)), float(np.mean(dark * dark))


def drift_script_from_phase_model(
    rate: float,
    block_ms: float = 100.0,
    *,
    v_a: float = 10.0,
    duration_s: float = 60.0,
    pulse_rate_hz: float = 500e3,
    compensation: str = "linear",
    jitter_rad=0.0,
    base_epsilon: float = 0.0,
) -> NoiseScript:
    """Excess-noise script produced by residual phase error.

    A residual phase error with variance s2 over an evaluation block leaks the
    orthogonal quadrature into Bob's measurement, adding about ``v_a * s2`` of
    excess noise. The slow thermal drift ``rate`` (rad/s) is removed exactly by
    an opposite linear ramp (``compensation="linear"``) or leaves a saw-tooth
    residual of variance ``(rate * block)**2 / 12`` when only a constant phase
    per block is corrected (``"constant"``). Vibration jitter is too fast to
    track; a sinusoid of amplitude ``a`` adds ``a**2 / 2``. ``jitter_rad`` is
    either a constant amplitude or a sequence of ``(time_s, amplitude)``
    breakpoints. Values are clipped to the observed [0, 0.1] range.
    """
    if rate < 0:
        raise ValueError("drift rate must be non-negative")
    if compensation not in ("linear", "constant"):
        raise ValueError(f"unknown compensation {compensation!r}")
    block_s = block_ms * 1e-3
    n_blocks = max(1, int(math.ceil(duration_s / block_s)))
    times = np.arange(n_blocks + 1) * block_s

    if np.isscalar(jitter_rad):
        jitter = np.full(times.size, float(jitter_rad))
    else:
        pts = np.asarray(jitter_rad, dtype=np.float64)
        jitter = np.interp(times, pts[:, 0], pts[:, 1])

    drift_var = 0.0 if compensation == "linear" else (rate * block_s) ** 2 / 12.0
    eps = base_epsilon + v_a * (drift_var + 0.5 * jitter**2)
    eps = np.clip(eps, 0.0, MAX_SCRIPT_EPSILON)
    return NoiseScript(tuple(times * pulse_rate_hz), tuple(float(e) for e in eps))


_DUMP_MAGIC = b"CVQB"
_DUMP_HEADER = struct.Struct("<4sHQQ16sd")


def dump_block(block: QuadratureBlock, path) -> None:
    """Write a block as little-endian float64 arrays behind a fixed header.

    Header: magic, version, n_pulses, seed, params hash, n0. Body: alice_x,
    alice_p, bob_value (float64 each), then bob_choice (one byte per pulse).
    """
    header = _DUMP_HEADER.pack(
        _DUMP_MAGIC, 1, block.n_pulses, block.seed & (2**64 - 1), block.params_digest, block.n0
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (block.alice_x, block.alice_p, block.bob_value):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(block.bob_choice, dtype=np.uint8).tobytes())


def load_block(path) -> QuadratureBlock:
    raw = Path(path).read_bytes()
    magic, version, n, seed, digest, n0 = _DUMP_HEADER.unpack_from(raw)
    if magic != _DUMP_MAGIC or version != 1:
        raise ValueError("not a block dump")
    off = _DUMP_HEADER.size
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
    choice = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).copy()
    if off + n != len(raw):
        raise ValueError("truncated or oversized block dump")
    return QuadratureBlock(arrays[0], arrays[1], choice, arrays[2], seed, n0, digest)
