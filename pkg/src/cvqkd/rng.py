"""Random sources.

Protocol randomness (modulation, quadrature choices, sample selection, hash
seeds) comes from :class:`StrongRandom`, a ChaCha20 keystream keyed from a
seed, standing in for the hardware QRNG. Physical noise in the simulator
uses numpy's PCG64, which is fast and good enough for Monte Carlo.
"""

from __future__ import annotations

import hashlib

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from scipy.special import ndtri


def _seed_bytes(seed, label: str) -> bytes:
    return hashlib.sha256(f"{label}:{seed!r}".encode()).digest()


class StrongRandom:
    """Deterministic cryptographic stream keyed by ``(seed, label)``."""

    def __init__(self, seed, label: str = "protocol"):
        key = _seed_bytes(seed, label)
        self._enc = Cipher(algorithms.ChaCha20(key, b"\x00" * 16), mode=None).encryptor()

    def bytes(self, n: int) -> bytes:
        return self._enc.update(b"\x00" * n)

    def uint64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.bytes(8 * n), dtype="<u8").copy()

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles strictly inside (0, 1)."""
        return ((self.uint64(n) >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        return ndtri(self.uniform(n)) * scale

    def bits(self, n: int) -> np.ndarray:
        raw = np.frombuffer(self.bytes((n + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[:n].copy()

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uint64(n), kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        if 8 * k > n:
            return self.permutation(n)[:k]
        # sparse draw: rejection of repeats (modulo bias is below 2^-40 here)
        seen: dict[int, None] = {}
        while len(seen) < k:
            for v in (self.uint64(2 * (k - len(seen))) % np.uint64(n)).tolist():
                seen.setdefault(v)
                if len(seen) == k:
                    break
        return np.fromiter(seen, dtype=np.int64, count=k)

    def seed64(self) -> int:
        return int(self.uint64(1)[0])


def noise_rng(seed, label: str = "noise") -> np.random.Generator:
    digest = _seed_bytes(seed, label)
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
