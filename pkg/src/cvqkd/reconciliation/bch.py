"""Binary BCH syndrome coding for residual-error cleanup.

Bob sends, per chunk, the odd power-sum syndromes S_1, S_3, ..., S_{2t-1} of
his bits (t elements of GF(2^m), i.e. m*t bits). Alice XORs them with her
own, which leaves the syndromes of the difference pattern, and decodes that
pattern with Berlekamp-Massey and a Chien search. Chunks shorter than the
code length act as shortened codes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np

from ..model_core import LeakageLedger

# Primitive polynomials, bit k = coefficient of x^k.
PRIMITIVE_POLYS = {
    3: 0b1011,
    4: 0b10011,
    5: 0b100101,
    6: 0b1000011,
    8: 0b100011101,
    10: 0b10000001001,
    15: 0b1000000000000011,
}

DEFAULT_M = 15
DEFAULT_T = 30


@lru_cache(maxsize=None)
def _gf_tables(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Antilog (doubled for overflow-free products) and log tables of GF(2^m)."""
    n = 2**m - 1
    exp = np.zeros(2 * n, dtype=np.int64)
    log = np.full(n + 1, -1, dtype=np.int64)
    x = 1
    poly = PRIMITIVE_POLYS[m]
    for i in range(n):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x >> m:
            x ^= poly
    exp[n:] = exp[:n]
    exp.flags.writeable = False
    log.flags.writeable = False
    return exp, log


@nb.njit(cache=True)
def _odd_syndromes(exp, pos, n, t):
    out = np.zeros(t, dtype=np.int64)
    for k in range(t):
        j = 2 * k + 1
        acc = 0
        for p in pos:
            acc ^= exp[(p * j) % n]
        out[k] = acc
    return out


class BchFailure(ValueError):
    """More errors than the code can correct were detected."""


@dataclass(frozen=True)
class BchCode:
    m: int = DEFAULT_M
    t: int = DEFAULT_T

    def __post_init__(self):
        if self.m not in PRIMITIVE_POLYS:
            raise ValueError(f"no primitive polynomial registered for m={self.m}")
        if not 1 <= self.t < (2**self.m - 1) // 2:
            raise ValueError("correction capacity out of range")

    @property
    def n(self) -> int:
        return 2**self.m - 1

    @property
    def syndrome_bits(self) -> int:
        return self.m * self.t

    @property
    def _tables(self):
        return _gf_tables(self.m)

    def _mul(self, a: int, b: int) -> int:
        if a == 0 or b == 0:
            return 0
        exp, log = self._tables
        return int(exp[log[a] + log[b]])

    def _inv(self, a: int) -> int:
        exp, log = self._tables
        return int(exp[(self.n - log[a]) % self.n])

    def syndromes(self, bits: np.ndarray) -> np.ndarray:
        """Odd syndromes S_1, S_3, ..., S_{2t-1} of a chunk of length <= n."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.size > self.n:
            raise ValueError(f"chunk of {bits.size} bits exceeds code length {self.n}")
        exp, _ = self._tables
        return _odd_syndromes(exp, np.flatnonzero(bits).astype(np.int64), self.n, self.t)

    def _full_syndromes(self, odd: np.ndarray) -> list[int]:
        s = [0] * (2 * self.t + 1)
        for k in range(self.t):
            s[2 * k + 1] = int(odd[k])
        for j in range(2, 2 * self.t + 1, 2):
            s[j] = self._mul(s[j // 2], s[j // 2])
        return s

    def _berlekamp_massey(self, s: list[int]) -> list[int]:
        # error-locator coefficients, lowest degree first
        c = [1] + [0] * (2 * self.t)
        b = [1] + [0] * (2 * self.t)
        length, shift, last = 0, 1, 1
        for r in range(1, 2 * self.t + 1):
            d = s[r]
            for i in range(1, length + 1):
                d ^= self._mul(c[i], s[r - i])
            if d == 0:
                shift += 1
                continue
            coef = self._mul(d, self._inv(last))
            prev = c.copy()
            for i in range(shift, 2 * self.t + 1):
                c[i] ^= self._mul(coef, b[i - shift])
            if 2 * length <= r - 1:
                length = r - length
                b, last, shift = prev, d, 1
            else:
                shift += 1
        return c[: length + 1]

    def error_positions(self, odd_syndromes: np.ndarray, length: int) -> np.ndarray:
        """Positions of the difference pattern within a chunk of ``length`` bits.

        Raises :class:`BchFailure` when the syndromes do not correspond to at
        most ``t`` errors inside the chunk.
        """
        if not np.any(odd_syndromes):
            return np.zeros(0, dtype=np.int64)
        s = self._full_syndromes(odd_syndromes)
        locator = self._berlekamp_massey(s)
        degree = len(locator) - 1
        if degree > self.t:
            raise BchFailure("error locator degree exceeds correction capacity")
        exp, log = self._tables
        # Chien search: an error at position i makes Lambda(alpha^-i) = 0
        i = np.arange(length, dtype=np.int64)
        acc = np.full(length, locator[0], dtype=np.int64)
        for k in range(1, degree + 1):
            if locator[k]:
                acc ^= exp[(log[locator[k]] - i * k) % self.n]
        roots = np.flatnonzero(acc == 0)
        if roots.size != degree:
            raise BchFailure(f"locator of degree {degree} has {roots.size} roots in the chunk")
        return roots

    def chunks(self, n_bits: int) -> list[slice]:
        return [slice(k, min(k + self.n, n_bits)) for k in range(0, n_bits, self.n)]


@dataclass
class BchOutcome:
    bits: np.ndarray
    corrected: int
    failed_chunks: list[int]

    @property
    def success(self) -> bool:
        return not self.failed_chunks


def bob_syndromes(bits: np.ndarray, code: BchCode = BchCode()) -> list[np.ndarray]:
    return [code.syndromes(bits[sl]) for sl in code.chunks(bits.size)]


def bch_cleanup(
    alice_bits: np.ndarray,
    bob_syndrome: list[np.ndarray],
    code: BchCode = BchCode(),
    ledger: LeakageLedger | None = None,
) -> BchOutcome:
    """Correct Alice's bits toward Bob's using his per-chunk syndromes.

    Chunks that cannot be decoded are left untouched and reported in
    ``failed_chunks``; key verification is the final arbiter for them.
    """
    bits = np.asarray(alice_bits, dtype=np.uint8).copy()
    slices = code.chunks(bits.size)
    if len(slices) != len(bob_syndrome):
        raise ValueError("syndrome count does not match chunk count")
    if ledger is not None:
        ledger.add("bch_bits", code.syndrome_bits * len(slices))
    corrected = 0
    failed = []
    for k, (sl, sb) in enumerate(zip(slices, bob_syndrome)):
        diff = code.syndromes(bits[sl]) ^ np.asarray(sb, dtype=np.int64)
        try:
            pos = code.error_positions(diff, sl.stop - sl.start)
        except BchFailure:
            failed.append(k)
            continue
        bits[sl.start + pos] ^= 1
        corrected += int(pos.size)
    return BchOutcome(bits, corrected, failed)


def pack_syndromes(syndromes: list[np.ndarray], code: BchCode = BchCode()) -> bytes:
    """Concatenate per-chunk syndromes as m-bit big-endian fields, padded per chunk to whole bytes."""
    out = bytearray()
    for s in syndromes:
        bits = ((np.asarray(s, dtype=np.int64)[:, None] >> np.arange(code.m - 1, -1, -1)) & 1)
        out += np.packbits(bits.astype(np.uint8).ravel()).tobytes()
    return bytes(out)


def unpack_syndromes(raw: bytes, n_chunks: int, code: BchCode = BchCode()) -> list[np.ndarray]:
    per = (code.syndrome_bits + 7) // 8
    if len(raw) != per * n_chunks:
        raise ValueError("BCH syndrome payload has the wrong length")
    weights = 1 << np.arange(code.m - 1, -1, -1, dtype=np.int64)
    out = []
    for k in range(n_chunks):
        bits = np.unpackbits(np.frombuffer(raw[k * per:(k + 1) * per], dtype=np.uint8))
        bits = bits[: code.syndrome_bits].reshape(code.t, code.m).astype(np.int64)
        out.append(bits @ weights)
    return out
