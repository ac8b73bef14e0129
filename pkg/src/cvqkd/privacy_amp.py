"""Privacy amplification and sampled key verification.

Amplification composes a fast keyed bit permutation with a Toeplitz-matrix
hash. The permutation is a bijection, so the composition keeps the Toeplitz
family's 2-universality while scattering burst structure in the input.
Verification compares a random sample of the final keys and throws the
sample away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .model_core import LeakageLedger
from .rng import StrongRandom, noise_rng
from .security_bound import SecurityQuantities

SECURITY_MARGIN = 64
VERIFY_SAMPLE = 200
_DIRECT_LIMIT = 1 << 12


class KeyAbort(RuntimeError):
    """The block cannot produce a key."""


@dataclass
class KeyBlock:
    block_id: int
    reconciled: np.ndarray = field(repr=False)
    final_key: np.ndarray | None = field(default=None, repr=False)
    security: SecurityQuantities | None = None
    ledger: LeakageLedger | None = None
    verified: bool = False


def final_length(
    n_key_pulses: int,
    sq: SecurityQuantities,
    ledger: LeakageLedger,
    margin: int = SECURITY_MARGIN,
) -> int:
    """Length of the key that may be delivered from this block.

    ``sq.delta_i`` already charges reconciliation leakage through beta;
    verification and authentication costs recorded in ``ledger`` and a fixed
    safety margin come off on top.
    """
    if sq.delta_i <= 0:
        raise KeyAbort(f"secret fraction {sq.delta_i:.4f} is not positive")
    length = math.floor(n_key_pulses * sq.delta_i)
    length -= ledger.verification_bits + ledger.auth_bits + margin
    if length <= 0:
        raise KeyAbort(f"no key left after deductions ({length} bits)")
    return length


def _toeplitz_bits(seed: int, n_bits: int) -> np.ndarray:
    return StrongRandom(seed, "pa-toeplitz").bits(n_bits)


def _mod2_convolve_tail(r: np.ndarray, x: np.ndarray, n: int, out_len: int) -> np.ndarray:
    # y_i = sum_j r[i + n - 1 - j] x_j  ==  (r * x)[n - 1 + i]
    if n * out_len <= _DIRECT_LIMIT * 64:
        # float64 sums of 0/1 products stay exact far below 2**53 terms
        full = np.rint(np.convolve(r.astype(np.float64), x.astype(np.float64))).astype(np.int64)
    else:
        # a circular convolution of length >= r.size leaves the wanted
        # indices n-1 .. n+out_len-2 free of wrap-around terms
        size = sfft.next_fast_len(r.size, real=True)
        fr = sfft.rfft(r.astype(np.float64), size)
        fx = sfft.rfft(x.astype(np.float64), size)
        full = np.rint(sfft.irfft(fr * fx, size)).astype(np.int64)
    return (full[n - 1:n - 1 + out_len] & 1).astype(np.uint8)


def toeplitz_hash(bits: np.ndarray, out_len: int, seed: int) -> np.ndarray:
    """Multiply by the out_len x n Toeplitz matrix defined by ``seed`` (mod 2)."""
    x = np.asarray(bits, dtype=np.uint8)
    n = x.size
    r = _toeplitz_bits(seed, n + out_len - 1)
    return _mod2_convolve_tail(r, x, n, out_len)


def amplify(bits: np.ndarray, out_len: int, seed: int) -> np.ndarray:
    """Compress ``bits`` to ``out_len`` bits with the seeded two-stage hash."""
    x = np.asarray(bits, dtype=np.uint8)
    if out_len > x.size:
        raise ValueError(f"cannot extract {out_len} bits from {x.size}")
    if out_len <= 0:
        raise ValueError("output length must be positive")
    # stage 1 only has to be a fixed bijection per seed; a fast PRNG suffices
    perm = noise_rng(seed, "pa-permutation").permutation(x.size)
    return toeplitz_hash(x[perm], out_len, seed)


@dataclass(frozen=True)
class VerificationResult:
    passed: bool
    positions: np.ndarray = field(repr=False)
    key_a: np.ndarray = field(repr=False)
    key_b: np.ndarray = field(repr=False)


def sample_positions(key_len: int, n_sample: int, seed: int) -> np.ndarray:
    return np.sort(StrongRandom(seed, "verify").sample(key_len, n_sample))


def discard(key: np.ndarray, positions: np.ndarray) -> np.ndarray:
    mask = np.ones(key.size, dtype=bool)
    mask[positions] = False
    return key[mask]


def verify(
    key_a: np.ndarray,
    key_b: np.ndarray,
    n_sample: int,
    seed: int,
    ledger: LeakageLedger | None = None,
) -> VerificationResult:
    """Compare ``n_sample`` randomly chosen positions of both keys.

    The compared bits are public afterwards, so they are removed from both
    keys whatever the outcome.
    """
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.size != key_b.size or key_a.size < n_sample:
        empty = np.zeros(0, dtype=np.int64)
        return VerificationResult(False, empty, key_a, key_b)
    pos = sample_positions(key_a.size, n_sample, seed)
    if ledger is not None:
        ledger.add("verification_bits", n_sample)
    passed = bool(np.array_equal(key_a[pos], key_b[pos]))
    return VerificationResult(passed, pos, discard(key_a, pos), discard(key_b, pos))


def miss_probability(key_len: int, n_diff: int, n_sample: int) -> float:
    """Chance that a sample of ``n_sample`` positions avoids all ``n_diff`` differences."""
    if n_diff <= 0:
        return 1.0
    if key_len - n_diff < n_sample:
        return 0.0

    # C(L - d, s) / C(L, s) = prod_i (1 - d / (L - i)); log1p keeps small d exact
    i = np.arange(n_sample, dtype=np.float64)
    return float(np.exp(np.log1p(-n_diff / (key_len - i)).sum()))
