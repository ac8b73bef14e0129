import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvqkd.model_core import REFERENCE, LeakageLedger
from cvqkd.privacy_amp import (
    SECURITY_MARGIN,
    VERIFY_SAMPLE,
    KeyAbort,
    _toeplitz_bits,
    amplify,
    discard,
    final_length,
    miss_probability,
    sample_positions,
    toeplitz_hash,
    verify,
)
from cvqkd.security_bound import holevo_bound

from oracles import hypergeom_miss, toeplitz_dense


def _sq(delta_i):
    # security snapshot with a chosen secret fraction (beta = 1, chi_BE = 0)
    return dataclasses.replace(holevo_bound(REFERENCE), i_ab=delta_i, chi_be=0.0, beta=1.0)


# final length


def test_final_length_examples():
    led = LeakageLedger()
    assert final_length(1_000_000, _sq(0.15), led) == 150_000 - SECURITY_MARGIN
    led.add("verification_bits", 200)
    led.add("auth_bits", 128)
    assert final_length(1_000_000, _sq(0.15), led) == 150_000 - 328 - 64
    with pytest.raises(KeyAbort):
        final_length(1_000_000, _sq(0.0), led)
    with pytest.raises(KeyAbort):
        final_length(1_000_000, _sq(-0.1), led)
    with pytest.raises(KeyAbort):
        final_length(1000, _sq(0.3), led)  # deductions swallow everything


@given(st.integers(1, 10**7), st.floats(1e-4, 1.0), st.integers(0, 10**4))
def test_final_length_never_exceeds_bound(n, delta_i, extra):
    led = LeakageLedger()
    led.add("verification_bits", extra)
    try:
        length = final_length(n, _sq(delta_i), led)
    except KeyAbort:
        return
    assert 0 < length <= math.floor(n * delta_i) - extra - SECURITY_MARGIN


# hashing


@pytest.mark.parametrize("n,out_len", [(64, 16), (1000, 300), (5000, 3000)])
def test_toeplitz_matches_dense_product(n, out_len):
    rng = np.random.default_rng(n)
    bits = rng.integers(0, 2, n).astype(np.uint8)
    diag = _toeplitz_bits(42, n + out_len - 1)
    assert np.array_equal(toeplitz_hash(bits, out_len, 42), toeplitz_dense(bits, out_len, diag))


def test_toeplitz_is_linear():
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 2, (2, 2000)).astype(np.uint8)
    ha, hb, hab = (toeplitz_hash(x, 700, 5) for x in (a, b, a ^ b))
    assert np.array_equal(ha ^ hb, hab)


def test_amplify_determinism_and_validation():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 2, 4000).astype(np.uint8)
    assert np.array_equal(amplify(x, 1000, 9), amplify(x.copy(), 1000, 9))
    assert not np.array_equal(amplify(x, 1000, 9), amplify(x, 1000, 10))
    assert amplify(x, 1000, 9).size == 1000
    with pytest.raises(ValueError):
        amplify(x, 4001, 9)
    with pytest.raises(ValueError):
        amplify(x, 0, 9)


def test_avalanche():
    rng = np.random.default_rng(3)
    n, out_len, trials = 20_000, 4000, 100
    x = rng.integers(0, 2, n).astype(np.uint8)
    base = amplify(x, out_len, 77)
    dists = []
    for _ in range(trials):
        y = x.copy()
        y[rng.integers(n)] ^= 1
        dists.append(int(np.count_nonzero(amplify(y, out_len, 77) ^ base)))
    dists = np.array(dists)
    sd = math.sqrt(out_len) / 2
    assert np.all(np.abs(dists - out_len / 2) < 5 * sd)
    assert abs(dists.mean() - out_len / 2) < 5 * sd / math.sqrt(trials)


@pytest.mark.parametrize("out_len", [4, 8])
def test_collision_census(out_len):
    rng = np.random.default_rng(out_len)
    n, seeds = 32, 8000
    pairs = [rng.integers(0, 2, (2, n)).astype(np.uint8) for _ in range(3)]
    one_bit = pairs[0][0].copy()
    one_bit[5] ^= 1
    pairs.append(np.stack([pairs[0][0], one_bit]))
    for x, y in pairs:
        assert not np.array_equal(x, y)
        hits = sum(np.array_equal(amplify(x, out_len, s), amplify(y, out_len, s))
                   for s in range(seeds))
        assert hits / seeds <= 2 * 2.0**-out_len


# verification


def test_verify_identical_and_discarding():
    rng = np.random.default_rng(4)
    key = rng.integers(0, 2, 5000).astype(np.uint8)
    led = LeakageLedger()
    res = verify(key, key.copy(), VERIFY_SAMPLE, seed=8, ledger=led)
    assert res.passed
    assert led.verification_bits == VERIFY_SAMPLE
    assert res.key_a.size == res.key_b.size == 5000 - VERIFY_SAMPLE
    assert np.array_equal(res.key_a, discard(key, res.positions))
    assert np.unique(res.positions).size == VERIFY_SAMPLE


def test_verify_rejects_mismatched_lengths_and_short_keys():
    key = np.zeros(500, np.uint8)
    assert not verify(key, key[:-1], VERIFY_SAMPLE, 0).passed
    assert not verify(key[:100], key[:100], VERIFY_SAMPLE, 0).passed


def test_verify_catches_hashed_mismatch():
    rng = np.random.default_rng(5)
    for seed in range(200):
        x = rng.integers(0, 2, 2000).astype(np.uint8)
        y = x.copy()
        y[rng.integers(2000)] ^= 1
        a, b = amplify(x, 1000, seed), amplify(y, 1000, seed)
        assert not verify(a, b, VERIFY_SAMPLE, seed).passed


def test_sample_positions_deterministic():
    a = sample_positions(150_000, 200, 3)
    assert np.array_equal(a, sample_positions(150_000, 200, 3))
    assert a.size == 200 and np.all(np.diff(a) > 0) and a.max() < 150_000


@given(st.integers(200, 200_000), st.integers(0, 5000))
def test_miss_probability_matches_oracle(key_len, n_diff):
    n_diff = min(n_diff, key_len)
    got = miss_probability(key_len, n_diff, VERIFY_SAMPLE)
    want = hypergeom_miss(key_len, n_diff, VERIFY_SAMPLE) if n_diff else 1.0
    assert got == pytest.approx(want, rel=1e-9, abs=1e-300)


def test_single_bit_difference_is_rarely_caught_before_hashing():
    detect = 1 - miss_probability(150_000, 1, VERIFY_SAMPLE)
    assert detect == pytest.approx(200 / 150_000, rel=1e-12)
    # after hashing about half the bits differ and a miss is astronomically unlikely
    assert miss_probability(150_000, 75_000, VERIFY_SAMPLE) < 2.0**-199
    assert 2.0**-200 <= 1e-60
