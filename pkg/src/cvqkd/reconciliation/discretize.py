"""16-slot discretization of Gaussian quadratures and the label bit planes."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

N_SLOTS = 16
N_PLANES = 4


def build_boundaries(variance: float) -> np.ndarray:
    """15 cut points splitting N(0, variance) into equiprobable slots."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    return norm.ppf(np.arange(1, N_SLOTS) / N_SLOTS) * math.sqrt(variance)


def uniform_boundaries(variance: float, width_sigmas: float) -> np.ndarray:
    """15 evenly spaced cut points, ``width_sigmas`` standard deviations apart, centred on 0."""
    if variance <= 0 or width_sigmas <= 0:
        raise ValueError("variance and slot width must be positive")
    return (np.arange(1, N_SLOTS) - N_SLOTS // 2) * width_sigmas * math.sqrt(variance)


def _check_boundaries(boundaries) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.float64)
    if b.shape != (N_SLOTS - 1,) or not np.all(np.isfinite(b)):
        raise ValueError("need exactly 15 finite cut points")
    if np.any(np.diff(b) <= 0):
        raise ValueError("cut points must be strictly increasing")
    return b


def discretize(values, boundaries) -> np.ndarray:
    """Slot index of each value; slot k covers [cut[k-1], cut[k])."""
    b = _check_boundaries(boundaries)
    return np.searchsorted(b, np.asarray(values, dtype=np.float64), side="right").astype(np.uint8)


def gray(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.uint8)
    return labels ^ (labels >> 1)


def gray_inverse(codes: np.ndarray) -> np.ndarray:
    out = np.asarray(codes, dtype=np.uint8).copy()
    shift = out >> 1
    while np.any(shift):
        out ^= shift
        shift >>= 1
    return out


def encode_labels(labels: np.ndarray, mapping: str) -> np.ndarray:
    if mapping == "natural":
        return np.asarray(labels, dtype=np.uint8)
    if mapping == "gray":
        return gray(labels)
    raise ValueError(f"unknown label mapping {mapping!r}")


def slot_codes(mapping: str) -> np.ndarray:
    """Codeword assigned to each of the 16 slots."""
    return encode_labels(np.arange(N_SLOTS, dtype=np.uint8), mapping)


def to_planes(codes: np.ndarray) -> np.ndarray:
    """(4, n) bit planes, least significant first."""
    codes = np.asarray(codes, dtype=np.uint8)
    return np.stack([(codes >> k) & 1 for k in range(N_PLANES)]).astype(np.uint8)


def from_planes(planes: np.ndarray) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.uint8)
    return sum((planes[k] << k) for k in range(planes.shape[0])).astype(np.uint8)


def slot_probabilities(mean: np.ndarray, sd: float, boundaries) -> np.ndarray:
    """P(slot | Gaussian with the given mean and sd) for every value, shape (n, 16).

    Interval masses are taken from whichever tail keeps them away from 1 - x
    cancellation.
    """
    b = _check_boundaries(boundaries)
    edges = np.concatenate(([-np.inf], b, [np.inf]))
    lo = (edges[None, :-1] - np.asarray(mean)[:, None]) / sd
    hi = (edges[None, 1:] - np.asarray(mean)[:, None]) / sd
    upper = lo > 0
    p = np.where(upper, norm.sf(lo) - norm.sf(hi), norm.cdf(hi) - norm.cdf(lo))
    return np.maximum(p, 0.0)


def slot_distribution(variance: float, boundaries) -> np.ndarray:
    """Marginal slot probabilities of N(0, variance)."""
    return slot_probabilities(np.zeros(1), math.sqrt(variance), boundaries)[0]


def entropy_bits(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())
