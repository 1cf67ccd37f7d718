"""Verification metrics (Bray–Curtis, FAR/FRR/EER) and the paired randomization test."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial import distance

from .dataio import EmbeddingPairs
from .errors import ArgumentError
from .tensor import Rng

logger = logging.getLogger("maxprune.metrics")


def bray_curtis(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Σ|u−v| / Σ(u+v) for non-negative descriptors."""

    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ArgumentError(f"vectors must be 1-D of equal length, got {u.shape} and {v.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ArgumentError("vectors must be finite")
    if np.any(u < 0) or np.any(v < 0):
        raise ArgumentError("Bray-Curtis needs non-negative components")
    if np.sum(u + v) == 0:
        raise ArgumentError("Bray-Curtis is undefined when both vectors are zero")
    return float(distance.braycurtis(u, v))


@dataclass(frozen=True)
class VerificationScores:
    """Distances of matched and non-matched pairs."""

    matched: np.ndarray
    nonmatched: np.ndarray

    def __post_init__(self) -> None:
        matched = np.asarray(self.matched, dtype=np.float64)
        nonmatched = np.asarray(self.nonmatched, dtype=np.float64)
        for label, values in (("matched", matched), ("nonmatched", nonmatched)):
            if values.ndim != 1 or values.size == 0:
                raise ArgumentError(f"{label} distances must be a non-empty list")
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise ArgumentError(f"{label} distances must be finite and >= 0")
        object.__setattr__(self, "matched", matched)
        object.__setattr__(self, "nonmatched", nonmatched)


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float


def verification_scores(pairs: EmbeddingPairs) -> VerificationScores:
    """Bray–Curtis distance of every matched and non-matched pair."""

    return VerificationScores(
        matched=np.array([bray_curtis(a, b) for a, b in pairs.matched]),
        nonmatched=np.array([bray_curtis(a, b) for a, b in pairs.nonmatched]),
    )


def _rates(scores: VerificationScores, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # accept iff distance < tau
    matched = np.sort(scores.matched)
    nonmatched = np.sort(scores.nonmatched)
    far = np.searchsorted(nonmatched, taus, side="left") / nonmatched.size
    frr = (matched.size - np.searchsorted(matched, taus, side="left")) / matched.size
    return far, frr


def far_frr(scores: VerificationScores, tau: float) -> Tuple[float, float]:
    """False acceptance and false rejection rate at threshold ``tau``."""

    far, frr = _rates(scores, np.array([tau], dtype=np.float64))
    return float(far[0]), float(frr[0])


def candidate_thresholds(scores: VerificationScores) -> np.ndarray:
    """Distinct observed distances, their midpoints, and one accept-all point."""

    observed = np.unique(np.concatenate([scores.matched, scores.nonmatched]))
    midpoints = (observed[:-1] + observed[1:]) / 2.0
    return np.unique(np.concatenate([observed, midpoints, [observed[-1] + 1.0]]))


def det_curve(scores: VerificationScores) -> np.ndarray:
    """Rows of (threshold, FAR, FRR) over the candidate thresholds."""

    taus = candidate_thresholds(scores)
    far, frr = _rates(scores, taus)
    return np.column_stack([taus, far, frr])


def eer(scores: VerificationScores) -> EerResult:
    """Equal error rate: where FAR meets FRR along the threshold sweep.

    An exact crossing among the candidates wins; otherwise FAR and FRR are
    interpolated linearly between the two candidates that bracket it.
    """

    taus = candidate_thresholds(scores)
    far, frr = _rates(scores, taus)
    gap = far - frr  # non-decreasing in tau

    exact = np.flatnonzero(gap == 0)
    if exact.size:
        i = int(exact[0])
        return EerResult(eer=float(far[i]), threshold=float(taus[i]))

    above = np.flatnonzero(gap > 0)
    if above.size and above[0] > 0:
        hi = int(above[0])
        lo = hi - 1
        t = -gap[lo] / (gap[hi] - gap[lo])
        rate = far[lo] + t * (far[hi] - far[lo])
        return EerResult(eer=float(rate), threshold=float(taus[lo] + t * (taus[hi] - taus[lo])))

    # no sign change; fall back to the closest approach
    i = int(np.argmin(np.abs(gap)))
    logger.warning(f"FAR and FRR never cross; reporting closest point at tau={taus[i]:.6g}")
    return EerResult(eer=float((far[i] + frr[i]) / 2.0), threshold=float(taus[i]))


def randomization_test(
    errors_a: Sequence[bool] | np.ndarray,
    errors_b: Sequence[bool] | np.ndarray,
    permutations: int,
    rng: Rng,
    block: int = 1 << 22,
) -> float:
    """Paired randomization test on two per-sample error vectors.

    Each permutation swaps the a/b outcome of every sample independently
    with probability 1/2; p = (count of statistics >= observed + 1) /
    (permutations + 1).
    """

    a = np.asarray(errors_a, dtype=bool)
    b = np.asarray(errors_b, dtype=bool)
    if a.ndim != 1 or a.shape != b.shape:
        raise ArgumentError(f"error vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ArgumentError("error vectors must not be empty")
    if permutations < 1:
        raise ArgumentError(f"permutations must be >= 1, got {permutations}")

    diff = a.astype(np.int64) - b.astype(np.int64)
    diff = diff[diff != 0]
    observed = abs(int(diff.sum()))
    if diff.size == 0:
        return 1.0

    hits = 0
    rows = max(1, block // diff.size)
    done = 0
    while done < permutations:
        n = min(rows, permutations - done)
        signs = rng.integers(0, 2, size=(n, diff.size), dtype=np.int8) * 2 - 1
        stats = np.abs(signs.astype(np.int64) @ diff)
        hits += int(np.count_nonzero(stats >= observed))
        done += n
    p = (hits + 1) / (permutations + 1)
    logger.info(f"randomization test: observed diff {observed}, p={p:.6g}")
    return p
