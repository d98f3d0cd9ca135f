"""Uniform cohort sampling and the second-moment identity for sampled means."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Cohort:
    members: tuple
    round: int = 0

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def sample_cohort(n_clients: int, cohort_size: int, rng: np.random.Generator, round: int = 0) -> Cohort:
    """Draw ``cohort_size`` distinct clients uniformly (partial Fisher-Yates)."""
    if not 1 <= cohort_size <= n_clients:
        raise ValueError(f"cohort size {cohort_size} must lie in [1, {n_clients}]")
    if cohort_size == n_clients:
        return Cohort(tuple(range(n_clients)), round)
    idx = list(range(n_clients))
    for j in range(cohort_size):
        k = int(rng.integers(j, n_clients))
        idx[j], idx[k] = idx[k], idx[j]
    return Cohort(tuple(sorted(idx[:cohort_size])), round)


def _as_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    v = np.asarray(vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] == 0:
        raise ValueError("need at least one vector")
    return v


def subset_mean_second_moment(vectors: Sequence[np.ndarray], cohort_size: int) -> float:
    """Closed-form ``E || mean of a uniform size-S subset ||^2``.

    Equals ``||v_bar||^2 + (N - S) / (S (N - 1)) * mean_i ||v_i - v_bar||^2``.
    """
    v = _as_matrix(vectors)
    n = v.shape[0]
    if not 1 <= cohort_size <= n:
        raise ValueError(f"cohort size {cohort_size} must lie in [1, {n}]")
    v_bar = v.mean(axis=0)
    mean_sq = float(v_bar @ v_bar)
    if cohort_size == n:
        return mean_sq
    spread = float(np.sum((v - v_bar) ** 2)) / n
    return mean_sq + (n - cohort_size) / (cohort_size * (n - 1)) * spread


def exhaustive_subset_second_moment(vectors: Sequence[np.ndarray], cohort_size: int) -> float:
    """Brute-force average of ``||subset mean||^2`` over every size-S subset."""
    v = _as_matrix(vectors)
    n = v.shape[0]
    if not 1 <= cohort_size <= n:
        raise ValueError(f"cohort size {cohort_size} must lie in [1, {n}]")
    total = 0.0
    count = 0
    for subset in itertools.combinations(range(n), cohort_size):
        m = v[list(subset)].sum(axis=0) / cohort_size
        total += float(m @ m)
        count += 1
    return total / count
