"""Neuron-arrangement and generation-quality diagnostics."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EnergyReport",
    "unit_columns",
    "hyperspherical_energy",
    "delta_he",
    "energy_report",
    "distinct_n",
    "diversity",
    "length_weighted_winrate",
    "export_neurons",
    "read_neurons",
]

PAIR_CONVENTION = "ordered"


def unit_columns(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("expected a d x n matrix")
    norms = np.linalg.norm(W, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"column {zero[0]} is zero")
    return W / norms


def _distances_checked(W) -> np.ndarray:
    U = unit_columns(W)
    n = U.shape[1]
    if n < 2:
        raise ValueError("hyperspherical energy needs at least two columns")
    # Direct differences keep full relative precision for nearby columns.
    diff = U[:, :, None] - U[:, None, :]
    dist = np.sqrt(np.einsum("dij,dij->ij", diff, diff))
    off = ~np.eye(n, dtype=bool)
    close = np.argwhere((dist < 1e-12) & off)
    if close.size:
        i, j = close[0]
        raise ValueError(f"columns {i} and {j} coincide after normalization; energy is singular")
    return dist


def hyperspherical_energy(W) -> float:
    """Sum over ordered pairs ``i != j`` of ``1 / |w_i/|w_i| - w_j/|w_j||``."""
    dist = _distances_checked(W)
    n = dist.shape[0]
    off = ~np.eye(n, dtype=bool)
    return float(np.sum(1.0 / dist[off]))


def delta_he(before, after) -> float:
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    return hyperspherical_energy(after) - hyperspherical_energy(before)


@dataclass(frozen=True)
class EnergyReport:
    name: str
    he: float
    delta_he: float
    baseline_he: float
    min_distance: float
    mean_distance: float
    pair_convention: str = PAIR_CONVENTION

    def row(self) -> dict:
        return {
            "matrix": self.name,
            "he_before": repr(self.baseline_he),
            "he_after": repr(self.he),
            "delta_he": repr(self.delta_he),
            "min_distance": repr(self.min_distance),
            "mean_distance": repr(self.mean_distance),
            "pairs": self.pair_convention,
        }


def energy_report(name: str, W, baseline) -> EnergyReport:
    dist = _distances_checked(W)
    off = ~np.eye(dist.shape[0], dtype=bool)
    he = float(np.sum(1.0 / dist[off]))
    base = hyperspherical_energy(baseline)
    return EnergyReport(name, he, he - base, base, float(dist[off].min()), float(dist[off].mean()))


def _ngrams(seq: Sequence[int], n: int) -> Iterable[tuple]:
    return (tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def distinct_n(generations: Sequence[Sequence[int]], n: int, pooled: bool = True) -> float:
    """Distinct n-gram ratio; ``pooled=False`` averages per sequence instead."""
    if n < 1:
        raise ValueError("n must be >= 1")
    usable = [list(g) for g in generations if len(g) >= n]
    if not usable:
        raise ValueError(f"no generation has length >= {n}")
    if not pooled:
        return float(np.mean([distinct_n([g], n) for g in usable]))
    counts = Counter(gram for g in usable for gram in _ngrams(g, n))
    return len(counts) / sum(counts.values())


def diversity(generations: Sequence[Sequence[int]], pooled: bool = True) -> float:
    """Geometric mean of distinct-1 through distinct-4."""
    values = [distinct_n(generations, n, pooled) for n in range(1, 5)]
    return float(np.prod(values) ** 0.25)


def length_weighted_winrate(wr: float, reference_length: float, candidate_length: float) -> float:
    if not 0.0 <= wr <= 1.0:
        raise ValueError("win rate must be in [0, 1]")
    if reference_length <= 0 or candidate_length <= 0:
        raise ValueError("lengths must be positive")
    return wr * reference_length / candidate_length


def export_neurons(W, path) -> Path:
    """Write unit-normalized columns as CSV, one neuron per row."""
    U = unit_columns(W)
    path = Path(path)
    d = U.shape[0]
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["neuron_id"] + [f"c{k}" for k in range(d)])
            for j in range(U.shape[1]):
                writer.writerow([j] + [f"{x:.17g}" for x in U[:, j]])
    except OSError as exc:
        raise OSError(f"cannot write neuron export to {path}: {exc}") from exc
    return path


def read_neurons(path) -> np.ndarray:
    """Inverse of :func:`export_neurons`; returns the ``d x n`` unit-column matrix."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in row[1:]] for row in rows]).T
