"""Brute-force reference computations.

Nothing here shares code with the fast paths it checks: derivatives come from
loss evaluations only, projections are built as explicit matrices, and
colorings are enumerated exhaustively.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


def fd_gradient(f: Callable[[np.ndarray], float], w: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    w = np.asarray(w, dtype=np.float64)
    g = np.empty_like(w)
    e = np.zeros_like(w)
    for i in range(w.size):
        e[i] = step
        g[i] = (f(w + e) - f(w - e)) / (2 * step)
        e[i] = 0.0
    return g


def fd_hessian(f: Callable[[np.ndarray], float], w: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Dense Hessian from second-order central differences of ``f`` alone."""
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    h = np.empty((n, n))
    f0 = f(w)
    eye = np.eye(n) * step
    for i in range(n):
        h[i, i] = (f(w + 2 * eye[i]) - 2 * f0 + f(w - 2 * eye[i])) / (4 * step * step)
        for j in range(i):
            val = (
                f(w + eye[i] + eye[j])
                - f(w + eye[i] - eye[j])
                - f(w - eye[i] + eye[j])
                + f(w - eye[i] - eye[j])
            ) / (4 * step * step)
            h[i, j] = h[j, i] = val
    return h


def projector(vectors: np.ndarray) -> np.ndarray:
    """Explicit orthogonal projector ``sum_j p_j p_j^T`` onto the columns."""
    p = np.asarray(vectors, dtype=np.float64)
    out = np.zeros((p.shape[0], p.shape[0]))
    for j in range(p.shape[1]):
        out += np.outer(p[:, j], p[:, j])
    return out


def perp_energy(delta: np.ndarray, vectors: np.ndarray) -> float:
    """``|P delta|^2`` with ``P`` materialized."""
    d = projector(vectors) @ np.asarray(delta, dtype=np.float64)
    return float(d @ d)


def exhaustive_coloring(
    energies: Sequence[dict[int, float]],
) -> tuple[tuple[int, ...], float]:
    """Minimize a layer-summed cost over every assignment of candidates to layers.

    ``energies[l]`` maps candidate basis id to that layer's cost. Returns the
    first minimizing assignment in lexicographic order and its total.
    """
    candidates = [sorted(e) for e in energies]
    best, best_cost = None, np.inf
    for combo in itertools.product(*candidates):
        cost = 0.0
        for layer, b in enumerate(combo):
            cost += energies[layer][b]
        if cost < best_cost:
            best, best_cost = combo, cost
    return best, float(best_cost)


def count_permutation_automorphisms(assignment: Sequence) -> int:
    """Number of permutations ``pi`` of layer indices with ``a[pi(l)] == a[l]`` for all ``l``."""
    n = len(assignment)
    count = 0
    for perm in itertools.permutations(range(n)):
        if all(assignment[perm[i]] == assignment[i] for i in range(n)):
            count += 1
    return count
