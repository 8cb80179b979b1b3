"""Shared helpers for the test suite."""

import numpy as np

from mbym2.spatial import build_adjacency


def make_random_graph(n, extra, rng):
    """Connected random graph: a random spanning tree plus `extra` edges."""
    order = rng.permutation(n)
    edges = set()
    for idx in range(1, n):
        j = order[idx]
        i = order[rng.integers(0, idx)]
        edges.add((min(i, j), max(i, j)))
    while len(edges) < n - 1 + extra:
        i, j = rng.integers(0, n, size=2)
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return build_adjacency(sorted(edges), n)


def path_graph(n):
    return build_adjacency([(i, i + 1) for i in range(n - 1)], n)


def lattice_graph(rows, cols):
    """Rook-adjacency grid graph on rows x cols cells."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return build_adjacency(edges, rows * cols)


def rel_frob(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-300)
