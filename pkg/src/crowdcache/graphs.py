"""
Time-varying communication graphs between moving MEDs.

Two devices can talk when each lies inside the other's coverage disc,
i.e. their distance is at most ``min(r_i, r_j)``; links are therefore
undirected. Every snapshot carries Metropolis mixing weights built from
self-inclusive neighbour counts, plus the diameter / edge-utility /
contraction diagnostics used by the step-size analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, UndefinedQuantityError

DEFAULT_RADIUS_RANGE = (150.0, 200.0)
DEFAULT_BOX_M = 200.0
DEFAULT_MAX_STEP_M = 10.0

# Dense mixing beats CSR once the graph is this full.
_DENSE_MIXING_FILL = 0.25


@dataclass(frozen=True, eq=False)
class DevicePositions:
    """Planar device coordinates in meters with per-device coverage radii."""

    coords: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        radius = np.array(self.radius, dtype=float).reshape(-1)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInputError(f"coords must have shape (N, 2), got {coords.shape}")
        if radius.shape != (coords.shape[0],):
            raise InvalidInputError("radius must have one entry per device")
        if np.any(radius <= 0) or not np.all(np.isfinite(radius)) or not np.all(np.isfinite(coords)):
            raise InvalidInputError("radii must be positive and all values finite")
        coords.setflags(write=False)
        radius.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "radius", radius)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def with_random_radii(cls, coords, rng: np.random.Generator,
                          radius_range=DEFAULT_RADIUS_RANGE) -> "DevicePositions":
        coords = np.asarray(coords, dtype=float)
        lo, hi = radius_range
        if not 0 < lo <= hi:
            raise InvalidInputError(f"invalid radius range {radius_range!r}")
        return cls(coords, rng.uniform(lo, hi, coords.shape[0]))

    @classmethod
    def uniform(cls, n: int, rng: np.random.Generator, box=(0.0, 0.0, DEFAULT_BOX_M, DEFAULT_BOX_M),
                radius_range=DEFAULT_RADIUS_RANGE) -> "DevicePositions":
        """``n`` devices placed uniformly in ``box = (xmin, ymin, xmax, ymax)``."""
        x0, y0, x1, y1 = box
        coords = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
        return cls.with_random_radii(coords, rng, radius_range)

    def bounding_box(self) -> tuple[float, float, float, float]:
        lo = self.coords.min(axis=0)
        hi = self.coords.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _metropolis_from_adjacency(adj: np.ndarray) -> np.ndarray:
    counts = adj.sum(axis=1) + 1
    pair_max = np.maximum(counts[:, None], counts[None, :])
    weights = np.where(adj, 1.0 / (1.0 + pair_max), 0.0)
    np.fill_diagonal(weights, 1.0 - weights.sum(axis=1))
    return weights


class GraphSnapshot:
    """
    One time step's communication graph.

    Built from a symmetric boolean adjacency matrix without self loops;
    the self loops of the neighbour sets are implicit. Mixing weights are
    computed eagerly, the path-based diagnostics lazily.
    """

    def __init__(self, adjacency: np.ndarray, weights: np.ndarray | None = None):
        adj = np.array(adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise InvalidInputError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise InvalidInputError("adjacency must be symmetric")
        np.fill_diagonal(adj, False)
        adj.setflags(write=False)
        self.adjacency = adj
        w = _metropolis_from_adjacency(adj) if weights is None else np.array(weights, dtype=float)
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], n: int) -> "GraphSnapshot":
        return cls(_adjacency_from_edges(edges, n))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @cached_property
    def edges(self) -> frozenset[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return frozenset(zip(i.tolist(), j.tolist()))

    @cached_property
    def neighbor_sets(self) -> tuple[frozenset[int], ...]:
        return tuple(frozenset(np.flatnonzero(row).tolist()) | {i} for i, row in enumerate(self.adjacency))

    @cached_property
    def mixing_matrix(self):
        """W as a dense array or CSR matrix, whichever multiplies faster."""
        n = self.n
        fill = (self.adjacency.sum() + n) / (n * n)
        if fill >= _DENSE_MIXING_FILL:
            return self.weights
        return sparse.csr_matrix(self.weights)

    @cached_property
    def _hops(self) -> np.ndarray:
        return shortest_path(sparse.csr_matrix(self.adjacency), unweighted=True, directed=False)

    @cached_property
    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        ncomp, _ = connected_components(sparse.csr_matrix(self.adjacency), directed=False)
        return ncomp == 1

    @property
    def min_positive_weight(self) -> float:
        return float(self.weights[self.weights > 0].min())

    @cached_property
    def diameter(self) -> float:
        if not self.is_connected:
            return math.inf
        return int(self._hops.max())

    @cached_property
    def edge_utility(self) -> int:
        if not self.is_connected:
            raise UndefinedQuantityError("edge utility is undefined on a disconnected graph")
        return _edge_utility_from_hops(self.adjacency, self._hops)

    @cached_property
    def contraction(self) -> float | None:
        """c_k, or None when the snapshot is disconnected."""
        if not self.is_connected:
            return None
        return contraction_constant(self)


def _adjacency_from_edges(edges, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("graph needs at least one node")
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidInputError(f"edge ({i}, {j}) out of range for n={n}")
        if i != j:
            adj[i, j] = adj[j, i] = True
    return adj


def geometric_graph(pos: DevicePositions) -> GraphSnapshot:
    """Link i and j iff their distance is at most min(radius_i, radius_j)."""
    reach = np.minimum.outer(pos.radius, pos.radius)
    adj = cdist(pos.coords, pos.coords, "sqeuclidean") <= reach * reach
    np.fill_diagonal(adj, False)
    return GraphSnapshot(adj)


def metropolis_weights(neighbor_sets: Sequence[Iterable[int]]) -> np.ndarray:
    """
    Metropolis mixing matrix from self-inclusive neighbour sets.

    ``W_ij = 1 / (1 + max(|N_i|, |N_j|))`` for neighbours, zero for
    non-neighbours, and the diagonal takes the remaining mass.
    """
    sets = [frozenset(s) for s in neighbor_sets]
    n = len(sets)
    adj = np.zeros((n, n), dtype=bool)
    for i, s in enumerate(sets):
        if i not in s:
            raise InvalidInputError(f"neighbor set of node {i} does not contain {i}")
        for j in s:
            if not 0 <= j < n:
                raise InvalidInputError(f"neighbor {j} of node {i} out of range")
            if j != i:
                adj[i, j] = True
    if not np.array_equal(adj, adj.T):
        raise InvalidInputError("neighbor sets are not symmetric")
    return _metropolis_from_adjacency(adj)


def diameter(edges: Iterable[tuple[int, int]], n: int) -> float:
    """Largest hop distance between two nodes; ``math.inf`` if disconnected."""
    return GraphSnapshot.from_edges(edges, n).diameter


def edge_utility(edges: Iterable[tuple[int, int]], n: int) -> int:
    """
    Maximum number of node pairs whose canonical shortest path uses one edge.

    The canonical path between s < t is read off the BFS tree rooted at s
    in which every node picks its lowest-index neighbour one hop closer
    to s as parent.
    """
    return GraphSnapshot.from_edges(edges, n).edge_utility


def _edge_utility_from_hops(adj: np.ndarray, hops: np.ndarray) -> int:
    n = adj.shape[0]
    if n == 1:
        return 0
    load = np.zeros((n, n))
    nodes = np.arange(n)
    for s in range(n):
        dist = hops[s]
        closer = adj & (dist[None, :] == dist[:, None] - 1)
        parent = np.argmax(closer, axis=1)
        # pairs (s, t) with t > s; subtree sums push them up towards s
        carried = (nodes > s).astype(float)
        carried[s] = 0.0
        for depth in range(int(dist.max()), 0, -1):
            layer = nodes[dist == depth]
            np.add.at(carried, parent[layer], carried[layer])
            np.add.at(load, (layer, parent[layer]), carried[layer])
    total = load + load.T
    return int(round(total.max()))


def contraction_constant(snapshot: GraphSnapshot) -> float:
    """
    ``c = sqrt(N w**2 / (D K))`` with w the smallest positive weight.

    A single node has nothing to contract and gets c = 0.
    """
    if not snapshot.is_connected:
        raise UndefinedQuantityError("contraction constant is undefined on a disconnected graph")
    n = snapshot.n
    if n == 1:
        return 0.0
    w = snapshot.min_positive_weight
    return math.sqrt(n * w * w / (snapshot.diameter * snapshot.edge_utility))


def _reflect(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    width = hi - lo
    if width <= 0:
        return np.full_like(values, lo)
    t = np.mod(values - lo, 2.0 * width)
    return lo + np.where(t > width, 2.0 * width - t, t)


def step_positions(pos: DevicePositions, rng: np.random.Generator, max_step: float,
                   box: tuple[float, float, float, float]) -> DevicePositions:
    """
    Random-direction move of length U[0, max_step], reflected into ``box``.

    Draws the same number of variates whatever ``max_step`` is, so runs
    with different step sizes consume the stream identically.
    """
    if max_step < 0:
        raise InvalidInputError("max_step must be >= 0")
    n = pos.n
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    length = rng.uniform(0.0, 1.0, n) * max_step
    if max_step == 0:
        return pos
    x0, y0, x1, y1 = box
    moved = pos.coords + length[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    coords = np.column_stack([_reflect(moved[:, 0], x0, x1), _reflect(moved[:, 1], y0, y1)])
    return DevicePositions(coords, pos.radius)


def _union_connected(snapshots: Sequence[GraphSnapshot]) -> bool:
    adj = snapshots[0].adjacency.copy()
    for snap in snapshots[1:]:
        adj |= snap.adjacency
    if adj.shape[0] == 1:
        return True
    ncomp, _ = connected_components(sparse.csr_matrix(adj), directed=False)
    return ncomp == 1


def check_b_connectivity(snapshots: Sequence[GraphSnapshot], b: int) -> bool:
    """
    True iff every full window ``[kB, (k+1)B)`` has a connected union graph.

    A trailing partial window is ignored.
    """
    if b < 1:
        raise InvalidInputError("window b must be >= 1")
    if len(snapshots) < b:
        raise InvalidInputError(f"need at least b={b} snapshots, got {len(snapshots)}")
    windows = len(snapshots) // b
    return all(_union_connected(snapshots[k * b:(k + 1) * b]) for k in range(windows))


class GraphSequence:
    """A finite list of snapshots, replayed cyclically by the solvers."""

    def __init__(self, snapshots: Sequence[GraphSnapshot], window_b: int = 1):
        if not snapshots:
            raise InvalidInputError("a graph sequence needs at least one snapshot")
        n = snapshots[0].n
        if any(s.n != n for s in snapshots):
            raise InvalidInputError("all snapshots must have the same node count")
        self.snapshots = list(snapshots)
        self.window_b = int(window_b)
        self.b_connected = check_b_connectivity(self.snapshots, self.window_b)

    @property
    def n(self) -> int:
        return self.snapshots[0].n

    def __len__(self) -> int:
        return len(self.snapshots)

    def snapshot(self, k: int) -> GraphSnapshot:
        return self.snapshots[k % len(self.snapshots)]

    def c_max(self) -> float:
        """Largest contraction constant over the connected snapshots."""
        values = [s.contraction for s in self.snapshots if s.is_connected]
        if not values:
            raise UndefinedQuantityError("no connected snapshot in the sequence")
        return max(values)


class MobileGraphs:
    """
    Graph process driven by random device mobility.

    Snapshot k is the geometric graph of the positions after k moves.
    Requests are expected in increasing order; asking for an earlier
    index replays the process from the seed, so every consumer sees the
    same sequence.
    """

    def __init__(self, initial: DevicePositions, seed: int, max_step: float = DEFAULT_MAX_STEP_M,
                 box: tuple[float, float, float, float] | None = None):
        self.initial = initial
        self.seed = int(seed)
        self.max_step = float(max_step)
        self.box = box if box is not None else initial.bounding_box()
        self._reset()

    @property
    def n(self) -> int:
        return self.initial.n

    def _reset(self):
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._k = 0
        self._pos = self.initial
        self._snap = geometric_graph(self.initial)

    def positions(self, k: int) -> DevicePositions:
        self._advance(k)
        return self._pos

    def snapshot(self, k: int) -> GraphSnapshot:
        self._advance(k)
        return self._snap

    def _advance(self, k: int):
        if k < self._k:
            self._reset()
        if self._k == k:
            return
        while self._k < k:
            self._pos = step_positions(self._pos, self._rng, self.max_step, self.box)
            self._k += 1
        self._snap = geometric_graph(self._pos)

    def materialize(self, count: int, window_b: int = 1) -> GraphSequence:
        return GraphSequence([self.snapshot(k) for k in range(count)], window_b)
