"""Point clouds and neighborhood graphs for the operator encoder.

Nodes are points in a rectangular domain. Neighborhoods come from circular
truncation (all points within radius r, plus a self loop) or, for ablations,
from a directed k-nearest-neighbor rule. Radius queries use a uniform bucket
grid of cell size r, so construction is O(L * average bucket occupancy)
without any tree dependency.

Edge arrays are kept in a canonical order keyed by *position* (lexicographic
rank of coordinates), not by node index. Every reduction downstream iterates
edges in that order, so relabeling the nodes permutes rows of the output
exactly, with no floating-point reassociation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import IsolatedNodeError, ShapeError

__all__ = [
    "PointSet",
    "Graph",
    "uniform_grid",
    "cell_centers_grid",
    "build_radius_graph",
    "build_knn_graph",
    "assemble_node_features",
]


@dataclass(frozen=True)
class PointSet:
    """L points in an n-dimensional box.

    positions: (L, n) float64; bounds: (n, 2) rows of (lo, hi). Points must be
    inside the box (inclusive) and pairwise distinct.
    """

    positions: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        bnd = np.ascontiguousarray(self.bounds, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ShapeError("positions must be (L, n) with L >= 1")
        if bnd.shape != (pos.shape[1], 2):
            raise ShapeError("bounds must be (n, 2)")
        if np.any(bnd[:, 1] <= bnd[:, 0]):
            raise ShapeError("bounds must have hi > lo per axis")
        if np.any(pos < bnd[:, 0]) or np.any(pos > bnd[:, 1]):
            raise ShapeError("positions outside bounds")
        order = np.lexsort(pos.T[::-1])
        dup = np.all(np.diff(pos[order], axis=0) == 0.0, axis=1)
        if np.any(dup):
            raise ShapeError("duplicate positions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bounds", bnd)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def ndim(self) -> int:
        return self.positions.shape[1]

    def diagonal(self) -> float:
        ext = self.bounds[:, 1] - self.bounds[:, 0]
        return float(np.sqrt(np.sum(ext * ext)))


@dataclass
class Graph:
    """Neighborhood structure over a PointSet.

    neighbors[i] is a sorted array of node indices (always contains i).
    radius / k record how the graph was built (the unused one is None).
    node_features is (L, d) or None until assembled.
    """

    points: PointSet
    neighbors: list
    radius: float | None = None
    k: int | None = None
    node_features: np.ndarray | None = None
    _edge_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.points.n_points

    @property
    def n_edges(self) -> int:
        return int(sum(len(nb) for nb in self.neighbors))

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.intp)

    def edge_arrays(self):
        """Canonically ordered edge lists and the supporting index maps.

        Returns (src, dst, seg, rank_of, inv_deg) where edges are sorted by
        (position_rank[dst], position_rank[src]); seg = position_rank[dst] is
        non-decreasing, so segment reductions group by destination. rank_of[i]
        maps node i to its position rank; inv_deg is 1/|N| ordered by rank.
        """
        if "src" not in self._edge_cache:
            from .tensor import make_scatter_plan

            pos = self.points.positions
            order = np.lexsort(pos.T[::-1])
            rank_of = np.empty(self.n_nodes, dtype=np.intp)
            rank_of[order] = np.arange(self.n_nodes, dtype=np.intp)
            deg = self.degrees()
            dst = np.repeat(np.arange(self.n_nodes, dtype=np.intp), deg)
            src = np.concatenate([np.asarray(nb, dtype=np.intp) for nb in self.neighbors])
            key = np.lexsort((rank_of[src], rank_of[dst]))
            src, dst = src[key], dst[key]
            seg = rank_of[dst]
            src_rank = rank_of[src]
            inv_deg = (1.0 / deg[order].astype(np.float64)).reshape(-1, 1)
            self._edge_cache.update(
                src=src, dst=dst, seg=seg, rank_of=rank_of, order=order,
                src_rank=src_rank, inv_deg=inv_deg,
                src_plan=make_scatter_plan(src_rank, self.n_nodes),
                dst_plan=make_scatter_plan(seg, self.n_nodes),
            )
        c = self._edge_cache
        return c["src"], c["dst"], c["seg"], c["rank_of"], c["inv_deg"]

    def rank_order(self) -> np.ndarray:
        """order[r] = index of the node with position rank r (lexicographic
        in coordinates). Permuting node rows by this order before any dense
        algebra makes every downstream matrix a pure function of positions,
        so relabeling nodes cannot change results even at the bit level."""
        self.edge_arrays()
        return self._edge_cache["order"]

    def rank_edges(self):
        """Edge endpoints in rank space plus the adjoint scatter plans.

        Returns (src_rank, seg, inv_deg, src_plan, dst_plan) for features
        stored in rank order: gather sources by src_rank, destinations by seg,
        reduce segments by seg; results are already in rank order.
        """
        self.edge_arrays()
        c = self._edge_cache
        return c["src_rank"], c["seg"], c["inv_deg"], c["src_plan"], c["dst_plan"]


def uniform_grid(nx: int, ny: int, bounds) -> PointSet:
    """Lattice of nx*ny nodes including the boundary, row-major (y outer)."""
    if nx < 2 or ny < 2:
        raise ShapeError("uniform_grid needs nx, ny >= 2")
    bnd = np.asarray(bounds, dtype=np.float64)
    xs = np.linspace(bnd[0, 0], bnd[0, 1], nx)
    ys = np.linspace(bnd[1, 0], bnd[1, 1], ny)
    gx, gy = np.meshgrid(xs, ys)
    pos = np.column_stack([gx.ravel(), gy.ravel()])
    return PointSet(pos, bnd)


def cell_centers_grid(nx: int, ny: int, bounds) -> PointSet:
    """Finite-volume cell centers, row-major (y outer)."""
    if nx < 1 or ny < 1:
        raise ShapeError("cell_centers_grid needs nx, ny >= 1")
    bnd = np.asarray(bounds, dtype=np.float64)
    dx = (bnd[0, 1] - bnd[0, 0]) / nx
    dy = (bnd[1, 1] - bnd[1, 0]) / ny
    xs = bnd[0, 0] + (np.arange(nx) + 0.5) * dx
    ys = bnd[1, 0] + (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys)
    pos = np.column_stack([gx.ravel(), gy.ravel()])
    return PointSet(pos, bnd)


def build_radius_graph(points: PointSet, radius: float, strict: bool = False) -> Graph:
    """Undirected radius-ball graph with self loops.

    N_i = {i} plus every j with ||x_i - x_j||_2 <= radius. A node whose only
    neighbor is itself raises IsolatedNodeError when strict, otherwise the
    graph is returned as-is (the caller may warn).
    """
    if radius <= 0.0:
        raise ShapeError("radius must be positive")
    pos = points.positions
    L, n = pos.shape
    r2 = float(radius) * float(radius)
    lo = points.bounds[:, 0]
    cell = np.floor((pos - lo) / radius).astype(np.intp)
    buckets: dict[tuple, list] = {}
    for i, c in enumerate(map(tuple, cell)):
        buckets.setdefault(c, []).append(i)
    offsets = list(itertools.product((-1, 0, 1), repeat=n))
    neighbor_sets: list[list[int]] = [[] for _ in range(L)]
    for c, members in buckets.items():
        cand: list[int] = []
        for off in offsets:
            key = tuple(ci + oi for ci, oi in zip(c, off))
            got = buckets.get(key)
            if got is not None:
                cand.extend(got)
        cand_arr = np.asarray(cand, dtype=np.intp)
        cpos = pos[cand_arr]
        for i in members:
            diff = cpos - pos[i]
            d2 = (diff * diff).sum(axis=1)
            hits = cand_arr[d2 <= r2]
            neighbor_sets[i] = hits.tolist()
    neighbors = []
    for i in range(L):
        nb = np.asarray(sorted(set(neighbor_sets[i]) | {i}), dtype=np.intp)
        if strict and nb.size == 1:
            raise IsolatedNodeError(f"node {i} has no neighbor within radius {radius}")
        neighbors.append(nb)
    return Graph(points=points, neighbors=neighbors, radius=float(radius))


def build_knn_graph(points: PointSet, k: int) -> Graph:
    """Directed k-nearest-neighbor graph: N_i = {i} plus the k nearest other
    points (ties broken toward the lower index). k >= L clamps to L - 1."""
    pos = points.positions
    L = pos.shape[0]
    if k < 1:
        raise ShapeError("k must be >= 1")
    kk = min(k, L - 1)
    if kk < 1:
        raise ShapeError("kNN graph needs at least 2 points")
    neighbors = []
    idx = np.arange(L, dtype=np.intp)
    for i in range(L):
        diff = pos - pos[i]
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((idx, d2))
        # self sits first (distance 0, duplicates are rejected upstream)
        near = order[1 : kk + 1]
        neighbors.append(np.asarray(sorted(set(near.tolist()) | {i}), dtype=np.intp))
    return Graph(points=points, neighbors=neighbors, k=int(k))


def assemble_node_features(graph: Graph, theta: np.ndarray, with_coords: bool = True) -> Graph:
    """Return a new Graph whose node features are theta_i (|| x_i).

    theta: (L, c) per-node input channels. with_coords=False supports the
    coordinate-free positional-encoding ablation.
    """
    th = np.asarray(theta, dtype=np.float64)
    if th.ndim != 2 or th.shape[0] != graph.n_nodes:
        raise ShapeError("theta must be (L, c) matching the graph")
    if with_coords:
        feats = np.hstack([th, graph.points.positions])
    else:
        feats = th.copy()
    return Graph(
        points=graph.points,
        neighbors=graph.neighbors,
        radius=graph.radius,
        k=graph.k,
        node_features=np.ascontiguousarray(feats),
        _edge_cache=graph._edge_cache,
    )
