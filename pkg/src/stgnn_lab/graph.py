"""Sensor graphs: Gaussian-kernel adjacency, GCN normalization, neighbor sets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, forward_op, register_op

DENSE_MAX_NODES = 64


@dataclass(frozen=True)
class Graph:
    n: int
    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int, float], ...]
    weighted: bool = True

    def __post_init__(self):
        if len(self.node_ids) != self.n:
            raise ValueError(f"graph has n={self.n} but {len(self.node_ids)} node ids")
        seen = set()
        for src, dst, w in self.edges:
            if not (0 <= src < self.n and 0 <= dst < self.n):
                raise ValueError(f"edge ({src},{dst}) outside node range 0..{self.n - 1}")
            if not (0.0 <= w <= 1.0):
                raise ValueError(f"edge ({src},{dst}) weight {w} outside [0,1]")
            if (src, dst) in seen:
                raise ValueError(f"duplicate edge ({src},{dst})")
            seen.add((src, dst))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for src, dst, w in self.edges:
            a[src, dst] = w
        return a

    def is_symmetric(self) -> bool:
        a = self.dense()
        return bool(np.array_equal(a, a.T))

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel so that old node ``perm[k]`` becomes new node ``k``."""
        inv = np.argsort(perm)
        edges = tuple(sorted((int(inv[s]), int(inv[d]), w) for s, d, w in self.edges))
        return Graph(self.n, tuple(self.node_ids[p] for p in perm), edges, self.weighted)

    @classmethod
    def from_dense(cls, a: np.ndarray, node_ids: Sequence[str] | None = None) -> "Graph":
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        ids = tuple(node_ids) if node_ids is not None else tuple(str(i) for i in range(n))
        src, dst = np.nonzero(a)
        edges = tuple((int(s), int(d), float(a[s, d])) for s, d in zip(src, dst))
        return cls(n, ids, edges)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 (I + A) D^-1/2``; dense for small graphs, CSR otherwise."""

    n: int
    values: np.ndarray | sp.csr_matrix = field(repr=False)

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)

    def to_dense(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else np.array(self.values)


@dataclass(frozen=True)
class NeighborSets:
    """Per-node sorted neighbor lists (incoming plus self)."""

    sets: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.sets)

    def __getitem__(self, i: int) -> tuple[int, ...]:
        return self.sets[i]

    def total(self) -> int:
        return sum(len(s) for s in self.sets)

    def mask(self) -> np.ndarray:
        """Boolean [n, n] array, True where j is NOT a neighbor of i."""
        m = np.ones((self.n, self.n), dtype=bool)
        for i, nb in enumerate(self.sets):
            m[i, list(nb)] = False
        return m


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def sigma_from_distances(distances: Iterable[float]) -> float:
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size < 2 or np.all(d == d[0]):
        raise ValueError("sigma needs at least two distinct distances (std would be 0)")
    return float(np.std(d))


def build_adjacency_from_distances(
    distances: Iterable[tuple[str, str, float]],
    sigma: float | None = None,
    epsilon: float = 0.1,
    node_ids: Sequence[str] | None = None,
) -> Graph:
    """Thresholded Gaussian kernel ``exp(-d^2/sigma^2)``; weights below ``epsilon`` are dropped.

    Node order follows ``node_ids`` when given, else first appearance.
    ``sigma=None`` uses the population std of the listed distances.
    """
    rows = [(str(s), str(d), float(dist)) for s, d, dist in distances]
    for s, d, dist in rows:
        if dist < 0 or math.isnan(dist):
            raise ValueError(f"negative or NaN distance {dist} for pair ({s},{d})")
    if sigma is None:
        sigma = sigma_from_distances(r[2] for r in rows)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0,1), got {epsilon}")

    if node_ids is None:
        order: dict[str, int] = {}
        for s, d, _ in rows:
            order.setdefault(s, len(order))
            order.setdefault(d, len(order))
        ids = tuple(order)
    else:
        ids = tuple(node_ids)
        order = {nid: i for i, nid in enumerate(ids)}

    edges = []
    for s, d, dist in rows:
        if s not in order or d not in order:
            raise ValueError(f"pair ({s},{d}) references an unknown node id")
        w = math.exp(-(dist * dist) / (sigma * sigma))
        if w >= epsilon and w > 0.0:
            edges.append((order[s], order[d], w))
    return Graph(len(ids), ids, tuple(edges))


def normalize_adjacency(g: Graph, dense: bool | None = None) -> NormalizedAdjacency:
    if dense is None:
        dense = g.n <= DENSE_MAX_NODES
    if g.edges:
        src, dst, w = (np.array(c) for c in zip(*g.edges))
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    a = sp.coo_matrix((w, (src.astype(np.int64), dst.astype(np.int64))), shape=(g.n, g.n))
    a_tilde = (a + sp.identity(g.n, format="coo")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).reshape(-1)
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    a_hat = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
    a_hat.sort_indices()
    return NormalizedAdjacency(g.n, a_hat.toarray() if dense else a_hat)


def neighbor_sets(g: Graph) -> NeighborSets:
    incoming: list[set[int]] = [{i} for i in range(g.n)]
    for src, dst, w in g.edges:
        if w > 0:
            incoming[dst].add(src)
    return NeighborSets(tuple(tuple(sorted(s)) for s in incoming))


# ---------------------------------------------------------------------------
# differentiable sparse-dense product over the node axis
# ---------------------------------------------------------------------------


def _apply_nodes(m, x: np.ndarray) -> np.ndarray:
    if not sp.issparse(m):
        return np.matmul(m, x)
    n = x.shape[-2]
    moved = np.moveaxis(x, -2, 0)
    out = m @ moved.reshape(n, -1)
    return np.moveaxis(np.asarray(out).reshape(moved.shape), 0, -2)


def _spmm_fwd(x, *, m):
    if x.ndim < 2 or x.shape[-2] != m.shape[1]:
        raise ShapeError(f"spmm: adjacency {m.shape} cannot multiply tensor {x.shape}")
    return _apply_nodes(m, x), m


def _spmm_bwd(g, m, x):
    return (_apply_nodes(m.T, g),)


register_op("spmm", _spmm_fwd, _spmm_bwd)


def spmm(m: NormalizedAdjacency, x: Tensor) -> Tensor:
    """``m @ x`` along the node axis (-2); leading axes are batch axes."""
    return forward_op("spmm", [x], m=m.values)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_distance_csv(path: str | Path) -> list[tuple[str, str, float]]:
    return _read_triples(path, "distance")


def read_weight_csv(path: str | Path, node_ids: Sequence[str] | None = None) -> Graph:
    """Load a precomputed ``src,dst,weight`` list (binary connectivity allowed).

    Node order follows ``node_ids`` when given (isolated nodes allowed), else first appearance.
    """
    rows = _read_triples(path, "weight")
    order: dict[str, int] = {}
    if node_ids is not None:
        order = {nid: i for i, nid in enumerate(node_ids)}
        for s, d, _ in rows:
            if s not in order or d not in order:
                raise ValueError(f"{path}: pair ({s},{d}) references an unknown node id")
    for s, d, _ in rows:
        order.setdefault(s, len(order))
        order.setdefault(d, len(order))
    edges = tuple((order[s], order[d], w) for s, d, w in rows if w > 0)
    binary = all(w == 1.0 for _, _, w in edges)
    return Graph(len(order), tuple(order), edges, weighted=not binary)


def write_weight_csv(g: Graph, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_id", "dst_id", "weight"])
        for src, dst, weight in g.edges:
            w.writerow([g.node_ids[src], g.node_ids[dst], repr(weight)])


def write_distance_csv(rows: Iterable[tuple[str, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_id", "dst_id", "distance"])
        for s, d, dist in rows:
            w.writerow([s, d, repr(float(dist))])


def _read_triples(path, value_name: str) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if [h.strip() for h in header] != ["src_id", "dst_id", value_name]:
            raise ValueError(f"{path}: expected header src_id,dst_id,{value_name}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                value = float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparsable {value_name} {row[2]!r}") from None
            rows.append((row[0].strip(), row[1].strip(), value))
    return rows


# ---------------------------------------------------------------------------
# synthetic networks
# ---------------------------------------------------------------------------


def _connected(n: int, edges) -> bool:
    adj = [set() for _ in range(n)]
    for s, d, _ in edges:
        adj[s].add(d)
        adj[d].add(s)
    seen, stack = {0}, [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def random_sensor_network(
    n: int, seed: int, k: int = 3, epsilon: float = 0.1
) -> tuple[Graph, list[tuple[str, str, float]]]:
    """Connected sensor graph from random planar positions.

    Distances are listed for symmetric k-nearest-neighbor pairs; sigma is the
    std of all pairwise distances.  Resamples until the thresholded graph is
    connected.  Returns the graph and its distance list.
    """
    rng = np.random.default_rng(seed)
    ids = [f"s{i}" for i in range(n)]
    for _ in range(1000):
        pos = rng.uniform(0.0, 1.0, size=(n, 2))
        dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        iu = np.triu_indices(n, 1)
        sigma = float(np.std(dist[iu])) if n > 2 else 1.0
        pairs = set()
        for i in range(n):
            for j in np.argsort(dist[i])[1 : k + 1]:
                pairs.add((i, int(j)))
                pairs.add((int(j), i))
        rows = [(ids[i], ids[j], float(dist[i, j])) for i, j in sorted(pairs)]
        g = build_adjacency_from_distances(rows, sigma=sigma, epsilon=epsilon, node_ids=ids)
        if n == 1 or _connected(n, g.edges):
            return g, rows
    raise RuntimeError("could not sample a connected sensor network")
