"""Node graphs and augmented attention masks.

All adjacency structures are symmetric boolean CSR patterns with no diagonal,
sorted unique column indices per row. They are treated as immutable.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .meshio import INLET, Mesh


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Adjacency:
    indptr: np.ndarray
    indices: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return int(self.indptr.size - 1)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def n_edges(self) -> int:
        return self.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def rows(self) -> np.ndarray:
        """Row index of every stored entry."""
        if "rows" not in self._cache:
            self._cache["rows"] = np.repeat(np.arange(self.n_nodes), self.degrees())
        return self._cache["rows"]

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def transpose_perm(self) -> np.ndarray:
        """Permutation ``p`` with entry ``p[e]`` storing (j, i) for entry e = (i, j)."""
        if "perm" not in self._cache:
            key = self.indices.astype(np.int64) * max(self.n_nodes, 1) + self.rows()
            self._cache["perm"] = np.argsort(key, kind="stable")
        return self._cache["perm"]

    def to_scipy(self) -> sp.csr_matrix:
        n = self.n_nodes
        data = np.ones(self.nnz, dtype=np.int8)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray().astype(bool)

    def edge_list(self) -> np.ndarray:
        """Undirected edges (i < j) as an (E, 2) array."""
        rows = self.rows()
        upper = rows < self.indices
        return np.column_stack([rows[upper], self.indices[upper]])

    def check(self) -> None:
        n = self.n_nodes
        if self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.nnz:
            raise GraphError("malformed row offsets")
        if self.nnz and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphError("column index out of range")
        rows = self.rows()
        if np.any(rows == self.indices):
            raise GraphError("diagonal entry present")
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (self.indices[1:] <= self.indices[:-1])):
            raise GraphError("columns not sorted/unique within a row")
        t = self.transpose_perm()
        if not (np.array_equal(rows[t], self.indices) and np.array_equal(self.indices[t], rows)):
            raise GraphError("adjacency is not symmetric")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.indptr, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.indices, dtype="<i8").tobytes())
        return h.hexdigest()


def from_pairs(n: int, pairs) -> Adjacency:
    """Symmetric pattern from (possibly duplicated, either-direction) pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return _from_coo(n, i, j)


def _from_coo(n: int, i: np.ndarray, j: np.ndarray) -> Adjacency:
    m = sp.csr_matrix((np.ones(i.size, dtype=np.int8), (i, j)), shape=(n, n))
    return from_scipy(m)


def from_scipy(m) -> Adjacency:
    m = sp.csr_matrix(m)
    m.setdiag(0)
    m.eliminate_zeros()
    m.sum_duplicates()
    m.sort_indices()
    return Adjacency(m.indptr.astype(np.int64), m.indices.astype(np.int64))


def from_dense(a: np.ndarray) -> Adjacency:
    a = np.asarray(a, dtype=bool)
    return from_scipy(sp.csr_matrix(a.astype(np.int8)))


def empty(n: int) -> Adjacency:
    return Adjacency(np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))


def union(a: Adjacency, b: Adjacency) -> Adjacency:
    return from_scipy((a.to_scipy() + b.to_scipy()) > 0)


def build_adjacency(mesh: Mesh) -> Adjacency:
    """Edges of the tetrahedral elements."""
    t = mesh.tets
    if t.size == 0:
        return empty(mesh.n_nodes)
    pairs = np.concatenate([t[:, [a, b]] for a, b in
                            ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))])
    return from_pairs(mesh.n_nodes, pairs)


def add_random_jumpers(adj: Adjacency, fraction: float, seed: int) -> tuple[Adjacency, np.ndarray]:
    """Add ``round(fraction * nnz / 2)`` random edges between non-adjacent nodes.

    Returns the augmented pattern and the (j, 2) array of added pairs (i < j).
    """
    if not 0.0 <= fraction < 1.0:
        raise GraphError("jumper fraction must lie in [0, 1)")
    n = adj.n_nodes
    j = int(round(fraction * adj.nnz / 2))
    if j == 0:
        return adj, np.zeros((0, 2), dtype=np.int64)
    if n < 2:
        raise GraphError("random jumpers need at least two nodes")
    free = n * (n - 1) // 2 - adj.n_edges
    if j > free:
        raise GraphError(f"requested {j} jumpers but only {free} non-adjacent pairs exist")
    rng = np.random.default_rng(seed)
    existing = set((adj.rows() * n + adj.indices).tolist())
    if free <= 4 * j or n <= 512:
        dense = adj.to_dense()
        iu, ju = np.triu_indices(n, k=1)
        cand = np.flatnonzero(~dense[iu, ju])
        pick = np.sort(rng.choice(cand.size, size=j, replace=False))
        added = np.column_stack([iu[cand[pick]], ju[cand[pick]]])
    else:
        chosen: list[tuple[int, int]] = []
        seen: set[int] = set()
        while len(chosen) < j:
            a, b = (int(v) for v in rng.integers(0, n, size=2))
            if a == b:
                continue
            a, b = min(a, b), max(a, b)
            key = a * n + b
            if key in existing or key in seen:
                continue
            seen.add(key)
            chosen.append((a, b))
        added = np.array(sorted(chosen), dtype=np.int64)
    return union(adj, from_pairs(n, added)), added


def select_global_nodes(inlet_nodes: np.ndarray, fraction: float) -> np.ndarray:
    inlet_nodes = np.sort(np.asarray(inlet_nodes, dtype=np.int64))
    k = math.ceil(fraction * inlet_nodes.size - 1e-12)
    return inlet_nodes[:k]


def add_global_attention(adj: Adjacency, mesh_or_inlet, fraction: float
                         ) -> tuple[Adjacency, np.ndarray]:
    """Connect the lowest-index ``ceil(fraction * |inlet|)`` inlet nodes to every node."""
    if isinstance(mesh_or_inlet, Mesh):
        inlet = mesh_or_inlet.nodes_of_type(INLET)
    else:
        inlet = np.asarray(mesh_or_inlet, dtype=np.int64)
    if inlet.size == 0:
        raise GraphError("global attention needs at least one inlet node")
    g = select_global_nodes(inlet, fraction)
    if g.size == 0:
        return adj, g
    return union(adj, _star(adj.n_nodes, g)), g


def dilate(adj: Adjacency, strict_a2: bool = False) -> Adjacency:
    """Support of ``A + A^2`` without the diagonal (``A^2`` only when ``strict_a2``)."""
    a = adj.to_scipy().astype(np.int64)
    a2 = a @ a
    return from_scipy((a2 > 0) if strict_a2 else ((a + a2) > 0))


BASE, DILATED = 0, 1


@dataclass(frozen=True, eq=False)
class AugmentConfig:
    n_layers: int = 4
    n_heads: int = 8
    jumper_fraction: float = 0.20
    global_fraction: float = 0.05
    dilated_layers: int = 5
    seed: int = 0
    strict_a2: bool = False
    # square the global-attention edges too; makes the dilated mask dense
    dilate_globals: bool = False


@dataclass(frozen=True, eq=False)
class AugmentedAdjacency:
    base: Adjacency
    dilated: Adjacency
    head_assignment: np.ndarray  # (L, H) of BASE / DILATED
    jumper_edges: np.ndarray
    global_nodes: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.base.n_nodes

    def layer_masks(self, layer: int) -> list[tuple[Adjacency, np.ndarray]]:
        """(mask, head indices) groups for one layer."""
        key = ("layer", layer)
        if key not in self._cache:
            row = self.head_assignment[layer]
            self._cache[key] = [(self.mask(int(k)), np.flatnonzero(row == k))
                                for k in np.unique(row)]
        return self._cache[key]

    def mask(self, kind: int) -> Adjacency:
        return self.base if kind == BASE else self.dilated

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.base.digest().encode())
        h.update(self.dilated.digest().encode())
        h.update(np.ascontiguousarray(self.head_assignment, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.jumper_edges, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.global_nodes, dtype="<i8").tobytes())
        return h.hexdigest()

    def restrict(self, nodes: np.ndarray) -> "AugmentedAdjacency":
        """Induced masks on ``nodes`` (local numbering follows ``nodes``)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.n_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        keep_j = local[self.jumper_edges] if self.jumper_edges.size else self.jumper_edges
        if keep_j.size:
            keep_j = keep_j[(keep_j >= 0).all(axis=1)]
        g = local[self.global_nodes]
        return AugmentedAdjacency(induced_subgraph(self.base, nodes),
                                  induced_subgraph(self.dilated, nodes),
                                  self.head_assignment, keep_j, g[g >= 0])


def head_assignment(n_layers: int, n_heads: int, dilated_layers: int) -> np.ndarray:
    """Base mask everywhere except the trailing layers, where the second half of
    the heads use the dilated mask."""
    out = np.full((n_layers, n_heads), BASE, dtype=np.int64)
    first = max(0, n_layers - dilated_layers)
    if n_heads >= 2:
        out[first:, n_heads // 2:] = DILATED
    return out


def assemble(adjacency: Adjacency, mesh_or_inlet, config: AugmentConfig) -> AugmentedAdjacency:
    """Jumpers, then global attention, then dilation.

    The dilated mask squares the mesh + jumper graph and then adds the
    global-attention edges: squaring through a global node would connect every
    pair of nodes. ``config.dilate_globals`` squares the full base instead.
    """
    with_jumpers, jumpers = add_random_jumpers(adjacency, config.jumper_fraction, config.seed)
    if config.global_fraction > 0:
        base, glob = add_global_attention(with_jumpers, mesh_or_inlet, config.global_fraction)
    else:
        base, glob = with_jumpers, np.zeros(0, dtype=np.int64)
    heads = head_assignment(config.n_layers, config.n_heads, config.dilated_layers)
    if not (heads == DILATED).any():
        dil = base
    elif config.dilate_globals or glob.size == 0:
        dil = dilate(base, config.strict_a2)
    else:
        dil = union(dilate(with_jumpers, config.strict_a2), _star(base.n_nodes, glob))
    return AugmentedAdjacency(base, dil, heads, jumpers, glob)


def _star(n: int, centres: np.ndarray) -> Adjacency:
    others = np.arange(n)
    pairs = np.concatenate([np.column_stack([np.full(n, v), others]) for v in centres])
    return from_pairs(n, pairs)


def plain(adjacency: Adjacency, n_layers: int, n_heads: int) -> AugmentedAdjacency:
    """No augmentation: every head of every layer attends over ``adjacency``."""
    heads = np.full((n_layers, n_heads), BASE, dtype=np.int64)
    z = np.zeros((0, 2), dtype=np.int64)
    return AugmentedAdjacency(adjacency, adjacency, heads, z, np.zeros(0, dtype=np.int64))


def induced_subgraph(adj: Adjacency, nodes: np.ndarray) -> Adjacency:
    nodes = np.asarray(nodes, dtype=np.int64)
    m = adj.to_scipy()[nodes][:, nodes]
    return from_scipy(m)


@dataclass(frozen=True, eq=False)
class MaskedGraph:
    visible: Adjacency
    hidden: np.ndarray  # global ids, sorted
    visible_nodes: np.ndarray  # local -> global map, sorted


def mask_nodes(adj: Adjacency, ratio: float, seed: int, max_retries: int = 8) -> MaskedGraph:
    """Hide ``round(ratio * N)`` nodes and every edge touching them.

    Draws are repeated (up to ``max_retries``) until no visible node loses all
    its neighbours; remaining isolated visible nodes are moved to the hidden set.
    """
    if not 0.0 <= ratio < 1.0:
        raise GraphError("mask ratio must lie in [0, 1)")
    n = adj.n_nodes
    k = int(round(ratio * n))
    rng = np.random.default_rng(seed)
    if k == 0:
        return MaskedGraph(adj, np.zeros(0, dtype=np.int64), np.arange(n))
    had_neighbors = adj.degrees() > 0
    for _ in range(max_retries + 1):
        hidden = np.sort(rng.choice(n, size=k, replace=False))
        vis_mask = np.ones(n, dtype=bool)
        vis_mask[hidden] = False
        visible = np.flatnonzero(vis_mask)
        sub = induced_subgraph(adj, visible)
        isolated = (sub.degrees() == 0) & had_neighbors[visible]
        if not isolated.any():
            return MaskedGraph(sub, hidden, visible)
    vis_mask[visible[isolated]] = False
    visible = np.flatnonzero(vis_mask)
    return MaskedGraph(induced_subgraph(adj, visible), np.flatnonzero(~vis_mask), visible)


def connected_components(adj: Adjacency) -> tuple[int, np.ndarray]:
    return sp.csgraph.connected_components(adj.to_scipy(), directed=False)


def _bfs_far(adj: Adjacency, sources, allowed: np.ndarray) -> tuple[int, np.ndarray]:
    dist = sp.csgraph.shortest_path(adj.to_scipy(), unweighted=True, directed=False,
                                    indices=np.atleast_1d(sources))
    d = np.atleast_2d(dist).min(axis=0)
    d[~allowed] = -1
    d[np.isinf(d)] = -1
    return int(np.argmax(d)), d


def _grow(adj: Adjacency, nodes: np.ndarray, k: int) -> list[np.ndarray]:
    """Grow ``k`` connected regions inside one connected component.

    Seeds are spread by farthest-point BFS; growth is round-robin, always
    extending the currently smallest region that still has a frontier.
    """
    n = adj.n_nodes
    allowed = np.zeros(n, dtype=bool)
    allowed[nodes] = True
    if k == 1:
        return [np.sort(nodes)]
    seeds = [_bfs_far(adj, nodes[0], allowed)[0]]
    while len(seeds) < k:
        s, d = _bfs_far(adj, seeds, allowed)
        if d[s] <= 0:
            rest = [v for v in nodes if v not in seeds]
            s = rest[0]
        seeds.append(s)
    owner = np.full(n, -1, dtype=np.int64)
    queues = [deque() for _ in range(k)]
    sizes = np.zeros(k, dtype=np.int64)
    for p, s in enumerate(seeds):
        owner[s] = p
        sizes[p] = 1
        queues[p].extend(adj.neighbors(s).tolist())
    remaining = nodes.size - k
    while remaining:
        active = [p for p in range(k) if queues[p]]
        if not active:
            break
        p = min(active, key=lambda q: (sizes[q], q))
        q = queues[p]
        while q:
            v = q.popleft()
            if allowed[v] and owner[v] < 0:
                owner[v] = p
                sizes[p] += 1
                remaining -= 1
                q.extend(adj.neighbors(v).tolist())
                break
    parts = [np.flatnonzero(owner == p) for p in range(k)]
    return _rebalance(adj, parts, owner)


def _connected_without(adj: Adjacency, part_mask: np.ndarray, v: int, limit: int) -> bool:
    """Whether removing ``v`` keeps its part's neighbours of v mutually reachable."""
    nbrs = [u for u in adj.neighbors(v) if part_mask[u]]
    if len(nbrs) <= 1:
        return True
    target = set(nbrs[1:])
    seen = {v, nbrs[0]}
    q = deque([nbrs[0]])
    steps = 0
    while q and target and steps < limit:
        u = q.popleft()
        steps += 1
        for w in adj.neighbors(u):
            if part_mask[w] and w not in seen:
                seen.add(w)
                target.discard(w)
                q.append(w)
    return not target


def _rebalance(adj: Adjacency, parts: list[np.ndarray], owner: np.ndarray,
               target: float = 1.3, tries: int = 16) -> list[np.ndarray]:
    """Move boundary nodes from large parts into smaller neighbour parts while
    keeping every part connected."""
    k = len(parts)
    sizes = np.array([p.size for p in parts])
    rows = adj.rows()
    for _ in range(int(sizes.sum())):
        if sizes.max() <= target * max(sizes.min(), 1):
            break
        o_col = owner[adj.indices]
        o_row = owner[rows]
        moved = False
        for big in np.argsort(-sizes, kind="stable"):
            cut = (o_row == big) & (o_col != big) & (o_col >= 0)
            cut &= sizes[np.maximum(o_col, 0)] + 1 < sizes[big]
            if not cut.any():
                continue
            v_c, o_c = rows[cut], o_col[cut]
            order = np.lexsort((v_c, sizes[o_c]))
            part_mask = owner == big
            for e in order[:tries]:
                v, o = int(v_c[e]), int(o_c[e])
                if _connected_without(adj, part_mask, v, limit=4 * int(sizes[big])):
                    owner[v] = o
                    sizes[big] -= 1
                    sizes[o] += 1
                    moved = True
                    break
            if moved:
                break
        if not moved:
            break
    return [np.flatnonzero(owner == p) for p in range(k)]


def partition(adj: Adjacency, k: int) -> list[np.ndarray]:
    """Split the nodes into ``k`` disjoint, covering parts.

    Connected components are assigned whole parts in proportion to their size;
    inside a component, regions are grown by balanced BFS.
    """
    n = adj.n_nodes
    if k < 1 or k > n:
        raise GraphError(f"cannot split {n} nodes into {k} parts")
    ncomp, labels = connected_components(adj)
    comps = [np.flatnonzero(labels == c) for c in range(ncomp)]
    comps.sort(key=lambda c: (-c.size, int(c[0])))
    if k < ncomp:
        # more components than parts: pack whole components greedily
        bins: list[list[int]] = [[] for _ in range(k)]
        load = np.zeros(k, dtype=np.int64)
        for c in comps:
            b = int(np.argmin(load))
            bins[b].extend(c.tolist())
            load[b] += c.size
        return [np.sort(np.array(b, dtype=np.int64)) for b in bins]
    alloc = np.ones(ncomp, dtype=np.int64)
    for _ in range(k - ncomp):
        load = np.array([c.size for c in comps]) / alloc
        alloc[int(np.argmax(load))] += 1
    parts: list[np.ndarray] = []
    for c, kc in zip(comps, alloc):
        parts.extend(_grow(adj, c, int(min(kc, c.size))))
    return parts


def sample_neighbor_subgraph(adj: Adjacency, edge_budget: int, seed: int
                             ) -> tuple[Adjacency, np.ndarray]:
    """Random edge subset of size ``edge_budget`` and its incident nodes.

    Returns the subgraph in local numbering and the local -> global node map.
    """
    edges = adj.edge_list()
    if edge_budget > edges.shape[0] or edge_budget < 0:
        raise GraphError(f"edge budget {edge_budget} exceeds {edges.shape[0]} edges")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(edges.shape[0], size=edge_budget, replace=False))
    chosen = edges[pick]
    nodes = np.unique(chosen)
    local = np.full(adj.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    return from_pairs(nodes.size, local[chosen]), nodes
