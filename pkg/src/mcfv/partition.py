"""Two-level (rank, thread) decomposition with per-subdomain Cuthill-McKee renumbering.

The default partitioner is multilevel recursive bisection: heavy-edge
matching to coarsen, greedy graph growing on the coarsest graph, and
Fiduccia-Mattheyses boundary refinement while projecting back.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .graph import CellGraph
from .mesh import UnstructuredMesh, mesh_to_graph


class PartitionError(ValueError):
    pass


Partitioner = Callable[..., np.ndarray]

COARSEST_SIZE = 40
BISECTION_TOLERANCE = 0.01
INITIAL_TRIES = 6
FM_PASSES = 8
FM_STALL = 60


# -- multilevel bisection ---------------------------------------------------

class _Graph:
    """Python-list view of a weighted graph, cheaper to walk node by node than numpy slices."""

    __slots__ = ("n", "xadj", "adj", "ew", "vw")

    def __init__(self, xadj, adjncy, ew, vw):
        self.n = len(xadj) - 1
        self.xadj = list(map(int, xadj))
        self.adj = list(map(int, adjncy))
        self.ew = list(map(int, ew))
        self.vw = list(map(float, vw))


def _coarsen(g: _Graph, rng: np.random.Generator, max_vw: float):
    n = g.n
    xadj, adj, ew, vw = g.xadj, g.adj, g.ew, g.vw
    match = [-1] * n
    for u in rng.permutation(n).tolist():
        if match[u] >= 0:
            continue
        best, best_w = u, -1
        for k in range(xadj[u], xadj[u + 1]):
            v = adj[k]
            if match[v] < 0 and v != u and ew[k] > best_w and vw[u] + vw[v] <= max_vw:
                best, best_w = v, ew[k]
        match[u] = best
        match[best] = u
    cmap = [-1] * n
    nc = 0
    for u in range(n):
        if cmap[u] < 0:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1
    cmap_a = np.asarray(cmap, dtype=np.int64)
    rows = np.repeat(np.arange(n), np.diff(g.xadj))
    cu = cmap_a[rows]
    cv = cmap_a[np.asarray(adj, dtype=np.int64)]
    keep = cu != cv
    key = cu[keep] * nc + cv[keep]
    uniq, inv = np.unique(key, return_inverse=True)
    w = np.bincount(inv, weights=np.asarray(ew, dtype=np.float64)[keep], minlength=len(uniq))
    cx = np.zeros(nc + 1, dtype=np.int64)
    np.cumsum(np.bincount(uniq // nc, minlength=nc), out=cx[1:])
    cvw = np.bincount(cmap_a, weights=np.asarray(vw), minlength=nc)
    return _Graph(cx, uniq % nc, np.rint(w).astype(np.int64), cvw), cmap_a


def _cut(g: _Graph, part) -> int:
    cut = 0
    for u in range(g.n):
        pu = part[u]
        for k in range(g.xadj[u], g.xadj[u + 1]):
            if part[g.adj[k]] != pu:
                cut += g.ew[k]
    return cut // 2


def _grow(g: _Graph, start: int, target0: float):
    """Greedy graph growing: absorb the frontier node that most reduces the cut."""
    part = [1] * g.n
    w0 = 0.0
    # gain of pulling a frontier node into side 0: edge weight to side 0 minus to side 1
    gain = [0] * g.n
    seen = [False] * g.n
    seen[start] = True
    heap = [(0, start)]
    scan = 0
    while w0 < target0:
        if not heap:
            # disconnected remainder: continue from the lowest-index unseen node
            while scan < g.n and seen[scan]:
                scan += 1
            if scan == g.n:
                break
            seen[scan] = True
            heap.append((0, scan))
        negg, u = heapq.heappop(heap)
        if part[u] == 0 or -negg != gain[u]:
            continue
        if w0 > 0 and (w0 + g.vw[u] - target0) > (target0 - w0):
            break
        part[u] = 0
        w0 += g.vw[u]
        for k in range(g.xadj[u], g.xadj[u + 1]):
            v = g.adj[k]
            if part[v] == 0:
                continue
            if seen[v]:
                gain[v] += 2 * g.ew[k]
            else:
                seen[v] = True
                gain[v] = sum(g.ew[j] if part[g.adj[j]] == 0 else -g.ew[j]
                              for j in range(g.xadj[v], g.xadj[v + 1]))
            heapq.heappush(heap, (-gain[v], v))
    return part


def _fm_refine(g: _Graph, part, max_w, passes: int = FM_PASSES):
    """Two-way FM refinement with rollback to the best prefix of each pass."""
    n = g.n
    xadj, adj, ew, vw = g.xadj, g.adj, g.ew, g.vw
    weights = [0.0, 0.0]
    for u in range(n):
        weights[part[u]] += vw[u]

    def excess():
        return max(weights[0] - max_w[0], 0.0) + max(weights[1] - max_w[1], 0.0)

    for _ in range(passes):
        gain = [0] * n
        boundary = []
        for u in range(n):
            pu = part[u]
            s = 0
            ext = False
            for k in range(xadj[u], xadj[u + 1]):
                if part[adj[k]] != pu:
                    s += ew[k]
                    ext = True
                else:
                    s -= ew[k]
            gain[u] = s
            if ext:
                boundary.append(u)
        heaps = ([], [])
        for u in boundary:
            heaps[part[u]].append((-gain[u], u))
        for h in heaps:
            heapq.heapify(h)
        locked = [False] * n
        moves = []
        cum = 0
        best_cum, best_len, best_exc = 0, 0, excess()
        stall = 0
        while True:
            cand = []
            for side in (0, 1):
                h = heaps[side]
                while h and (locked[h[0][1]] or part[h[0][1]] != side or -h[0][0] != gain[h[0][1]]):
                    heapq.heappop(h)
                if h:
                    u = h[0][1]
                    if weights[1 - side] + vw[u] <= max_w[1 - side] or weights[side] > max_w[side]:
                        cand.append((-h[0][0], side, u))
            if not cand:
                break
            over = [weights[s] - max_w[s] for s in (0, 1)]
            if over[0] > 0 or over[1] > 0:
                heavy = 0 if over[0] >= over[1] else 1
                forced = [c for c in cand if c[1] == heavy]
                cand = forced or cand
            cand.sort(key=lambda c: (-c[0], weights[1 - c[1]], c[2]))
            gval, side, u = cand[0]
            heapq.heappop(heaps[side])
            locked[u] = True
            part[u] = 1 - side
            weights[side] -= vw[u]
            weights[1 - side] += vw[u]
            cum += gval
            moves.append(u)
            for k in range(xadj[u], xadj[u + 1]):
                v = adj[k]
                if locked[v]:
                    continue
                # u left v's side -> v's edge to u becomes external (+2w), or internal (-2w)
                gain[v] += 2 * ew[k] if part[v] == side else -2 * ew[k]
                heapq.heappush(heaps[part[v]], (-gain[v], v))
            exc = excess()
            if exc < best_exc - 1e-12 or (exc <= best_exc + 1e-12 and cum > best_cum):
                best_cum, best_len, best_exc = cum, len(moves), exc
                stall = 0
            else:
                stall += 1
                if stall > FM_STALL:
                    break
        for u in moves[best_len:][::-1]:
            side = part[u]
            part[u] = 1 - side
            weights[side] -= vw[u]
            weights[1 - side] += vw[u]
        if best_len == 0:
            break
    return part


def _bisect(xadj, adjncy, ew, vw, frac0: float, rng: np.random.Generator,
            tol: float = BISECTION_TOLERANCE) -> np.ndarray:
    g = _Graph(xadj, adjncy, ew, vw)
    total = float(sum(g.vw))
    levels = []
    cur = g
    while cur.n > COARSEST_SIZE:
        coarse, cmap = _coarsen(cur, rng, max_vw=1.5 * total / COARSEST_SIZE)
        if coarse.n > 0.95 * cur.n:
            break
        levels.append((cur, cmap))
        cur = coarse

    def window(gr: _Graph):
        t0 = frac0 * total
        t1 = total - t0
        slack = max(max(gr.vw), 0.0)
        return (max(t0 * (1 + tol), t0 + slack), max(t1 * (1 + tol), t1 + slack))

    # initial partition: several growing seeds, keep the best balanced cut
    best = None
    starts = sorted(set([0, cur.n - 1] + rng.integers(0, cur.n, size=INITIAL_TRIES).tolist()))
    for s in starts:
        part = _grow(cur, s, frac0 * total)
        part = _fm_refine(cur, part, window(cur))
        w0 = sum(cur.vw[u] for u in range(cur.n) if part[u] == 0)
        mw = window(cur)
        exc = max(w0 - mw[0], 0) + max(total - w0 - mw[1], 0)
        key = (exc, _cut(cur, part), s)
        if best is None or key < best[0]:
            best = (key, part)
    part = best[1]

    for fine, cmap in reversed(levels):
        part = [part[c] for c in cmap.tolist()]
        part = _fm_refine(fine, part, window(fine))
    return np.asarray(part, dtype=np.int64)


def _ensure_side_sizes(graph: CellGraph, side: np.ndarray, need: tuple[int, int]) -> None:
    """Move nodes into a side holding fewer nodes than the parts it must still host.

    Balance windows are weight based, so on tiny graphs a side can end up
    (nearly) empty. Nodes adjacent to the short side move first, lowest index first.
    """
    for s in (0, 1):
        while np.count_nonzero(side == s) < need[s]:
            donors = np.flatnonzero(side != s)
            touching = [u for u in donors.tolist() if np.any(side[graph.neighbors(u)] == s)]
            side[touching[0] if touching else donors[0]] = s


def partition_graph(graph: CellGraph, n_parts: int, weights: Optional[np.ndarray] = None,
                    seed: int = 0, min_size: int = 1) -> np.ndarray:
    """Partition nodes into ``n_parts`` parts minimising the edge cut.

    Deterministic for a fixed ``seed``. Parts are balanced to about 1% per
    bisection level on unit-weight graphs, and every part gets at least
    ``min_size`` nodes.
    """
    n = graph.n_nodes
    if n_parts < 1 or min_size < 1:
        raise PartitionError("n_parts and min_size must be >= 1")
    if n_parts * min_size > n:
        raise PartitionError(f"cannot split {n} nodes into {n_parts} parts of at least {min_size}")
    vw = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(vw) != n or np.any(vw <= 0):
        raise PartitionError("node weights must be positive, one per node")
    parts = np.zeros(n, dtype=np.int64)
    if n_parts == 1:
        return parts

    def recurse(nodes: np.ndarray, sub: CellGraph, k: int, offset: int, depth: int):
        if k == 1:
            parts[nodes] = offset
            return
        k0 = k // 2
        rng = np.random.default_rng([seed, depth, offset])
        side = _bisect(sub.xadj, sub.adjncy, sub.edge_weights(), vw[nodes], k0 / k, rng)
        _ensure_side_sizes(sub, side, (k0 * min_size, (k - k0) * min_size))
        for s, kk, off in ((0, k0, offset), (1, k - k0, offset + k0)):
            idx = np.flatnonzero(side == s)
            recurse(nodes[idx], sub.subgraph(idx), kk, off, depth + 1)

    recurse(np.arange(n), graph, n_parts, 0, 0)
    return parts


def edge_cut(graph: CellGraph, parts: np.ndarray) -> int:
    u, v = graph.edges()
    w = graph.edge_weights()[graph.adjncy > np.repeat(np.arange(graph.n_nodes), graph.degree())]
    return int(np.sum(w[parts[u] != parts[v]]))


# -- renumbering ------------------------------------------------------------

def cuthill_mckee(graph: CellGraph) -> np.ndarray:
    """Cuthill-McKee ordering, returned as a permutation old -> new.

    Each connected component starts from its minimum-degree node; components
    are visited in order of their smallest node index; ties between equal
    degrees are broken by ascending index.
    """
    n = graph.n_nodes
    deg = graph.degree().tolist()
    xadj = graph.xadj.tolist()
    adj = graph.adjncy.tolist()
    visited = [False] * n
    order: list[int] = []
    for root in range(n):
        if visited[root]:
            continue
        # collect the component to find its min-degree start node
        comp = [root]
        visited[root] = True
        i = 0
        while i < len(comp):
            u = comp[i]
            i += 1
            for v in adj[xadj[u]:xadj[u + 1]]:
                if not visited[v]:
                    visited[v] = True
                    comp.append(v)
        for u in comp:
            visited[u] = False
        start = min(comp, key=lambda u: (deg[u], u))
        visited[start] = True
        head = len(order)
        order.append(start)
        while head < len(order):
            u = order[head]
            head += 1
            nbrs = [v for v in adj[xadj[u]:xadj[u + 1]] if not visited[v]]
            nbrs.sort(key=lambda v: (deg[v], v))
            for v in nbrs:
                visited[v] = True
                order.append(v)
    perm = np.empty(n, dtype=np.int64)
    perm[np.asarray(order, dtype=np.int64)] = np.arange(n)
    return perm


# -- two-level decomposition --------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoLevelPartition:
    n_ranks: int
    n_threads: int
    rank_of_cell: np.ndarray
    thread_of_cell: np.ndarray
    permutation: np.ndarray
    inverse_permutation: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.rank_of_cell)

    @property
    def n_parts(self) -> int:
        return self.n_ranks * self.n_threads

    def part_of_cell(self) -> np.ndarray:
        """Flat part id ``rank * n_threads + thread`` per (original) cell."""
        return self.rank_of_cell * self.n_threads + self.thread_of_cell

    def part_offsets(self) -> np.ndarray:
        """Start of each (rank, thread) range in the new numbering, plus the end."""
        counts = np.bincount(self.part_of_cell(), minlength=self.n_parts)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def rank_offsets(self) -> np.ndarray:
        return self.part_offsets()[:: self.n_threads]

    def renumbered(self) -> TwoLevelPartition:
        """The same partition expressed in the new numbering (identity permutation)."""
        inv = self.inverse_permutation
        ident = np.arange(self.n_cells)
        return TwoLevelPartition(self.n_ranks, self.n_threads, self.rank_of_cell[inv],
                                 self.thread_of_cell[inv], ident, ident.copy())

    def validate(self) -> None:
        n = self.n_cells
        if not np.array_equal(np.sort(self.permutation), np.arange(n)):
            raise PartitionError("permutation is not a bijection")
        if not np.array_equal(self.inverse_permutation[self.permutation], np.arange(n)):
            raise PartitionError("inverse permutation mismatch")
        if np.any(self.rank_of_cell < 0) or np.any(self.rank_of_cell >= self.n_ranks):
            raise PartitionError("rank id out of range")
        if np.any(self.thread_of_cell < 0) or np.any(self.thread_of_cell >= self.n_threads):
            raise PartitionError("thread id out of range")
        part_new = self.part_of_cell()[self.inverse_permutation]
        if np.any(np.diff(part_new) < 0):
            raise PartitionError("(rank, thread) ranges are not contiguous and ordered")


def _as_graph(mesh_or_graph) -> CellGraph:
    if isinstance(mesh_or_graph, CellGraph):
        return mesh_or_graph
    return mesh_to_graph(mesh_or_graph)


def two_level_decompose(mesh: UnstructuredMesh | CellGraph, n_ranks: int, n_threads: int,
                        seed: int = 0, partitioner: Partitioner = partition_graph) -> TwoLevelPartition:
    """Rank-level partition, thread-level partition per rank, then CM within each (rank, thread).

    The returned permutation places the cells of (rank r, thread j) in one
    contiguous range, ranges ordered by (r, j).
    """
    graph = _as_graph(mesh)
    n = graph.n_nodes
    if n_ranks < 1 or n_threads < 1:
        raise PartitionError("n_ranks and n_threads must be >= 1")
    if n_ranks * n_threads > n:
        raise PartitionError(f"{n_ranks} x {n_threads} parts exceed {n} cells")
    rank = partitioner(graph, n_ranks, seed=seed, min_size=n_threads)
    thread = np.zeros(n, dtype=np.int64)
    perm = np.empty(n, dtype=np.int64)
    offset = 0
    for r in range(n_ranks):
        cells_r = np.flatnonzero(rank == r)
        if len(cells_r) < n_threads:
            raise PartitionError(f"rank {r} has fewer cells than threads")
        sub = graph.subgraph(cells_r)
        th = partitioner(sub, n_threads, seed=seed + 7919 * (r + 1))
        thread[cells_r] = th
        for j in range(n_threads):
            loc = np.flatnonzero(th == j)
            cm = cuthill_mckee(sub.subgraph(loc))
            perm[cells_r[loc]] = offset + cm
            offset += len(loc)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    return TwoLevelPartition(n_ranks, n_threads, rank, thread, perm, inv)


def naive_partition(n_cells: int, n_ranks: int, n_threads: int) -> TwoLevelPartition:
    """Index-block assignment: equal contiguous index ranges, identity numbering."""
    if n_ranks * n_threads > n_cells:
        raise PartitionError("more parts than cells")
    rank = np.empty(n_cells, dtype=np.int64)
    thread = np.empty(n_cells, dtype=np.int64)
    for r, block in enumerate(np.array_split(np.arange(n_cells), n_ranks)):
        rank[block] = r
        for j, sub in enumerate(np.array_split(block, n_threads)):
            thread[sub] = j
    ident = np.arange(n_cells)
    return TwoLevelPartition(n_ranks, n_threads, rank, thread, ident, ident.copy())


def rank_halo_faces(mesh: UnstructuredMesh, partition: TwoLevelPartition) -> dict[tuple[int, int], np.ndarray]:
    """Internal faces crossing ranks, keyed by (lower rank, higher rank)."""
    nint = mesh.n_internal_faces
    ro = partition.rank_of_cell[mesh.owner[:nint]]
    rn = partition.rank_of_cell[mesh.neighbour]
    out = {}
    cross = np.flatnonzero(ro != rn)
    lo, hi = np.minimum(ro[cross], rn[cross]), np.maximum(ro[cross], rn[cross])
    for a, b in sorted(set(zip(lo.tolist(), hi.tolist()))):
        out[(a, b)] = cross[(lo == a) & (hi == b)]
    return out


# -- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class PartitionStats:
    cells_min: int
    cells_mean: float
    cells_max: int
    cells_std: float
    edge_cut: int
    offdiag_fraction: float
    nonzero_block_count: int

    @property
    def balance(self) -> float:
        return self.cells_max / self.cells_mean


def partition_stats(mesh: UnstructuredMesh, partition: TwoLevelPartition,
                    t: Optional[int] = None) -> PartitionStats:
    """Balance and sparsity statistics of a decomposition.

    Each rank owns a local matrix (its cells plus their intra-rank couplings)
    split into ``t x t`` thread blocks. ``offdiag_fraction`` is the share of
    those local nonzeros falling outside diagonal blocks, summed over ranks;
    inter-rank couplings belong to the halo and are excluded.
    ``edge_cut`` counts every internal face between different (rank, thread)
    parts.
    """
    if t is not None and t != partition.n_threads:
        raise PartitionError(f"t={t} does not match the partition's {partition.n_threads} threads")
    if partition.n_cells != mesh.n_cells:
        raise PartitionError("partition and mesh sizes differ")
    T = partition.n_threads
    part = partition.part_of_cell()
    counts = np.bincount(part, minlength=partition.n_parts)
    nint = mesh.n_internal_faces
    po, pn = part[mesh.owner[:nint]], part[mesh.neighbour]
    ro, rn = po // T, pn // T
    same_rank = ro == rn
    cut = int(np.sum(po != pn))
    local_nnz = mesh.n_cells + 2 * int(np.sum(same_rank))
    off = 2 * int(np.sum(same_rank & (po != pn)))
    blocks = set(zip(po[same_rank].tolist(), pn[same_rank].tolist()))
    blocks |= {(b, a) for a, b in blocks}
    blocks |= {(p, p) for p in np.flatnonzero(counts).tolist()}
    return PartitionStats(
        cells_min=int(counts.min()),
        cells_mean=float(counts.mean()),
        cells_max=int(counts.max()),
        cells_std=float(counts.std()),
        edge_cut=cut,
        offdiag_fraction=off / local_nnz,
        nonzero_block_count=len(blocks),
    )
