"""Block-CSR storage aligned with thread-owned row ranges, and the LDU -> block map."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..mesh import UnstructuredMesh
from ..parallel import run_parallel
from ..partition import TwoLevelPartition
from . import kernels
from .ldu import LduMatrix, SparseError


@dataclass(frozen=True)
class CsrBlock:
    """View of one sub-matrix; column indices are local to the block's column range."""
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    @property
    def nnz(self) -> int:
        return len(self.data)


class _Pattern:
    """Identity token shared by a block structure and the map built for it."""
    __slots__ = ("owner", "neighbour", "n_cells")

    def __init__(self, owner, neighbour, n_cells):
        self.owner = owner
        self.neighbour = neighbour
        self.n_cells = n_cells


@dataclass(eq=False)
class BlockCsrMatrix:
    """t x t grid of CSR blocks stored in flat arrays, block row i contiguous.

    ``ptr_off[i, j]`` is the start of block (i, j)'s row pointer inside
    ``rowptr`` (-1 for an empty block, which stores nothing);
    ``val_off[i, j]`` is where its entries start in ``indices``/``values``.
    """

    offsets: np.ndarray
    ptr_off: np.ndarray
    val_off: np.ndarray
    rowptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    diag_pos: np.ndarray
    pattern: _Pattern

    @property
    def t(self) -> int:
        return len(self.offsets) - 1

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_ranges(self) -> list[tuple[int, int]]:
        return [(int(self.offsets[i]), int(self.offsets[i + 1])) for i in range(self.t)]

    def block(self, i: int, j: int) -> Optional[CsrBlock]:
        po = self.ptr_off[i, j]
        if po < 0:
            return None
        nr = int(self.offsets[i + 1] - self.offsets[i])
        nc = int(self.offsets[j + 1] - self.offsets[j])
        ptr = self.rowptr[po:po + nr + 1]
        vo = self.val_off[i, j]
        sl = slice(vo, vo + ptr[-1])
        return CsrBlock(ptr, self.indices[sl], self.values[sl], (nr, nc))

    def nonzero_blocks(self) -> list[tuple[int, int]]:
        return [tuple(ij) for ij in np.argwhere(self.ptr_off >= 0).tolist()]

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows, cols, vals = [], [], []
        for i, j in self.nonzero_blocks():
            blk = self.block(i, j)
            r = np.repeat(np.arange(blk.shape[0]), np.diff(blk.indptr)) + self.offsets[i]
            rows.append(r)
            cols.append(blk.indices + self.offsets[j])
            vals.append(blk.data)
        if not rows:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def to_scipy(self) -> sp.csr_matrix:
        r, c, v = self.triplets()
        return sp.csr_matrix((v, (r, c)), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        r, c, v = self.triplets()
        a[r, c] = v
        return a

    def copy_structure(self) -> BlockCsrMatrix:
        return BlockCsrMatrix(self.offsets, self.ptr_off, self.val_off, self.rowptr, self.indices,
                              np.zeros_like(self.values), self.diag_pos, self.pattern)


@dataclass(frozen=True, eq=False)
class LduBlockMap:
    """Target position in ``BlockCsrMatrix.values`` for every LDU slot.

    Slots are numbered diagonal (0..n-1), lower (n..n+F-1), upper (n+F..n+2F-1).
    ``source`` is the inverse: the slot feeding each stored position.
    """

    n_cells: int
    n_faces: int
    diag_target: np.ndarray
    lower_target: np.ndarray
    upper_target: np.ndarray
    source: np.ndarray
    row_value_ranges: tuple[tuple[int, int], ...]
    pattern: _Pattern

    @property
    def size(self) -> int:
        return self.n_cells + 2 * self.n_faces

    def targets(self) -> np.ndarray:
        return np.concatenate([self.diag_target, self.lower_target, self.upper_target])


def _offsets_from(mesh_n: int, partition: Optional[TwoLevelPartition], t: Optional[int],
                  offsets: Optional[np.ndarray]) -> np.ndarray:
    if offsets is not None:
        off = np.asarray(offsets, dtype=np.int64)
    elif partition is not None:
        if partition.n_cells != mesh_n:
            raise SparseError(f"partition covers {partition.n_cells} cells, mesh has {mesh_n}")
        off = partition.part_offsets()
        if t is not None and t != len(off) - 1:
            raise SparseError(f"t={t} does not match the partition's {len(off) - 1} ranges")
    else:
        if t is None:
            t = 1
        if t < 1 or t > mesh_n:
            raise SparseError(f"invalid thread count {t} for {mesh_n} cells")
        off = np.concatenate([[0], np.cumsum([len(b) for b in np.array_split(np.arange(mesh_n), t)])])
    if off[0] != 0 or off[-1] != mesh_n or np.any(np.diff(off) < 0):
        raise SparseError("row ranges must be ordered and cover all cells")
    return off.astype(np.int64)


def build_block_map(mesh: UnstructuredMesh, partition: Optional[TwoLevelPartition] = None,
                    t: Optional[int] = None, offsets: Optional[np.ndarray] = None
                    ) -> tuple[BlockCsrMatrix, LduBlockMap]:
    """Block structure (values zeroed) plus the static slot map for ``mesh``'s sparsity pattern.

    Row ranges come from ``offsets``, else from the partition's contiguous
    (rank, thread) ranges (the mesh must already be renumbered by it), else
    ``t`` equal index blocks.
    """
    n = mesh.n_cells
    nf = mesh.n_internal_faces
    off = _offsets_from(n, partition, t, offsets)
    tt = len(off) - 1
    own = mesh.owner[:nf]
    nei = mesh.neighbour
    cells = np.arange(n)
    rows = np.concatenate([cells, nei, own])
    cols = np.concatenate([cells, own, nei])
    bi = np.searchsorted(off, rows, side="right") - 1
    bj = np.searchsorted(off, cols, side="right") - 1
    order = np.lexsort((cols, rows, bj, bi))
    key = rows[order] * n + cols[order]
    if np.any(np.diff(key) == 0):
        raise SparseError("duplicate (row, col) entries: two faces join the same cells")
    target = np.empty(len(order), dtype=np.int64)
    target[order] = np.arange(len(order))

    blk = bi[order] * tt + bj[order]
    counts = np.bincount(blk, minlength=tt * tt).reshape(tt, tt)
    val_starts = np.concatenate([[0], np.cumsum(counts.ravel())[:-1]]).reshape(tt, tt)
    ptr_off = np.full((tt, tt), -1, dtype=np.int64)
    val_off = np.zeros((tt, tt), dtype=np.int64)
    rowptrs = []
    pos = 0
    srows = rows[order]
    for i in range(tt):
        nr = int(off[i + 1] - off[i])
        for j in range(tt):
            if counts[i, j] == 0:
                continue
            vo = int(val_starts[i, j])
            lr = srows[vo:vo + counts[i, j]] - off[i]
            ptr = np.zeros(nr + 1, dtype=np.int64)
            np.cumsum(np.bincount(lr, minlength=nr), out=ptr[1:])
            ptr_off[i, j] = pos
            val_off[i, j] = vo
            rowptrs.append(ptr)
            pos += nr + 1
    rowptr = np.concatenate(rowptrs) if rowptrs else np.zeros(0, dtype=np.int64)
    local_cols = cols[order] - off[bj[order]]

    pattern = _Pattern(own, nei, n)
    mat = BlockCsrMatrix(off, ptr_off, val_off, rowptr, local_cols.astype(np.int64),
                         np.zeros(len(order)), target[:n].copy(), pattern)
    row_end = np.cumsum(counts.sum(axis=1))
    row_ranges = tuple((int(row_end[i] - counts[i].sum()), int(row_end[i])) for i in range(tt))
    source = order.astype(np.int64)
    bmap = LduBlockMap(n, nf, target[:n], target[n:n + nf], target[n + nf:], source, row_ranges, pattern)
    return mat, bmap


def refresh_values(ldu: LduMatrix, bmap: LduBlockMap, dst: BlockCsrMatrix) -> None:
    """Copy LDU coefficients into ``dst`` through the precomputed map, one block row per thread."""
    if dst.pattern is not bmap.pattern:
        raise SparseError("block matrix was not built with this map")
    if ldu.n_cells != bmap.n_cells or not ldu.same_pattern(bmap.pattern.owner, bmap.pattern.neighbour):
        raise SparseError("stale map: LDU sparsity pattern differs from the one the map was built for")
    diag, lower, upper = ldu.diag, ldu.lower, ldu.upper
    src, values = bmap.source, dst.values
    n, nf = bmap.n_cells, bmap.n_faces

    def work(i):
        k0, k1 = bmap.row_value_ranges[i]
        kernels.refresh_range(k0, k1, src, n, nf, diag, lower, upper, values)

    run_parallel(work, dst.t)


def block_csr_from_ldu(ldu: LduMatrix, mesh: UnstructuredMesh, **kw) -> tuple[BlockCsrMatrix, LduBlockMap]:
    mat, bmap = build_block_map(mesh, **kw)
    refresh_values(ldu, bmap, mat)
    return mat, bmap
