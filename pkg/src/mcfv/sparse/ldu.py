"""Face-addressed LDU matrices.

``upper[f]`` sits at (owner[f], neighbour[f]) and ``lower[f]`` at
(neighbour[f], owner[f]) for internal face f.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..mesh import UnstructuredMesh


class SparseError(ValueError):
    pass


@dataclass(eq=False)
class LduMatrix:
    n_cells: int
    diag: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    owner: np.ndarray
    neighbour: np.ndarray

    def __post_init__(self):
        nf = len(self.neighbour)
        if len(self.diag) != self.n_cells:
            raise SparseError(f"diag has {len(self.diag)} entries, expected {self.n_cells}")
        if len(self.lower) != nf or len(self.upper) != nf or len(self.owner) < nf:
            raise SparseError("lower/upper must have one entry per internal face")

    @classmethod
    def zeros(cls, mesh: UnstructuredMesh) -> LduMatrix:
        nf = mesh.n_internal_faces
        return cls(mesh.n_cells, np.zeros(mesh.n_cells), np.zeros(nf), np.zeros(nf),
                   mesh.owner[:nf], mesh.neighbour)

    @property
    def n_internal_faces(self) -> int:
        return len(self.neighbour)

    @property
    def nnz(self) -> int:
        return self.n_cells + 2 * self.n_internal_faces

    def copy(self) -> LduMatrix:
        return LduMatrix(self.n_cells, self.diag.copy(), self.lower.copy(), self.upper.copy(),
                         self.owner, self.neighbour)

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, values) in slot order: diagonal, lower, upper."""
        nf = self.n_internal_faces
        own = self.owner[:nf]
        cells = np.arange(self.n_cells)
        rows = np.concatenate([cells, self.neighbour, own])
        cols = np.concatenate([cells, own, self.neighbour])
        vals = np.concatenate([self.diag, self.lower, self.upper])
        return rows, cols, vals

    def to_scipy(self) -> sp.csr_matrix:
        r, c, v = self.triplets()
        return sp.csr_matrix((v, (r, c)), shape=(self.n_cells, self.n_cells))

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n_cells, self.n_cells))
        r, c, v = self.triplets()
        a[r, c] = v
        return a

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Face-loop product, the native LDU kernel."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_cells,):
            raise SparseError(f"vector length {x.shape} does not match {self.n_cells} cells")
        nf = self.n_internal_faces
        own = self.owner[:nf]
        y = self.diag * x
        y += np.bincount(own, weights=self.upper * x[self.neighbour], minlength=self.n_cells)
        y += np.bincount(self.neighbour, weights=self.lower * x[own], minlength=self.n_cells)
        return y

    def same_pattern(self, owner: np.ndarray, neighbour: np.ndarray) -> bool:
        nf = self.n_internal_faces
        if len(neighbour) != nf:
            return False
        own = self.owner[:nf]
        if _same_readonly(self.neighbour, neighbour) and _same_readonly(own, owner[:nf]):
            return True
        return np.array_equal(self.neighbour, neighbour) and np.array_equal(own, owner[:nf])


def _same_readonly(a: np.ndarray, b: np.ndarray) -> bool:
    # views of the same immutable buffer cannot differ in content
    if a is b:
        return True
    return (not a.flags.writeable and not b.flags.writeable and a.shape == b.shape
            and a.strides == b.strides and a.dtype == b.dtype
            and a.__array_interface__["data"][0] == b.__array_interface__["data"][0])
