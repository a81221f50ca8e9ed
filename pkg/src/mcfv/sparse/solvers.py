"""Thread-parallel kernels on BlockCsrMatrix: SpMV, hybrid Gauss-Seidel, PCG.

Each of the ``t`` workers owns one block row. Gauss-Seidel is sequential
inside a worker's diagonal block and uses pre-sweep values for couplings to
other blocks (block-Jacobi across threads). Vector algebra (dots, axpys)
runs on the calling thread in double precision.

FLOP conventions: SpMV 2*nnz; one Gauss-Seidel sweep 2*(nnz - n) + n (a
division counts as one); dot and axpy 2n; vector scaling and subtraction n.
Scalar arithmetic is not counted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..parallel import run_parallel
from . import kernels
from .blockcsr import BlockCsrMatrix
from .ldu import SparseError


class DivergenceError(RuntimeError):
    pass


PRECONDITIONERS = ("none", "diagonal", "gs")


def _check_vec(mat: BlockCsrMatrix, v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mat.n,):
        raise SparseError(f"{name} has shape {v.shape}, expected ({mat.n},)")
    return v


def spmv_flops(mat: BlockCsrMatrix) -> int:
    return 2 * mat.nnz


def gs_sweep_flops(mat: BlockCsrMatrix) -> int:
    return 2 * (mat.nnz - mat.n) + mat.n


def spmv(mat: BlockCsrMatrix, x: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """y = A x, one block row per worker; bitwise independent of ``t`` for a fixed numbering."""
    x = _check_vec(mat, x, "x")
    y = np.empty(mat.n) if out is None else out
    args = (mat.offsets, mat.ptr_off, mat.val_off, mat.rowptr, mat.indices, mat.values)

    def work(i):
        kernels.spmv_row_block(i, *args, x, y)

    run_parallel(work, mat.t)
    return y


def residual_norm(mat: BlockCsrMatrix, x: np.ndarray, b: np.ndarray) -> float:
    """||b - A x||_2."""
    b = _check_vec(mat, b, "b")
    return float(np.linalg.norm(b - spmv(mat, x)))


def _check_diag(mat: BlockCsrMatrix) -> None:
    d = mat.values[mat.diag_pos]
    bad = np.flatnonzero(d == 0.0)
    if len(bad):
        raise SparseError(f"zero diagonal entry in row {bad[0]}")


def gauss_seidel_sweep(mat: BlockCsrMatrix, b: np.ndarray, x: np.ndarray, sweeps: int = 1,
                       symmetric: bool = False) -> int:
    """In-place hybrid Gauss-Seidel on ``x``; returns the FLOPs spent.

    With ``symmetric`` each sweep is a forward pass followed by a backward pass.
    """
    b = _check_vec(mat, b, "b")
    if not isinstance(x, np.ndarray) or x.dtype != np.float64 or x.shape != (mat.n,):
        raise SparseError("x must be a float64 array of length n, updated in place")
    _check_diag(mat)
    args = (mat.offsets, mat.ptr_off, mat.val_off, mat.rowptr, mat.indices, mat.values, mat.diag_pos)
    passes = [False, True] if symmetric else [False]
    for _ in range(sweeps):
        for backward in passes:
            x_old = x.copy() if mat.t > 1 else x

            def work(i, backward=backward, x_old=x_old):
                kernels.gs_row_block(i, *args, b, x, x_old, backward)

            run_parallel(work, mat.t)
    return sweeps * len(passes) * gs_sweep_flops(mat)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    flops: int
    history: list[float]


class _Preconditioner:
    def __init__(self, mat: BlockCsrMatrix, kind: str, gs_sweeps: int):
        if kind not in PRECONDITIONERS:
            raise SparseError(f"unknown preconditioner {kind!r}; expected one of {PRECONDITIONERS}")
        self.mat = mat
        self.kind = kind
        self.gs_sweeps = gs_sweeps
        n = mat.n
        if kind == "diagonal":
            _check_diag(mat)
            self.inv_diag = 1.0 / mat.values[mat.diag_pos]
            self.flops = n
        elif kind == "gs":
            _check_diag(mat)
            self.flops = 2 * gs_sweeps * gs_sweep_flops(mat)
        else:
            self.flops = 0

    def __call__(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return r.copy()
        if self.kind == "diagonal":
            return r * self.inv_diag
        z = np.zeros_like(r)
        gauss_seidel_sweep(self.mat, r, z, self.gs_sweeps, symmetric=True)
        return z


def pcg_solve(mat: BlockCsrMatrix, b: np.ndarray, x0: Optional[np.ndarray] = None, tol: float = 1e-8,
              max_iter: int = 1000, preconditioner: str = "diagonal", gs_sweeps: int = 1) -> SolveResult:
    """Preconditioned conjugate gradients for SPD systems.

    Stops when ||b - A x|| / ||b|| <= tol (absolute ||r|| <= tol if b = 0)
    or after ``max_iter`` iterations, which is reported, not raised.
    ``preconditioner`` is ``none``, ``diagonal`` or ``gs`` (``gs_sweeps``
    symmetric hybrid Gauss-Seidel sweeps from a zero guess).
    """
    if tol <= 0:
        raise SparseError("tol must be positive")
    b = _check_vec(mat, b, "b")
    x = np.zeros(mat.n) if x0 is None else _check_vec(mat, x0, "x0").copy()
    n = mat.n
    M = _Preconditioner(mat, preconditioner, gs_sweeps)
    flops = 0

    norm_b = float(np.linalg.norm(b))
    flops += 2 * n
    scale = norm_b if norm_b > 0 else 1.0

    r = b - spmv(mat, x)
    flops += spmv_flops(mat) + n
    res = float(np.linalg.norm(r)) / scale
    flops += 2 * n
    history = [res]
    if not np.isfinite(res):
        raise DivergenceError("non-finite initial residual")
    if res <= tol:
        return SolveResult(x, 0, res, True, flops, history)

    z = M(r)
    flops += M.flops
    rz = float(np.dot(r, z))
    flops += 2 * n
    p = z.copy()
    q = np.empty(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        spmv(mat, p, out=q)
        pq = float(np.dot(p, q))
        flops += spmv_flops(mat) + 2 * n
        if not np.isfinite(pq) or pq == 0.0:
            raise DivergenceError(f"breakdown at iteration {it}: p.Ap = {pq}")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        res = float(np.linalg.norm(r)) / scale
        flops += 6 * n
        history.append(res)
        if not np.isfinite(res) or not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at iteration {it}")
        if res <= tol:
            converged = True
            break
        z = M(r)
        rz_new = float(np.dot(r, z))
        p *= rz_new / rz
        p += z
        flops += M.flops + 4 * n
        rz = rz_new
    return SolveResult(x, it, res, converged, flops, history)
