"""Compiled block-row kernels.

Every kernel handles one block row ``i`` and releases the GIL, so a pool
of ``t`` Python threads runs them concurrently. Within a row, entries are
visited block by block (ascending ``j``) and in stored column order inside
each block, which is ascending global column overall.
"""
import numba as nb
import numpy as np

_opts = dict(nogil=True, cache=True)


@nb.njit(**_opts)
def spmv_row_block(i, offsets, ptr_off, val_off, rowptr, indices, values, x, y):
    t = offsets.shape[0] - 1
    r0 = offsets[i]
    nrows = offsets[i + 1] - r0
    for r in range(nrows):
        s = 0.0
        for j in range(t):
            po = ptr_off[i, j]
            if po < 0:
                continue
            vo = val_off[i, j]
            c0 = offsets[j]
            for k in range(vo + rowptr[po + r], vo + rowptr[po + r + 1]):
                s += values[k] * x[c0 + indices[k]]
        y[r0 + r] = s


@nb.njit(**_opts)
def gs_row_block(i, offsets, ptr_off, val_off, rowptr, indices, values, diag_pos, b, x, x_old, backward):
    """Gauss-Seidel over block row i: live values inside the diagonal block, ``x_old`` elsewhere."""
    t = offsets.shape[0] - 1
    r0 = offsets[i]
    nrows = offsets[i + 1] - r0
    for rr in range(nrows):
        r = nrows - 1 - rr if backward else rr
        g = r0 + r
        s = b[g]
        for j in range(t):
            po = ptr_off[i, j]
            if po < 0:
                continue
            vo = val_off[i, j]
            c0 = offsets[j]
            for k in range(vo + rowptr[po + r], vo + rowptr[po + r + 1]):
                if j == i:
                    if k != diag_pos[g]:
                        s -= values[k] * x[c0 + indices[k]]
                else:
                    s -= values[k] * x_old[c0 + indices[k]]
        x[g] = s / values[diag_pos[g]]


@nb.njit(**_opts)
def refresh_range(k0, k1, source, n_cells, n_faces, diag, lower, upper, values):
    """Gather LDU slots into block storage positions [k0, k1)."""
    for k in range(k0, k1):
        s = source[k]
        if s < n_cells:
            values[k] = diag[s]
        elif s < n_cells + n_faces:
            values[k] = lower[s - n_cells]
        else:
            values[k] = upper[s - n_cells - n_faces]


def warmup() -> None:
    """Compile all kernels on a 1x1 system."""
    offsets = np.array([0, 1], dtype=np.int64)
    ptr_off = np.zeros((1, 1), dtype=np.int64)
    val_off = np.zeros((1, 1), dtype=np.int64)
    rowptr = np.array([0, 1], dtype=np.int64)
    indices = np.zeros(1, dtype=np.int64)
    values = np.ones(1)
    x = np.ones(1)
    y = np.zeros(1)
    spmv_row_block(0, offsets, ptr_off, val_off, rowptr, indices, values, x, y)
    gs_row_block(0, offsets, ptr_off, val_off, rowptr, indices, values, indices, x, y, x, False)
    refresh_range(0, 1, indices, 1, 0, values, values[:0], values[:0], y)
