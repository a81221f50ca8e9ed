from .blockcsr import (BlockCsrMatrix, CsrBlock, LduBlockMap, block_csr_from_ldu, build_block_map,
                       refresh_values)
from .ldu import LduMatrix, SparseError
from .solvers import (DivergenceError, SolveResult, gauss_seidel_sweep, gs_sweep_flops, pcg_solve,
                      residual_norm, spmv, spmv_flops)
from .triplet import dump_triplets, load_triplets

__all__ = [
    "BlockCsrMatrix", "CsrBlock", "LduBlockMap", "LduMatrix", "SparseError", "DivergenceError",
    "SolveResult", "block_csr_from_ldu", "build_block_map", "refresh_values", "spmv",
    "gauss_seidel_sweep", "pcg_solve", "residual_norm", "spmv_flops", "gs_sweep_flops",
    "dump_triplets", "load_triplets",
]
