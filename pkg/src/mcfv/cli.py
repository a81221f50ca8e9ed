"""``mcfv`` command line: benchmark workflows composed from the library modules.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Settings come from an optional JSON ``--config`` file; command-line flags win.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as mio
from .fvm import warmup as fvm_warmup
from .fvm import BoundaryCondition, ScalarField, advance_scalar_transport, assemble_laplacian, build_face_schedule
from .mesh import build_box_mesh, compute_geometry, refine_uniform, renumber_mesh
from .metrics import RunReport, flops_rate, time_to_solution, write_rows, write_step_csv
from .nn import infer, load_model, random_model
from .partition import partition_stats, two_level_decompose
from .sparse import build_block_map, kernels, pcg_solve, refresh_values


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    mesh: list = field(default_factory=lambda: [8, 8, 8])
    lengths: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    refine: int = 0
    ranks: int = 1
    threads: int = 1
    seed: int = 0
    tol: float = 1e-8
    transport_tol: float = 1e-12
    max_iter: int = 1000
    preconditioner: str = "diagonal"
    gs_sweeps: int = 1
    steps: int = 10
    dt: float = 0.01
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    diffusivity: float = 0.01
    flow_cycle: float = 1.0
    model: Optional[str] = None
    model_dims: list = field(default_factory=lambda: [1, 32, 32, 1])
    use_nn: bool = True
    precision: str = "fp32"
    activation: str = "table"
    batch: int = 1024
    repeat: int = 3
    io_strategy: str = "grouped"
    group_size: Optional[int] = None
    open_latency_ms: float = 0.0
    payload_bytes: int = 4096
    thread_list: list = field(default_factory=lambda: [1, 2, 4])
    scaling: str = "strong"
    mesh_dir: Optional[str] = None
    output: str = "out"
    report: Optional[str] = None

    def validate(self) -> None:
        if len(self.mesh) != 3 or any(int(n) < 1 for n in self.mesh):
            raise UsageError("mesh must be three positive integers")
        if len(self.lengths) != 3 or any(float(v) <= 0 for v in self.lengths):
            raise UsageError("lengths must be three positive numbers")
        if len(self.velocity) != 3:
            raise UsageError("velocity must have three components")
        for name in ("ranks", "threads", "gs_sweeps", "max_iter", "batch", "repeat", "payload_bytes"):
            if int(getattr(self, name)) < 1:
                raise UsageError(f"{name} must be >= 1")
        for name in ("tol", "transport_tol", "dt", "diffusivity", "flow_cycle"):
            if float(getattr(self, name)) <= 0:
                raise UsageError(f"{name} must be positive")
        for name in ("refine", "steps", "seed", "open_latency_ms"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.group_size is not None and self.group_size < 1:
            raise UsageError("group_size must be >= 1")
        if any(int(t) < 1 for t in self.thread_list) or not self.thread_list:
            raise UsageError("thread_list must hold positive thread counts")
        choices = {"preconditioner": ("none", "diagonal", "gs"), "precision": ("fp32", "mixed_fp16"),
                   "activation": ("exact", "table"), "io_strategy": ("master", "parallel", "grouped"),
                   "scaling": ("strong", "weak")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {allowed}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return data


def make_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# -- shared helpers -----------------------------------------------------------------

def _mesh(cfg: RunConfig):
    if cfg.mesh_dir:
        mesh, _ = mio.read_mesh(cfg.mesh_dir)
    else:
        mesh = build_box_mesh(*[int(n) for n in cfg.mesh], lengths=tuple(cfg.lengths))
    return refine_uniform(mesh, cfg.refine) if cfg.refine else mesh


def _prepared(cfg: RunConfig, threads: Optional[int] = None, mesh=None):
    fvm_warmup()
    kernels.warmup()
    mesh = _mesh(cfg) if mesh is None else mesh
    part = two_level_decompose(mesh, cfg.ranks, threads or cfg.threads, seed=cfg.seed)
    mesh = renumber_mesh(mesh, part.permutation)
    part = part.renumbered()
    return mesh, part, compute_geometry(mesh), build_face_schedule(mesh, part)


def _source_model(cfg: RunConfig):
    if not cfg.use_nn:
        return None
    act = "gelu_exact" if cfg.activation == "exact" else "gelu_table"
    if cfg.model:
        model = load_model(cfg.model, activation=act)
    else:
        model = random_model(cfg.model_dims, seed=cfg.seed, precision=cfg.precision, activation=act)
    return model.with_precision(cfg.precision, act)


def _hot_spot(mesh, geometry) -> ScalarField:
    c = geometry.cell_centroids
    centre = 0.5 * (c.min(axis=0) + c.max(axis=0))
    r = np.linalg.norm(c - centre, axis=1)
    return ScalarField((r <= 0.25 * r.max()).astype(np.float64))


def _simulate(cfg: RunConfig, threads: Optional[int] = None, mesh=None):
    mesh, part, geo, sched = _prepared(cfg, threads, mesh)
    state = _hot_spot(mesh, geo)
    t0 = time.perf_counter()
    out, steps = advance_scalar_transport(mesh, geo, state, cfg.dt, cfg.velocity, cfg.diffusivity, sched,
                                          steps=cfg.steps, source_model=_source_model(cfg),
                                          tol=cfg.transport_tol, max_iter=cfg.max_iter)
    return mesh, out, steps, time.perf_counter() - t0


def _emit(cfg: RunConfig, rows: list[dict]) -> None:
    if cfg.report:
        write_rows(cfg.report, rows)
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(str(r[k]) for k in keys))


# -- subcommands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    mesh = _mesh(cfg)
    out = Path(cfg.output)
    nbytes = mio.write_mesh(out / "mesh", mesh)
    field_path = out / "field.dfc"
    values = np.zeros(mesh.n_cells)
    mio.write_collated(field_path, np.array_split(values, min(cfg.ranks, mesh.n_cells)), name="psi")
    mio.build_index(field_path)
    _emit(cfg, [{"cells": mesh.n_cells, "faces": mesh.n_faces, "mesh_bytes": nbytes, "output": str(out)}])
    return 0


def cmd_partition(cfg: RunConfig) -> int:
    mesh = _mesh(cfg)
    part = two_level_decompose(mesh, cfg.ranks, cfg.threads, seed=cfg.seed)
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    mio.write_partition(Path(cfg.output) / "partition.bin", part)
    st = partition_stats(mesh, part)
    _emit(cfg, [{"ranks": cfg.ranks, "threads": cfg.threads, "cells_min": st.cells_min,
                 "cells_mean": st.cells_mean, "cells_max": st.cells_max, "balance": st.balance,
                 "edge_cut": st.edge_cut, "offdiag_fraction": st.offdiag_fraction,
                 "nonzero_blocks": st.nonzero_block_count}])
    return 0


def cmd_solve(cfg: RunConfig) -> int:
    mesh, part, geo, sched = _prepared(cfg)
    bcs = {name: BoundaryCondition("fixed_value", 0.0) for name in mesh.patch_names()}
    A, s = assemble_laplacian(mesh, geo, 1.0, sched, ScalarField(np.zeros(mesh.n_cells), bcs))
    block, bmap = build_block_map(mesh, part)
    refresh_values(A, bmap, block)
    rhs = s + geo.cell_volumes
    t0 = time.perf_counter()
    res = pcg_solve(block, rhs, tol=cfg.tol, max_iter=cfg.max_iter, preconditioner=cfg.preconditioner,
                     gs_sweeps=cfg.gs_sweeps)
    dt = time.perf_counter() - t0
    rep = RunReport(dt, res.flops, mesh.n_cells, cfg.flow_cycle, solving_s=dt)
    _emit(cfg, [{"cells": mesh.n_cells, "threads": block.t, "preconditioner": cfg.preconditioner,
                 "iterations": res.iterations, "residual": res.residual, "converged": res.converged,
                 "solve_s": dt, "flops": res.flops, "flops_rate": flops_rate(rep) if dt > 0 else 0.0}])
    return 0 if res.converged else 2


def cmd_simulate(cfg: RunConfig) -> int:
    mesh, _, steps, _ = _simulate(cfg)
    if cfg.report:
        write_step_csv(cfg.report, steps)
    print(",".join(["step", "construction_s", "solving_s", "dnn_s", "other_s", "flops"]))
    for s in steps:
        print(f"{s.step},{s.construction_s:.6f},{s.solving_s:.6f},{s.dnn_s:.6f},{s.other_s:.6f},{s.flops}")
    return 0


def cmd_breakdown(cfg: RunConfig) -> int:
    mesh, _, steps, _ = _simulate(cfg)
    rows = []
    for s in steps:
        rep = RunReport(s.total_s, s.flops, mesh.n_cells, cfg.flow_cycle,
                        s.construction_s, s.solving_s, s.dnn_s, s.other_s)
        rows.append({"step": s.step, "dnn_s": s.dnn_s, "construction_s": s.construction_s,
                     "solving_s": s.solving_s, "other_s": s.other_s, "total_s": s.total_s,
                     "flops": s.flops, "phases_consistent": rep.phases_consistent(),
                     "time_to_solution": time_to_solution(rep)})
    _emit(cfg, rows)
    return 0


def cmd_scaling(cfg: RunConfig) -> int:
    threads = sorted(int(t) for t in cfg.thread_list)
    base = _mesh(cfg)
    rows, ref = [], None
    for t in threads:
        if cfg.scaling == "weak":
            # cells per thread held fixed by stretching the mesh along x
            nx, ny, nz = (int(n) for n in cfg.mesh)
            mesh = build_box_mesh(nx * t // threads[0], ny, nz, lengths=tuple(cfg.lengths))
        else:
            mesh = base
        _, _, steps, _ = _simulate(cfg, threads=t, mesh=mesh)
        loop = float(np.median([s.total_s for s in steps])) if steps else 0.0
        if ref is None:
            ref = (t, loop)
        t0, l0 = ref
        eff = l0 / loop if cfg.scaling == "weak" else (l0 * t0) / (loop * t)
        rows.append({"mode": cfg.scaling, "threads": t, "dof": mesh.n_cells, "loop_time_s": loop,
                     "efficiency_pct": 100.0 * eff})
    _emit(cfg, rows)
    return 0


def cmd_infer_bench(cfg: RunConfig) -> int:
    act = "gelu_exact" if cfg.activation == "exact" else "gelu_table"
    if cfg.model:
        model = load_model(cfg.model, activation=act)
    else:
        model = random_model(cfg.model_dims, seed=cfg.seed, activation=act)
    rng = np.random.default_rng(cfg.seed)
    x = (model.mean + model.std * rng.standard_normal((cfg.batch, model.layer_dims[0]))).astype(np.float32)
    times, flops = [], 0
    for _ in range(cfg.repeat):
        t0 = time.perf_counter()
        res = infer(model, x, precision=cfg.precision, activation=act)
        times.append(time.perf_counter() - t0)
        flops = res.flops
    best = min(times)
    _emit(cfg, [{"dims": "x".join(map(str, model.layer_dims)), "batch": cfg.batch, "precision": cfg.precision,
                 "activation": cfg.activation, "flops": flops, "best_s": best,
                 "gflops": flops / best / 1e9 if best > 0 else 0.0}])
    return 0


def cmd_io_bench(cfg: RunConfig) -> int:
    P = cfg.ranks
    rng = np.random.default_rng(cfg.seed)
    payloads = [rng.integers(0, 256, cfg.payload_bytes, dtype=np.uint8) for _ in range(P)]
    strategy = {"master": "master_scatter", "parallel": "parallel", "grouped": "grouped"}[cfg.io_strategy]
    groups = None
    if cfg.group_size is not None:
        groups = -(-P // cfg.group_size)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "bench.dfc")
        mio.write_collated(path, payloads)
        idx = mio.build_index(path)
        t0 = time.perf_counter()
        res = mio.read_strategy(path, idx, P, strategy, groups=groups, open_latency_s=cfg.open_latency_ms / 1e3)
        dt = time.perf_counter() - t0
    ok = all(res.payloads[r] == payloads[r].tobytes() for r in range(P))
    if not ok:
        raise RuntimeError("payload mismatch after read")
    st = res.stats
    _emit(cfg, [{"ranks": P, "strategy": strategy, "opens": st.opens, "peak_concurrent_opens": st.peak_concurrent_opens,
                 "bytes_read": st.bytes_read, "scatter_bytes": st.scatter_bytes, "seconds": dt}])
    return 0


COMMANDS = {
    "generate": cmd_generate, "partition": cmd_partition, "solve": cmd_solve, "simulate": cmd_simulate,
    "infer-bench": cmd_infer_bench, "io-bench": cmd_io_bench, "breakdown": cmd_breakdown,
    "scaling": cmd_scaling,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",")]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcfv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its keys")
    common.add_argument("--mesh", type=_ints, help="cells per axis, e.g. 16,16,16")
    common.add_argument("--mesh-dir", dest="mesh_dir", help="read the mesh from a directory instead")
    common.add_argument("--refine", type=int, help="uniform refinement levels (x8 cells each)")
    common.add_argument("--ranks", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--output")
    common.add_argument("--report", help="write the CSV report here")
    flow = _Parser(add_help=False)
    flow.add_argument("--steps", type=int)
    flow.add_argument("--dt", type=float)
    flow.add_argument("--velocity", type=_floats, help="ux,uy,uz")
    flow.add_argument("--diffusivity", type=float)
    flow.add_argument("--model")
    flow.add_argument("--precision", choices=["fp32", "mixed_fp16"])
    flow.add_argument("--no-nn", dest="use_nn", action="store_const", const=False)
    flow.add_argument("--flow-cycle", dest="flow_cycle", type=float)

    sub.add_parser("generate", parents=[common], help="write a box mesh and a collated field")
    sub.add_parser("partition", parents=[common], help="two-level decomposition and statistics")
    s = sub.add_parser("solve", parents=[common], help="PCG solve of a Poisson problem")
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--precond", "--preconditioner", dest="preconditioner", choices=["none", "diagonal", "gs"])
    s.add_argument("--gs-sweeps", dest="gs_sweeps", type=int, help="symmetric sweeps per gs application")
    sub.add_parser("simulate", parents=[common, flow], help="implicit transport steps with phase timings")
    sub.add_parser("breakdown", parents=[common, flow], help="per-phase breakdown CSV")
    s = sub.add_parser("scaling", parents=[common, flow], help="strong or weak thread scaling CSV")
    s.add_argument("--thread-list", dest="thread_list", type=_ints)
    s.add_argument("--mode", dest="scaling", choices=["strong", "weak"])
    s = sub.add_parser("infer-bench", parents=[common], help="MLP inference throughput")
    s.add_argument("--model")
    s.add_argument("--model-dims", dest="model_dims", type=_ints)
    s.add_argument("--batch", type=int)
    s.add_argument("--precision", choices=["fp32", "mixed_fp16"])
    s.add_argument("--activation", choices=["exact", "table"])
    s.add_argument("--repeat", type=int)
    s = sub.add_parser("io-bench", parents=[common], help="collated read strategies")
    s.add_argument("--strategy", dest="io_strategy", choices=["master", "parallel", "grouped"])
    s.add_argument("--group-size", dest="group_size", type=int, help="ranks per group")
    s.add_argument("--inject-open-latency-ms", dest="open_latency_ms", type=float)
    s.add_argument("--payload-bytes", dest="payload_bytes", type=int)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = make_config(args)
    except (UsageError, TypeError) as e:
        print(f"mcfv: {e}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg)
    except Exception as e:  # runtime failures map to exit code 2
        print(f"mcfv {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
