"""Collated multi-rank binary files, byte-offset index sidecars and emulated parallel reads.

Collated layout (little-endian)::

    "DFCOLL01" | version u32 | rank_count u32 | name_len u32 | name | dtype u8 | count u64[P]
    | payload rank 0 | payload rank 1 | ...

Index sidecar (``<file>.idx``)::

    "DFIDX001" | rank_count u32 | (offset u64, length u64)[P]

Ranks are emulated by worker threads. A read strategy decides which ranks
open the file and how bytes reach the others; instrumentation counts opens,
the peak number of simultaneously open handles and bytes moved.
"""
from __future__ import annotations

import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mesh import BoundaryPatch, UnstructuredMesh, refine_uniform, DEFAULT_MAX_CELLS
from .partition import TwoLevelPartition, two_level_decompose

COLL_MAGIC = b"DFCOLL01"
IDX_MAGIC = b"DFIDX001"
VERSION = 1

DTYPE_CODES = {
    0: np.dtype("u1"), 1: np.dtype("<i4"), 2: np.dtype("<i8"), 3: np.dtype("<f4"),
    4: np.dtype("<f8"), 5: np.dtype("<u4"), 6: np.dtype("<u8"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}

STRATEGIES = ("master_scatter", "parallel", "grouped")


class CollatedFormatError(ValueError):
    pass


def _code_for(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    if dt not in _CODE_OF:
        raise CollatedFormatError(f"unsupported payload dtype {dtype}")
    return _CODE_OF[dt]


# -- collated files ---------------------------------------------------------------

@dataclass(frozen=True)
class CollatedHeader:
    version: int
    rank_count: int
    name: str
    dtype: np.dtype
    counts: tuple[int, ...]
    header_size: int

    def lengths(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64) * self.dtype.itemsize

    def offsets(self) -> np.ndarray:
        return self.header_size + np.concatenate([[0], np.cumsum(self.lengths())[:-1]]).astype(np.int64)

    @property
    def file_size(self) -> int:
        return self.header_size + int(self.lengths().sum())


def write_collated(path: str | os.PathLike, payloads: Sequence, name: str = "data") -> None:
    """Write per-rank arrays (same dtype) or bytes into one collated file.

    Each rank needs a non-empty payload so index offsets stay strictly increasing.
    """
    if len(payloads) < 1:
        raise CollatedFormatError("need at least one rank payload")
    arrays = [np.frombuffer(p, dtype="u1") if isinstance(p, (bytes, bytearray, memoryview))
              else np.ascontiguousarray(p).ravel() for p in payloads]
    dt = arrays[0].dtype
    code = _code_for(dt)
    for r, a in enumerate(arrays):
        if a.dtype != dt:
            raise CollatedFormatError(f"rank {r} payload dtype {a.dtype} differs from {dt}")
        if a.size == 0:
            raise CollatedFormatError(f"rank {r} payload is empty")
    wdt = DTYPE_CODES[code]
    nb = name.encode()
    head = (COLL_MAGIC + struct.pack("<III", VERSION, len(arrays), len(nb)) + nb
            + struct.pack("<B", code) + np.asarray([a.size for a in arrays], dtype="<u8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            for a in arrays:
                fh.write(a.astype(wdt, copy=False).tobytes())
    except OSError as e:
        raise OSError(f"cannot write collated file {path}: {e}") from e


def _parse_header(data: bytes, path) -> CollatedHeader:
    if len(data) < 20 or data[:8] != COLL_MAGIC:
        raise CollatedFormatError(f"{path}: bad collated magic")
    version, p, nlen = struct.unpack_from("<III", data, 8)
    if version != VERSION:
        raise CollatedFormatError(f"{path}: unsupported version {version}")
    off = 20
    end = off + nlen + 1 + 8 * p
    if p < 1 or len(data) < end:
        raise CollatedFormatError(f"{path}: truncated header")
    name = data[off:off + nlen].decode()
    code = data[off + nlen]
    if code not in DTYPE_CODES:
        raise CollatedFormatError(f"{path}: unknown dtype code {code}")
    counts = tuple(int(c) for c in np.frombuffer(data, "<u8", p, off + nlen + 1))
    return CollatedHeader(version, p, name, DTYPE_CODES[code], counts, end)


def read_header(path: str | os.PathLike) -> CollatedHeader:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise CollatedFormatError(f"{path}: truncated header")
        p, nlen = struct.unpack_from("<II", head, 12)
        head += fh.read(nlen + 1 + 8 * p)
    hdr = _parse_header(head, path)
    size = os.path.getsize(path)
    if size != hdr.file_size:
        raise CollatedFormatError(f"{path}: size {size} does not match header ({hdr.file_size})")
    return hdr


def read_all(path: str | os.PathLike) -> list[np.ndarray]:
    """Every rank's payload as a typed array."""
    hdr = read_header(path)
    data = Path(path).read_bytes()
    return [np.frombuffer(data, hdr.dtype, c, o).copy()
            for c, o in zip(hdr.counts, hdr.offsets())]


# -- index sidecar ----------------------------------------------------------------

@dataclass(frozen=True)
class IndexSidecar:
    offsets: np.ndarray
    lengths: np.ndarray

    @property
    def rank_count(self) -> int:
        return len(self.offsets)

    def to_bytes(self) -> bytes:
        rec = np.empty((self.rank_count, 2), dtype="<u8")
        rec[:, 0] = self.offsets
        rec[:, 1] = self.lengths
        return IDX_MAGIC + struct.pack("<I", self.rank_count) + rec.tobytes()

    def validate(self, file_size: int) -> None:
        if np.any(np.diff(self.offsets) <= 0):
            raise CollatedFormatError("index offsets are not strictly increasing")
        if np.any(self.offsets + self.lengths > file_size):
            raise CollatedFormatError("index extent runs past the end of the file")


def index_path(collated_path: str | os.PathLike) -> Path:
    return Path(str(collated_path) + ".idx")


def build_index(collated_path: str | os.PathLike) -> IndexSidecar:
    """Compute rank extents from the header and write them to ``<file>.idx``."""
    hdr = read_header(collated_path)
    idx = IndexSidecar(hdr.offsets(), hdr.lengths())
    idx.validate(hdr.file_size)
    index_path(collated_path).write_bytes(idx.to_bytes())
    return idx


def read_index(path: str | os.PathLike) -> IndexSidecar:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != IDX_MAGIC:
        raise CollatedFormatError(f"{path}: bad index magic")
    (p,) = struct.unpack_from("<I", data, 8)
    if len(data) != 12 + 16 * p:
        raise CollatedFormatError(f"{path}: index has {len(data)} bytes, expected {12 + 16 * p}")
    rec = np.frombuffer(data, "<u8", 2 * p, 12).reshape(p, 2).astype(np.int64)
    return IndexSidecar(rec[:, 0].copy(), rec[:, 1].copy())


# -- read strategies ---------------------------------------------------------------

@dataclass
class IoStats:
    opens: int = 0
    peak_concurrent_opens: int = 0
    bytes_read: int = 0
    read_requests: int = 0
    scatter_bytes: int = 0
    leader_bytes: dict[int, int] = field(default_factory=dict)


class _Instrument:
    def __init__(self, open_latency_s: float):
        self.stats = IoStats()
        self.lock = threading.Lock()
        self.active = 0
        self.latency = open_latency_s

    def open(self, path):
        if self.latency > 0:
            time.sleep(self.latency)
        fh = open(path, "rb")
        with self.lock:
            self.stats.opens += 1
            self.active += 1
            self.stats.peak_concurrent_opens = max(self.stats.peak_concurrent_opens, self.active)
        return fh

    def close(self, fh):
        fh.close()
        with self.lock:
            self.active -= 1

    def read(self, fh, offset: int, length: int, path) -> bytes:
        fh.seek(offset)
        buf = fh.read(length)
        if len(buf) != length:
            raise CollatedFormatError(f"{path}: short read at offset {offset} ({len(buf)} of {length} bytes)")
        with self.lock:
            self.stats.bytes_read += length
            self.stats.read_requests += 1
        return buf

    def scatter(self, leader: int, nbytes: int, own: int):
        with self.lock:
            self.stats.scatter_bytes += nbytes - own
            self.stats.leader_bytes[leader] = self.stats.leader_bytes.get(leader, 0) + nbytes


def default_groups(n_ranks: int) -> int:
    return max(1, int(round(math.sqrt(n_ranks))))


def group_ranks(n_ranks: int, n_groups: int) -> list[np.ndarray]:
    """Contiguous rank groups; the first rank of each group is its leader."""
    return np.array_split(np.arange(n_ranks), n_groups)


@dataclass
class ReadResult:
    payloads: list[bytes]
    stats: IoStats


def read_strategy(path: str | os.PathLike, index: IndexSidecar, n_ranks: int, strategy: str = "grouped",
                  groups: Optional[int] = None, open_latency_s: float = 0.0) -> ReadResult:
    """Deliver each rank's payload bytes using the chosen strategy.

    ``master_scatter``: rank 0 opens the file, reads everything and scatters.
    ``parallel``: every rank opens the file and reads its own extent.
    ``grouped``: ``groups`` leaders (default round(sqrt(P))) each read their
    group's merged contiguous extent in one request and scatter to members.
    Readers that open in the same round wait for each other before closing,
    so the peak-open counter equals the number of readers.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if index.rank_count != n_ranks:
        raise CollatedFormatError(f"index covers {index.rank_count} ranks, asked for {n_ranks}")
    size = os.path.getsize(path)
    index.validate(size)
    hdr = read_header(path)
    if not (np.array_equal(hdr.offsets(), index.offsets) and np.array_equal(hdr.lengths(), index.lengths)):
        raise CollatedFormatError(f"{path}: index does not match the file header")
    if strategy == "master_scatter":
        grp = [np.arange(n_ranks)]
    elif strategy == "parallel":
        grp = [np.array([r]) for r in range(n_ranks)]
    else:
        g = default_groups(n_ranks) if groups is None else int(groups)
        if not 1 <= g <= n_ranks:
            raise ValueError(f"group count must be in [1, {n_ranks}], got {g}")
        grp = group_ranks(n_ranks, g)
    inst = _Instrument(open_latency_s)
    out: list[Optional[bytes]] = [None] * n_ranks
    barrier = threading.Barrier(len(grp))

    def leader(members: np.ndarray):
        lo = int(index.offsets[members[0]])
        hi = int(index.offsets[members[-1]] + index.lengths[members[-1]])
        fh = inst.open(path)
        try:
            buf = inst.read(fh, lo, hi - lo, path)
            barrier.wait()
        finally:
            inst.close(fh)
        for r in members:
            o = int(index.offsets[r]) - lo
            out[r] = buf[o:o + int(index.lengths[r])]
        if len(members) > 1:
            inst.scatter(int(members[0]), hi - lo, int(index.lengths[members[0]]))

    if len(grp) == 1:
        leader(grp[0])
    else:
        with ThreadPoolExecutor(max_workers=len(grp)) as ex:
            list(ex.map(leader, grp))
    return ReadResult(out, inst.stats)


# -- mesh and partition storage --------------------------------------------------------

_MESH_ARRAYS = ("points", "faces", "owner", "neighbour", "cells", "patches", "patch_names")


def _dir_bytes(paths) -> int:
    return sum(os.path.getsize(p) for p in paths)


def write_mesh(directory: str | os.PathLike, mesh: UnstructuredMesh) -> int:
    """Store a mesh as one collated file per array; returns bytes written.

    Arrays that would be empty (e.g. no internal faces) are omitted.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = [mesh.n_cells, len(mesh.patches)]
    for p in mesh.patches:
        meta += [p.start, p.size]
    arrays = {
        "points": mesh.points.astype("<f8"),
        "faces": mesh.faces.astype("<i8"),
        "owner": mesh.owner.astype("<i8"),
        "neighbour": mesh.neighbour.astype("<i8"),
        "cells": mesh.cells.astype("<i8"),
        "patches": np.asarray(meta, dtype="<i8"),
        "patch_names": np.frombuffer("\n".join(mesh.patch_names()).encode() or b"\n", dtype="u1"),
    }
    written = []
    for name, arr in arrays.items():
        path = d / f"{name}.dfc"
        if arr.size == 0:
            if path.exists():
                path.unlink()
            continue
        write_collated(path, [arr], name=name)
        written.append(path)
    return _dir_bytes(written)


def read_mesh(directory: str | os.PathLike) -> tuple[UnstructuredMesh, int]:
    """Load a mesh written by ``write_mesh``; returns (mesh, bytes read)."""
    d = Path(directory)
    if not (d / "points.dfc").exists():
        raise FileNotFoundError(f"{d}: no mesh found (missing points.dfc)")
    got, nbytes = {}, 0
    for name in _MESH_ARRAYS:
        path = d / f"{name}.dfc"
        if path.exists():
            got[name] = read_all(path)[0]
            nbytes += os.path.getsize(path)
    meta = got["patches"]
    n_cells, npatch = int(meta[0]), int(meta[1])
    names = bytes(got["patch_names"]).decode().split("\n") if npatch else []
    patches = tuple(BoundaryPatch(names[i], int(meta[2 + 2 * i]), int(meta[3 + 2 * i])) for i in range(npatch))
    mesh = UnstructuredMesh(got["points"].reshape(-1, 3), got["faces"].reshape(-1, 4), got["owner"],
                            got.get("neighbour", np.zeros(0, dtype=np.int64)), patches,
                            got["cells"].reshape(-1, 8), n_cells)
    return mesh, nbytes


def mesh_bytes_on_disk(directory: str | os.PathLike) -> int:
    d = Path(directory)
    return _dir_bytes(d / f"{n}.dfc" for n in _MESH_ARRAYS if (d / f"{n}.dfc").exists())


PARTITION_DTYPE = np.dtype([("rank", "<u4"), ("thread", "<u4"), ("new_index", "<u8")])


def write_partition(path: str | os.PathLike, partition: TwoLevelPartition) -> None:
    """Flat per-cell records (u32 rank, u32 thread, u64 new index), original cell order."""
    rec = np.empty(partition.n_cells, dtype=PARTITION_DTYPE)
    rec["rank"] = partition.rank_of_cell
    rec["thread"] = partition.thread_of_cell
    rec["new_index"] = partition.permutation
    Path(path).write_bytes(rec.tobytes())


def read_partition(path: str | os.PathLike, n_ranks: int, n_threads: int) -> TwoLevelPartition:
    data = Path(path).read_bytes()
    if len(data) % PARTITION_DTYPE.itemsize:
        raise CollatedFormatError(f"{path}: size is not a whole number of partition records")
    rec = np.frombuffer(data, PARTITION_DTYPE)
    perm = rec["new_index"].astype(np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    part = TwoLevelPartition(n_ranks, n_threads, rec["rank"].astype(np.int64),
                             rec["thread"].astype(np.int64), perm, inv)
    part.validate()
    return part


# -- startup -------------------------------------------------------------------------

@dataclass
class StartupResult:
    mesh: UnstructuredMesh
    partition: TwoLevelPartition
    bytes_read: int
    seconds: float


def startup_with_runtime_refinement(coarse_dir: str | os.PathLike, levels: int, n_ranks: int = 1,
                                    n_threads: int = 1, seed: int = 0,
                                    max_cells: int = DEFAULT_MAX_CELLS) -> StartupResult:
    """Read only the coarse mesh, refine it in memory, then decompose the refined mesh."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    t0 = time.perf_counter()
    coarse, nbytes = read_mesh(coarse_dir)
    mesh = refine_uniform(coarse, levels, max_cells=max_cells)
    part = two_level_decompose(mesh, n_ranks, n_threads, seed=seed)
    return StartupResult(mesh, part, nbytes, time.perf_counter() - t0)


def startup_from_full_mesh(full_dir: str | os.PathLike, n_ranks: int = 1, n_threads: int = 1,
                           seed: int = 0) -> StartupResult:
    """Baseline path: read the already refined mesh from disk, then decompose."""
    t0 = time.perf_counter()
    mesh, nbytes = read_mesh(full_dir)
    part = two_level_decompose(mesh, n_ranks, n_threads, seed=seed)
    return StartupResult(mesh, part, nbytes, time.perf_counter() - t0)
