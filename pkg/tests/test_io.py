import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcfv.io import (CollatedFormatError, IndexSidecar, build_index, default_groups, group_ranks,
                     index_path, mesh_bytes_on_disk, read_all, read_header, read_index, read_mesh,
                     read_partition, read_strategy, startup_from_full_mesh,
                     startup_with_runtime_refinement, write_collated, write_mesh, write_partition)
from mcfv.mesh import MeshError, build_box_mesh, meshes_equivalent, refine_uniform, refined_cell_count
from mcfv.partition import two_level_decompose

STRATS = [("master_scatter", None), ("parallel", None), ("grouped", None)]


def random_payloads(rng, p, lo=1, hi=400):
    return [rng.integers(0, 256, rng.integers(lo, hi), dtype=np.uint8).tobytes() for _ in range(p)]


def header_len(p, name="data"):
    return 8 + 12 + len(name) + 1 + 8 * p


# -- collated files --------------------------------------------------------------

def test_single_rank_layout(tmp_path):
    f = tmp_path / "a.dfc"
    write_collated(f, [b"abcdefgh"])
    data = f.read_bytes()
    assert len(data) == header_len(1) + 8
    assert data[:8] == b"DFCOLL01"
    assert struct.unpack_from("<III", data, 8) == (1, 1, 4)
    assert data[20:24] == b"data" and data[24] == 0
    assert struct.unpack_from("<Q", data, 25) == (8,)
    assert data[-8:] == b"abcdefgh"


def test_typed_roundtrip(tmp_path):
    f = tmp_path / "a.dfc"
    arrays = [np.arange(5, dtype=np.float64), np.array([-1.5, 2.0], dtype=np.float64)]
    write_collated(f, arrays, name="values")
    hdr = read_header(f)
    assert hdr.name == "values" and hdr.counts == (5, 2) and hdr.dtype == np.dtype("<f8")
    back = read_all(f)
    for a, b in zip(arrays, back):
        assert np.array_equal(a, b)


@given(st.lists(st.binary(min_size=1, max_size=300), min_size=1, max_size=12))
def test_roundtrip_bytes(tmp_path_factory, payloads):
    f = tmp_path_factory.mktemp("c") / "x.dfc"
    write_collated(f, payloads)
    assert [a.tobytes() for a in read_all(f)] == payloads
    assert f.stat().st_size == header_len(len(payloads)) + sum(map(len, payloads))


def test_write_deterministic(tmp_path):
    pl = random_payloads(np.random.default_rng(0), 5)
    write_collated(tmp_path / "a", pl)
    write_collated(tmp_path / "b", pl)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_write_errors(tmp_path):
    with pytest.raises(CollatedFormatError):
        write_collated(tmp_path / "a", [])
    with pytest.raises(CollatedFormatError):
        write_collated(tmp_path / "a", [b"x", b""])
    with pytest.raises(CollatedFormatError):
        write_collated(tmp_path / "a", [np.zeros(2), np.zeros(2, dtype=np.int32)])
    with pytest.raises(OSError, match="nodir"):
        write_collated(tmp_path / "nodir" / "a", [b"x"])


def test_malformed_headers(tmp_path):
    f = tmp_path / "a.dfc"
    write_collated(f, [b"abc", b"de"])
    good = f.read_bytes()
    for bad in (b"XXCOLL01" + good[8:], good[:8] + struct.pack("<I", 9) + good[12:], good[:-1],
                good + b"z", good[:15]):
        f.write_bytes(bad)
        with pytest.raises(CollatedFormatError):
            build_index(f)


# -- index -------------------------------------------------------------------------

def test_index_unequal_ranks(tmp_path):
    f = tmp_path / "a.dfc"
    pl = [b"a" * 10, b"bb" * 3, b"c" * 100, b"d"]
    write_collated(f, pl)
    idx = build_index(f)
    data = f.read_bytes()
    for r, p in enumerate(pl):
        o, n = int(idx.offsets[r]), int(idx.lengths[r])
        assert data[o:o + n] == p


def test_index_single_rank(tmp_path):
    f = tmp_path / "a.dfc"
    write_collated(f, [b"12345678"])
    idx = build_index(f)
    assert list(idx.offsets) == [header_len(1)] and list(idx.lengths) == [8]


def test_index_sidecar_layout(tmp_path):
    f = tmp_path / "a.dfc"
    write_collated(f, [b"ab", b"cde"])
    build_index(f)
    raw = index_path(f).read_bytes()
    assert raw[:8] == b"DFIDX001"
    assert struct.unpack_from("<I", raw, 8) == (2,)
    h = header_len(2)
    assert struct.unpack_from("<4Q", raw, 12) == (h, 2, h + 2, 3)
    assert len(raw) == 12 + 32


@given(st.lists(st.integers(1, 500), min_size=1, max_size=20), st.integers(0, 1000))
def test_index_covers_payload(tmp_path_factory, sizes, seed):
    rng = np.random.default_rng(seed)
    f = tmp_path_factory.mktemp("i") / "x.dfc"
    pl = [rng.integers(0, 256, n, dtype=np.uint8).tobytes() for n in sizes]
    write_collated(f, pl)
    idx = build_index(f)
    size = f.stat().st_size
    ends = idx.offsets + idx.lengths
    assert np.all(np.diff(idx.offsets) > 0)
    assert np.array_equal(idx.offsets[1:], ends[:-1])
    assert ends[-1] == size
    data = f.read_bytes()
    assert b"".join(data[o:o + n] for o, n in zip(idx.offsets, idx.lengths)) == data[idx.offsets[0]:]


def test_index_regenerated_identical(tmp_path):
    f = tmp_path / "a.dfc"
    write_collated(f, random_payloads(np.random.default_rng(1), 7))
    build_index(f)
    first = index_path(f).read_bytes()
    build_index(f)
    assert index_path(f).read_bytes() == first
    back = read_index(index_path(f))
    assert back.to_bytes() == first


def test_index_validation(tmp_path):
    with pytest.raises(CollatedFormatError):
        IndexSidecar(np.array([10, 10]), np.array([1, 1])).validate(100)
    with pytest.raises(CollatedFormatError):
        IndexSidecar(np.array([10]), np.array([91])).validate(100)
    p = tmp_path / "bad.idx"
    p.write_bytes(b"DFIDX001" + struct.pack("<I", 2) + b"\0" * 16)
    with pytest.raises(CollatedFormatError):
        read_index(p)


# -- strategies ---------------------------------------------------------------------

def _file(tmp_path, p, seed=0):
    f = tmp_path / f"p{p}_{seed}.dfc"
    pl = random_payloads(np.random.default_rng(seed), p)
    write_collated(f, pl)
    return f, pl, build_index(f)


def test_default_groups():
    assert default_groups(16) == 4
    assert default_groups(1) == 1
    assert default_groups(8) == 3
    groups = group_ranks(16, default_groups(16))
    assert [list(g) for g in groups] == [list(range(4 * i, 4 * i + 4)) for i in range(4)]


def test_strategies_equal_p8(tmp_path):
    f, pl, idx = _file(tmp_path, 8)
    outs = [read_strategy(f, idx, 8, "master_scatter").payloads,
            read_strategy(f, idx, 8, "parallel").payloads,
            read_strategy(f, idx, 8, "grouped", 2).payloads,
            read_strategy(f, idx, 8, "grouped", 4).payloads]
    for o in outs:
        assert o == pl


def test_single_rank_degenerates(tmp_path):
    f, pl, idx = _file(tmp_path, 1)
    for s, g in STRATS:
        r = read_strategy(f, idx, 1, s, g)
        assert r.payloads == pl
        assert r.stats.opens == 1 and r.stats.read_requests == 1 and r.stats.scatter_bytes == 0


@given(st.integers(1, 64), st.integers(0, 10 ** 6), st.data())
def test_strategy_equivalence_property(tmp_path_factory, p, seed, data):
    f = tmp_path_factory.mktemp("s") / "x.dfc"
    pl = random_payloads(np.random.default_rng(seed), p, 1, 64)
    write_collated(f, pl)
    idx = build_index(f)
    divisors = [g for g in range(1, p + 1) if p % g == 0]
    g = data.draw(st.sampled_from(divisors))
    assert read_strategy(f, idx, p, "grouped", g).payloads == pl
    assert read_strategy(f, idx, p, "parallel").payloads == pl
    assert read_strategy(f, idx, p, "master_scatter").payloads == pl


def test_concurrent_open_counts(tmp_path):
    f, pl, idx = _file(tmp_path, 16)
    m = read_strategy(f, idx, 16, "master_scatter", open_latency_s=0.005).stats
    p = read_strategy(f, idx, 16, "parallel", open_latency_s=0.005).stats
    g = read_strategy(f, idx, 16, "grouped", open_latency_s=0.005).stats
    assert (m.peak_concurrent_opens, p.peak_concurrent_opens, g.peak_concurrent_opens) == (1, 16, 4)
    assert (m.opens, p.opens, g.opens) == (1, 16, 4)
    assert (m.read_requests, p.read_requests, g.read_requests) == (1, 16, 4)


def test_scatter_volumes(tmp_path):
    f, pl, idx = _file(tmp_path, 16)
    total = sum(map(len, pl))
    m = read_strategy(f, idx, 16, "master_scatter").stats
    assert m.leader_bytes == {0: total}
    assert m.scatter_bytes == total - len(pl[0])
    g = read_strategy(f, idx, 16, "grouped").stats
    assert sorted(g.leader_bytes) == [0, 4, 8, 12]
    for lead in (0, 4, 8, 12):
        assert g.leader_bytes[lead] == sum(len(x) for x in pl[lead:lead + 4])
    assert g.scatter_bytes == total - sum(len(pl[r]) for r in (0, 4, 8, 12))
    p = read_strategy(f, idx, 16, "parallel").stats
    assert p.scatter_bytes == 0 and p.bytes_read == total


def test_strategy_errors(tmp_path):
    f, pl, idx = _file(tmp_path, 4)
    with pytest.raises(ValueError):
        read_strategy(f, idx, 4, "broadcast")
    with pytest.raises(ValueError):
        read_strategy(f, idx, 4, "grouped", 5)
    with pytest.raises(CollatedFormatError):
        read_strategy(f, idx, 3, "parallel")
    shifted = IndexSidecar(idx.offsets + 1, idx.lengths - 1)
    with pytest.raises(CollatedFormatError):
        read_strategy(f, shifted, 4, "parallel")
    f.write_bytes(f.read_bytes()[:-2])
    with pytest.raises(CollatedFormatError):
        read_strategy(f, idx, 4, "parallel")


# -- mesh, partition and startup ---------------------------------------------------

def test_mesh_roundtrip(tmp_path):
    m = build_box_mesh(3, 2, 2)
    n = write_mesh(tmp_path / "m", m)
    back, nread = read_mesh(tmp_path / "m")
    assert meshes_equivalent(m, back)
    assert np.array_equal(back.owner, m.owner) and np.array_equal(back.points, m.points)
    assert n == nread == mesh_bytes_on_disk(tmp_path / "m")


def test_single_cell_mesh_roundtrip(tmp_path):
    m = build_box_mesh(1, 1, 1)
    write_mesh(tmp_path / "m", m)
    back, _ = read_mesh(tmp_path / "m")
    assert back.n_internal_faces == 0 and meshes_equivalent(m, back)


def test_partition_roundtrip(tmp_path):
    m = build_box_mesh(4, 4, 2)
    part = two_level_decompose(m, 2, 2, seed=1)
    write_partition(tmp_path / "p", part)
    back = read_partition(tmp_path / "p", 2, 2)
    assert np.array_equal(back.rank_of_cell, part.rank_of_cell)
    assert np.array_equal(back.thread_of_cell, part.thread_of_cell)
    assert np.array_equal(back.permutation, part.permutation)
    assert (tmp_path / "p").stat().st_size == 16 * m.n_cells


def test_startup_levels_zero_same_as_direct(tmp_path):
    m = build_box_mesh(4, 4, 4)
    write_mesh(tmp_path / "c", m)
    a = startup_with_runtime_refinement(tmp_path / "c", 0, 2, 2, seed=3)
    b = startup_from_full_mesh(tmp_path / "c", 2, 2, seed=3)
    assert a.bytes_read == b.bytes_read
    assert meshes_equivalent(a.mesh, b.mesh)
    assert np.array_equal(a.partition.permutation, b.partition.permutation)


def test_startup_refinement_matches_full(tmp_path):
    coarse = build_box_mesh(8, 8, 8)
    full = refine_uniform(coarse, 2)
    write_mesh(tmp_path / "c", coarse)
    write_mesh(tmp_path / "f", full)
    a = startup_with_runtime_refinement(tmp_path / "c", 2, 1, 2)
    b = startup_from_full_mesh(tmp_path / "f", 1, 2)
    assert meshes_equivalent(a.mesh, b.mesh)
    assert a.mesh.n_cells == 512 * 64
    # payload shrinks by 8^2 (points grow a little faster than cells)
    ratio = a.bytes_read / b.bytes_read
    assert abs(ratio * 64 - 1) <= 0.1


def test_startup_cell_count_budget(tmp_path):
    assert refined_cell_count(18_874_368, 5) == 618_475_290_624
    write_mesh(tmp_path / "c", build_box_mesh(4, 4, 4))
    with pytest.raises(MeshError):
        startup_with_runtime_refinement(tmp_path / "c", 5, max_cells=10 ** 5)
    with pytest.raises(ValueError):
        startup_with_runtime_refinement(tmp_path / "c", -1)
