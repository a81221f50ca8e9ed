import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import decomposed
from mcfv.fvm import (AssemblyError, BoundaryCondition, ScalarField, TouchLog, advance_scalar_transport,
                      assemble_divergence, assemble_laplacian, build_face_schedule, combine,
                      compute_gradient, face_flux_from_velocity)
from mcfv.mesh import build_box_mesh, compute_geometry
from mcfv.nn import MlpModel
from mcfv.sparse import block_csr_from_ldu, pcg_solve


def two_cells():
    m = build_box_mesh(2, 1, 1)
    return m, compute_geometry(m)


def interior_cells(m, geo, n):
    c = geo.cell_centroids
    h = 1.0 / n
    mask = np.all((c > h) & (c < 1 - h), axis=1)
    return np.flatnonzero(mask)


# -- schedule ----------------------------------------------------------------------

def test_schedule_one_thread_all_intra():
    m = build_box_mesh(4, 3, 2)
    s = build_face_schedule(m, np.zeros(m.n_cells, dtype=np.int64))
    assert len(s.inter_faces) == 0
    assert len(s.intra_faces[0]) == m.n_internal_faces
    assert s.intra_fraction == 1.0


def test_schedule_inter_fraction_8cube():
    m, part, geo, s = decomposed((8, 8, 8), 1, 4)
    assert s.inter_fraction <= 0.2


def test_schedule_two_cells_split():
    m, _ = two_cells()
    s = build_face_schedule(m, np.array([0, 1]))
    assert list(s.inter_faces) == [0]
    assert [list(f) for f in s.inter_by_owner] == [[0], []]
    assert [list(f) for f in s.inter_by_neighbour] == [[], [0]]


@given(st.integers(1, 8), st.integers(0, 50))
def test_schedule_invariants(t, seed):
    m = build_box_mesh(5, 4, 3)
    thread = np.random.default_rng(seed).integers(0, t, m.n_cells)
    s = build_face_schedule(m, thread, n_threads=t)
    faces = np.concatenate(list(s.intra_faces) + [s.inter_faces])
    assert np.array_equal(np.sort(faces), np.arange(m.n_internal_faces))
    own, nei = m.owner, m.neighbour
    for name, per_thread in s.phases():
        for k, fl in enumerate(per_thread):
            side = nei[fl] if name == "inter_neighbour" else own[fl]
            assert np.all(thread[side] == k)
        # a phase never has one cell written by two threads
        written = [np.unique(nei[fl] if name == "inter_neighbour" else
                             (np.concatenate([own[fl], nei[fl]]) if name == "intra" else own[fl]))
                   for fl in per_thread]
        allc = np.concatenate(written)
        assert len(allc) == len(np.unique(allc))


def test_schedule_rejects_bad_threads():
    m = build_box_mesh(2, 2, 1)
    with pytest.raises(AssemblyError):
        build_face_schedule(m, np.array([0, 1, 2]))
    with pytest.raises(AssemblyError):
        build_face_schedule(m, np.array([0, 1, 2, 3]), n_threads=2)


# -- laplacian ---------------------------------------------------------------------

def test_laplacian_two_cells():
    m, geo = two_cells()
    for thread in ([0, 0], [0, 1]):
        A, s = assemble_laplacian(m, geo, 1.0, build_face_schedule(m, np.array(thread)))
        np.testing.assert_allclose(A.to_dense(), [[2.0, -2.0], [-2.0, 2.0]], rtol=0, atol=1e-14)
        assert np.all(s == 0)


def test_laplacian_fixed_value_boundary():
    m, geo = two_cells()
    fld = ScalarField(np.zeros(2), {"xmin": BoundaryCondition("fixed_value", 3.0)})
    A, s = assemble_laplacian(m, geo, 1.0, build_face_schedule(m, np.array([0, 1])), fld)
    # half-cell distance 0.25, area 1: c_b = 4
    np.testing.assert_allclose(A.to_dense(), [[6.0, -2.0], [-2.0, 2.0]])
    np.testing.assert_allclose(s, [12.0, 0.0])


def test_laplacian_symmetric():
    m, part, geo, s = decomposed((6, 5, 4), 2, 2)
    A, _ = assemble_laplacian(m, geo, 0.7, s)
    d = A.to_dense()
    assert np.array_equal(d, d.T)


def test_laplacian_thread_count_bitwise():
    base = build_box_mesh(8, 8, 8)
    geo = compute_geometry(base)
    gamma = 1.0 + np.random.default_rng(3).random(base.n_faces)
    ref = None
    for t in (1, 2, 4, 8):
        thread = np.repeat(np.arange(t), base.n_cells // t)
        A, s = assemble_laplacian(base, geo, gamma, build_face_schedule(base, thread))
        if ref is None:
            ref = (A, s)
        else:
            assert np.array_equal(A.diag, ref[0].diag)
            assert np.array_equal(A.upper, ref[0].upper)
            assert np.array_equal(A.lower, ref[0].lower)
            assert np.array_equal(s, ref[1])


def test_laplacian_errors():
    m, geo = two_cells()
    s = build_face_schedule(m, np.zeros(2, dtype=np.int64))
    with pytest.raises(AssemblyError):
        assemble_laplacian(m, geo, 0.0, s)
    with pytest.raises(AssemblyError):
        assemble_laplacian(m, geo, np.ones(3), s)
    with pytest.raises(AssemblyError):
        assemble_laplacian(m, geo, 1.0, s, ScalarField(np.zeros(2), {"nope": BoundaryCondition()}))
    with pytest.raises(AssemblyError):
        BoundaryCondition("robin")


def test_laplacian_coincident_centroids():
    m, geo = two_cells()
    cc = geo.cell_centroids.copy()
    cc[1] = cc[0]
    bad = type(geo)(**{**geo.__dict__, "cell_centroids": cc})
    with pytest.raises(AssemblyError):
        assemble_laplacian(m, bad, 1.0, build_face_schedule(m, np.zeros(2, dtype=np.int64)))


def _mms_error(n):
    m, part, geo, sched = decomposed((n, n, n), 1, 2, mesh=build_box_mesh(n, n, n, lengths=(np.pi,) * 3))
    exact = lambda p: np.sin(p[:, 0]) * np.sin(p[:, 1]) * np.sin(p[:, 2])
    nint = m.n_internal_faces
    bvals = exact(geo.face_centroids[nint:])
    bcs = {}
    for name in m.patch_names():
        p = m.patch(name)
        bcs[name] = BoundaryCondition("fixed_value", bvals[p.start - nint:p.stop - nint])
    A, s = assemble_laplacian(m, geo, 1.0, sched, ScalarField(np.zeros(m.n_cells), bcs))
    rhs = s + geo.cell_volumes * 3.0 * exact(geo.cell_centroids)
    mat, _ = block_csr_from_ldu(A, m, partition=part)
    x = pcg_solve(mat, rhs, tol=1e-12, max_iter=5000).x
    err = x - exact(geo.cell_centroids)
    return np.sqrt(np.sum(geo.cell_volumes * err ** 2))


def test_laplacian_second_order():
    errs = [_mms_error(n) for n in (8, 16, 32)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders >= 1.8) & (orders <= 2.2)), orders


# -- divergence --------------------------------------------------------------------

def test_divergence_zero_flux():
    m, part, geo, s = decomposed((4, 4, 4), 1, 4)
    A, src = assemble_divergence(m, geo, 0.0, "upwind", s)
    assert not A.to_dense().any() and not src.any()


def test_divergence_two_cell_upwind():
    m, geo = two_cells()
    phi = face_flux_from_velocity(geo, (1.0, 0.0, 0.0))
    A, s = assemble_divergence(m, geo, phi, "upwind", build_face_schedule(m, np.array([0, 1])))
    # cell 0: inflow -1 through xmin, outflow +1 with its own value; cell 1 takes cell 0's value
    # in and its own value out through xmax
    np.testing.assert_allclose(A.to_dense(), [[0.0, 0.0], [-1.0, 1.0]])
    assert np.all(s == 0)


def test_divergence_two_cell_linear_fixed_inlet():
    m, geo = two_cells()
    phi = face_flux_from_velocity(geo, (2.0, 0.0, 0.0))
    fld = ScalarField(np.zeros(2), {"xmin": BoundaryCondition("fixed_value", 5.0)})
    A, s = assemble_divergence(m, geo, phi, "linear", build_face_schedule(m, np.array([0, 1])), fld)
    np.testing.assert_allclose(A.to_dense(), [[1.0, 1.0], [-1.0, 1.0]])
    np.testing.assert_allclose(s, [10.0, 0.0])


@pytest.mark.parametrize("scheme", ["upwind", "linear"])
def test_divergence_solenoidal_row_sums(scheme):
    m, part, geo, s = decomposed((6, 6, 6), 2, 2)
    phi = face_flux_from_velocity(geo, (0.3, -1.2, 0.7))
    A, _ = assemble_divergence(m, geo, phi, scheme, s)
    rows = A.to_dense().sum(axis=1)
    assert np.max(np.abs(rows)) <= 1e-13 * np.max(np.abs(phi))


@given(st.integers(0, 100), st.sampled_from(["upwind", "linear"]))
def test_divergence_row_sums_equal_imbalance(seed, scheme):
    m = build_box_mesh(4, 3, 3)
    geo = compute_geometry(m)
    phi = np.random.default_rng(seed).standard_normal(m.n_faces)
    A, _ = assemble_divergence(m, geo, phi, scheme, build_face_schedule(m, np.arange(m.n_cells) % 3))
    net = np.bincount(m.owner, phi, m.n_cells) - np.bincount(m.neighbour, phi[:m.n_internal_faces], m.n_cells)
    np.testing.assert_allclose(A.to_dense().sum(axis=1), net, atol=1e-12)


def test_divergence_errors():
    m, geo = two_cells()
    s = build_face_schedule(m, np.zeros(2, dtype=np.int64))
    with pytest.raises(AssemblyError):
        assemble_divergence(m, geo, 0.0, "quick", s)
    phi = np.zeros(m.n_faces)
    phi[0] = np.inf
    with pytest.raises(AssemblyError):
        assemble_divergence(m, geo, phi, "upwind", s)


# -- gradient ----------------------------------------------------------------------

def test_gradient_constant():
    m, part, geo, s = decomposed((5, 5, 5), 1, 3)
    g = compute_gradient(m, geo, ScalarField(np.full(m.n_cells, 2.5)), s)
    assert np.max(np.abs(g)) <= 1e-12


@pytest.mark.parametrize("coef", [(1.0, 0.0, 0.0), (2.0, 3.0, -1.0)])
def test_gradient_linear_exact(coef):
    m, part, geo, s = decomposed((8, 8, 8), 2, 2)
    psi = geo.cell_centroids @ np.array(coef)
    g = compute_gradient(m, geo, ScalarField(psi), s)
    inner = interior_cells(m, geo, 8)
    assert len(inner) == 6 ** 3
    np.testing.assert_allclose(g[inner], np.tile(coef, (len(inner), 1)), rtol=0, atol=1e-12)


def test_gradient_fixed_boundary_linear_everywhere():
    m, part, geo, s = decomposed((4, 4, 4), 1, 2)
    f = lambda p: 2 * p[:, 0] - p[:, 2]
    nint = m.n_internal_faces
    bv = f(geo.face_centroids[nint:])
    bcs = {n: BoundaryCondition("fixed_value", bv[m.patch(n).start - nint:m.patch(n).stop - nint])
           for n in m.patch_names()}
    g = compute_gradient(m, geo, ScalarField(f(geo.cell_centroids), bcs), s)
    np.testing.assert_allclose(g, np.tile([2.0, 0.0, -1.0], (m.n_cells, 1)), atol=1e-12)


# -- determinism and conflicts ----------------------------------------------------

def _all_operators(m, geo, sched, log=None):
    psi = np.sin(np.arange(m.n_cells, dtype=float))
    phi = face_flux_from_velocity(geo, (1.0, 0.5, -0.25))
    lap = assemble_laplacian(m, geo, 1.3, sched, log=log)
    div = assemble_divergence(m, geo, phi, "linear", sched, log=log)
    grad = compute_gradient(m, geo, ScalarField(psi), sched, log=log)
    return lap[0].to_dense(), div[0].to_dense(), grad


def test_all_operators_thread_independent():
    base = build_box_mesh(6, 6, 4)
    geo = compute_geometry(base)
    ref = _all_operators(base, geo, build_face_schedule(base, np.zeros(base.n_cells, dtype=np.int64)))
    for t in (2, 3, 8):
        thread = np.arange(base.n_cells) * t // base.n_cells
        got = _all_operators(base, geo, build_face_schedule(base, thread))
        for a, b in zip(ref, got):
            assert np.array_equal(a, b)


def test_assembly_conflict_free():
    m, part, geo, s = decomposed((8, 8, 8), 2, 4)
    log = TouchLog()
    _all_operators(m, geo, s, log)
    assert set(log.writes) >= {"intra", "inter_owner", "inter_neighbour", "reduce"}
    assert log.conflicts() == 0


def test_touchlog_detects_conflict():
    log = TouchLog()
    log.record("p", 0, np.array([1, 2]))
    log.record("p", 1, np.array([2, 3]))
    log.record("q", 1, np.array([2]))
    assert log.conflicts() == 1


def test_combine_adds():
    m, geo = two_cells()
    s = build_face_schedule(m, np.array([0, 1]))
    lap = assemble_laplacian(m, geo, 1.0, s)
    phi = face_flux_from_velocity(geo, (1.0, 0.0, 0.0))
    div = assemble_divergence(m, geo, phi, "upwind", s)
    A, src = combine(lap, div, diag_extra=np.array([1.0, 1.0]))
    np.testing.assert_allclose(A.to_dense(), lap[0].to_dense() + div[0].to_dense() + np.eye(2))


# -- transport ---------------------------------------------------------------------

def test_transport_steady_uniform():
    m, part, geo, s = decomposed((6, 6, 6), 1, 4)
    state = ScalarField(np.full(m.n_cells, 1.75))
    out, steps = advance_scalar_transport(m, geo, state, 0.1, (0.0, 0.0, 0.0), 0.5, s, steps=10)
    assert len(steps) == 10
    assert np.max(np.abs(out.values - 1.75)) <= 1e-12


def _hot_spot(m, geo):
    c = geo.cell_centroids
    return np.exp(-40 * np.sum((c - 0.5) ** 2, axis=1))


def test_transport_diffusion_bounded_and_conservative():
    m, part, geo, s = decomposed((8, 8, 8), 2, 2)
    psi0 = _hot_spot(m, geo)
    out, _ = advance_scalar_transport(m, geo, ScalarField(psi0), 0.01, (0, 0, 0), 0.2, s, steps=5)
    assert out.values.min() >= psi0.min() - 1e-12
    assert out.values.max() <= psi0.max() + 1e-12
    total0 = np.sum(psi0 * geo.cell_volumes)
    assert abs(np.sum(out.values * geo.cell_volumes) - total0) <= 1e-10 * total0


def test_transport_constant_source_growth():
    m, part, geo, s = decomposed((6, 6, 6), 1, 2)
    s0 = 0.25
    stub = MlpModel((1, 1), (np.zeros((1, 1)),), (np.array([s0]),), np.zeros(1), np.ones(1))
    psi0 = _hot_spot(m, geo)
    state = ScalarField(psi0)
    dt = 0.02
    vtot = geo.cell_volumes.sum()
    total = np.sum(psi0 * geo.cell_volumes)
    for _ in range(3):
        state, steps = advance_scalar_transport(m, geo, state, dt, (0, 0, 0), 0.1, s, steps=1,
                                                source_model=stub)
        new_total = np.sum(state.values * geo.cell_volumes)
        assert abs((new_total - total) - s0 * vtot * dt) <= 1e-10 * max(1.0, total)
        assert steps[0].dnn_s > 0 and steps[0].flops >= 2 * m.n_cells
        total = new_total


def test_transport_advection_upwind_bounded():
    m, part, geo, s = decomposed((8, 4, 4), 1, 2)
    psi0 = _hot_spot(m, geo)
    out, steps = advance_scalar_transport(m, geo, ScalarField(psi0), 0.01, (1.0, 0.0, 0.0), 0.01, s,
                                          steps=3)
    assert all(st_.residual <= 1e-12 for st_ in steps)
    assert out.values.min() >= -1e-12 and out.values.max() <= psi0.max() + 1e-12


def test_transport_timings_and_callback():
    m, part, geo, s = decomposed((4, 4, 4), 1, 2)
    seen = []
    _, steps = advance_scalar_transport(m, geo, ScalarField(np.ones(m.n_cells)), 0.1, (0, 0, 0), 1.0, s,
                                        steps=3, on_step=seen.append)
    assert [r.step for r in steps] == [1, 2, 3] and len(seen) == 3
    for r in steps:
        parts = r.construction_s + r.solving_s + r.dnn_s + r.other_s
        assert parts <= r.total_s * 1.05 + 1e-9


def test_transport_errors():
    m, part, geo, s = decomposed((4, 4, 4), 1, 2)
    st0 = ScalarField(np.zeros(m.n_cells))
    with pytest.raises(AssemblyError):
        advance_scalar_transport(m, geo, st0, 0.0, (0, 0, 0), 1.0, s)
    scrambled = build_face_schedule(m, np.arange(m.n_cells) % 2)
    with pytest.raises(AssemblyError):
        advance_scalar_transport(m, geo, st0, 0.1, (0, 0, 0), 1.0, scrambled)
