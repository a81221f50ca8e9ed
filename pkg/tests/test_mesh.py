import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcfv.graph import bandwidth
from mcfv.mesh import (MeshError, build_box_mesh, closure_residual, compute_geometry, mesh_to_graph,
                       meshes_equivalent, perturb_interior_points, refine_uniform, refined_cell_count,
                       renumber_mesh)


def brute_force_internal_faces(nx, ny, nz):
    count = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                count += (i + 1 < nx) + (j + 1 < ny) + (k + 1 < nz)
    return count


def test_single_cell_box():
    m = build_box_mesh(1, 1, 1)
    assert m.n_cells == 1
    assert m.n_internal_faces == 0
    assert m.n_boundary_faces == 6


def test_two_cell_box_adjacency():
    m = build_box_mesh(2, 1, 1)
    assert m.n_cells == 2
    assert m.n_internal_faces == 1
    assert m.owner[0] == 0 and m.neighbour[0] == 1


def test_4cube_internal_faces():
    m = build_box_mesh(4, 4, 4)
    assert m.n_cells == 64
    assert m.n_internal_faces == 144 == 3 * 16 * 3 == brute_force_internal_faces(4, 4, 4)


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
def test_box_rejects_bad_dims(dims):
    with pytest.raises(MeshError):
        build_box_mesh(*dims)


def test_box_rejects_oversized():
    with pytest.raises(MeshError):
        build_box_mesh(10**6, 10**6, 10**6)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_box_invariants(nx, ny, nz):
    m = build_box_mesh(nx, ny, nz)
    m.validate()
    assert m.n_cells == nx * ny * nz
    assert m.n_internal_faces == brute_force_internal_faces(nx, ny, nz)
    assert np.all(m.owner[:m.n_internal_faces] < m.neighbour)
    # patches cover the boundary faces contiguously
    start = m.n_internal_faces
    for p in m.patches:
        assert p.start == start
        start = p.stop
    assert start == m.n_faces


def test_unit_cube_geometry():
    g = compute_geometry(build_box_mesh(1, 1, 1))
    assert g.cell_volumes[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(g.face_area_magnitudes, 1.0, atol=1e-15)


def test_2cube_volumes():
    g = compute_geometry(build_box_mesh(2, 2, 2))
    np.testing.assert_allclose(g.cell_volumes, 0.125, rtol=1e-14)


def test_face_areas_point_owner_to_neighbour():
    m = build_box_mesh(2, 1, 1)
    g = compute_geometry(m)
    d = g.cell_centroids[m.neighbour[0]] - g.cell_centroids[m.owner[0]]
    assert np.dot(g.face_areas[0], d) > 0


@pytest.mark.parametrize("seed", range(3))
def test_perturbed_closure(seed):
    m = perturb_interior_points(build_box_mesh(5, 5, 5), 0.1, 0.2, seed=seed)
    g = compute_geometry(m)
    assert np.all(g.cell_volumes > 0)
    assert closure_residual(m, g).max() <= 1e-12


def test_degenerate_cell_reported():
    m = build_box_mesh(2, 1, 1)
    pts = m.points.copy()
    pts[:, 0] = np.minimum(pts[:, 0], 0.5)  # flatten the second cell
    from mcfv.mesh import UnstructuredMesh
    flat = UnstructuredMesh(pts, m.faces, m.owner, m.neighbour, m.patches, m.cells, m.n_cells)
    with pytest.raises(MeshError, match="1"):
        compute_geometry(flat)


def test_refine_levels_zero_identity():
    m = build_box_mesh(3, 2, 2)
    r = refine_uniform(m, 0)
    assert np.array_equal(r.faces, m.faces) and np.array_equal(r.points, m.points)


def test_refine_2cube():
    m = build_box_mesh(2, 2, 2)
    r = refine_uniform(m, 1)
    assert r.n_cells == 64
    r.validate()
    g = compute_geometry(r)
    assert g.cell_volumes.sum() == pytest.approx(1.0, rel=1e-12)
    assert closure_residual(r, g).max() <= 1e-12


def test_refine_count_arithmetic():
    assert refined_cell_count(18_874_368, 5) == 618_475_290_624


def test_refine_refuses_budget():
    m = build_box_mesh(2, 2, 2)
    with pytest.raises(MeshError, match="budget"):
        refine_uniform(m, 3, max_cells=1000)


def test_refine_overflow_rejected():
    with pytest.raises(MeshError):
        refined_cell_count(10**9, 20)


def test_refine_matches_direct_box():
    # dyadic spacings keep midpoints exact, so the comparison can be exact
    assert meshes_equivalent(refine_uniform(build_box_mesh(2, 4, 2), 2), build_box_mesh(8, 16, 8))


def test_refine_non_dyadic_box_close_to_direct():
    from mcfv.mesh import canonical_form
    a, _ = canonical_form(refine_uniform(build_box_mesh(1, 3, 1), 1))
    b, _ = canonical_form(build_box_mesh(2, 6, 2))
    np.testing.assert_allclose(a, b, atol=1e-15)


@given(st.integers(0, 2), st.integers(0, 2))
def test_refinement_multiplicative(a, b):
    m = build_box_mesh(1, 2, 1)
    two_step = refine_uniform(refine_uniform(m, a), b)
    assert two_step.n_cells == refine_uniform(m, a + b).n_cells == m.n_cells * 8 ** (a + b)
    assert np.all(two_step.owner[:two_step.n_internal_faces] < two_step.neighbour)


def test_refine_volume_conserved_on_stretched_box():
    m = build_box_mesh(2, 3, 1, lengths=(2.0, 0.5, 3.0))
    r = refine_uniform(m, 2)
    assert compute_geometry(r).cell_volumes.sum() == pytest.approx(3.0, rel=1e-12)
    assert r.patch_names() == m.patch_names()


def test_graph_small_cases():
    g = mesh_to_graph(build_box_mesh(2, 1, 1))
    assert g.n_nodes == 2 and g.n_edges == 1
    g = mesh_to_graph(build_box_mesh(1, 1, 1))
    assert g.n_nodes == 1 and g.n_edges == 0


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_graph_edge_count(n):
    g = mesh_to_graph(build_box_mesh(n, n, n))
    assert g.n_edges == 3 * n * n * (n - 1) == brute_force_internal_faces(n, n, n)
    u, v = g.edges()
    assert np.all(u != v)
    assert len(set(zip(u.tolist(), v.tolist()))) == len(u)
    assert g.degree().max() <= 6


def test_renumber_preserves_mesh(rng):
    m = build_box_mesh(3, 3, 2)
    perm = rng.permutation(m.n_cells)
    r = renumber_mesh(m, perm)
    r.validate()
    assert meshes_equivalent(m, r)
    assert np.all(r.owner[:r.n_internal_faces] < r.neighbour)
    assert bandwidth(mesh_to_graph(r)) >= 1
