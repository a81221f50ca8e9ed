import numpy as np
import pytest
from hypothesis import settings

from mcfv.fvm import BoundaryCondition, ScalarField, assemble_laplacian, build_face_schedule
from mcfv.mesh import build_box_mesh, compute_geometry, renumber_mesh
from mcfv.partition import two_level_decompose
from mcfv.sparse import LduMatrix

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


def decomposed(n, ranks=1, threads=1, seed=0, mesh=None):
    """Renumbered box mesh with its partition (in the new numbering), geometry and schedule."""
    mesh = build_box_mesh(*n) if mesh is None else mesh
    part = two_level_decompose(mesh, ranks, threads, seed=seed)
    mesh = renumber_mesh(mesh, part.permutation)
    part = part.renumbered()
    return mesh, part, compute_geometry(mesh), build_face_schedule(mesh, part)


def dirichlet_laplacian(mesh, geo, sched, gamma=1.0):
    bcs = {p: BoundaryCondition("fixed_value", 0.0) for p in mesh.patch_names()}
    return assemble_laplacian(mesh, geo, gamma, sched, ScalarField(np.zeros(mesh.n_cells), bcs))


def random_ldu(mesh, rng, dominant=False):
    nf = mesh.n_internal_faces
    lower = rng.standard_normal(nf)
    upper = rng.standard_normal(nf)
    diag = rng.standard_normal(mesh.n_cells)
    if dominant:
        diag = 7.0 + rng.random(mesh.n_cells)
    return LduMatrix(mesh.n_cells, diag, lower, upper, mesh.owner[:nf], mesh.neighbour)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
