"""Unstructured hexahedral meshes in owner/neighbour face addressing.

Cells are hexahedra with VTK corner ordering. Faces are quads; internal
faces come first, ordered by (owner, neighbour) with ``owner < neighbour``,
followed by boundary faces grouped into named patches.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import CellGraph, from_edge_list

DEFAULT_MAX_CELLS = 50_000_000
INDEX_LIMIT = 2**63 - 1

# Local faces of a VTK hexahedron, each ordered so the right-hand normal points outward.
HEX_FACES = np.array([
    [0, 4, 7, 3],  # x-
    [1, 2, 6, 5],  # x+
    [0, 1, 5, 4],  # y-
    [3, 7, 6, 2],  # y+
    [0, 3, 2, 1],  # z-
    [4, 5, 6, 7],  # z+
])
HEX_VERTEX_PARAMS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])
BOX_PATCHES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryPatch:
    name: str
    start: int
    size: int

    @property
    def stop(self) -> int:
        return self.start + self.size


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UnstructuredMesh:
    """Immutable face-addressed mesh.

    ``faces`` has shape (n_faces, 4). ``neighbour`` covers the internal
    faces only; ``owner`` covers all faces. ``cells`` holds the hexahedral
    corner connectivity, needed for refinement.
    """

    points: np.ndarray
    faces: np.ndarray
    owner: np.ndarray
    neighbour: np.ndarray
    patches: tuple[BoundaryPatch, ...]
    cells: np.ndarray
    n_cells: int

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, np.float64))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        object.__setattr__(self, "owner", _frozen(self.owner, np.int64))
        object.__setattr__(self, "neighbour", _frozen(self.neighbour, np.int64))
        object.__setattr__(self, "cells", _frozen(self.cells, np.int64))
        object.__setattr__(self, "patches", tuple(self.patches))

    @property
    def n_faces(self) -> int:
        return len(self.owner)

    @property
    def n_internal_faces(self) -> int:
        return len(self.neighbour)

    @property
    def n_boundary_faces(self) -> int:
        return self.n_faces - self.n_internal_faces

    @property
    def n_points(self) -> int:
        return len(self.points)

    def patch(self, name: str) -> BoundaryPatch:
        for p in self.patches:
            if p.name == name:
                return p
        raise KeyError(name)

    def patch_names(self) -> list[str]:
        return [p.name for p in self.patches]

    def boundary_patch_ids(self) -> np.ndarray:
        """Patch index of each boundary face (length n_boundary_faces)."""
        ids = np.empty(self.n_boundary_faces, dtype=np.int64)
        nint = self.n_internal_faces
        for k, p in enumerate(self.patches):
            ids[p.start - nint:p.stop - nint] = k
        return ids

    def validate(self) -> None:
        """Check the structural invariants; raise MeshError on the first violation."""
        nint = self.n_internal_faces
        if self.faces.shape != (self.n_faces, 4):
            raise MeshError("faces must be an (n_faces, 4) array of point indices")
        if self.cells.shape != (self.n_cells, 8):
            raise MeshError("cells must be an (n_cells, 8) hexahedral connectivity")
        if self.n_cells < 1:
            raise MeshError("mesh has no cells")
        if np.any(self.owner < 0) or np.any(self.owner >= self.n_cells):
            raise MeshError("owner index out of range")
        own = self.owner[:nint]
        bad = np.flatnonzero(own >= self.neighbour)
        if len(bad):
            raise MeshError(f"internal face {bad[0]} violates owner < neighbour")
        if np.any(self.neighbour >= self.n_cells):
            raise MeshError("neighbour index out of range")
        expected = nint
        for p in self.patches:
            if p.start != expected or p.size < 0:
                raise MeshError(f"patch {p.name!r} is not contiguous with the previous range")
            expected = p.stop
        if expected != self.n_faces:
            raise MeshError("boundary patches do not cover all boundary faces")
        touched = np.zeros(self.n_cells, dtype=bool)
        touched[self.owner] = True
        touched[self.neighbour] = True
        if not touched.all():
            raise MeshError(f"cell {np.flatnonzero(~touched)[0]} has no faces")
        if self.n_cells > 1:
            from scipy.sparse import coo_matrix
            from scipy.sparse.csgraph import connected_components
            adj = coo_matrix((np.ones(nint), (own, self.neighbour)),
                             shape=(self.n_cells, self.n_cells))
            ncomp, _ = connected_components(adj, directed=False)
            if ncomp != 1:
                raise MeshError(f"cell graph has {ncomp} connected components")


def from_hexes(points: np.ndarray, hexes: np.ndarray, face_patch: np.ndarray,
               patch_names: Sequence[str]) -> UnstructuredMesh:
    """Build face addressing from hexahedral connectivity.

    ``face_patch[c, f]`` is the patch index of local face ``f`` of cell ``c``
    when that face lies on the boundary (ignored otherwise). Boundary faces
    without a valid patch index go to an extra ``defaultFaces`` patch.
    """
    hexes = np.asarray(hexes, dtype=np.int64)
    n = len(hexes)
    all_faces = hexes[:, HEX_FACES].reshape(-1, 4)
    cell_of = np.repeat(np.arange(n), 6)
    local = np.tile(np.arange(6), n)
    keys = np.sort(all_faces, axis=1)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if np.any(counts > 2):
        raise MeshError("a face is shared by more than two cells")
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    internal = counts == 2
    first = order[starts[internal]]
    second = order[starts[internal] + 1]
    # stable sort keeps the lower cell index first
    own = cell_of[first]
    nei = cell_of[second]
    if np.any(own == nei):
        raise MeshError("cell shares a face with itself")
    srt = np.lexsort((nei, own))
    int_faces = all_faces[first[srt]]
    own, nei = own[srt], nei[srt]

    bnd = order[starts[~internal]]
    bcell, blocal = cell_of[bnd], local[bnd]
    names = list(patch_names)
    pid = np.asarray(face_patch, dtype=np.int64)[bcell, blocal]
    unassigned = (pid < 0) | (pid >= len(names))
    if unassigned.any():
        pid = pid.copy()
        pid[unassigned] = len(names)
        names.append("defaultFaces")
    srt = np.lexsort((blocal, bcell, pid))
    bnd_faces = all_faces[bnd[srt]]
    bcell, pid = bcell[srt], pid[srt]

    patches = []
    start = len(own)
    counts_p = np.bincount(pid, minlength=len(names))
    for k, name in enumerate(names):
        patches.append(BoundaryPatch(name, start, int(counts_p[k])))
        start += int(counts_p[k])

    return UnstructuredMesh(
        points=points,
        faces=np.concatenate([int_faces, bnd_faces]).reshape(-1, 4),
        owner=np.concatenate([own, bcell]),
        neighbour=nei,
        patches=tuple(patches),
        cells=hexes,
        n_cells=n,
    )


def build_box_mesh(nx: int, ny: int, nz: int, lengths=(1.0, 1.0, 1.0),
                   max_cells: int = DEFAULT_MAX_CELLS) -> UnstructuredMesh:
    """Uniform hexahedral box with lexicographic cell numbering (x fastest).

    Boundary patches are xmin, xmax, ymin, ymax, zmin, zmax.
    """
    dims = (nx, ny, nz)
    if any(int(d) != d or d < 1 for d in dims):
        raise MeshError(f"box dimensions must be positive integers, got {dims}")
    n_cells = nx * ny * nz
    if n_cells > max_cells:
        raise MeshError(f"{n_cells} cells exceeds the limit of {max_cells}")
    lx, ly, lz = (float(v) for v in lengths)
    if min(lx, ly, lz) <= 0:
        raise MeshError("box lengths must be positive")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    points = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()

    def pid(di, dj, dk):
        return (i + di) + (nx + 1) * ((j + dj) + (ny + 1) * (k + dk))

    hexes = np.column_stack([pid(*p) for p in HEX_VERTEX_PARAMS])
    face_patch = np.full((n_cells, 6), -1, dtype=np.int64)
    face_patch[i == 0, 0] = 0
    face_patch[i == nx - 1, 1] = 1
    face_patch[j == 0, 2] = 2
    face_patch[j == ny - 1, 3] = 3
    face_patch[k == 0, 4] = 4
    face_patch[k == nz - 1, 5] = 5
    return from_hexes(points, hexes, face_patch, BOX_PATCHES)


@dataclass(frozen=True, eq=False)
class MeshGeometry:
    cell_volumes: np.ndarray
    cell_centroids: np.ndarray
    face_areas: np.ndarray
    face_centroids: np.ndarray

    @property
    def face_area_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.face_areas, axis=1)


def _face_geometry(points: np.ndarray, faces: np.ndarray):
    p = points[faces]
    centre = p.mean(axis=1)
    p_next = np.roll(p, -1, axis=1)
    tri_area = 0.5 * np.cross(p_next - p, centre[:, None, :] - p)
    tri_centroid = (p + p_next + centre[:, None, :]) / 3.0
    area = tri_area.sum(axis=1)
    mag = np.linalg.norm(tri_area, axis=2)
    total = mag.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    centroid = np.where(
        (total > 0)[:, None],
        (mag[:, :, None] * tri_centroid).sum(axis=1) / safe[:, None],
        centre,
    )
    return area, centroid


def compute_geometry(mesh: UnstructuredMesh) -> MeshGeometry:
    """Cell volumes/centroids by pyramid decomposition, face area vectors by triangle fans.

    Face area vectors point from owner to neighbour (outward on the boundary).
    """
    n = mesh.n_cells
    nint = mesh.n_internal_faces
    area, fcent = _face_geometry(mesh.points, mesh.faces)

    own = mesh.owner
    nei = mesh.neighbour
    nfaces = np.bincount(own, minlength=n) + np.bincount(nei, minlength=n)
    est = np.empty((n, 3))
    for d in range(3):
        est[:, d] = (np.bincount(own, weights=fcent[:, d], minlength=n)
                     + np.bincount(nei, weights=fcent[:nint, d], minlength=n)) / nfaces

    pyr_own = np.einsum("ij,ij->i", area, fcent - est[own]) / 3.0
    pyr_nei = -np.einsum("ij,ij->i", area[:nint], fcent[:nint] - est[nei]) / 3.0
    vol = np.bincount(own, weights=pyr_own, minlength=n) + np.bincount(nei, weights=pyr_nei, minlength=n)

    scale = np.max(np.abs(vol)) if n else 0.0
    bad = np.flatnonzero(vol <= 1e-12 * scale)
    if len(bad) or scale <= 0:
        idx = int(bad[0]) if len(bad) else 0
        raise MeshError(f"cell {idx} has non-positive volume {vol[idx]:.3e}")

    cc_own = 0.75 * fcent + 0.25 * est[own]
    cc_nei = 0.75 * fcent[:nint] + 0.25 * est[nei]
    cent = np.empty((n, 3))
    for d in range(3):
        cent[:, d] = (np.bincount(own, weights=pyr_own * cc_own[:, d], minlength=n)
                      + np.bincount(nei, weights=pyr_nei * cc_nei[:, d], minlength=n)) / vol

    return MeshGeometry(vol, cent, area, fcent)


def closure_residual(mesh: UnstructuredMesh, geometry: MeshGeometry) -> np.ndarray:
    """Per-cell |sum of outward face area vectors| divided by the largest face area."""
    n = mesh.n_cells
    nint = mesh.n_internal_faces
    s = geometry.face_areas
    total = np.empty((n, 3))
    for d in range(3):
        total[:, d] = (np.bincount(mesh.owner, weights=s[:, d], minlength=n)
                       - np.bincount(mesh.neighbour, weights=s[:nint, d], minlength=n))
    return np.linalg.norm(total, axis=1) / geometry.face_area_magnitudes.max()


def refined_cell_count(n_cells: int, levels: int) -> int:
    """Cell count after ``levels`` uniform refinements (8 children per hex)."""
    if levels < 0:
        raise MeshError("levels must be >= 0")
    count = int(n_cells) * 8 ** int(levels)
    if count > INDEX_LIMIT:
        raise MeshError(f"{count} cells overflows 64-bit cell indexing")
    return count


def _lattice_corners():
    # For each node of the 3x3x3 child lattice, the hex corners it is the mean of.
    nodes = []
    for c in range(3):
        for b in range(3):
            for a in range(3):
                lat = (a, b, c)
                corners = [v for v in range(8)
                           if all(lat[d] == 1 or 2 * HEX_VERTEX_PARAMS[v][d] == lat[d] for d in range(3))]
                nodes.append((lat, corners))
    return nodes


_LATTICE = _lattice_corners()


def boundary_local_faces(mesh: UnstructuredMesh) -> np.ndarray:
    """Local hex face index (0..5) of each boundary face within its owner cell."""
    nint = mesh.n_internal_faces
    bfaces = np.sort(mesh.faces[nint:], axis=1)
    cand = np.sort(mesh.cells[mesh.owner[nint:]][:, HEX_FACES], axis=2)
    match = (cand == bfaces[:, None, :]).all(axis=2)
    if not match.any(axis=1).all():
        raise MeshError("boundary face does not match any face of its owner hex")
    return match.argmax(axis=1)


def _refine_once(mesh: UnstructuredMesh) -> UnstructuredMesh:
    hexes = mesh.cells
    n = mesh.n_cells
    pts = mesh.points
    lattice = np.empty((n, 27), dtype=np.int64)
    new_points = [pts]
    next_id = len(pts)
    for nfree in (0, 1, 2, 3):
        group = [(k, corners) for k, (lat, corners) in enumerate(_LATTICE) if len(corners) == 2 ** nfree]
        slots = [k for k, _ in group]
        corner_idx = np.array([c for _, c in group])
        ids = hexes[:, corner_idx]  # (n, len(group), 2**nfree)
        if nfree == 0:
            lattice[:, slots] = ids[:, :, 0]
            continue
        keys = np.sort(ids, axis=2).reshape(-1, 2 ** nfree)
        if nfree == 3:
            uniq = keys
            inv = np.arange(len(keys))
        else:
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
            inv = inv.ravel()
        new_points.append(pts[uniq].mean(axis=1))
        lattice[:, slots] = (inv + next_id).reshape(n, len(group))
        next_id += len(uniq)
    points = np.concatenate(new_points)

    lat = lattice.reshape(n, 3, 3, 3)  # indexed [c][b][a]
    children = np.empty((n, 8, 8), dtype=np.int64)
    on_side = np.zeros((8, 6), dtype=bool)
    for child in range(8):
        ci, cj, ck = child & 1, (child >> 1) & 1, (child >> 2) & 1
        for v, (dx, dy, dz) in enumerate(HEX_VERTEX_PARAMS):
            children[:, child, v] = lat[:, ck + dz, cj + dy, ci + dx]
        on_side[child] = [ci == 0, ci == 1, cj == 0, cj == 1, ck == 0, ck == 1]

    parent_patch = np.full((n, 6), -1, dtype=np.int64)
    nint = mesh.n_internal_faces
    parent_patch[mesh.owner[nint:], boundary_local_faces(mesh)] = mesh.boundary_patch_ids()
    child_patch = np.where(on_side[None, :, :], parent_patch[:, None, :], -1).reshape(n * 8, 6)

    names = [p.name for p in mesh.patches]
    return from_hexes(points, children.reshape(n * 8, 8), child_patch, names)


def refine_uniform(mesh: UnstructuredMesh, levels: int,
                   max_cells: int = DEFAULT_MAX_CELLS) -> UnstructuredMesh:
    """Split every hexahedron into 8 children, ``levels`` times.

    New points sit at arithmetic means of edge, face and cell corners, so
    faces shared by two cells are split identically from both sides.
    Children of cell ``c`` are numbered ``8c .. 8c+7``.
    """
    target = refined_cell_count(mesh.n_cells, levels)
    if target > max_cells:
        raise MeshError(f"refinement to {target} cells exceeds the memory budget of {max_cells} cells")
    if mesh.cells.shape[1:] != (8,):
        raise MeshError("refinement requires hexahedral cells")
    out = mesh
    for _ in range(levels):
        out = _refine_once(out)
    return out


def mesh_to_graph(mesh: UnstructuredMesh) -> CellGraph:
    """Cell adjacency graph: one undirected edge per internal face."""
    nint = mesh.n_internal_faces
    return from_edge_list(mesh.n_cells, mesh.owner[:nint], mesh.neighbour)


def renumber_mesh(mesh: UnstructuredMesh, permutation: np.ndarray) -> UnstructuredMesh:
    """Relabel cells (old -> new index) and restore the face ordering invariants."""
    perm = np.asarray(permutation, dtype=np.int64)
    if len(perm) != mesh.n_cells or not np.array_equal(np.sort(perm), np.arange(mesh.n_cells)):
        raise MeshError("permutation is not a bijection on the cells")
    nint = mesh.n_internal_faces
    own = perm[mesh.owner[:nint]]
    nei = perm[mesh.neighbour]
    faces = mesh.faces[:nint].copy()
    flip = own > nei
    own[flip], nei[flip] = nei[flip], own[flip].copy()
    faces[flip] = faces[flip][:, ::-1]
    srt = np.lexsort((nei, own))

    bown = perm[mesh.owner[nint:]]
    bfaces = mesh.faces[nint:]
    pid = mesh.boundary_patch_ids()
    bsrt = np.lexsort((np.arange(len(bown)), bown, pid))

    cells = np.empty_like(mesh.cells)
    cells[perm] = mesh.cells
    return UnstructuredMesh(
        points=mesh.points,
        faces=np.concatenate([faces[srt], bfaces[bsrt]]).reshape(-1, 4),
        owner=np.concatenate([own[srt], bown[bsrt]]),
        neighbour=nei[srt],
        patches=mesh.patches,
        cells=cells,
        n_cells=mesh.n_cells,
    )


def canonical_form(mesh: UnstructuredMesh) -> tuple[np.ndarray, tuple]:
    """Numbering-independent description: sorted cell corner coordinates and boundary faces per patch."""
    cell_coords = np.sort(mesh.points[mesh.cells].reshape(mesh.n_cells, 8, 3).view(
        [("x", "f8"), ("y", "f8"), ("z", "f8")]).reshape(mesh.n_cells, 8), axis=1)
    cell_rows = cell_coords.view(np.float64).reshape(mesh.n_cells, 24)
    cell_rows = cell_rows[np.lexsort(cell_rows.T[::-1])]
    patches = []
    for p in mesh.patches:
        f = mesh.faces[p.start:p.stop]
        c = np.sort(mesh.points[f].reshape(len(f), 4, 3).view(
            [("x", "f8"), ("y", "f8"), ("z", "f8")]).reshape(len(f), 4), axis=1)
        rows = c.view(np.float64).reshape(len(f), 12)
        patches.append((p.name, rows[np.lexsort(rows.T[::-1])] if len(rows) else rows))
    return cell_rows, tuple(patches)


def meshes_equivalent(a: UnstructuredMesh, b: UnstructuredMesh) -> bool:
    if a.n_cells != b.n_cells or a.n_faces != b.n_faces:
        return False
    ca, pa = canonical_form(a)
    cb, pb = canonical_form(b)
    if not np.array_equal(ca, cb) or len(pa) != len(pb):
        return False
    return all(na == nb and np.array_equal(ra, rb) for (na, ra), (nb, rb) in zip(pa, pb))


def perturb_interior_points(mesh: UnstructuredMesh, fraction: float, spacing: float,
                            seed: int = 0) -> UnstructuredMesh:
    """Randomly displace points not on the boundary by up to ``fraction * spacing`` per axis."""
    rng = np.random.default_rng(seed)
    on_boundary = np.zeros(mesh.n_points, dtype=bool)
    on_boundary[mesh.faces[mesh.n_internal_faces:].ravel()] = True
    pts = mesh.points.copy()
    interior = ~on_boundary
    pts[interior] += rng.uniform(-fraction * spacing, fraction * spacing, size=(interior.sum(), 3))
    return UnstructuredMesh(pts, mesh.faces, mesh.owner, mesh.neighbour,
                            mesh.patches, mesh.cells, mesh.n_cells)
