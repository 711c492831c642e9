import numpy as np
import pytest

import geometry
from volanim.errors import MeshValidationError
from volanim.laplacian import cotangent_laplacian
from volanim.mesh import TriMesh


def dense_cotan_oracle(mesh):
    """Independent dense assembly: loop per face corner, symmetric weights,
    negatives clamped, diagonal = row sum of off-diagonals."""
    nv = mesh.n_vertices
    w = np.zeros((nv, nv))
    for face in mesh.faces:
        for k in range(3):
            i = face[(k + 1) % 3]
            j = face[(k + 2) % 3]
            pk = mesh.vertices[face[k]]
            e1 = mesh.vertices[i] - pk
            e2 = mesh.vertices[j] - pk
            cot = np.dot(e1, e2) / np.linalg.norm(np.cross(e1, e2))
            w[i, j] += 0.5 * cot
            w[j, i] += 0.5 * cot
    w = np.maximum(w, 0.0)
    return np.diag(w.sum(axis=1)) - w


def test_constant_in_kernel():
    m = geometry.icosphere(1)
    lap = cotangent_laplacian(m)
    out = lap @ np.ones(m.n_vertices)
    assert np.abs(out).max() < 1e-12


def test_planar_delaunay_grid_harmonic_interior():
    n = 8
    m = geometry.planar_grid(n, size=1.0)
    lap = cotangent_laplacian(m)
    res = lap @ m.vertices  # coordinates are harmonic on a Delaunay plane
    interior = []
    for i in range(n + 1):
        for j in range(n + 1):
            if 0 < i < n and 0 < j < n:
                interior.append(i * (n + 1) + j)
    assert np.abs(res[interior]).max() < 1e-9


def test_matches_dense_assembly_on_20_vertex_mesh():
    m = geometry.icosphere(0)  # 12 vertices
    assert m.n_vertices <= 20
    lap = cotangent_laplacian(m).toarray()
    oracle = dense_cotan_oracle(m)
    assert np.abs(lap - oracle).max() < 1e-12

    m2 = geometry.cylinder(n_rings=2, n_seg=6, capped=True)  # 20 vertices
    assert m2.n_vertices == 20
    assert np.abs(cotangent_laplacian(m2).toarray() - dense_cotan_oracle(m2)).max() < 1e-12


def test_symmetric_for_closed_mesh():
    m = geometry.icosphere(1)
    lap = cotangent_laplacian(m)
    assert np.abs((lap - lap.T).toarray()).max() < 1e-12


def test_diagonal_equals_negated_offdiagonal_row_sum():
    m = geometry.torus(n_major=8, n_minor=6)
    lap = cotangent_laplacian(m).toarray()
    off = lap - np.diag(np.diag(lap))
    scale = np.abs(np.diag(lap)).max()
    # equality up to summation-order ulps of the dense re-accumulation
    assert np.abs(np.diag(lap) + off.sum(axis=1)).max() < 1e-14 * scale
    assert np.abs(lap.sum(axis=1)).max() < 1e-14 * scale


def test_negative_weights_clamped_nonpositive_offdiag():
    # an obtuse sliver produces a negative cotangent weight somewhere
    v = np.array(
        [[0, 0, 0], [4, 0, 0], [2, 0.2, 0], [2, -4, 0]], float
    )
    m = TriMesh(v, [[0, 1, 2], [1, 0, 3]])
    lap = cotangent_laplacian(m).toarray()
    off = lap - np.diag(np.diag(lap))
    assert (off <= 1e-15).all()  # clamped: off-diagonals are -w <= 0
    assert np.abs(lap @ np.ones(4)).max() < 1e-12


def test_nonmanifold_edge_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = TriMesh(v, [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshValidationError, match="non-manifold"):
        cotangent_laplacian(m)
