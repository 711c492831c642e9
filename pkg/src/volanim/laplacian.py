"""Cotangent-weight mesh Laplacian (positive semidefinite convention)."""

from __future__ import annotations

import logging

import numpy as np
from scipy.sparse import coo_array, csr_array

from .errors import MeshValidationError
from .mesh import TriMesh

log = logging.getLogger(__name__)


def cotangent_laplacian(mesh: TriMesh) -> csr_array:
    """V x V sparse cotangent Laplacian L = D - W.

    Off-diagonal entries are -w_ij with w_ij = (cot(alpha) + cot(beta)) / 2
    over the 1-2 faces incident to edge (i, j); the diagonal is the negated
    row sum of the off-diagonals, so constant functions are in the kernel
    by construction and (L x)_i = sum_j w_ij (x_i - x_j).

    Negative edge weights (obtuse configurations) are clamped to zero and
    the count is reported through the module logger. Edges with more than
    two incident faces are rejected.
    """
    edges, counts = mesh.edge_face_counts
    if (counts > 2).any():
        bad = edges[counts > 2]
        raise MeshValidationError(
            f"non-manifold edges (more than 2 incident faces): {bad[:8].tolist()}"
        )

    f = mesh.faces
    v = mesh.vertices
    nv = mesh.n_vertices

    rows = []
    cols = []
    vals = []
    # Corner k of each face contributes cot(angle at k)/2 to edge (i, j).
    for k in range(3):
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        pk = v[f[:, k]]
        e1 = v[i] - pk
        e2 = v[j] - pk
        cos_num = np.einsum("ij,ij->i", e1, e2)
        sin_num = np.linalg.norm(np.cross(e1, e2), axis=1)
        sin_num[sin_num == 0.0] = np.inf  # degenerate corner contributes 0
        cot = cos_num / sin_num
        rows.append(i)
        cols.append(j)
        vals.append(0.5 * cot)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    w = coo_array((vals, (rows, cols)), shape=(nv, nv))
    w = (w + w.T).tocsr()  # symmetrize: both half-edge contributions per edge

    n_neg = int((w.data < 0.0).sum() // 2)
    if n_neg:
        log.info("cotangent Laplacian: clamped %d negative edge weights to 0", n_neg)
        w.data = np.maximum(w.data, 0.0)

    deg = np.asarray(w.sum(axis=1)).reshape(-1)
    lap = (coo_array((deg, (np.arange(nv), np.arange(nv))), shape=(nv, nv)) - w).tocsr()
    return lap
