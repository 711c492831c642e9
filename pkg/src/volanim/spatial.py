"""Closest-point queries: point-triangle primitive and an exact mesh index.

The SpatialIndex pairs a kd-tree over triangle centroids with an exact
point-in-triangle-region test. Queries return exactly the brute-force
result (ties broken towards the lowest face id): a candidate set is grown
until the lower bound |p - centroid| - r_max proves no unseen triangle can
beat the best candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshValidationError, VolanimError
from .mesh import TriMesh

_TIE_EPS = 1e-12


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Vectorized closest point on triangles: one triangle per query point.

    p, a, b, c: (N,3). Returns (points (N,3), bary (N,3)). Barycentric
    coordinates come from the Voronoi-region classification (Ericson), so
    vertex and edge cases are exact ((1,0,0) for p at vertex a, etc.).
    """
    p = np.atleast_2d(p)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    c = np.atleast_2d(c)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    n = len(p)
    u = np.empty(n)
    v = np.empty(n)
    w = np.empty(n)
    done = np.zeros(n, dtype=bool)

    def assign(mask, uu, vv, ww):
        m = mask & ~done
        u[m], v[m], w[m] = (
            uu[m] if isinstance(uu, np.ndarray) else uu,
            vv[m] if isinstance(vv, np.ndarray) else vv,
            ww[m] if isinstance(ww, np.ndarray) else ww,
        )
        done[m] = True

    # vertex regions
    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)

    # edge AB
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)

    # edge AC
    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = d2 / (d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)

    # edge BC
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t_bc, t_bc)

    # interior
    if not done.all():
        m = ~done
        denom = va[m] + vb[m] + vc[m]
        vi = vb[m] / denom
        wi = vc[m] / denom
        u[m] = 1.0 - vi - wi
        v[m] = vi
        w[m] = wi

    points = u[:, None] * a + v[:, None] * b + w[:, None] * c
    return points, np.stack([u, v, w], axis=1)


def closest_point_on_triangle(p, a, b, c):
    """Closest point of the closed triangle (a,b,c) to p.

    Returns (point, bary, signed_dist). signed_dist is the component of
    (p - point) along the triangle normal (right-hand rule from the winding
    a->b->c), so it is positive on the front side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.cross(b - a, c - a)
    n_len = np.linalg.norm(n)
    if n_len < 1e-300 or 0.5 * n_len < 1e-14:
        raise MeshValidationError("degenerate triangle in closest-point query")
    point, bary = closest_point_on_triangles(p[None], a[None], b[None], c[None])
    point = point[0]
    bary = bary[0]
    signed = float(np.dot(p - point, n / n_len))
    return point, tuple(bary), signed


@dataclass(frozen=True, eq=False)
class SpatialIndex:
    """Acceleration structure for nearest-vertex / closest-surface queries."""

    mesh: TriMesh
    _vtree: cKDTree
    _ctree: cKDTree
    _radius_max: float

    @classmethod
    def build(cls, mesh: TriMesh) -> "SpatialIndex":
        if mesh.n_vertices == 0 or mesh.n_faces == 0:
            raise VolanimError("cannot build a spatial index over an empty mesh")
        a, b, c = mesh.face_corners
        centroids = (a + b + c) / 3.0
        r = np.sqrt(
            np.maximum.reduce(
                [
                    np.einsum("ij,ij->i", a - centroids, a - centroids),
                    np.einsum("ij,ij->i", b - centroids, b - centroids),
                    np.einsum("ij,ij->i", c - centroids, c - centroids),
                ]
            )
        )
        return cls(
            mesh=mesh,
            _vtree=cKDTree(mesh.vertices),
            _ctree=cKDTree(centroids),
            _radius_max=float(r.max()),
        )

    # -- vertex queries -----------------------------------------------------

    def nearest_vertices(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(distances, vertex ids) of the nearest mesh vertex per query point."""
        d, i = self._vtree.query(np.atleast_2d(points))
        return d, i

    # -- surface queries ----------------------------------------------------

    def closest_points(self, points: np.ndarray):
        """Exact closest surface points for a batch of queries.

        Returns (face ids (N,), points (N,3), bary (N,3), distances (N,)).
        Ties are broken towards the lowest face id.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        nf = self.mesh.n_faces
        best_d2 = np.full(n, np.inf)
        best_face = np.full(n, -1, dtype=np.int64)
        best_point = np.zeros((n, 3))
        best_bary = np.zeros((n, 3))

        unresolved = np.arange(n)
        k = min(8, nf)
        while len(unresolved):
            q = points[unresolved]
            dd, ii = self._ctree.query(q, k=k)
            if k == 1:
                dd = dd[:, None]
                ii = ii[:, None]
            valid = ii < nf
            self._refine(unresolved, q, ii, valid, best_d2, best_face, best_point, best_bary)
            if k >= nf:
                break
            # Guaranteed exact when every unseen centroid lies beyond
            # best + r_max (the centroid bound d(p, face) >= |p - c| - r).
            bound = np.sqrt(best_d2[unresolved]) + self._radius_max + _TIE_EPS
            still = bound > dd[:, -1]
            unresolved = unresolved[still]
            k = min(k * 4, nf)

        return best_face, best_point, best_bary, np.sqrt(best_d2)

    def _refine(self, idx, q, faces, valid, best_d2, best_face, best_point, best_bary):
        """Exact point-triangle distances over candidate faces; keep the
        lexicographic (distance, face id) minimum per query."""
        m, kk = faces.shape
        # Sort candidates by face id so equal distances resolve to lowest id.
        order = np.argsort(faces, axis=1, kind="stable")
        faces = np.take_along_axis(faces, order, axis=1)
        valid = np.take_along_axis(valid, order, axis=1)
        flat_f = faces.reshape(-1)
        flat_q = np.repeat(q, kk, axis=0)
        safe_f = np.where(valid.reshape(-1), flat_f, 0)
        a, b, c = self.mesh.face_corners
        pts, bary = closest_point_on_triangles(flat_q, a[safe_f], b[safe_f], c[safe_f])
        diff = flat_q - pts
        d2 = np.einsum("ij,ij->i", diff, diff)
        d2[~valid.reshape(-1)] = np.inf
        d2 = d2.reshape(m, kk)
        pick = np.argmin(d2, axis=1)  # first minimum = lowest face id after sort
        rows = np.arange(m)
        cand_d2 = d2[rows, pick]
        cand_face = faces[rows, pick]
        cand_pt = pts.reshape(m, kk, 3)[rows, pick]
        cand_bary = bary.reshape(m, kk, 3)[rows, pick]

        cur_d2 = best_d2[idx]
        cur_face = best_face[idx]
        better = (cand_d2 < cur_d2 - _TIE_EPS) | (
            (np.abs(cand_d2 - cur_d2) <= _TIE_EPS) & (cand_face < cur_face)
        )
        upd = idx[better]
        best_d2[upd] = cand_d2[better]
        best_face[upd] = cand_face[better]
        best_point[upd] = cand_pt[better]
        best_bary[upd] = cand_bary[better]


def closest_point_on_mesh(index: SpatialIndex, p) -> tuple[int, np.ndarray, tuple, float]:
    """Globally nearest surface point to p (ties to lowest face id).

    Returns (face id, point, bary, distance).
    """
    face, point, bary, dist = index.closest_points(np.asarray(p, dtype=np.float64)[None])
    return int(face[0]), point[0], tuple(bary[0]), float(dist[0])
