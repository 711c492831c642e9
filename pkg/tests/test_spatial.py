import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import geometry
from volanim.errors import MeshValidationError, VolanimError
from volanim.mesh import TriMesh
from volanim.spatial import (
    SpatialIndex,
    closest_point_on_mesh,
    closest_point_on_triangle,
    closest_point_on_triangles,
)

TRI = (
    np.array([0.0, 0.0, 0.0]),
    np.array([2.0, 0.0, 0.0]),
    np.array([0.0, 1.5, 0.0]),
)


def brute_force_closest(mesh, p):
    """Oracle: scan every face with the single-triangle primitive."""
    best = (np.inf, -1, None, None)
    for fid, (i, j, k) in enumerate(mesh.faces):
        pt, bary, _ = closest_point_on_triangle(
            p, mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]
        )
        d = float(np.linalg.norm(np.asarray(p) - pt))
        if d < best[0] - 1e-12:
            best = (d, fid, pt, bary)
    return best


def sample_triangle(a, b, c, n=60):
    """Dense barycentric sampling oracle for point-triangle distance."""
    pts = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            u = i / n
            v = j / n
            pts.append(u * a + v * b + (1 - u - v) * c)
    return np.array(pts)


class TestClosestPointOnTriangle:
    def test_vertex_identity(self):
        a, b, c = TRI
        pt, bary, sd = closest_point_on_triangle(a, a, b, c)
        assert np.array_equal(pt, a)
        assert bary == (1.0, 0.0, 0.0)
        assert sd == 0.0

    def test_centroid_plus_normal(self):
        a, b, c = TRI
        centroid = (a + b + c) / 3.0
        n = np.array([0.0, 0.0, 1.0])  # right-hand rule for this winding
        h = 0.37
        pt, bary, sd = closest_point_on_triangle(centroid + h * n, a, b, c)
        assert np.abs(pt - centroid).max() < 1e-12
        assert np.abs(np.asarray(bary) - 1 / 3).max() < 1e-12
        assert sd == pytest.approx(h, abs=1e-12)

    def test_below_gives_negative_signed_distance(self):
        a, b, c = TRI
        centroid = (a + b + c) / 3.0
        _, _, sd = closest_point_on_triangle(centroid - 0.2 * np.array([0, 0, 1.0]), a, b, c)
        assert sd == pytest.approx(-0.2, abs=1e-12)

    def test_outside_edge_matches_dense_sampling(self):
        a, b, c = TRI
        rng = np.random.default_rng(11)
        samples = sample_triangle(a, b, c, n=400)
        for _ in range(20):
            p = np.array([rng.uniform(-1, 3), rng.uniform(-2, -0.1), rng.uniform(-1, 1)])
            pt, bary, sd = closest_point_on_triangle(p, a, b, c)
            d = np.linalg.norm(p - pt)
            d_oracle = np.linalg.norm(samples - p, axis=1).min()
            assert d <= d_oracle + 1e-12
            assert abs(d - d_oracle) < 1e-5  # sampling resolution
            # returned point reachable via its barycentrics
            assert np.abs(bary[0] * a + bary[1] * b + bary[2] * c - pt).max() < 1e-12

    def test_degenerate_triangle_rejected(self):
        with pytest.raises(MeshValidationError):
            closest_point_on_triangle(
                [0, 0, 1], [0, 0, 0], [1, 0, 0], [2, 0, 0]
            )

    @given(
        st.lists(st.floats(-5, 5), min_size=3, max_size=3),
        st.integers(0, 10_000),
    )
    @settings(max_examples=60, deadline=None)
    def test_bary_properties(self, p, seed):
        rng = np.random.default_rng(seed)
        tri = rng.standard_normal((3, 3))
        if 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-6:
            return
        pt, bary, _ = closest_point_on_triangle(np.array(p), *tri)
        bary = np.asarray(bary)
        assert abs(bary.sum() - 1.0) < 1e-9
        assert (bary >= -1e-12).all() and (bary <= 1 + 1e-12).all()


class TestSpatialIndex:
    def test_point_on_surface(self):
        m = geometry.cube()
        idx = SpatialIndex.build(m)
        fid, pt, bary, d = closest_point_on_mesh(idx, [0.25, 0.25, 0.0])
        assert d < 1e-15
        assert m.faces[fid].tolist() in m.faces.tolist()
        assert np.abs(pt - [0.25, 0.25, 0.0]).max() < 1e-15

    def test_cube_center_tie_resolves_to_lowest_face(self):
        idx = SpatialIndex.build(geometry.cube())
        fid, _, _, d = closest_point_on_mesh(idx, [0.5, 0.5, 0.5])
        assert d == pytest.approx(0.5, abs=1e-12)
        assert fid == 0

    def test_random_points_match_brute_force(self):
        m = geometry.icosphere(2)
        idx = SpatialIndex.build(m)
        rng = np.random.default_rng(5)
        pts = rng.uniform(-2.5, 2.5, size=(1000, 3))
        faces, cps, _, dists = idx.closest_points(pts)
        for p, d in zip(pts[:100], dists[:100]):
            d_bf, _, _, _ = brute_force_closest(m, p)
            assert abs(d - d_bf) < 1e-9
        # full batch: distances must never beat/lag the per-vertex lower bound
        vd, _ = idx.nearest_vertices(pts)
        assert (dists <= vd + 1e-12).all()

    def test_far_points_exact(self):
        m = geometry.planar_grid(6, size=1.0)
        idx = SpatialIndex.build(m)
        rng = np.random.default_rng(9)
        pts = rng.uniform(-30, 30, size=(50, 3))
        _, _, _, dists = idx.closest_points(pts)
        for p, d in zip(pts, dists):
            d_bf, *_ = brute_force_closest(m, p)
            assert abs(d - d_bf) < 1e-9

    def test_distance_never_exceeds_sampled_surface(self):
        m = geometry.icosphere(2)
        idx = SpatialIndex.build(m)
        rng = np.random.default_rng(1)
        # 10^4 random surface samples
        fids = rng.integers(0, m.n_faces, size=10_000)
        r1 = rng.random(10_000)
        r2 = rng.random(10_000)
        u = 1 - np.sqrt(r1)
        v = np.sqrt(r1) * (1 - r2)
        w = 1 - u - v
        a, b, c = m.face_corners
        surf = u[:, None] * a[fids] + v[:, None] * b[fids] + w[:, None] * c[fids]
        queries = rng.uniform(-2, 2, size=(20, 3))
        _, _, _, dists = idx.closest_points(queries)
        for q, d in zip(queries, dists):
            assert d <= np.linalg.norm(surf - q, axis=1).min() + 1e-12

    def test_empty_mesh_rejected(self):
        with pytest.raises(VolanimError):
            SpatialIndex.build(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))

    def test_batched_primitive_matches_scalar(self):
        rng = np.random.default_rng(2)
        tris = rng.standard_normal((200, 3, 3))
        ps = rng.standard_normal((200, 3))
        pts, bary = closest_point_on_triangles(ps, tris[:, 0], tris[:, 1], tris[:, 2])
        for i in range(200):
            pt_s, bary_s, _ = closest_point_on_triangle(ps[i], *tris[i])
            assert np.abs(pts[i] - pt_s).max() < 1e-12
            assert np.abs(bary[i] - bary_s).max() < 1e-12
