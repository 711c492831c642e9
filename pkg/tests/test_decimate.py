import numpy as np
import pytest

import geometry
from volanim.decimate import (
    DecimationParams,
    compute_vertex_quadrics,
    decimate,
    evaluate_quadric,
    optimal_contraction_point,
)
from volanim.mesh import TriMesh, genus_per_component
from volanim.spatial import SpatialIndex


def symmetric_max_distance(a, b, extra_samples=True):
    """Sampled symmetric Hausdorff distance (vertices + edge midpoints +
    centroids against the other surface)."""

    def samples(m):
        pts = [m.vertices]
        va, vb, vc = m.face_corners
        pts.append((va + vb) / 2)
        pts.append((vb + vc) / 2)
        pts.append((va + vc) / 2)
        pts.append((va + vb + vc) / 3)
        return np.concatenate(pts) if extra_samples else m.vertices

    ia, ib = SpatialIndex.build(a), SpatialIndex.build(b)
    d_ab = ib.closest_points(samples(a))[3].max()
    d_ba = ia.closest_points(samples(b))[3].max()
    return max(d_ab, d_ba)


def reference_collapse(mesh, target_faces, exponent=0.0):
    """Brute-force reference: rescan all live edges each step, pick the
    (cost, min id, max id) minimum, honoring the same rejection rules."""
    from volanim.decimate import _boundary_quadrics, _CollapseMesh

    quadrics = list(compute_vertex_quadrics(mesh))
    extra = _boundary_quadrics(mesh, weight_scale=1.0)
    for i in range(mesh.n_vertices):
        quadrics[i] = quadrics[i] + extra[i]
    cm = _CollapseMesh(mesh)
    version = [0] * mesh.n_vertices
    blocked = set()
    costs = []
    while cm.n_faces() > target_faces:
        candidates = []
        for i in range(len(cm.alive)):
            if not cm.alive[i]:
                continue
            for j in cm.neighbors(i):
                if j <= i:
                    continue
                if (i, j, version[i], version[j]) in blocked:
                    continue
                q = quadrics[i] + quadrics[j]
                point, cost = optimal_contraction_point(q, cm.pos[i], cm.pos[j])
                imp = 0.5 * (cm.imp[i] + cm.imp[j])
                candidates.append((cost * imp**exponent, i, j, point))
        if not candidates:
            break
        candidates.sort(key=lambda t: (t[0], t[1], t[2]))
        done = False
        for cost, i, j, point in candidates:
            if not cm.link_ok(i, j) or cm.flips_or_degenerates(i, j, point):
                blocked.add((i, j, version[i], version[j]))
                continue
            quadrics[i] = quadrics[i] + quadrics[j]
            cm.collapse(i, j, point)
            version[i] += 1
            version[j] += 1
            costs.append(cost)
            done = True
            break
        if not done:
            break
    return cm.to_trimesh(mesh), costs


class TestQuadrics:
    def test_planar_grid_quadric_zero_on_plane(self):
        m = geometry.planar_grid(4, size=1.0, z=0.25)
        q = compute_vertex_quadrics(m)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = np.array([rng.uniform(0, 1), rng.uniform(0, 1), 0.25])
            v = rng.integers(0, m.n_vertices)
            assert abs(evaluate_quadric(q[v], x)) < 1e-12

    def test_own_vertex_evaluates_to_zero(self):
        m = geometry.icosphere(1)
        q = compute_vertex_quadrics(m)
        for v in range(0, m.n_vertices, 7):
            assert abs(evaluate_quadric(q[v], m.vertices[v])) < 1e-12

    def test_cube_corner_offset_oracle(self):
        # moving off the corner along one face normal: error = h^2 * (area
        # weight of the faces whose plane is violated)
        m = geometry.cube()
        q = compute_vertex_quadrics(m)
        corner = 0  # at origin; faces x=0, y=0, z=0 meet here
        h = 0.1
        x = m.vertices[corner] + h * np.array([0.0, 0.0, 1.0])
        # oracle: sum over incident faces of area * (n.x + d)^2
        expected = 0.0
        for fid, face in enumerate(m.faces):
            if corner not in face:
                continue
            n = m.face_normals[fid]
            d = -np.dot(n, m.vertices[face[0]])
            expected += m.face_areas[fid] * (np.dot(n, x) + d) ** 2
        assert evaluate_quadric(q[corner], x) == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(h * h * 1.0, rel=1e-12)  # z=0 faces: area 2*0.5... weight 1.0 total

    def test_isolated_vertex_zero_quadric(self):
        m = geometry.tetrahedron()
        verts = np.concatenate([m.vertices, [[5.0, 5.0, 5.0]]])
        q = compute_vertex_quadrics(TriMesh(verts, m.faces))
        assert np.array_equal(q[4], np.zeros((4, 4)))


class TestDecimate:
    def test_noop_when_target_reached(self):
        m = geometry.icosphere(1)
        out = decimate(m, DecimationParams(target_faces=m.n_faces))
        assert out is m

    def test_planar_grid_to_10_percent(self):
        m = geometry.planar_grid(20, size=1.0)  # 800 faces
        out = decimate(m, DecimationParams(target_faces=80))
        assert out.n_faces <= 80
        assert symmetric_max_distance(m, out) < 1e-6

    def test_importance_preserves_masked_region(self):
        m = geometry.icosphere(2)  # 1280 faces
        patch = m.vertices[:, 2] > 0.6
        imp = np.where(patch, 1.0, 0.01)
        masked = TriMesh(m.vertices, m.faces, importance=imp)
        target = int(0.2 * m.n_faces)

        def patch_faces(mesh):
            inside = mesh.vertices[:, 2] > 0.6
            return int(inside[mesh.faces].all(axis=1).sum())

        out_masked = decimate(masked, DecimationParams(target_faces=target))
        out_uniform = decimate(m, DecimationParams(target_faces=target))
        assert out_masked.n_faces <= target
        assert patch_faces(out_masked) > patch_faces(out_uniform)

    def test_never_increases_genus(self):
        m = geometry.torus(n_major=16, n_minor=10)
        out = decimate(m, DecimationParams(target_faces=int(m.n_faces * 0.25)))
        assert genus_per_component(out) == [(0, 1)]
        s = geometry.icosphere(2)
        out2 = decimate(s, DecimationParams(target_faces=64))
        assert genus_per_component(out2) == [(0, 0)]

    def test_matches_reference_unweighted(self):
        m = geometry.cylinder(n_rings=7, n_seg=10, capped=True)  # ~160 faces
        assert 100 <= m.n_faces <= 220
        target = m.n_faces // 2
        params = DecimationParams(target_faces=target, importance_exponent=0.0)
        out = decimate(m, params)
        ref, costs = reference_collapse(m, target, exponent=0.0)
        assert np.array_equal(out.faces, ref.faces)
        assert np.abs(out.vertices - ref.vertices).max() < 1e-12
        # collapse costs are nonnegative: cumulative error non-decreasing
        assert all(c >= 0.0 for c in costs)

    def test_best_effort_below_minimum(self):
        m = geometry.tetrahedron()
        out = decimate(m, DecimationParams(target_faces=4))
        assert out.n_faces >= 4

    def test_output_passes_invariants(self):
        m = geometry.icosphere(2)
        out = decimate(m, DecimationParams(target_faces=100))
        assert out.face_areas.min() > 1e-12
        assert out.n_faces <= 100


def test_params_validation():
    with pytest.raises(ValueError):
        DecimationParams(target_faces=2)
    with pytest.raises(ValueError):
        DecimationParams(target_faces=10, importance_exponent=-1)
