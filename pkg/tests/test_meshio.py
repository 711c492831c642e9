import numpy as np
import pytest

import geometry
from volanim.errors import MeshFormatError, MeshValidationError
from volanim.mesh import TriMesh
from volanim.meshio import load_manifest, load_mesh, save_mesh, write_importance

TETRA_OBJ = """\
# regular tetrahedron
v 1 1 1
v 1 -1 -1
v -1 1 -1
v -1 -1 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def test_load_tetrahedron_obj(tmp_path):
    p = tmp_path / "tet.obj"
    p.write_text(TETRA_OBJ)
    m = load_mesh(p)
    assert m.n_vertices == 4
    assert m.n_faces == 4
    assert m.importance is None


def test_face_index_out_of_range_names_face(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 10\n")
    with pytest.raises(MeshValidationError, match=r"faces \[0\]"):
        load_mesh(p)


def test_parse_failure_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv zero 0 0\n")
    with pytest.raises(MeshFormatError, match="bad.obj:2"):
        load_mesh(p)


def test_degenerate_face_rejected_with_ids(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(MeshValidationError, match="degenerate"):
        load_mesh(p)


@pytest.mark.parametrize("ext", ["obj", "ply"])
def test_round_trip_large_mesh(tmp_path, ext):
    # 49928-face grid: save -> load must reproduce positions within 1e-6 m
    mesh = geometry.planar_grid(158, size=2.0)
    rng = np.random.default_rng(0)
    bumped = mesh.with_vertices(
        mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape)
    )
    assert bumped.n_faces == 49928
    p = tmp_path / f"big.{ext}"
    save_mesh(bumped, p)
    back = load_mesh(p)
    assert back.n_faces == bumped.n_faces
    assert np.abs(back.vertices - bumped.vertices).max() < 1e-6
    assert np.array_equal(back.faces, bumped.faces)


def test_ply_round_trip_exact(tmp_path):
    mesh = geometry.icosphere(2)
    p = tmp_path / "s.ply"
    save_mesh(mesh, p)
    back = load_mesh(p)
    assert np.array_equal(back.vertices, mesh.vertices)  # double precision PLY


def test_uv_round_trip(tmp_path):
    m = geometry.cube()
    uv = np.linspace(0, 1, 2 * m.n_vertices).reshape(-1, 2)
    m = TriMesh(m.vertices, m.faces, uv=uv)
    for ext in ("obj", "ply"):
        p = tmp_path / f"uv.{ext}"
        save_mesh(m, p)
        back = load_mesh(p)
        assert back.uv is not None
        assert np.abs(back.uv - uv).max() < 1e-6


def test_importance_sidecar_auto_loaded(tmp_path):
    m = geometry.tetrahedron()
    p = tmp_path / "t.obj"
    save_mesh(m, p)
    write_importance(np.array([1.0, 0.5, 0.25, 0.0]), tmp_path / "t.imp")
    back = load_mesh(p)
    assert np.allclose(back.importance, [1.0, 0.5, 0.25, 0.0])


def test_importance_sidecar_length_mismatch(tmp_path):
    m = geometry.tetrahedron()
    p = tmp_path / "t.obj"
    save_mesh(m, p)
    (tmp_path / "t.imp").write_text("1.0\n0.5\n")
    with pytest.raises(MeshFormatError, match="4 vertices"):
        load_mesh(p)


def test_importance_saved_with_mesh(tmp_path):
    m = geometry.tetrahedron()
    m = TriMesh(m.vertices, m.faces, importance=np.array([0.1, 0.2, 0.3, 0.4]))
    save_mesh(m, tmp_path / "t.ply")
    back = load_mesh(tmp_path / "t.ply")
    assert np.abs(back.importance - m.importance).max() < 1e-9


def test_corrupt_ply_reports_offset(tmp_path):
    p = tmp_path / "c.ply"
    good = tmp_path / "g.ply"
    save_mesh(geometry.cube(), good)
    data = good.read_bytes()
    p.write_bytes(data[: len(data) - 40])  # truncate inside the face block
    with pytest.raises(MeshFormatError, match="truncated"):
        load_mesh(p)


def test_not_a_ply(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"hello world\n")
    with pytest.raises(MeshFormatError, match="not a PLY"):
        load_mesh(p)


def test_manifest_round_trip(tmp_path):
    frames = [geometry.cube(), geometry.cube(origin=(0, 0, 0.1))]
    names = []
    for i, f in enumerate(frames):
        name = f"frame_{i:03d}.ply"
        save_mesh(f, tmp_path / name)
        names.append(name)
    import json

    (tmp_path / "seq.json").write_text(
        json.dumps({"frame_rate": 25.0, "frames": names})
    )
    seq, paths = load_manifest(tmp_path / "seq.json")
    assert len(seq) == 2
    assert seq.frame_rate == 25.0
    assert np.array_equal(seq[1].vertices, frames[1].vertices)
