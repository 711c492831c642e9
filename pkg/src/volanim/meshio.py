"""Mesh file I/O: ASCII OBJ, binary little-endian PLY, `.imp` sidecar masks.

Importance masks live in a sidecar text file (one float per vertex, `.imp`
extension, same basename as the mesh); they are picked up automatically on
load when present.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import MeshFormatError, MeshValidationError
from .mesh import MIN_FACE_AREA, TriMesh, degenerate_faces

PathLike = Union[str, Path]


def _detect_format(path: Path) -> str:
    ext = path.suffix.lower()
    if ext == ".obj":
        return "obj"
    if ext == ".ply":
        return "ply"
    raise MeshFormatError(f"cannot infer mesh format from extension {ext!r} ({path})")


def load_mesh(path: PathLike, format: Optional[str] = None, sidecar: Optional[PathLike] = None) -> TriMesh:
    """Load a triangle mesh, validating it against the TriMesh invariants.

    ``sidecar`` overrides importance-mask discovery; by default a
    ``<basename>.imp`` file next to the mesh is used when present.
    Degenerate faces (area < 1e-12 m^2) are rejected with their ids.
    """
    path = Path(path)
    if not path.is_file():
        raise MeshFormatError(f"mesh file not found: {path}")
    fmt = format or _detect_format(path)
    if fmt == "obj":
        verts, faces, uv = _read_obj(path)
    elif fmt == "ply":
        verts, faces, uv = _read_ply(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")

    importance = None
    imp_path = Path(sidecar) if sidecar is not None else path.with_suffix(".imp")
    if imp_path.is_file():
        importance = read_importance(imp_path, expected=len(verts))

    mesh = TriMesh(verts, faces, importance=importance, uv=uv)
    bad = degenerate_faces(mesh, MIN_FACE_AREA)
    if len(bad):
        raise MeshValidationError(
            f"{path}: degenerate faces (area < {MIN_FACE_AREA:g} m^2): {bad[:16].tolist()}"
        )
    return mesh


def save_mesh(mesh: TriMesh, path: PathLike, format: Optional[str] = None) -> None:
    """Write OBJ (ASCII) or PLY (binary little-endian, double precision)."""
    path = Path(path)
    fmt = format or _detect_format(path)
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "ply":
        _write_ply(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    if mesh.importance is not None:
        write_importance(mesh.importance, path.with_suffix(".imp"))


def read_importance(path: PathLike, expected: Optional[int] = None) -> np.ndarray:
    values = []
    path = Path(path)
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: not a float: {line!r}") from exc
    arr = np.asarray(values, dtype=np.float64)
    if expected is not None and len(arr) != expected:
        raise MeshFormatError(
            f"{path}: importance mask has {len(arr)} entries, mesh has {expected} vertices"
        )
    return arr


def write_importance(importance: np.ndarray, path: PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in importance:
            fh.write(f"{v:.9g}\n")


# -- OBJ ---------------------------------------------------------------------


def _read_obj(path: Path):
    verts: list[tuple[float, float, float]] = []
    uvs: list[tuple[float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_uv: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif tag == "vt":
                    if len(parts) < 3:
                        raise ValueError("vt needs 2 coordinates")
                    uvs.append((float(parts[1]), float(parts[2])))
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError(f"only triangle faces supported, got {len(parts) - 1} corners")
                    vi, ti = [], []
                    for p in parts[1:]:
                        fields = p.split("/")
                        idx = int(fields[0])
                        if idx < 0:
                            idx = len(verts) + 1 + idx
                        vi.append(idx - 1)
                        if len(fields) > 1 and fields[1]:
                            ti.append(int(fields[1]) - 1)
                    faces.append(tuple(vi))
                    if len(ti) == 3:
                        face_uv.append(tuple(ti))
                # other records (vn, o, g, usemtl, s, mtllib) are ignored
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}: {line!r}") from exc
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv_arr = None
    if uvs and len(face_uv) == len(faces):
        # Per-vertex uv only when the uv index always matches the vertex index
        # pattern (the layout this toolkit writes); otherwise dropped.
        fu = np.asarray(face_uv, dtype=np.int64)
        if len(uvs) == len(verts) and np.array_equal(fu, f):
            uv_arr = np.asarray(uvs, dtype=np.float64)
    return v, f, uv_arr


def _write_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# volanim OBJ: {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        if mesh.uv is not None:
            for t in mesh.uv:
                fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


# -- PLY (binary little-endian) ----------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _read_ply(path: Path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshFormatError(f"{path}: not a PLY file (offset 0)")
        fmt = None
        elements: list[tuple[str, int, list]] = []
        lineno = 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise MeshFormatError(f"{path}:{lineno}: unexpected end of header")
            line = raw.decode("ascii", errors="replace").strip()
            if line == "end_header":
                break
            parts = line.split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise MeshFormatError(f"{path}:{lineno}: property before element")
                if parts[1] == "list":
                    elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
                else:
                    elements[-1][2].append(("scalar", parts[1], parts[2]))
        if fmt != "binary_little_endian":
            raise MeshFormatError(
                f"{path}: format {fmt!r} not supported (binary_little_endian only)"
            )

        verts = None
        faces = None
        uv = None
        for name, count, props in elements:
            if name == "vertex":
                if any(kind != "scalar" for kind, *_ in props):
                    raise MeshFormatError(f"{path}: list properties on vertex element unsupported")
                dtype = np.dtype([(p[2], "<" + _PLY_TYPES[p[1]]) for p in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
                for axis in "xyz":
                    if axis not in dtype.names:
                        raise MeshFormatError(f"{path}: vertex element missing property {axis!r}")
                verts = np.stack(
                    [data["x"], data["y"], data["z"]], axis=1
                ).astype(np.float64)
                if "s" in dtype.names and "t" in dtype.names:
                    uv = np.stack([data["s"], data["t"]], axis=1).astype(np.float64)
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise MeshFormatError(f"{path}: face element must have one list property")
                _, cnt_t, idx_t, prop_name = props[0]
                if prop_name not in ("vertex_indices", "vertex_index"):
                    raise MeshFormatError(f"{path}: unsupported face property {prop_name!r}")
                cnt_dt = np.dtype("<" + _PLY_TYPES[cnt_t])
                idx_dt = np.dtype("<" + _PLY_TYPES[idx_t])
                out = np.empty((count, 3), dtype=np.int64)
                for i in range(count):
                    nb = fh.read(cnt_dt.itemsize)
                    if len(nb) < cnt_dt.itemsize:
                        raise MeshFormatError(f"{path}: truncated at face {i} (offset {fh.tell()})")
                    n = int(np.frombuffer(nb, dtype=cnt_dt)[0])
                    if n != 3:
                        raise MeshFormatError(f"{path}: face {i} has {n} vertices; triangles only")
                    ib = fh.read(idx_dt.itemsize * 3)
                    if len(ib) < idx_dt.itemsize * 3:
                        raise MeshFormatError(f"{path}: truncated at face {i} (offset {fh.tell()})")
                    out[i] = np.frombuffer(ib, dtype=idx_dt)
                faces = out
            else:
                # skip unknown fixed-size elements
                width = 0
                for kind, *rest in props:
                    if kind == "list":
                        raise MeshFormatError(
                            f"{path}: cannot skip element {name!r} with list property"
                        )
                    width += np.dtype(_PLY_TYPES[rest[0]]).itemsize
                fh.seek(width * count, 1)
        if verts is None or faces is None:
            raise MeshFormatError(f"{path}: missing vertex or face element")
        return verts, faces, uv


def _write_ply(mesh: TriMesh, path: Path) -> None:
    header = ["ply", "format binary_little_endian 1.0"]
    header.append(f"element vertex {mesh.n_vertices}")
    header += ["property double x", "property double y", "property double z"]
    if mesh.uv is not None:
        header += ["property double s", "property double t"]
    header.append(f"element face {mesh.n_faces}")
    header.append("property list uchar int32 vertex_indices")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if mesh.uv is not None:
            vdata = np.concatenate([mesh.vertices, mesh.uv], axis=1)
        else:
            vdata = mesh.vertices
        fh.write(np.ascontiguousarray(vdata, dtype="<f8").tobytes())
        fdata = np.empty(
            mesh.n_faces, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        )
        fdata["n"] = 3
        fdata["idx"] = mesh.faces
        fh.write(fdata.tobytes())


def load_manifest(path: PathLike):
    """Load a sequence manifest (JSON: frame_rate + frame file list).

    Returns (MeshSequence, list of frame paths). Frame paths are resolved
    relative to the manifest location.
    """
    import json

    from .mesh import MeshSequence

    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "frames" not in doc:
        raise MeshFormatError(f"{path}: manifest must be an object with a 'frames' list")
    frame_paths = [path.parent / p for p in doc["frames"]]
    frames = [load_mesh(p) for p in frame_paths]
    seq = MeshSequence(frames, frame_rate=float(doc.get("frame_rate", 30.0)))
    return seq, frame_paths
