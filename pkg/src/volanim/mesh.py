"""Indexed triangle meshes, sequences, and topology/geometry queries.

The core representation is an indexed face set; adjacency tables are built
on demand and cached on the (immutable) mesh object. All geometric
quantities are in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse import coo_array
from scipy.sparse.csgraph import connected_components

from .errors import MeshValidationError

# Faces with area below this are rejected by load-time validation.
MIN_FACE_AREA = 1e-12


def _as_float_array(a, shape_tail, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim != 2 or arr.shape[1:] != shape_tail:
        raise MeshValidationError(f"{name} must have shape (N, {shape_tail[0]}), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise MeshValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh: (V,3) float64 positions, (F,3) int64 faces.

    ``importance`` is an optional per-vertex scalar in [0,1] (defaults to 1
    everywhere); ``uv`` optional per-vertex 2D coordinates, carried through
    but never interpreted.
    """

    vertices: np.ndarray
    faces: np.ndarray
    importance: Optional[np.ndarray] = None
    uv: Optional[np.ndarray] = None

    def __post_init__(self):
        verts = _as_float_array(self.vertices, (3,), "vertices")
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshValidationError(f"faces must have shape (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            bad = np.where((faces < 0) | (faces >= len(verts)))[0]
            raise MeshValidationError(
                f"face indices out of range for {len(verts)} vertices (faces {bad[:8].tolist()})"
            )
        repeated = (
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        )
        if repeated.any():
            bad = np.where(repeated)[0]
            raise MeshValidationError(f"faces reference a vertex twice (faces {bad[:8].tolist()})")
        imp = self.importance
        if imp is not None:
            imp = np.ascontiguousarray(np.asarray(imp, dtype=np.float64))
            if imp.shape != (len(verts),):
                raise MeshValidationError(
                    f"importance must have shape ({len(verts)},), got {imp.shape}"
                )
            if imp.size and (imp.min() < 0.0 or imp.max() > 1.0):
                raise MeshValidationError("importance values must lie in [0, 1]")
            imp.flags.writeable = False
        uv = self.uv
        if uv is not None:
            uv = _as_float_array(uv, (2,), "uv")
            if uv.shape[0] != len(verts):
                raise MeshValidationError("uv must have one row per vertex")
            uv.flags.writeable = False
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "importance", imp)
        object.__setattr__(self, "uv", uv)

    # -- basic counts -------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def effective_importance(self) -> np.ndarray:
        """Per-vertex importance, defaulting to 1 where not provided."""
        if self.importance is not None:
            return self.importance
        return np.ones(self.n_vertices)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same connectivity and attributes, new positions."""
        return TriMesh(vertices, self.faces, self.importance, self.uv)

    # -- cached geometry ----------------------------------------------------

    @cached_property
    def face_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    @cached_property
    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals cross(b-a, c-a); norm = 2*area."""
        a, b, c = self.face_corners
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self.face_cross
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0.0] = 1.0
        out = n / lens[:, None]
        out.flags.writeable = False
        return out

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, normalized."""
        n = np.zeros_like(self.vertices)
        cross = self.face_cross
        for k in range(3):
            np.add.at(n, self.faces[:, k], cross)
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0.0] = 1.0
        out = n / lens[:, None]
        out.flags.writeable = False
        return out

    @cached_property
    def edges_unique(self) -> np.ndarray:
        """Sorted unique undirected edges, shape (E, 2)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_face_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique edges, number of incident faces per edge)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


def degenerate_faces(mesh: TriMesh, min_area: float = MIN_FACE_AREA) -> np.ndarray:
    """Face ids whose area falls below ``min_area`` (load-time invariant)."""
    return np.where(mesh.face_areas < min_area)[0]


def surface_area(mesh: TriMesh) -> float:
    """Total surface area in m^2 (sum of triangle areas)."""
    return float(mesh.face_areas.sum())


def genus_per_component(mesh: TriMesh) -> list[tuple[int, Union[int, str]]]:
    """Per connected component: genus for closed 2-manifold components,
    "open" / "non-manifold" flags otherwise.

    Genus is (2 - chi)/2 with chi = V - E + F on the component. Components
    are defined by edge connectivity of vertices that appear in faces;
    isolated vertices are ignored. A component whose (2 - chi) is odd or
    negative cannot be a closed orientable manifold (e.g. vertex pinches)
    and is flagged non-manifold rather than guessed.
    """
    if mesh.n_faces == 0:
        return []
    edges, counts = mesh.edge_face_counts
    nv = mesh.n_vertices
    adj = coo_array(
        (np.ones(len(edges), dtype=np.int8), (edges[:, 0], edges[:, 1])), shape=(nv, nv)
    )
    n_comp, labels = connected_components(adj, directed=False)
    used = np.zeros(nv, dtype=bool)
    used[mesh.faces.reshape(-1)] = True
    comp_ids = np.unique(labels[used])

    face_comp = labels[mesh.faces[:, 0]]
    edge_comp = labels[edges[:, 0]]

    out: list[tuple[int, Union[int, str]]] = []
    for out_id, comp in enumerate(comp_ids):
        v_count = int(np.count_nonzero(used & (labels == comp)))
        e_mask = edge_comp == comp
        e_count = int(np.count_nonzero(e_mask))
        f_count = int(np.count_nonzero(face_comp == comp))
        c = counts[e_mask]
        if (c > 2).any():
            out.append((out_id, "non-manifold"))
            continue
        if (c < 2).any():
            out.append((out_id, "open"))
            continue
        chi = v_count - e_count + f_count
        if (2 - chi) % 2 != 0 or (2 - chi) < 0:
            out.append((out_id, "non-manifold"))
            continue
        out.append((out_id, (2 - chi) // 2))
    return out


def genus_score(mesh: TriMesh) -> float:
    """Scalar topological penalty used by keyframe scoring: total genus over
    closed components, plus 1 per flagged (open or non-manifold) component."""
    total = 0.0
    for _, g in genus_per_component(mesh):
        total += g if isinstance(g, int) else 1.0
    return total


@dataclass(eq=False)
class MeshSequence:
    """Ordered list of per-frame meshes at a fixed frame rate.

    ``group_boundaries`` optionally records (keyframe index, (start, end))
    pairs partitioning the frame range; end is inclusive.
    """

    frames: Sequence[TriMesh]
    frame_rate: float = 30.0
    group_boundaries: Optional[list[tuple[int, tuple[int, int]]]] = field(default=None)

    def __post_init__(self):
        self.frames = list(self.frames)
        if self.frame_rate <= 0:
            raise MeshValidationError("frame_rate must be positive")
        if self.group_boundaries is not None:
            self._check_groups()

    def _check_groups(self):
        n = len(self.frames)
        covered = np.zeros(n, dtype=bool)
        for key, (start, end) in self.group_boundaries:
            if not (0 <= start <= key <= end < n):
                raise MeshValidationError(
                    f"keyframe {key} not inside its group range [{start}, {end}]"
                )
            if covered[start : end + 1].any():
                raise MeshValidationError("group ranges overlap")
            covered[start : end + 1] = True
        if not covered.all():
            raise MeshValidationError("group ranges do not cover the frame range")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> TriMesh:
        return self.frames[i]
