"""Region-weighted quadric edge-collapse simplification.

Classic quadric error metrics with one twist: the collapse cost of an edge
is multiplied by mean(importance of its endpoints) ** importance_exponent,
so high-importance regions (faces, hands, ...) keep a denser triangulation.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from .errors import MeshValidationError
from .mesh import TriMesh

log = logging.getLogger(__name__)

_COND_LIMIT = 1e8


@dataclass
class DecimationParams:
    target_faces: int
    importance_exponent: float = 2.0
    preserve_boundary: bool = True

    def __post_init__(self):
        if self.target_faces < 4:
            raise ValueError("target_faces must be >= 4")
        if self.importance_exponent < 0:
            raise ValueError("importance_exponent must be >= 0")


def plane_quadric(normal: np.ndarray, d: float, weight: float = 1.0) -> np.ndarray:
    """4x4 quadric of the plane n.x + d = 0 (n unit), scaled by weight."""
    p = np.concatenate([normal, [d]])
    return weight * np.outer(p, p)


def evaluate_quadric(q: np.ndarray, x: np.ndarray) -> float:
    h = np.concatenate([x, [1.0]])
    return float(h @ q @ h)


def compute_vertex_quadrics(mesh: TriMesh) -> np.ndarray:
    """Per-vertex sum of incident-face plane quadrics, weighted by face area.

    Degenerate faces (zero area) are skipped with a log report. Returns an
    array of shape (V, 4, 4).
    """
    v = mesh.vertices
    f = mesh.faces
    cross = mesh.face_cross
    areas = mesh.face_areas
    ok = areas > 0.0
    n_skipped = int((~ok).sum())
    if n_skipped:
        log.info("compute_vertex_quadrics: skipped %d degenerate faces", n_skipped)

    normals = np.zeros_like(cross)
    normals[ok] = cross[ok] / (2.0 * areas[ok, None])
    d = -np.einsum("ij,ij->i", normals, v[f[:, 0]])
    planes = np.concatenate([normals, d[:, None]], axis=1)  # (F,4)
    face_q = areas[:, None, None] * np.einsum("fi,fj->fij", planes, planes)
    face_q[~ok] = 0.0

    quadrics = np.zeros((mesh.n_vertices, 4, 4))
    for k in range(3):
        np.add.at(quadrics, f[:, k], face_q)
    return quadrics


def _boundary_quadrics(mesh: TriMesh, weight_scale: float) -> np.ndarray:
    """Constraint quadrics for boundary edges: planes through the edge,
    perpendicular to the adjacent face, weighted by edge length squared."""
    edges, counts = mesh.edge_face_counts
    boundary = edges[counts == 1]
    extra = np.zeros((mesh.n_vertices, 4, 4))
    if len(boundary) == 0:
        return extra

    # face adjacent to each boundary edge
    f = mesh.faces
    all_e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    all_e = np.sort(all_e, axis=1)
    face_of = np.tile(np.arange(mesh.n_faces), 3)
    key_all = all_e[:, 0] * mesh.n_vertices + all_e[:, 1]
    key_b = boundary[:, 0] * mesh.n_vertices + boundary[:, 1]
    order = np.argsort(key_all, kind="stable")
    pos = np.searchsorted(key_all[order], key_b)
    adj_face = face_of[order[pos]]

    v = mesh.vertices
    e_vec = v[boundary[:, 1]] - v[boundary[:, 0]]
    fn = mesh.face_normals[adj_face]
    n = np.cross(e_vec, fn)
    lens = np.linalg.norm(n, axis=1)
    lens[lens == 0.0] = 1.0
    n = n / lens[:, None]
    d = -np.einsum("ij,ij->i", n, v[boundary[:, 0]])
    planes = np.concatenate([n, d[:, None]], axis=1)
    w = weight_scale * np.einsum("ij,ij->i", e_vec, e_vec)
    q = w[:, None, None] * np.einsum("ei,ej->eij", planes, planes)
    for k in range(2):
        np.add.at(extra, boundary[:, k], q)
    return extra


def optimal_contraction_point(q: np.ndarray, p1: np.ndarray, p2: np.ndarray):
    """Contraction target for the combined quadric q.

    Solves the 3x3 stationary system when it is well conditioned
    (cond < 1e8), otherwise falls back to the best of midpoint/endpoints.
    Returns (point, cost).
    """
    a = q[:3, :3]
    b = q[:3, 3]
    try:
        cond = np.linalg.cond(a)
    except np.linalg.LinAlgError:
        cond = np.inf
    if np.isfinite(cond) and cond < _COND_LIMIT:
        x = np.linalg.solve(a, -b)
        return x, max(evaluate_quadric(q, x), 0.0)
    candidates = [0.5 * (p1 + p2), p1, p2]
    costs = [max(evaluate_quadric(q, x), 0.0) for x in candidates]
    i = int(np.argmin(costs))
    return candidates[i], costs[i]


class _CollapseMesh:
    """Mutable connectivity for the collapse loop."""

    def __init__(self, mesh: TriMesh):
        self.pos = [p for p in np.array(mesh.vertices)]
        self.imp = list(np.array(mesh.effective_importance()))
        self.faces = {i: tuple(face) for i, face in enumerate(mesh.faces.tolist())}
        self.vface: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
        for fid, face in self.faces.items():
            for vid in face:
                self.vface[vid].add(fid)
        self.alive = [True] * mesh.n_vertices

    def neighbors(self, v: int) -> set[int]:
        out = set()
        for fid in self.vface[v]:
            out.update(self.faces[fid])
        out.discard(v)
        return out

    def is_boundary_edge(self, i: int, j: int) -> bool:
        shared = self.vface[i] & self.vface[j]
        return len(shared) < 2

    def link_ok(self, i: int, j: int) -> bool:
        """Edge-collapse link condition: the common neighbors of i and j
        must be exactly the apex vertices of the faces sharing edge (i,j)."""
        shared_faces = self.vface[i] & self.vface[j]
        apex = set()
        for fid in shared_faces:
            for vid in self.faces[fid]:
                if vid != i and vid != j:
                    apex.add(vid)
        common = self.neighbors(i) & self.neighbors(j)
        return common == apex

    def flips_or_degenerates(self, i: int, j: int, target: np.ndarray) -> bool:
        """Would moving i and j to target flip (normal dot < 0) or squash
        any surviving face?"""
        for v in (i, j):
            for fid in self.vface[v]:
                face = self.faces[fid]
                if i in face and j in face:
                    continue  # face removed by the collapse
                before = [self.pos[k] for k in face]
                after = [target if k in (i, j) else self.pos[k] for k in face]
                n0 = np.cross(before[1] - before[0], before[2] - before[0])
                n1 = np.cross(after[1] - after[0], after[2] - after[0])
                if float(np.dot(n0, n1)) < 0.0:
                    return True
                if 0.5 * float(np.linalg.norm(n1)) < 1e-12:
                    return True
        return False

    def collapse(self, i: int, j: int, target: np.ndarray) -> None:
        """Merge j into i at position target."""
        self.pos[i] = target
        self.imp[i] = 0.5 * (self.imp[i] + self.imp[j])
        dead = self.vface[i] & self.vface[j]
        for fid in dead:
            for vid in self.faces[fid]:
                self.vface[vid].discard(fid)
            del self.faces[fid]
        for fid in list(self.vface[j]):
            face = self.faces[fid]
            self.faces[fid] = tuple(i if vid == j else vid for vid in face)
            self.vface[j].discard(fid)
            self.vface[i].add(fid)
        self.alive[j] = False

    def n_faces(self) -> int:
        return len(self.faces)

    def to_trimesh(self, original: TriMesh) -> TriMesh:
        remap = -np.ones(len(self.pos), dtype=np.int64)
        keep = sorted({vid for face in self.faces.values() for vid in face})
        remap[keep] = np.arange(len(keep))
        verts = np.array([self.pos[v] for v in keep])
        faces = np.array(
            [[remap[v] for v in self.faces[fid]] for fid in sorted(self.faces)],
            dtype=np.int64,
        )
        imp = None
        if original.importance is not None:
            imp = np.clip(np.array([self.imp[v] for v in keep]), 0.0, 1.0)
        return TriMesh(verts, faces, importance=imp)


def decimate(mesh: TriMesh, params: DecimationParams) -> TriMesh:
    """Collapse edges (lowest weighted quadric cost first) until the face
    count reaches params.target_faces or no legal collapse remains.

    Cost of edge (i, j) = (Q_i + Q_j evaluated at the optimal contraction
    point) * mean(importance_i, importance_j) ** importance_exponent.
    Collapses that flip a face normal, squash a face, or break the link
    condition (which would change topology) are rejected. Ties resolve by
    (cost, min vertex id, max vertex id).
    """
    if params.target_faces >= mesh.n_faces:
        return mesh

    quadrics = list(compute_vertex_quadrics(mesh))
    if params.preserve_boundary:
        extra = _boundary_quadrics(mesh, weight_scale=1.0)
        for i in range(mesh.n_vertices):
            quadrics[i] = quadrics[i] + extra[i]

    cm = _CollapseMesh(mesh)
    version = [0] * mesh.n_vertices
    serial = iter(range(1 << 62))  # keeps heap tuples comparable past the versions

    def edge_entry(i: int, j: int):
        i, j = (i, j) if i < j else (j, i)
        q = quadrics[i] + quadrics[j]
        point, cost = optimal_contraction_point(q, cm.pos[i], cm.pos[j])
        imp = 0.5 * (cm.imp[i] + cm.imp[j])
        cost *= imp ** params.importance_exponent
        return (cost, i, j, version[i], version[j], next(serial), point)

    heap = []
    seen = set()
    for face in cm.faces.values():
        for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
            key = (a, b) if a < b else (b, a)
            if key not in seen:
                seen.add(key)
                heap.append(edge_entry(*key))
    heapq.heapify(heap)

    while cm.n_faces() > params.target_faces and heap:
        cost, i, j, vi, vj, _, point = heapq.heappop(heap)
        if not (cm.alive[i] and cm.alive[j]):
            continue
        if version[i] != vi or version[j] != vj:
            continue  # stale entry; a fresh one exists (or will be pushed)
        if j not in cm.neighbors(i):
            continue
        if not cm.link_ok(i, j):
            continue
        if cm.flips_or_degenerates(i, j, point):
            continue
        quadrics[i] = quadrics[i] + quadrics[j]
        cm.collapse(i, j, point)
        version[i] += 1
        version[j] += 1
        for nb in sorted(cm.neighbors(i)):
            heapq.heappush(heap, edge_entry(i, nb))

    if cm.n_faces() > params.target_faces:
        log.warning(
            "decimate: stopped at %d faces (target %d); no legal collapses remain",
            cm.n_faces(),
            params.target_faces,
        )
    return cm.to_trimesh(mesh)
