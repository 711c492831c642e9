"""Embedded deformation graphs: sparse node sets carrying rigid transforms
that warp an attached mesh, with an as-rigid-as-possible regularizer and a
coarse-to-fine hierarchy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_array
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import quat
from .errors import VolanimError
from .mesh import TriMesh

log = logging.getLogger(__name__)

DEFAULT_K = 4


@dataclass(eq=False)
class DeformationGraph:
    """Deformation carrier: nodes with rest positions and rigid transforms.

    A mesh vertex v bound to nodes j with weights w_j warps to
        v' = sum_j w_j [ R_j (v - g_j) + g_j + t_j ]
    where g_j is the node rest position.
    """

    node_rest: np.ndarray        # (M, 3)
    rotations: np.ndarray        # (M, 4) unit quaternions
    translations: np.ndarray     # (M, 3)
    edges: np.ndarray            # (E, 2) undirected, i < j
    binding_nodes: np.ndarray    # (V, K)
    binding_weights: np.ndarray  # (V, K), rows sum to 1
    node_spacing: float

    @property
    def n_nodes(self) -> int:
        return len(self.node_rest)

    def identity_transforms(self) -> "DeformationGraph":
        m = self.n_nodes
        return replace(
            self,
            rotations=np.tile(quat.IDENTITY, (m, 1)),
            translations=np.zeros((m, 3)),
        )

    def with_transforms(self, rotations: np.ndarray, translations: np.ndarray) -> "DeformationGraph":
        return replace(
            self,
            rotations=np.asarray(rotations, dtype=np.float64).reshape(self.n_nodes, 4),
            translations=np.asarray(translations, dtype=np.float64).reshape(self.n_nodes, 3),
        )

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "node_spacing": self.node_spacing,
            "node_rest": self.node_rest.tolist(),
            "rotations": self.rotations.tolist(),
            "translations": self.translations.tolist(),
            "edges": self.edges.tolist(),
            "binding_nodes": self.binding_nodes.tolist(),
            "binding_weights": self.binding_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationGraph":
        return cls(
            node_rest=np.asarray(d["node_rest"], dtype=np.float64),
            rotations=np.asarray(d["rotations"], dtype=np.float64),
            translations=np.asarray(d["translations"], dtype=np.float64),
            edges=np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
            binding_nodes=np.asarray(d["binding_nodes"], dtype=np.int64),
            binding_weights=np.asarray(d["binding_weights"], dtype=np.float64),
            node_spacing=float(d["node_spacing"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DeformationGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def farthest_point_sample(points: np.ndarray, min_dist: float) -> np.ndarray:
    """Deterministic farthest-point subsample seeded at index 0; stops when
    the farthest remaining point is closer than min_dist to the sample set.
    Guarantees pairwise distances >= min_dist."""
    n = len(points)
    picked = [0]
    d = np.linalg.norm(points - points[0], axis=1)
    while True:
        nxt = int(np.argmax(d))
        if d[nxt] < min_dist:
            break
        picked.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(picked, dtype=np.int64)


def bind_points(node_positions: np.ndarray, points: np.ndarray, k: int = DEFAULT_K):
    """K-nearest binding with falloff weights w_j ~ (1 - d_j / d_{K+1})^2.

    Returns (node ids (N, K_eff), weights (N, K_eff)); weights normalized to
    sum to 1. With at most K nodes available, all nodes are used and the
    falloff reference is twice the farthest used distance.
    """
    m = len(node_positions)
    k_eff = min(k, m)
    tree = cKDTree(node_positions)
    dist, idx = tree.query(points, k=min(k_eff + 1, m))
    if dist.ndim == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    if m > k_eff:
        d_ref = dist[:, -1:]
        dist = dist[:, :k_eff]
        idx = idx[:, :k_eff]
    else:
        d_ref = 2.0 * np.maximum(dist[:, -1:], 1e-300)
    w = np.maximum(1.0 - dist / np.maximum(d_ref, 1e-300), 0.0) ** 2
    sums = w.sum(axis=1, keepdims=True)
    degenerate = sums[:, 0] < 1e-12
    if degenerate.any():
        w[degenerate] = 1.0
        sums = w.sum(axis=1, keepdims=True)
    return idx.astype(np.int64), w / sums


def build_graph(mesh: TriMesh, node_spacing: float, k: int = DEFAULT_K) -> DeformationGraph:
    """Sample graph nodes from mesh vertices (farthest-point, spacing
    criterion 0.7 * node_spacing), bind every vertex to its K nearest nodes,
    and connect nodes sharing a bound vertex.

    A spacing larger than the bounding-box diagonal degenerates to a single
    node (with a warning); disconnected k-nearest graphs over a connected
    surface are repaired by linking nearest node pairs across components.
    """
    if node_spacing <= 0:
        raise VolanimError("node_spacing must be positive")
    if mesh.n_vertices == 0:
        raise VolanimError("cannot build a deformation graph over an empty mesh")

    diag = mesh.bbox_diagonal()
    if node_spacing > diag:
        log.warning(
            "node_spacing %.4g exceeds bbox diagonal %.4g; using a single node",
            node_spacing,
            diag,
        )
        node_ids = np.array([0], dtype=np.int64)
    else:
        node_ids = farthest_point_sample(mesh.vertices, 0.7 * node_spacing)

    nodes = np.array(mesh.vertices[node_ids])
    bind_idx, bind_w = bind_points(nodes, mesh.vertices, k=k)

    edges = _edges_from_bindings(bind_idx, len(nodes))
    edges = _ensure_connected(nodes, edges)

    m = len(nodes)
    return DeformationGraph(
        node_rest=nodes,
        rotations=np.tile(quat.IDENTITY, (m, 1)),
        translations=np.zeros((m, 3)),
        edges=edges,
        binding_nodes=bind_idx,
        binding_weights=bind_w,
        node_spacing=float(node_spacing),
    )


def _edges_from_bindings(bind_idx: np.ndarray, n_nodes: int) -> np.ndarray:
    if bind_idx.shape[1] < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = []
    kk = bind_idx.shape[1]
    for a in range(kk):
        for b in range(a + 1, kk):
            pairs.append(np.stack([bind_idx[:, a], bind_idx[:, b]], axis=1))
    e = np.concatenate(pairs, axis=0)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def _ensure_connected(nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    m = len(nodes)
    if m <= 1:
        return edges
    while True:
        adj = coo_array(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(m, m)
        )
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp == 1:
            return edges
        # join component 0 to the nearest node of the nearest other component
        in0 = np.where(labels == 0)[0]
        out0 = np.where(labels != 0)[0]
        d = np.linalg.norm(nodes[in0][:, None, :] - nodes[out0][None, :, :], axis=2)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        a, b = sorted((int(in0[i]), int(out0[j])))
        edges = np.concatenate([edges, [[a, b]]], axis=0)
        edges = np.unique(edges, axis=0)


def apply_deformation(graph: DeformationGraph, mesh: TriMesh) -> TriMesh:
    """Warp a mesh by the graph: topology unchanged, positions re-blended."""
    if len(graph.binding_nodes) != mesh.n_vertices:
        raise VolanimError(
            f"graph bindings cover {len(graph.binding_nodes)} vertices, "
            f"mesh has {mesh.n_vertices}"
        )
    return mesh.with_vertices(warp_points(graph, mesh.vertices))


def warp_points(graph: DeformationGraph, points: np.ndarray) -> np.ndarray:
    """Apply the embedded-deformation warp to points using the stored
    bindings (points must be the positions the bindings were built for)."""
    rot = quat.to_matrix(graph.rotations)  # (M,3,3)
    idx = graph.binding_nodes
    w = graph.binding_weights
    g = graph.node_rest[idx]               # (V,K,3)
    local = points[:, None, :] - g
    rotated = np.einsum("vkab,vkb->vka", rot[idx], local)
    warped = rotated + g + graph.translations[idx]
    return np.einsum("vk,vka->va", w, warped)


def arap_energy(graph: DeformationGraph) -> float:
    """As-rigid-as-possible regularizer over node edges.

    Sums || R_j (g_k - g_j) + g_j + t_j - (g_k + t_k) ||^2 over both
    orientations of every stored edge; zero iff neighboring transforms agree
    with a common rigid motion along each edge.
    """
    r = arap_residuals(graph)
    return float(np.sum(r * r))


def arap_residuals(graph: DeformationGraph) -> np.ndarray:
    """Stacked per-directed-edge residual vectors, shape (2E, 3).

    Evaluated as (R_j - I)(g_k - g_j) + t_j - t_k, which is algebraically
    R_j (g_k - g_j) + g_j + t_j - (g_k + t_k) with the rest positions
    cancelled analytically (identity transforms give exactly zero)."""
    if len(graph.edges) == 0:
        return np.zeros((0, 3))
    j = np.concatenate([graph.edges[:, 0], graph.edges[:, 1]])
    k = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]])
    g = graph.node_rest
    t = graph.translations
    rj = quat.to_matrix(graph.rotations[j])
    d = g[k] - g[j]
    return np.einsum("eab,eb->ea", rj, d) - d + t[j] - t[k]


def arap_translation_gradient(graph: DeformationGraph) -> np.ndarray:
    """Analytic gradient of arap_energy with respect to node translations,
    shape (M, 3): each directed edge (j, k) contributes +2r to t_j, -2r to t_k."""
    grad = np.zeros((graph.n_nodes, 3))
    if len(graph.edges) == 0:
        return grad
    r = arap_residuals(graph)
    j = np.concatenate([graph.edges[:, 0], graph.edges[:, 1]])
    k = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]])
    np.add.at(grad, j, 2.0 * r)
    np.add.at(grad, k, -2.0 * r)
    return grad


@dataclass(eq=False)
class GraphHierarchy:
    """Graphs from coarse to fine plus per-level prolongation weights.

    prolongation[level] binds level's nodes to level-1's nodes (None for the
    coarsest level)."""

    levels: list[DeformationGraph]
    prolongation: list[Optional[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)

    @classmethod
    def build(
        cls,
        mesh: TriMesh,
        finest_spacing: float,
        n_levels: int = 3,
        ratio: float = 2.0,
        k: int = DEFAULT_K,
    ) -> "GraphHierarchy":
        spacings = [finest_spacing * ratio ** (n_levels - 1 - i) for i in range(n_levels)]
        levels = [build_graph(mesh, s, k=k) for s in spacings]
        prol: list[Optional[tuple[np.ndarray, np.ndarray]]] = [None]
        for lv in range(1, n_levels):
            idx, w = bind_points(levels[lv - 1].node_rest, levels[lv].node_rest, k=k)
            prol.append((idx, w))
        return cls(levels=levels, prolongation=prol)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def transfer_transforms(
    solved: DeformationGraph,
    target: DeformationGraph,
    bind_idx: Optional[np.ndarray] = None,
    bind_w: Optional[np.ndarray] = None,
) -> DeformationGraph:
    """Initialize target's node transforms from a solved graph.

    Rotations: weighted quaternion average over the bound solved nodes,
    sign-aligned to the highest-weight neighbor. Translations: warp each
    target node's rest position through the solved graph and take
    (warped - rest). Exact for globally rigid solutions."""
    if bind_idx is None or bind_w is None:
        bind_idx, bind_w = bind_points(solved.node_rest, target.node_rest, k=DEFAULT_K)
    rots = quat.weighted_mean(solved.rotations[bind_idx], bind_w)

    rot_m = quat.to_matrix(solved.rotations)
    g = solved.node_rest[bind_idx]
    local = target.node_rest[:, None, :] - g
    warped = (
        np.einsum("vkab,vkb->vka", rot_m[bind_idx], local)
        + g
        + solved.translations[bind_idx]
    )
    warped = np.einsum("vk,vka->va", bind_w, warped)
    return target.with_transforms(rots, warped - target.node_rest)


def refine_to_level(
    hierarchy: GraphHierarchy, coarse_solution: DeformationGraph, level: int
) -> DeformationGraph:
    """Prolong the solved graph at level-1 to initialize the given level."""
    if not 1 <= level < hierarchy.n_levels:
        raise VolanimError(f"level {level} out of range (1..{hierarchy.n_levels - 1})")
    coarse = hierarchy.levels[level - 1]
    if coarse_solution.n_nodes != coarse.n_nodes:
        raise VolanimError(
            "coarse_solution does not match the hierarchy's level "
            f"{level - 1} ({coarse_solution.n_nodes} vs {coarse.n_nodes} nodes)"
        )
    idx, w = hierarchy.prolongation[level]
    return transfer_transforms(coarse_solution, hierarchy.levels[level], idx, w)
