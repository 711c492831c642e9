"""Pairwise non-rigid mesh registration.

Hierarchical bidirectional ICP over an embedded deformation graph: a damped
Gauss-Newton loop minimizes point-to-plane data terms plus the ARAP graph
regularizer, coarse to fine, with the regularizer weight halved per level.
Node rotations are stored as quaternions and updated by local exponential-map
increments (renormalized every step).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_array, csr_array
from scipy.sparse.linalg import splu

from . import quat
from .defgraph import (
    DeformationGraph,
    GraphHierarchy,
    apply_deformation,
    refine_to_level,
    transfer_transforms,
    warp_points,
)
from .errors import RegistrationError
from .mesh import TriMesh
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

_MAX_DAMP_RETRIES = 10


@dataclass
class RegistrationParams:
    levels: int = 3
    iters_per_level: int = 8
    max_corr_dist: Optional[float] = None       # default: 5% of target bbox diagonal
    max_normal_angle: float = 60.0              # degrees
    arap_weight: float = 100.0                  # halved each level, coarse -> fine
    point_to_plane_weight: float = 1.0
    node_spacing: Optional[float] = None        # finest level; default 5% of source diag
    spacing_ratio: float = 2.0
    graph_k: int = 4
    corr_stride_base: int = 4                   # vertex stride 4^(levels-1-level)
    step_tol_rel: float = 1e-8                  # early level exit on tiny vertex steps

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for name in ("iters_per_level", "max_normal_angle", "arap_weight",
                     "point_to_plane_weight", "spacing_ratio", "graph_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_corr_dist is not None and self.max_corr_dist <= 0:
            raise ValueError("max_corr_dist must be positive")
        if self.node_spacing is not None and self.node_spacing <= 0:
            raise ValueError("node_spacing must be positive")


@dataclass(frozen=True)
class Correspondence:
    """One ICP constraint (mainly for inspection; solvers use the arrays)."""

    direction: str              # "forward" (source->target) or "reverse"
    source_vertex: Optional[int]
    source_face: Optional[int]
    source_bary: Optional[tuple]
    target_point: np.ndarray
    normal: np.ndarray
    distance: float
    weight: float = 1.0


@dataclass(eq=False)
class CorrespondenceSet:
    """Pruned bidirectional correspondences in array form.

    Forward: source vertex -> closest target surface point (plane there).
    Reverse: target vertex -> closest point (face, bary) on the deformed
    source; the plane sits at the target vertex.
    """

    fwd_vid: np.ndarray      # (Nf,) source vertex ids
    fwd_point: np.ndarray    # (Nf,3) target surface points
    fwd_normal: np.ndarray   # (Nf,3)
    fwd_dist: np.ndarray     # (Nf,)
    rev_face: np.ndarray     # (Nr,) source face ids
    rev_bary: np.ndarray     # (Nr,3)
    rev_point: np.ndarray    # (Nr,3) target vertex positions
    rev_normal: np.ndarray   # (Nr,3)
    rev_dist: np.ndarray     # (Nr,)

    def __len__(self) -> int:
        return len(self.fwd_vid) + len(self.rev_face)

    def __getitem__(self, i: int) -> Correspondence:
        nf = len(self.fwd_vid)
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        if i < nf:
            return Correspondence(
                "forward", int(self.fwd_vid[i]), None, None,
                self.fwd_point[i], self.fwd_normal[i], float(self.fwd_dist[i]),
            )
        j = i - nf
        return Correspondence(
            "reverse", None, int(self.rev_face[j]), tuple(self.rev_bary[j]),
            self.rev_point[j], self.rev_normal[j], float(self.rev_dist[j]),
        )


def _interp_normals(mesh: TriMesh, faces: np.ndarray, bary: np.ndarray) -> np.ndarray:
    vn = mesh.vertex_normals
    tri = mesh.faces[faces]
    n = np.einsum("nk,nkd->nd", bary, vn[tri])
    lens = np.linalg.norm(n, axis=1)
    # fall back to the face normal where interpolation cancels out
    bad = lens < 1e-12
    if bad.any():
        n[bad] = mesh.face_normals[faces[bad]]
        lens[bad] = 1.0
    return n / lens[:, None]


def find_correspondences(
    source: TriMesh,
    target: TriMesh,
    params: RegistrationParams,
    target_index: Optional[SpatialIndex] = None,
    source_index: Optional[SpatialIndex] = None,
    stride: int = 1,
) -> CorrespondenceSet:
    """Bidirectional closest-point correspondences, pruned by the distance
    and normal-angle gates. `source` is the current deformed source."""
    if target_index is None:
        target_index = SpatialIndex.build(target)
    if source_index is None:
        source_index = SpatialIndex.build(source)
    max_dist = params.max_corr_dist
    if max_dist is None:
        max_dist = 0.05 * target.bbox_diagonal()
    cos_gate = np.cos(np.deg2rad(params.max_normal_angle))

    # forward: source vertices onto target surface
    svid = np.arange(source.n_vertices)[::stride]
    f_face, f_point, f_bary, f_dist = target_index.closest_points(source.vertices[svid])
    f_normal = _interp_normals(target, f_face, f_bary)
    keep = f_dist <= max_dist
    dots = np.einsum("ij,ij->i", source.vertex_normals[svid], f_normal)
    keep &= dots >= cos_gate
    fwd = (svid[keep], f_point[keep], f_normal[keep], f_dist[keep])

    # reverse: target vertices onto current source surface
    tvid = np.arange(target.n_vertices)[::stride]
    r_face, _, r_bary, r_dist = source_index.closest_points(target.vertices[tvid])
    r_src_normal = _interp_normals(source, r_face, r_bary)
    keep_r = r_dist <= max_dist
    t_norm = target.vertex_normals[tvid]
    dots_r = np.einsum("ij,ij->i", t_norm, r_src_normal)
    keep_r &= dots_r >= cos_gate
    rev = (
        r_face[keep_r],
        r_bary[keep_r],
        target.vertices[tvid][keep_r],
        t_norm[keep_r],
        r_dist[keep_r],
    )

    return CorrespondenceSet(
        fwd_vid=fwd[0], fwd_point=fwd[1], fwd_normal=fwd[2], fwd_dist=fwd[3],
        rev_face=rev[0], rev_bary=rev[1], rev_point=rev[2], rev_normal=rev[3],
        rev_dist=rev[4],
    )


@dataclass(eq=False)
class RegistrationResult:
    deformed_source: TriMesh
    graph: DeformationGraph
    error: float
    iterations_used: int
    converged: bool
    level_reports: list = field(default_factory=list)


def registration_error(a: TriMesh, b: TriMesh,
                       index_a: Optional[SpatialIndex] = None,
                       index_b: Optional[SpatialIndex] = None) -> float:
    """Symmetric RMS point-to-surface distance between two meshes (m)."""
    if a.n_vertices == 0 or b.n_vertices == 0:
        raise RegistrationError("registration_error needs non-empty meshes")
    if index_a is None:
        index_a = SpatialIndex.build(a)
    if index_b is None:
        index_b = SpatialIndex.build(b)
    d_ab = index_b.closest_points(a.vertices)[3]
    d_ba = index_a.closest_points(b.vertices)[3]
    d2 = np.concatenate([d_ab * d_ab, d_ba * d_ba])
    return float(np.sqrt(d2.mean()))


class _GraphSolver:
    """Damped Gauss-Newton state for one graph: increment parameterization
    [delta_rot (3), delta_t (3)] per node."""

    def __init__(self, graph: DeformationGraph, source: TriMesh,
                 arap_weight: float, ptp_weight: float):
        self.graph = graph
        self.source = source
        self.arap_weight = arap_weight
        self.ptp_weight = ptp_weight
        self.m = graph.n_nodes
        # directed edges
        if len(graph.edges):
            self.edge_j = np.concatenate([graph.edges[:, 0], graph.edges[:, 1]])
            self.edge_k = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]])
        else:
            self.edge_j = np.zeros(0, dtype=np.int64)
            self.edge_k = np.zeros(0, dtype=np.int64)

    # -- residuals ----------------------------------------------------------

    def deformed_vertices(self) -> np.ndarray:
        return warp_points(self.graph, self.source.vertices)

    def energy(self, corr: CorrespondenceSet, deformed: Optional[np.ndarray] = None) -> float:
        if deformed is None:
            deformed = self.deformed_vertices()
        e = 0.0
        if len(corr.fwd_vid):
            r = np.einsum(
                "ij,ij->i", corr.fwd_normal, deformed[corr.fwd_vid] - corr.fwd_point
            )
            e += self.ptp_weight * float(r @ r)
        if len(corr.rev_face):
            tri = self.source.faces[corr.rev_face]
            p = np.einsum("nk,nkd->nd", corr.rev_bary, deformed[tri])
            r = np.einsum("ij,ij->i", corr.rev_normal, p - corr.rev_point)
            e += self.ptp_weight * float(r @ r)
        g = self.graph
        from .defgraph import arap_residuals

        ra = arap_residuals(g)
        e += self.arap_weight * float(np.sum(ra * ra))
        return e

    # -- assembly -----------------------------------------------------------

    def _binding_blocks(self, vids: np.ndarray):
        """Per (vertex, binding) arrays used for data-term Jacobians."""
        g = self.graph
        nodes = g.binding_nodes[vids]          # (N,K)
        w = g.binding_weights[vids]            # (N,K)
        rot = quat.to_matrix(g.rotations)      # (M,3,3)
        local = self.source.vertices[vids][:, None, :] - g.node_rest[nodes]
        a = np.einsum("nkab,nkb->nka", rot[nodes], local)  # R_j (v - g_j)
        return nodes, w, a

    def assemble(self, corr: CorrespondenceSet, deformed: np.ndarray):
        """Weighted residual vector r and sparse Jacobian J (rows: forward,
        reverse, ARAP x3) over the 6M increment parameters."""
        rows_list = []
        cols_list = []
        vals_list = []
        res_list = []
        row0 = 0
        sp = np.sqrt(self.ptp_weight)

        if len(corr.fwd_vid):
            n = corr.fwd_normal
            r = sp * np.einsum("ij,ij->i", n, deformed[corr.fwd_vid] - corr.fwd_point)
            nodes, w, a = self._binding_blocks(corr.fwd_vid)
            k = nodes.shape[1]
            # d r / d delta_j = w * (a x n); d r / d dt_j = w * n
            axn = np.cross(a, n[:, None, :])
            jrot = sp * w[:, :, None] * axn
            jt = sp * w[:, :, None] * n[:, None, :]
            nf = len(r)
            rr = np.repeat(np.arange(nf) + row0, k * 6)
            cc = np.empty((nf, k, 6), dtype=np.int64)
            cc[:, :, 0:3] = 6 * nodes[:, :, None] + np.arange(3)
            cc[:, :, 3:6] = 6 * nodes[:, :, None] + 3 + np.arange(3)
            vv = np.concatenate([jrot, jt], axis=2)
            rows_list.append(rr)
            cols_list.append(cc.reshape(-1))
            vals_list.append(vv.reshape(-1))
            res_list.append(r)
            row0 += nf

        if len(corr.rev_face):
            n = corr.rev_normal
            tri = self.source.faces[corr.rev_face]       # (Nr,3)
            p = np.einsum("nk,nkd->nd", corr.rev_bary, deformed[tri])
            r = sp * np.einsum("ij,ij->i", n, p - corr.rev_point)
            nr = len(r)
            for corner in range(3):
                vids = tri[:, corner]
                bw = corr.rev_bary[:, corner]
                nodes, w, a = self._binding_blocks(vids)
                k = nodes.shape[1]
                axn = np.cross(a, n[:, None, :])
                scale = (sp * bw)[:, None, None]
                jrot = scale * w[:, :, None] * axn
                jt = scale * w[:, :, None] * n[:, None, :]
                rr = np.repeat(np.arange(nr) + row0, k * 6)
                cc = np.empty((nr, k, 6), dtype=np.int64)
                cc[:, :, 0:3] = 6 * nodes[:, :, None] + np.arange(3)
                cc[:, :, 3:6] = 6 * nodes[:, :, None] + 3 + np.arange(3)
                vv = np.concatenate([jrot, jt], axis=2)
                rows_list.append(rr)
                cols_list.append(cc.reshape(-1))
                vals_list.append(vv.reshape(-1))
            res_list.append(r)
            row0 += nr

        ne = len(self.edge_j)
        if ne:
            sa = np.sqrt(self.arap_weight)
            g = self.graph
            d = g.node_rest[self.edge_k] - g.node_rest[self.edge_j]
            rj = quat.to_matrix(g.rotations[self.edge_j])
            rd = np.einsum("eab,eb->ea", rj, d)
            r = sa * (rd - d + g.translations[self.edge_j] - g.translations[self.edge_k])
            # rows: 3 per edge. d r / d delta_j = -[rd]_x ; dt_j = I ; dt_k = -I
            derot = np.zeros((ne, 3, 3))
            derot[:, 0, 1] = rd[:, 2]
            derot[:, 0, 2] = -rd[:, 1]
            derot[:, 1, 0] = -rd[:, 2]
            derot[:, 1, 2] = rd[:, 0]
            derot[:, 2, 0] = rd[:, 1]
            derot[:, 2, 1] = -rd[:, 0]
            base = row0 + 3 * np.arange(ne)
            for comp in range(3):
                rows = base + comp
                # rotation block of node j
                rows_list.append(np.repeat(rows, 3))
                cols_list.append((6 * self.edge_j[:, None] + np.arange(3)).reshape(-1))
                vals_list.append(sa * derot[:, comp, :].reshape(-1))
                # translation of j (+1) and k (-1)
                rows_list.append(rows)
                cols_list.append(6 * self.edge_j + 3 + comp)
                vals_list.append(np.full(ne, sa))
                rows_list.append(rows)
                cols_list.append(6 * self.edge_k + 3 + comp)
                vals_list.append(np.full(ne, -sa))
            res_list.append(r.reshape(-1))
            row0 += 3 * ne

        residual = np.concatenate(res_list) if res_list else np.zeros(0)
        j = coo_array(
            (np.concatenate(vals_list),
             (np.concatenate(rows_list), np.concatenate(cols_list))),
            shape=(row0, 6 * self.m),
        ).tocsr()
        return residual, j

    def apply_step(self, delta: np.ndarray) -> DeformationGraph:
        d = delta.reshape(self.m, 6)
        rot_inc = quat.from_rotvec(d[:, :3])
        new_rot = quat.normalize(quat.multiply(rot_inc, self.graph.rotations))
        new_t = self.graph.translations + d[:, 3:]
        return self.graph.with_transforms(new_rot, new_t)


def register(
    source: TriMesh,
    target: TriMesh,
    params: Optional[RegistrationParams] = None,
    init: Optional[DeformationGraph] = None,
    hierarchy: Optional[GraphHierarchy] = None,
    target_index: Optional[SpatialIndex] = None,
) -> RegistrationResult:
    """Deform `source` onto `target` (connectivity preserved).

    `init` chains a previously solved graph as the starting point;
    `hierarchy` reuses a prebuilt graph hierarchy over the same source.
    """
    if params is None:
        params = RegistrationParams()
    if source.n_vertices == 0 or target.n_vertices == 0:
        raise RegistrationError("register needs non-empty meshes")

    spacing = params.node_spacing
    if spacing is None:
        spacing = 0.05 * source.bbox_diagonal()
        if spacing <= 0.0:
            raise RegistrationError("source mesh has zero extent")
    if hierarchy is None:
        hierarchy = GraphHierarchy.build(
            source, finest_spacing=spacing, n_levels=params.levels,
            ratio=params.spacing_ratio, k=params.graph_k,
        )
    if target_index is None:
        target_index = SpatialIndex.build(target)

    diag = max(source.bbox_diagonal(), target.bbox_diagonal())
    step_tol = params.step_tol_rel * diag

    graph = hierarchy.levels[0].identity_transforms()
    if init is not None:
        graph = transfer_transforms(init, hierarchy.levels[0])

    converged = True
    iterations = 0
    level_reports = []
    for level in range(hierarchy.n_levels):
        if level > 0:
            graph = refine_to_level(hierarchy, graph, level)
        arap_w = params.arap_weight * 0.5**level
        solver = _GraphSolver(graph, source, arap_w, params.point_to_plane_weight)
        stride = int(params.corr_stride_base ** (hierarchy.n_levels - 1 - level))
        lam = 1e-4
        trace = []
        for it in range(params.iters_per_level):
            deformed = solver.deformed_vertices()
            deformed_mesh = source.with_vertices(deformed)
            corr = find_correspondences(
                deformed_mesh, target, params,
                target_index=target_index, stride=stride,
            )
            if len(corr) == 0:
                log.warning("registration level %d: no correspondences inside gates", level)
                break
            iterations += 1
            residual, jac = solver.assemble(corr, deformed)
            e0 = float(residual @ residual)
            jtj = (jac.T @ jac).tocsc()
            jtr = jac.T @ residual
            dscale = jtj.diagonal()
            floor = 1e-12 * max(float(dscale.max()), 1e-30)
            accepted = False
            for _ in range(_MAX_DAMP_RETRIES):
                damped = jtj + _diag(lam * dscale + floor)
                try:
                    delta = splu(damped.tocsc()).solve(-jtr)
                except RuntimeError:
                    lam *= 10.0
                    continue
                trial = solver.apply_step(delta)
                saved = solver.graph
                solver.graph = trial
                e1 = solver.energy(corr)
                if e1 <= e0:
                    accepted = True
                    lam = max(lam * 0.5, 1e-10)
                    step_rms = _vertex_step_rms(saved, trial, solver, deformed)
                    trace.append((e0, e1))
                    break
                solver.graph = saved
                lam *= 10.0
            if not accepted:
                converged = False
                log.warning(
                    "registration level %d iter %d: divergence at max damping", level, it
                )
                break
            if step_rms < step_tol:
                break
        graph = solver.graph
        level_reports.append(
            {"level": level, "arap_weight": arap_w, "stride": stride, "trace": trace}
        )
        if not converged:
            break

    deformed_final = apply_deformation(graph, source)
    err = registration_error(deformed_final, target, index_b=target_index)
    return RegistrationResult(
        deformed_source=deformed_final,
        graph=graph,
        error=err,
        iterations_used=iterations,
        converged=converged,
        level_reports=level_reports,
    )


def _diag(values: np.ndarray) -> csr_array:
    n = len(values)
    return csr_array((values, (np.arange(n), np.arange(n))), shape=(n, n))


def _vertex_step_rms(old: DeformationGraph, new: DeformationGraph,
                     solver: _GraphSolver, deformed_old: np.ndarray) -> float:
    deformed_new = warp_points(new, solver.source.vertices)
    d = deformed_new - deformed_old
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
