"""Classification of the background mesh against the boundary, extension
neighbours for cut cells, and the quadrature bundle used by assembly."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import AssumptionViolated, NoInteriorElement
from .geometry import LevelSet, segment_root
from .mesh import BackgroundMesh
from .quadrature import (
    CellQuad,
    FaceQuad,
    QuadRule,
    _pad,
    _sample_lattice,
    cut_cell_rules,
    cut_face_rules,
    edge_extreme,
    map_triangle_rule,
)

log = logging.getLogger(__name__)


class Label(IntEnum):
    INTERIOR = 0
    CUT = 1
    EXTERIOR = 2


@dataclass(eq=False)
class CutClassification:
    labels: np.ndarray
    active: np.ndarray  # T_h, sorted background cell ids
    interior_faces: np.ndarray  # F_h^i: edges with two active neighbours
    interior_cell_faces: np.ndarray  # F_h°: edges of interior cells
    cut_faces: np.ndarray  # edges of F_h^i with a sign change along them
    edge_roots: dict = field(default_factory=dict)  # edge id -> boundary crossing point
    tol: float = 0.0
    violations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.labels == Label.INTERIOR)

    @property
    def cut(self) -> np.ndarray:
        return np.flatnonzero(self.labels == Label.CUT)

    @property
    def gamma_faces(self) -> np.ndarray:
        """F_h^Γ = F_h^i minus the faces of interior cells."""
        return np.setdiff1d(self.interior_faces, self.interior_cell_faces)


def classify(
    mesh: BackgroundMesh, ls: LevelSet, samples_per_edge: int = 8, strict: bool = True
) -> CutClassification:
    """Label cells Interior/Cut/Exterior and build the face sets.

    Interior needs phi <= -tol on the whole cell, so a cell touching Gamma
    from inside is Cut.  Exterior needs phi > -tol everywhere: a cell that
    meets Gamma only at a point has an empty inside part and stays inactive.

    With ``strict`` a face crossed more than once raises AssumptionViolated;
    otherwise the offending faces are logged and recorded in ``violations``.
    """
    if samples_per_edge < 2:
        raise ValueError("samples_per_edge must be >= 2")
    tol = 1e-12 * mesh.h
    lattice = _sample_lattice(samples_per_edge - 1)
    pts = np.einsum("sk,tkd->tsd", lattice, mesh.cell_coords)
    f = ls(pts)
    neg = f <= -tol
    # Omega is open: a cell meeting Gamma only where |phi| < tol has no inside part
    pos = f > -tol
    labels = np.full(mesh.n_cells, Label.CUT, dtype=np.int64)
    labels[np.all(neg, axis=1)] = Label.INTERIOR
    labels[np.all(pos, axis=1)] = Label.EXTERIOR
    # the lattice can miss a thin intrusion of the boundary; it must cross an edge
    ids = np.flatnonzero(labels == Label.INTERIOR)
    if len(ids):
        labels[ids[edge_extreme(ls, mesh.cell_coords[ids], 1.0) > -tol]] = Label.CUT
    ids = np.flatnonzero(labels == Label.EXTERIOR)
    if len(ids):
        labels[ids[edge_extreme(ls, mesh.cell_coords[ids], -1.0) >= tol]] = Label.CUT
    active = np.flatnonzero(labels != Label.EXTERIOR)

    is_active = labels != Label.EXTERIOR
    ec = mesh.edge_cells
    both = (ec[:, 1] >= 0) & is_active[ec[:, 0]] & is_active[np.maximum(ec[:, 1], 0)]
    interior_faces = np.flatnonzero(both)
    interior_cell_faces = np.unique(mesh.cell_edges[labels == Label.INTERIOR].ravel())

    # sign changes along each active face
    s = np.linspace(0.0, 1.0, samples_per_edge)
    v = mesh.vertices[mesh.edges[interior_faces]]
    epts = v[:, 0, None, :] + s[None, :, None] * (v[:, 1] - v[:, 0])[:, None, :]
    fe = ls(epts)
    # samples with |phi| < tol carry no sign: a face touching Γ at a vertex is not a second crossing
    signs = np.where(np.abs(fe) < tol, 0, np.sign(fe)).astype(np.int8)
    changes = np.array([np.count_nonzero(np.diff(r[r != 0])) for r in signs], dtype=np.int64)
    bad = changes > 1
    violations = interior_faces[bad]
    if np.any(bad):
        e = int(violations[0])
        msg = f"face {e} is crossed by the boundary {int(changes[bad][0])} times"
        if strict:
            raise AssumptionViolated(msg, face=e)
        log.warning("%s (%d faces in total); continuing", msg, len(violations))
    cut_faces = interior_faces[changes == 1]

    roots = {}
    if len(cut_faces):
        a = mesh.vertices[mesh.edges[cut_faces, 0]]
        b = mesh.vertices[mesh.edges[cut_faces, 1]]
        fa, fb = ls(a), ls(b)
        strict = fa * fb < 0
        q = np.where((np.abs(fa) <= np.abs(fb))[:, None], a, b)
        if np.any(strict):
            q[strict] = segment_root(ls, a[strict], b[strict])
        roots = {int(e): q[i] for i, e in enumerate(cut_faces)}
    return CutClassification(
        labels, active, interior_faces, interior_cell_faces, cut_faces, roots, tol, violations
    )


@dataclass(eq=False)
class ExtensionMap:
    """Assigned interior neighbour K° for every cut cell K."""

    neighbor: dict
    hops: dict
    c_delta: float  # realized max |x - x_K| / h_K over the vertices of K°

    def __len__(self):
        return len(self.neighbor)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        ks = np.array(sorted(self.neighbor), dtype=np.int64)
        return ks, np.array([self.neighbor[k] for k in ks], dtype=np.int64)


def assign_interior_neighbors(cls: CutClassification, mesh: BackgroundMesh) -> ExtensionMap:
    """Breadth-first search over vertex-touching rings; nearest barycentre wins, ties to lowest id."""
    cut = cls.cut
    if len(cut) == 0:
        return ExtensionMap({}, {}, 0.0)
    is_interior = cls.labels == Label.INTERIOR
    if not np.any(is_interior):
        raise NoInteriorElement("no interior element: the mesh is too coarse for this geometry")
    adj = mesh.vertex_neighbors
    xb = mesh.barycenters
    neighbor, hops = {}, {}
    c_delta = 0.0
    for k in cut:
        seen = {int(k)}
        ring = {int(k)}
        hop = 0
        while True:
            hop += 1
            nxt = set()
            for c in ring:
                nxt.update(adj.indices[adj.indptr[c] : adj.indptr[c + 1]].tolist())
            nxt -= seen
            if not nxt:
                raise NoInteriorElement(f"cut cell {k} cannot reach an interior element")
            seen |= nxt
            cand = sorted(c for c in nxt if is_interior[c])
            if cand:
                d = np.linalg.norm(xb[cand] - xb[k], axis=1)
                best = cand[int(np.argmin(d))]  # argmin returns the first, i.e. lowest id, on ties
                break
            ring = nxt
        if hop > 1:
            log.warning("cut cell %d: no touching interior element, using cell %d at hop %d", k, best, hop)
        neighbor[int(k)] = int(best)
        hops[int(k)] = hop
        far = np.linalg.norm(mesh.cell_coords[best] - xb[k], axis=1).max() / mesh.diameters[k]
        c_delta = max(c_delta, float(far))
    return ExtensionMap(neighbor, hops, c_delta)


# ---------------------------------------------------------------- per-entity rules


def cut_volume_quadrature(mesh, cell: int, ls: LevelSet, order: int, depth: int, label=None) -> QuadRule:
    tri = mesh.cell_coords[cell][None]
    tol = 1e-12 * mesh.h
    if label is None:
        f = ls(np.einsum("sk,tkd->tsd", _sample_lattice(7), tri))
        label = Label.INTERIOR if np.all(f <= -tol) else Label.CUT
    if label == Label.INTERIOR:
        p, w = map_triangle_rule(tri, order)
        return QuadRule(p[0], w[0])
    (own, p, w), _ = cut_cell_rules(ls, tri, order, depth, tol=tol, surface=False)
    return QuadRule(p, w)


def cut_face_quadrature(mesh, face: int, ls: LevelSet, order: int) -> QuadRule:
    a = mesh.vertices[mesh.edges[face, 0]][None]
    b = mesh.vertices[mesh.edges[face, 1]][None]
    p, w = cut_face_rules(ls, a, b, order, tol=1e-12 * mesh.h)
    keep = w[0] > 0
    return QuadRule(p[0][keep], w[0][keep])


def surface_quadrature(mesh, cell: int, ls: LevelSet, order: int, depth: int) -> QuadRule:
    tri = mesh.cell_coords[cell][None]
    _, (own, p, w, n) = cut_cell_rules(ls, tri, order, depth, tol=1e-12 * mesh.h)
    return QuadRule(p, w, n)


# ---------------------------------------------------------------- bundle


@dataclass(eq=False)
class MeshQuadrature:
    """Every rule the forms need, at one integration degree and refinement depth."""

    degree: int
    depth: int
    interior: CellQuad  # full rules on T_h°
    cut: CellQuad  # rules on K⁰ for K in T_h^Γ
    cut_full: CellQuad  # full-cell rules on T_h^Γ (for j_h, g_h)
    surface: CellQuad  # rules on Γ_K with normals
    faces: FaceQuad  # rules on f⁰ for f in F_h^i
    faces_full: FaceQuad  # rules on the full face f

    def volume_sets(self):
        return (self.interior, self.cut)


def _face_quad(mesh, faces, pts, wts):
    ec = mesh.edge_cells[faces]
    return FaceQuad(
        faces=faces,
        plus=ec[:, 0],
        minus=ec[:, 1],
        points=pts,
        weights=wts,
        normals=mesh.edge_normals[faces],
        h=mesh.edge_lengths[faces],
    )


def build_quadrature(mesh: BackgroundMesh, cls: CutClassification, ls: LevelSet, degree: int, depth: int) -> MeshQuadrature:
    coords = mesh.cell_coords
    tol = cls.tol
    inner = cls.interior
    p, w = map_triangle_rule(coords[inner], degree)
    interior = CellQuad(inner, p, w)

    cut = cls.cut
    p, w = map_triangle_rule(coords[cut], degree)
    cut_full = CellQuad(cut, p, w)
    (vo, vp, vw), (so, sp_, sw, sn) = cut_cell_rules(ls, coords[cut], degree, depth, tol=tol)
    vp_, vw_ = _pad(vo, len(cut), vp, vw)
    cutq = CellQuad(cut, vp_, vw_)
    sp2, sw2, sn2 = _pad(so, len(cut), sp_, sw, sn)
    # padded surface slots: keep points inside the owner cell so basis evaluations stay tame
    pad = sw2 == 0
    sp2[pad] = np.broadcast_to(mesh.barycenters[cut][:, None, :], sp2.shape)[pad]
    vp_[vw_ == 0] = np.broadcast_to(mesh.barycenters[cut][:, None, :], vp_.shape)[vw_ == 0]
    surface = CellQuad(cut, sp2, sw2, sn2)

    fi = cls.interior_faces
    a = mesh.vertices[mesh.edges[fi, 0]]
    b = mesh.vertices[mesh.edges[fi, 1]]
    fp, fw = cut_face_rules(ls, a, b, degree, tol=tol)
    nonempty = fw.sum(axis=1) > 0
    faces = _face_quad(mesh, fi[nonempty], fp[nonempty], fw[nonempty])
    fp_full, fw_full = cut_face_rules(_ALL_INSIDE, a, b, degree)
    faces_full = _face_quad(mesh, fi, fp_full, fw_full)
    return MeshQuadrature(degree, depth, interior, cutq, cut_full, surface, faces, faces_full)


_ALL_INSIDE = LevelSet(
    eval=lambda p: -np.ones(np.shape(p)[:-1]),
    grad=lambda p: np.zeros(np.shape(p)),
    name="everywhere",
)
