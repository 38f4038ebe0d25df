"""Assembly of the discrete forms and of the coupled saddle-point system.

Every form and every norm is written as a list of :class:`Term` objects.  A
term is a quadrature weight array together with one or two "traces": the
values at the quadrature points of some linear functional of the basis
(rot, a tangential jump, an average, ...) and the DOF indices they belong to.
Matrices, norm Gram matrices and error norms are all reductions of the same
term lists, so each definition lives in exactly one place.

Trace arrays have shape (ne, nq, nc, nd): entities, points, components, DOFs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .cases import Coefficients, ManufacturedCase
from .cut import CutClassification, ExtensionMap, MeshQuadrature
from .errors import DimensionMismatch
from .mesh import BackgroundMesh
from .quadrature import CellQuad, FaceQuad
from .spaces import DofMap, scalar_basis

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Term:
    """sum_e sum_q w * (ta . x[ia]) * (tb . y[ib]); ``tb is None`` means symmetric."""

    name: str
    space: str  # "u", "p", or "pu" for the scalar-by-vector coupling
    w: np.ndarray
    ta: np.ndarray
    ia: np.ndarray
    tb: Optional[np.ndarray] = None
    ib: Optional[np.ndarray] = None
    exact: Optional[Callable] = None  # (case, proj) -> (ne, nq, nc) exact counterpart of ta

    def local(self) -> np.ndarray:
        tb = self.ta if self.tb is None else self.tb
        return np.einsum("eq,eqci,eqcj->eij", self.w, self.ta, tb, optimize=True)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Values of the trace ta applied to the coefficient vector x: (ne, nq, nc)."""
        return np.einsum("eqci,ei->eqc", self.ta, x[self.ia])

    def quadratic(self, x: np.ndarray) -> float:
        v = self.apply(x)
        return float(np.einsum("eq,eqc->", self.w, v * v))


def _coo(terms, shape, transpose_add=False):
    rows, cols, vals = [], [], []
    for t in terms:
        loc = t.local()
        ib = t.ia if t.tb is None else t.ib
        r = np.broadcast_to(t.ia[:, :, None], loc.shape)
        c = np.broadcast_to(ib[:, None, :], loc.shape)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(loc.ravel())
        if transpose_add and t.tb is not None:
            rows.append(c.ravel())
            cols.append(r.ravel())
            vals.append(loc.ravel())
    if not rows:
        return sp.csr_matrix(shape)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    return m.tocsr()


def assemble_terms(terms, shape, symmetrize_cross=True) -> sp.csr_matrix:
    """Sum of the local matrices of ``terms``; cross terms also get their transpose."""
    return _coo(terms, shape, transpose_add=symmetrize_cross)


# ---------------------------------------------------------------- traces


@dataclass(eq=False)
class VecTrace:
    val: np.ndarray  # (n, nq, 2, D)
    rot: np.ndarray  # (n, nq, 1, D)
    dive: np.ndarray  # (n, nq, 1, D), div(eps v)
    epsv: np.ndarray  # (n, nq, 2, D), eps v


class Discretization:
    """Mesh, classification, extension, DOFs, quadrature and coefficients of one run."""

    def __init__(self, mesh: BackgroundMesh, cls: CutClassification, ext: ExtensionMap,
                 dofmap: DofMap, quad: MeshQuadrature, coef: Coefficients, c_on_cut_part: bool = False):
        self.mesh = mesh
        self.cls = cls
        self.ext = ext
        self.dofmap = dofmap
        self.quad = quad
        self.coef = coef
        self.c_on_cut_part = c_on_cut_part
        self.r = dofmap.vspace.degree
        self.m = dofmap.sspace.degree
        self._cache = {}

    # -- basis traces at arbitrary (cells, points)
    def vec(self, cells, pts) -> VecTrace:
        vals, grads = scalar_basis(self.r, self.mesh, cells, pts)
        n, nq, nb = vals.shape
        z = np.zeros_like(vals)
        val = np.stack([np.concatenate([vals, z], -1), np.concatenate([z, vals], -1)], axis=2)
        gx, gy = grads[..., 0], grads[..., 1]
        rot = np.concatenate([-gy, gx], -1)[:, :, None, :]
        eps = self.coef.eps_r(pts)[..., None, None]
        ge = self.coef.grad_eps(pts)
        div = np.concatenate([gx, gy], -1)[:, :, None, :]
        dive = eps * div + np.einsum("nqc,nqcd->nqd", ge, val)[:, :, None, :]
        return VecTrace(val, rot, dive, eps * val)

    def sca(self, cells, pts) -> np.ndarray:
        vals, _ = scalar_basis(self.m, self.mesh, cells, pts)
        return vals[:, :, None, :]

    def u_idx(self, cells):
        return self.dofmap.u_dofs(cells)

    def p_idx(self, cells):
        return self.dofmap.p_dofs(cells) - self.dofmap.n_u

    # -- cached evaluations on the quadrature sets
    def _volume(self, which):
        key = ("vol", which)
        if key not in self._cache:
            q: CellQuad = getattr(self.quad, which)
            self._cache[key] = (q, self.vec(q.cells, q.points), self.sca(q.cells, q.points))
        return self._cache[key]

    def volume_sets(self):
        return [self._volume("interior"), self._volume("cut")]

    def _faces(self, which):
        key = ("face", which)
        if key not in self._cache:
            fq: FaceQuad = getattr(self.quad, which)
            vp = self.vec(fq.plus, fq.points)
            vm = self.vec(fq.minus, fq.points)
            sp_ = self.sca(fq.plus, fq.points)
            sm = self.sca(fq.minus, fq.points)
            n = fq.normals[:, None, :]
            tan = lambda v: (n[..., 0, None] * v.val[:, :, 1] - n[..., 1, None] * v.val[:, :, 0])[:, :, None]
            nrm = lambda v: np.einsum("fqc,fqcd->fqd", np.broadcast_to(n, v.epsv.shape[:2] + (2,)), v.epsv)[:, :, None]
            mu_inv = 1.0 / self.coef.mu_r(fq.points)[..., None, None]
            d = dict(
                fq=fq,
                uidx=np.concatenate([self.u_idx(fq.plus), self.u_idx(fq.minus)], 1),
                pidx=np.concatenate([self.p_idx(fq.plus), self.p_idx(fq.minus)], 1),
                jump_tan=np.concatenate([tan(vp), -tan(vm)], -1),
                jump_nrm=np.concatenate([nrm(vp), -nrm(vm)], -1),
                avg_rot=0.5 * np.concatenate([vp.rot, vm.rot], -1),
                avg_murot=0.5 * mu_inv * np.concatenate([vp.rot, vm.rot], -1),
                jump_p=np.concatenate([sp_, -sm], -1),
                avg_p=0.5 * np.concatenate([sp_, sm], -1),
            )
            self._cache[key] = d
        return self._cache[key]

    def _surface(self):
        key = ("surface",)
        if key not in self._cache:
            q: CellQuad = self.quad.surface
            v = self.vec(q.cells, q.points)
            n = q.normals
            tan = (n[..., 0, None] * v.val[:, :, 1] - n[..., 1, None] * v.val[:, :, 0])[:, :, None]
            mu_inv = 1.0 / self.coef.mu_r(q.points)[..., None, None]
            self._cache[key] = dict(
                q=q,
                uidx=self.u_idx(q.cells),
                pidx=self.p_idx(q.cells),
                tan=tan,
                rot=v.rot,
                murot=mu_inv * v.rot,
                p=self.sca(q.cells, q.points),
                hK=self.mesh.diameters[q.cells][:, None],
            )
        return self._cache[key]

    def _extension(self):
        key = ("ext",)
        if key not in self._cache:
            q: CellQuad = self.quad.cut_full
            nbr = np.array([self.ext.neighbor[int(k)] for k in q.cells], dtype=np.int64)
            vk = self.vec(q.cells, q.points)
            vn = self.vec(nbr, q.points)
            self._cache[key] = dict(
                q=q,
                nbr=nbr,
                uidx=np.concatenate([self.u_idx(q.cells), self.u_idx(nbr)], 1),
                pidx=np.concatenate([self.p_idx(q.cells), self.p_idx(nbr)], 1),
                drot=np.concatenate([vk.rot, -vn.rot], -1),
                dp=np.concatenate([self.sca(q.cells, q.points), -self.sca(nbr, q.points)], -1),
                rot_nbr=vn.rot,
                p_nbr=self.sca(nbr, q.points),
            )
        return self._cache[key]

    # ------------------------------------------------------------ form terms

    def terms_a0(self):
        mu = self.coef.mu_r
        out = []
        for q, v, _ in self.volume_sets():
            out.append(Term("curl", "u", q.weights / mu(q.points), v.rot, self.u_idx(q.cells)))
            out.append(Term("div", "u", q.weights, v.dive, self.u_idx(q.cells)))
        f = self._faces("faces")
        out.append(Term("face_consistency", "u", -f["fq"].weights, f["avg_murot"], f["uidx"], f["jump_tan"], f["uidx"]))
        s = self._surface()
        out.append(Term("gamma_consistency", "u", -s["q"].weights, s["murot"], s["uidx"], s["tan"], s["uidx"]))
        return out

    def terms_a1(self):
        alpha = self.coef.alpha
        f = self._faces("faces")
        hf = f["fq"].h[:, None]
        s = self._surface()
        return [
            Term("face_tan_penalty", "u", alpha / hf * f["fq"].weights, f["jump_tan"], f["uidx"]),
            Term("face_nrm_penalty", "u", 1.0 / hf * f["fq"].weights, f["jump_nrm"], f["uidx"]),
            Term("gamma_tan_penalty", "u", alpha / s["hK"] * s["q"].weights, s["tan"], s["uidx"]),
        ]

    def terms_g(self):
        e = self._extension()
        return [Term("g", "u", e["q"].weights, e["drot"], e["uidx"])]

    def terms_j(self):
        e = self._extension()
        return [Term("j", "p", e["q"].weights, e["dp"], e["pidx"])]

    def terms_mass(self):
        return [Term("mass", "u", q.weights, v.val, self.u_idx(q.cells)) for q, v, _ in self.volume_sets()]

    def terms_mass_p(self):
        return [Term("mass_p", "p", q.weights, s, self.p_idx(q.cells)) for q, _, s in self.volume_sets()]

    def terms_b(self):
        out = []
        for q, v, s in self.volume_sets():
            out.append(Term("b_volume", "pu", q.weights, s, self.p_idx(q.cells), v.dive, self.u_idx(q.cells)))
        f = self._faces("faces")
        out.append(Term("b_face", "pu", -f["fq"].weights, f["avg_p"], f["pidx"], f["jump_nrm"], f["uidx"]))
        return out

    def terms_c(self):
        f = self._faces("faces" if self.c_on_cut_part else "faces_full")
        s = self._surface()
        return [
            Term("c_face", "p", f["fq"].h[:, None] * f["fq"].weights, f["jump_p"], f["pidx"]),
            Term("c_gamma", "p", s["hK"] * s["q"].weights, s["p"], s["pidx"]),
        ]

    # ------------------------------------------------------------ norm terms

    def norm_terms_u(self, which="A"):
        """Terms of the seminorm ("semi"), of the a-norm ("a") or of the A-norm ("A") on V_h.

        Each carries the exact-solution counterpart used by :func:`error_norms`.
        """
        out = []
        for q, v, _ in self.volume_sets():
            pts = q.points
            out.append(Term("curl", "u", q.weights, v.rot, self.u_idx(q.cells),
                            exact=lambda c, pr, pts=pts: c.rot_u(pts)[..., None]))
            out.append(Term("div", "u", q.weights, v.dive, self.u_idx(q.cells),
                            exact=lambda c, pr, pts=pts: _exact_dive(c, pts)[..., None]))
        f = self._faces("faces")
        fq = f["fq"]
        hf = fq.h[:, None]
        zero_f = lambda c, pr, shape=fq.weights.shape: np.zeros(shape + (1,))
        out.append(Term("face_tan_jump", "u", fq.weights / hf, f["jump_tan"], f["uidx"], exact=zero_f))
        out.append(Term("face_nrm_jump", "u", fq.weights / hf, f["jump_nrm"], f["uidx"], exact=zero_f))
        s = self._surface()
        sq = s["q"]
        out.append(Term("gamma_tan_jump", "u", sq.weights / s["hK"], s["tan"], s["uidx"],
                        exact=lambda c, pr: c.g(sq.points, sq.normals)[..., None]))
        if which == "semi":
            return out
        k2 = self.coef.k ** 2
        for q, v, _ in self.volume_sets():
            pts = q.points
            out.append(Term("l2", "u", k2 * q.weights, v.val, self.u_idx(q.cells),
                            exact=lambda c, pr, pts=pts: c.u(pts)))
        e = self._extension()
        out.append(Term("g", "u", e["q"].weights, e["drot"], e["uidx"], exact=self._exact_g))
        if which == "a":
            return out
        out.append(Term("face_avg_rot", "u", hf * fq.weights, f["avg_rot"], f["uidx"],
                        exact=lambda c, pr: c.rot_u(fq.points)[..., None]))
        out.append(Term("gamma_rot", "u", s["hK"] * sq.weights, s["rot"], s["uidx"],
                        exact=lambda c, pr: c.rot_u(sq.points)[..., None]))
        return out

    def norm_terms_p(self, which="C"):
        """Terms of the seminorm ("semi"), the c-norm ("c") or the C-norm ("C") on Q_h."""
        f = self._faces("faces")
        fq = f["fq"]
        hf = fq.h[:, None]
        s = self._surface()
        sq = s["q"]
        e = self._extension()
        out = [
            Term("face_jump", "p", hf * fq.weights, f["jump_p"], f["pidx"],
                 exact=lambda c, pr: np.zeros(fq.weights.shape + (1,))),
            Term("gamma_jump", "p", s["hK"] * sq.weights, s["p"], s["pidx"],
                 exact=lambda c, pr: c.p(sq.points)[..., None]),
            Term("j", "p", e["q"].weights, e["dp"], e["pidx"], exact=self._exact_j),
        ]
        if which == "semi":
            return out
        for q, _, sc in self.volume_sets():
            pts = q.points
            out.append(Term("l2", "p", q.weights, sc, self.p_idx(q.cells),
                            exact=lambda c, pr, pts=pts: c.p(pts)[..., None]))
        if which == "c":
            return out
        out.append(Term("face_avg", "p", hf * fq.weights, f["avg_p"], f["pidx"],
                        exact=lambda c, pr: c.p(fq.points)[..., None]))
        return out

    def _exact_g(self, case, proj):
        e = self._extension()
        pts = e["q"].points
        ext = np.einsum("eqci,ei->eqc", e["rot_nbr"], proj["u"][self.u_idx(e["nbr"])])
        return case.rot_u(pts)[..., None] - ext

    def _exact_j(self, case, proj):
        e = self._extension()
        pts = e["q"].points
        ext = np.einsum("eqci,ei->eqc", e["p_nbr"], proj["p"][self.p_idx(e["nbr"])])
        return case.p(pts)[..., None] - ext

    # ------------------------------------------------------------ projections

    def project(self, case: ManufacturedCase) -> dict:
        """Elementwise L2(K) projections of the exact u and p over the FULL active cells."""
        from .quadrature import map_triangle_rule

        cells = self.dofmap.active
        pts, w = map_triangle_rule(self.mesh.cell_coords[cells], 2 * max(self.r, self.m) + 4)
        v = self.vec(cells, pts)
        s = self.sca(cells, pts)
        # bases are orthonormal on the full cell
        cu = np.einsum("eq,eqci,eqc->ei", w, v.val, case.u(pts))
        cp = np.einsum("eq,eqci,eqc->ei", w, s, case.p(pts)[..., None])
        u = np.zeros(self.dofmap.n_u)
        p = np.zeros(self.dofmap.n_p)
        u[self.u_idx(cells)] = cu
        p[self.p_idx(cells)] = cp
        return {"u": u, "p": p}


def _exact_dive(case: ManufacturedCase, pts):
    return case.eps_r(pts) * case.div_u(pts) + np.einsum("...c,...c->...", case.grad_eps(pts), case.u(pts))


# ---------------------------------------------------------------- blocks and system


@dataclass(eq=False)
class SaddleSystem:
    A0: sp.csr_matrix
    A1: sp.csr_matrix
    G: sp.csr_matrix
    M: sp.csr_matrix
    B: sp.csr_matrix  # (N_p, N_u)
    C: sp.csr_matrix
    J: sp.csr_matrix
    rhs: np.ndarray
    k: float
    dofmap: Optional[DofMap] = None
    extras: dict = field(default_factory=dict)

    @property
    def n_u(self) -> int:
        return self.A0.shape[0]

    @property
    def n_p(self) -> int:
        return self.C.shape[0]

    def velocity_block(self, stabilized: bool = True) -> sp.csr_matrix:
        A = self.A0 + self.A1 - self.k**2 * self.M
        return A + self.G if stabilized else A

    def pressure_block(self, stabilized: bool = True) -> sp.csr_matrix:
        return self.C + self.J if stabilized else self.C

    def matrix(self, stabilized: bool = True) -> sp.csr_matrix:
        return sp.bmat(
            [[self.velocity_block(stabilized), self.B.T], [self.B, -self.pressure_block(stabilized)]],
            format="csr",
        )

    def full_rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs, np.zeros(self.n_p)])


def assemble_a(disc: Discretization):
    n = disc.dofmap.n_u
    return assemble_terms(disc.terms_a0(), (n, n)), assemble_terms(disc.terms_a1(), (n, n))


def assemble_b(disc: Discretization):
    return assemble_terms(disc.terms_b(), (disc.dofmap.n_p, disc.dofmap.n_u), symmetrize_cross=False)


def assemble_c(disc: Discretization):
    n = disc.dofmap.n_p
    return assemble_terms(disc.terms_c(), (n, n))


def assemble_j(disc: Discretization):
    n = disc.dofmap.n_p
    return assemble_terms(disc.terms_j(), (n, n))


def assemble_g(disc: Discretization):
    n = disc.dofmap.n_u
    return assemble_terms(disc.terms_g(), (n, n))


def assemble_mass(disc: Discretization):
    n = disc.dofmap.n_u
    return assemble_terms(disc.terms_mass(), (n, n))


def assemble_rhs(disc: Discretization, source: Callable, bdata: Callable) -> np.ndarray:
    """l(v) = (j, v)_Omega - <mu^-1 rot v, g>_Gamma + alpha h_K^-1 <n x v, g>_Gamma.

    ``bdata(points, normals)`` returns the scalar tangential datum n x u.
    """
    l = np.zeros(disc.dofmap.n_u)
    for q, v, _ in disc.volume_sets():
        loc = np.einsum("eq,eqci,eqc->ei", q.weights, v.val, source(q.points))
        np.add.at(l, disc.u_idx(q.cells), loc)
    s = disc._surface()
    sq = s["q"]
    g = bdata(sq.points, sq.normals)
    tr = -s["murot"][:, :, 0] + disc.coef.alpha / s["hK"][..., None] * s["tan"][:, :, 0]
    loc = np.einsum("eq,eqi,eq->ei", sq.weights, tr, g)
    np.add.at(l, s["uidx"], loc)
    return l


def assemble_system(blocks: dict, coef: Coefficients, rhs: np.ndarray, dofmap: Optional[DofMap] = None) -> SaddleSystem:
    n_u = blocks["A0"].shape[0]
    n_p = blocks["C"].shape[0]
    for name in ("A0", "A1", "G", "M"):
        if blocks[name].shape != (n_u, n_u):
            raise DimensionMismatch(f"block {name} has shape {blocks[name].shape}, expected {(n_u, n_u)}")
    for name in ("C", "J"):
        if blocks[name].shape != (n_p, n_p):
            raise DimensionMismatch(f"block {name} has shape {blocks[name].shape}, expected {(n_p, n_p)}")
    if blocks["B"].shape != (n_p, n_u):
        raise DimensionMismatch(f"block B has shape {blocks['B'].shape}, expected {(n_p, n_u)}")
    if len(rhs) != n_u:
        raise DimensionMismatch(f"rhs has length {len(rhs)}, expected {n_u}")
    return SaddleSystem(
        blocks["A0"], blocks["A1"], blocks["G"], blocks["M"], blocks["B"], blocks["C"], blocks["J"],
        np.asarray(rhs, dtype=float), coef.k, dofmap,
    )


def assemble_all(disc: Discretization, case: Optional[ManufacturedCase] = None) -> SaddleSystem:
    A0, A1 = assemble_a(disc)
    blocks = dict(A0=A0, A1=A1, G=assemble_g(disc), M=assemble_mass(disc),
                  B=assemble_b(disc), C=assemble_c(disc), J=assemble_j(disc))
    if case is None:
        rhs = np.zeros(disc.dofmap.n_u)
    else:
        rhs = assemble_rhs(disc, case.source, case.g)
    return assemble_system(blocks, disc.coef, rhs, disc.dofmap)


def write_coo(path, mat: sp.spmatrix) -> None:
    """Coordinate text: one ``row col value`` line per stored entry."""
    m = sp.coo_matrix(mat)
    order = np.lexsort((m.col, m.row))
    with open(path, "w") as fh:
        fh.write(f"# {m.shape[0]} {m.shape[1]} {m.nnz}\n")
        for i, j, v in zip(m.row[order], m.col[order], m.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")
