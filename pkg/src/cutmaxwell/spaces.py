"""Discontinuous polynomial spaces on the active cells, their DOF layout, the
L2 projection and the direct extension from an interior neighbour.

Basis functions are orthonormal modal polynomials: monomials in the
reference coordinates centred at the reference barycentre, orthonormalized
by Cholesky on the exact reference Gram matrix and scaled by 1/sqrt|det J|
so that the physical mass block of an uncut cell is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .cut import CutClassification, ExtensionMap
from .errors import DimensionMismatch
from .mesh import BackgroundMesh
from .quadrature import QuadRule, triangle_rule

_CENTER = 1.0 / 3.0


def n_basis(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


def _exponents(degree: int) -> np.ndarray:
    """Monomial exponents ordered by total degree (hierarchical)."""
    return np.array([(d - j, j) for d in range(degree + 1) for j in range(d + 1)], dtype=np.int64)


@lru_cache(maxsize=None)
def _reference_coeffs(degree: int) -> np.ndarray:
    """Matrix C with phi_hat_i = sum_j C[i, j] * mono_j, orthonormal on the reference triangle."""
    ex = _exponents(degree)
    pts, w = triangle_rule(2 * degree + 2)
    mono = _monomials(pts - _CENTER, ex)
    gram = np.einsum("q,qi,qj->ij", w, mono, mono)
    L = np.linalg.cholesky(gram)
    return np.linalg.inv(L)


def _monomials(xi: np.ndarray, ex: np.ndarray) -> np.ndarray:
    return xi[..., 0, None] ** ex[:, 0] * xi[..., 1, None] ** ex[:, 1]


def _monomial_grads(xi: np.ndarray, ex: np.ndarray) -> np.ndarray:
    a, b = ex[:, 0], ex[:, 1]
    x, y = xi[..., 0, None], xi[..., 1, None]
    am1 = np.maximum(a - 1, 0)
    bm1 = np.maximum(b - 1, 0)
    dx = a * x**am1 * y**b
    dy = b * x**a * y**bm1
    return np.stack([dx, dy], axis=-1)


@dataclass(frozen=True)
class FeSpace:
    """Elementwise polynomials of total degree ``degree``; ``kind`` is "scalar" or "vector2"."""

    kind: str
    degree: int

    def __post_init__(self):
        if self.kind not in ("scalar", "vector2"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    @property
    def n_scalar(self) -> int:
        return n_basis(self.degree)

    @property
    def ncomp(self) -> int:
        return 1 if self.kind == "scalar" else 2

    @property
    def dofs_per_cell(self) -> int:
        return self.n_scalar * self.ncomp


def scalar_basis(degree: int, mesh: BackgroundMesh, cells, pts) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal scalar basis of ``cells`` (n,) at global points ``pts`` (n, nq, 2).

    Returns values (n, nq, nb) and Cartesian gradients (n, nq, nb, 2).  Points
    outside a cell are fine: each basis function is a polynomial on the plane.
    """
    cells = np.asarray(cells)
    pts = np.asarray(pts, dtype=float)
    ex = _exponents(degree)
    C = _reference_coeffs(degree)
    v0 = mesh.cell_coords[cells, 0]
    Jinv = mesh.inv_jacobians[cells]
    scale = 1.0 / np.sqrt(np.abs(mesh.det[cells]))
    xi = np.einsum("nij,nqj->nqi", Jinv, pts - v0[:, None, :]) - _CENTER
    vals = _monomials(xi, ex) @ C.T
    gref = np.einsum("nqjd,ij->nqid", _monomial_grads(xi, ex), C)
    grads = np.einsum("nqid,nde->nqie", gref, Jinv)
    return vals * scale[:, None, None], grads * scale[:, None, None, None]


def eval_basis(space: FeSpace, mesh: BackgroundMesh, cells, pts):
    """All basis values and gradients of ``space`` on ``cells`` at ``pts`` (n, nq, 2).

    Scalar: values (n, nq, nb), gradients (n, nq, nb, 2).
    Vector: values (n, nq, 2nb, 2), gradients (n, nq, 2nb, 2, 2) where
    gradients[..., c, d] = d(v_c)/dx_d; the first nb functions are x-valued.
    """
    vals, grads = scalar_basis(space.degree, mesh, cells, pts)
    if space.kind == "scalar":
        return vals, grads
    nb = space.n_scalar
    shape = vals.shape[:2]
    vv = np.zeros(shape + (2 * nb, 2))
    gg = np.zeros(shape + (2 * nb, 2, 2))
    vv[..., :nb, 0] = vals
    vv[..., nb:, 1] = vals
    gg[..., :nb, 0, :] = grads
    gg[..., nb:, 1, :] = grads
    return vv, gg


def vector_rot_div(grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """rot and div of the vector basis from scalar gradients (n, nq, nb, 2) -> (n, nq, 2nb) each."""
    rot = np.concatenate([-grads[..., 1], grads[..., 0]], axis=-1)
    div = np.concatenate([grads[..., 0], grads[..., 1]], axis=-1)
    return rot, div


@dataclass(frozen=True, eq=False)
class DofMap:
    """Global layout: all vector DOFs first (cell by cell), then all scalar DOFs."""

    mesh: BackgroundMesh
    active: np.ndarray
    vspace: FeSpace
    sspace: FeSpace

    def __post_init__(self):
        if self.vspace.kind != "vector2" or self.sspace.kind != "scalar":
            raise DimensionMismatch("DofMap needs a vector space and a scalar space")
        pos = np.full(self.mesh.n_cells, -1, dtype=np.int64)
        pos[self.active] = np.arange(len(self.active))
        object.__setattr__(self, "_pos", pos)

    @property
    def n_u(self) -> int:
        return len(self.active) * self.vspace.dofs_per_cell

    @property
    def n_p(self) -> int:
        return len(self.active) * self.sspace.dofs_per_cell

    @property
    def n_total(self) -> int:
        return self.n_u + self.n_p

    def position(self, cells) -> np.ndarray:
        pos = self._pos[np.asarray(cells)]
        if np.any(pos < 0):
            raise DimensionMismatch("cell is not active")
        return pos

    def u_dofs(self, cells) -> np.ndarray:
        nd = self.vspace.dofs_per_cell
        return self.position(cells)[..., None] * nd + np.arange(nd)

    def p_dofs(self, cells) -> np.ndarray:
        nd = self.sspace.dofs_per_cell
        return self.n_u + self.position(cells)[..., None] * nd + np.arange(nd)

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return z[: self.n_u], z[self.n_u :]


@dataclass(frozen=True, eq=False)
class LocalPoly:
    """Polynomial owned by one cell, evaluable at any global point."""

    owner: int
    coeffs: np.ndarray
    space: FeSpace
    mesh: BackgroundMesh

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        flat = p.reshape(1, -1, 2)
        vals, _ = eval_basis(self.space, self.mesh, np.array([self.owner]), flat)
        if self.space.kind == "scalar":
            out = vals[0] @ self.coeffs
            return out.reshape(p.shape[:-1])
        out = np.einsum("qic,i->qc", vals[0], self.coeffs)
        return out.reshape(p.shape[:-1] + (2,))


def l2_project(mesh: BackgroundMesh, cell: int, f, space: FeSpace, quad: QuadRule) -> LocalPoly:
    """L2(K) projection of ``f`` onto P_degree of ``cell``, integrated with ``quad``.

    The Gram matrix is formed from ``quad`` too, so the projection is exact for
    polynomial data whenever the rule integrates degree 2*degree exactly.
    """
    pts = quad.points[None]
    vals, _ = scalar_basis(space.degree, mesh, np.array([cell]), pts)
    vals = vals[0]
    w = quad.weights
    gram = np.einsum("q,qi,qj->ij", w, vals, vals)
    fv = np.asarray(f(quad.points), dtype=float)
    if space.kind == "scalar":
        coeffs = np.linalg.solve(gram, vals.T @ (w * fv))
    else:
        rhs = np.einsum("q,qi,qc->ci", w, vals, fv)
        coeffs = np.linalg.solve(gram, rhs.T).T.ravel()
    return LocalPoly(int(cell), coeffs, space, mesh)


def cell_poly(dofmap: DofMap, space: FeSpace, coeffs: np.ndarray, cell: int) -> LocalPoly:
    """The restriction of a global coefficient vector to one cell."""
    if space.kind == "scalar":
        idx = dofmap.p_dofs(cell) - dofmap.n_u
    else:
        idx = dofmap.u_dofs(cell)
    return LocalPoly(int(cell), np.asarray(coeffs)[idx], space, dofmap.mesh)


def extend_value(ext: ExtensionMap, dofmap: DofMap, space: FeSpace, coeffs: np.ndarray, cell: int, p) -> np.ndarray:
    """Value at ``p`` of the polynomial owned by the interior neighbour of cut cell ``cell``.

    ``coeffs`` is the global vector (u part for vector spaces, p part for scalar ones).
    """
    return cell_poly(dofmap, space, coeffs, ext.neighbor[int(cell)])(p)


def make_dofmap(mesh: BackgroundMesh, cls: CutClassification, r: int, m: int) -> DofMap:
    return DofMap(mesh, cls.active, FeSpace("vector2", r), FeSpace("scalar", m))
