"""Direct solution of the saddle-point system.

Cut cells whose inside part is a sliver carry local directions that are
invisible to every term of the energy norm at working precision (their norm
is below ``tau`` times the largest local norm).  Their coefficients are fixed
to zero before factorization; everything else is an exact sparse LU solve.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .errors import DimensionMismatch, SingularSystem
from .forms import SaddleSystem

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
PRUNE_TOL = 1e-14


@dataclass(eq=False)
class Solution:
    u: np.ndarray
    p: np.ndarray
    residual: float  # relative residual of the factorized system
    info: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u, self.p])


def local_basis(W: sp.spmatrix, blocks, tau: float = PRUNE_TOL):
    """Columns spanning, cell by cell, the directions kept by the Gram matrix ``W``.

    ``blocks`` is an (ncell, nd) array of DOF indices of the cells to inspect.
    Returns (rows, cols_local, vals, kept_per_cell, dropped).
    """
    W = sp.csr_matrix(W)
    out = []
    dropped = 0
    for idx in np.asarray(blocks):
        B = W[idx][:, idx].toarray()
        B = 0.5 * (B + B.T)
        w, V = np.linalg.eigh(B)
        top = w[-1] if len(w) else 0.0
        keep = w > tau * top if top > 0 else np.zeros(len(w), bool)
        if keep.all():
            out.append((idx, None))
            continue
        dropped += int((~keep).sum())
        out.append((idx, V[:, keep]))
    return out, dropped


def pruning_operator(n: int, groups) -> sp.csc_matrix:
    """Sparse P (n x n_kept): identity on untouched DOFs, local eigenvectors on pruned cells."""
    touched = np.zeros(n, bool)
    rows, cols, vals = [], [], []
    col = 0
    for idx, V in groups:
        if V is None:
            continue
        touched[idx] = True
        k = V.shape[1]
        rows.append(np.repeat(idx, k))
        cols.append(np.tile(col + np.arange(k), len(idx)))
        vals.append(V.ravel())
        col += k
    free = np.flatnonzero(~touched)
    rows.append(free)
    cols.append(col + np.arange(len(free)))
    vals.append(np.ones(len(free)))
    col += len(free)
    return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, col))


def solve_matrix(K: sp.spmatrix, f: np.ndarray, P: Optional[sp.spmatrix] = None,
                 tol: float = RESIDUAL_TOL) -> tuple[np.ndarray, dict]:
    """Solve K z = f, optionally restricted to the range of P; raise SingularSystem on failure."""
    K = sp.csc_matrix(K)
    if K.shape[0] != K.shape[1] or K.shape[0] != len(f):
        raise DimensionMismatch(f"matrix {K.shape} and rhs {len(f)} do not match")
    if K.shape[0] == 0:
        raise DimensionMismatch("empty system")
    Kr, fr = (K, f) if P is None else ((P.T @ K @ P).tocsc(), P.T @ f)
    t0 = time.perf_counter()
    try:
        lu = spl.splu(Kr, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as exc:
        raise SingularSystem(f"factorization failed: {exc}") from None
    d = np.abs(lu.U.diagonal())
    pivot_ratio = float(d.min() / d.max()) if d.max() > 0 else 0.0
    y = lu.solve(fr)
    fn = np.linalg.norm(fr)
    if not np.all(np.isfinite(y)):
        raise SingularSystem("solution is not finite")
    res = np.linalg.norm(Kr @ y - fr) / (fn if fn > 0 else 1.0)
    if fn == 0 and np.linalg.norm(y) > 0:
        res = max(res, np.linalg.norm(y))
    if pivot_ratio < 1e-15 or res > tol:
        raise SingularSystem(f"numerically singular: pivot ratio {pivot_ratio:.2e}, residual {res:.2e}")
    z = y if P is None else P @ y
    info = dict(residual=float(res), pivot_ratio=pivot_ratio, n=int(K.shape[0]), n_solved=int(Kr.shape[0]),
                factor_time_s=time.perf_counter() - t0)
    return z, info


def pruning(dofmap, grams: tuple, cells, tau: float = PRUNE_TOL):
    """(P_u, P_p, dropped): reduced bases for the two spaces, or (None, None, 0) if nothing is pruned.

    ``grams`` are the velocity and multiplier Gram matrices; only ``cells`` are inspected.
    Columns of each P are orthonormal.
    """
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) == 0:
        return None, None, 0
    gu, du = local_basis(grams[0], dofmap.u_dofs(cells), tau)
    gp, dp = local_basis(grams[1], dofmap.p_dofs(cells) - dofmap.n_u, tau)
    if du + dp == 0:
        return None, None, 0
    return pruning_operator(dofmap.n_u, gu), pruning_operator(dofmap.n_p, gp), du + dp


def solve(system: SaddleSystem, grams: Optional[tuple] = None, tau: float = PRUNE_TOL,
          cells: Optional[np.ndarray] = None, tol: float = RESIDUAL_TOL) -> Solution:
    """Factorize and solve; ``grams=(W_u, W_p)`` enables pruning on ``cells`` (default: none)."""
    K = system.matrix()
    f = system.full_rhs()
    P = None
    dropped = 0
    if grams is not None and cells is not None and system.dofmap is not None:
        Pu, Pp, dropped = pruning(system.dofmap, grams, cells, tau)
        if dropped:
            P = sp.block_diag([Pu, Pp], format="csc")
            log.info("pruned %d numerically invisible local directions", dropped)
    z, info = solve_matrix(K, f, P, tol)
    fn = np.linalg.norm(f)
    info["full_residual"] = float(np.linalg.norm(K @ z - f) / (fn if fn > 0 else 1.0))
    info["pruned"] = int(dropped)
    return Solution(z[: system.n_u], z[system.n_u:], info["residual"], info)
