"""Quadrature on full cells, cut cells K∩Ω, cut faces f∩Ω and boundary pieces Γ∩K.

Cut cells are refined recursively; only sub-triangles that still straddle the
boundary are split further.  At the deepest level the inside part of a cut
sub-triangle is integrated with a curved sub-cell map: the chord between the
two edge roots is lifted onto {phi = 0} along the chord normal, and the region
between an inside vertex and the lifted chord is parametrised as a cone.  The
same lift gives the boundary rule, with the exact arc-length factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import ProjectionFailed
from .geometry import LevelSet, segment_roots

# ---------------------------------------------------------------- reference rules


@lru_cache(maxsize=None)
def gauss_line(npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1]."""
    x, w = roots_legendre(npts)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _gauss_jacobi_t(npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule for int_0^1 f(t) t dt."""
    x, w = roots_jacobi(npts, 0.0, 1.0)
    return 0.5 * (x + 1.0), 0.25 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference triangle (0,0),(1,0),(0,1).

    Exact for polynomials of total degree <= ``degree``; all weights positive.
    """
    npts = max(1, (degree + 2) // 2)
    s, ws = gauss_line(npts)
    x, w = roots_jacobi(npts, 1.0, 0.0)
    t, wt = 0.5 * (x + 1.0), 0.25 * w
    S, T = np.meshgrid(s, t, indexing="ij")
    pts = np.column_stack([(S * (1.0 - T)).ravel(), T.ravel()])
    wts = np.outer(ws, wt).ravel()
    return pts, wts


def map_triangle_rule(tri: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Map the reference rule onto triangles ``tri`` of shape (..., 3, 2)."""
    ref, w = triangle_rule(degree)
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    det = np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
    pts = (
        tri[..., None, 0, :]
        + ref[:, 0, None] * e1[..., None, :]
        + ref[:, 1, None] * e2[..., None, :]
    )
    return pts, det[..., None] * w


# ---------------------------------------------------------------- containers


@dataclass
class QuadRule:
    points: np.ndarray
    weights: np.ndarray
    normals: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return float(self.weights.sum())


@dataclass
class CellQuad:
    """Padded per-cell rules: points (nc, nq, 2), weights (nc, nq); padding has zero weight."""

    cells: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    normals: Optional[np.ndarray] = None

    def rule(self, i: int) -> QuadRule:
        keep = self.weights[i] > 0
        nrm = None if self.normals is None else self.normals[i][keep]
        return QuadRule(self.points[i][keep], self.weights[i][keep], nrm)

    def __len__(self):
        return len(self.cells)


@dataclass
class FaceQuad:
    """Padded rules on interior faces; ``normals[f]`` points out of ``plus[f]``."""

    faces: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    h: np.ndarray

    def __len__(self):
        return len(self.faces)


def _pad(owner: np.ndarray, n_owner: int, *arrays: np.ndarray):
    """Group flat per-point arrays by owner index into zero-padded (n_owner, nq, ...) arrays."""
    order = np.argsort(owner, kind="stable")
    owner = owner[order]
    counts = np.bincount(owner, minlength=n_owner)
    nq = max(int(counts.max()) if len(counts) else 0, 1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(owner)) - starts[owner]
    out = []
    for a in arrays:
        a = a[order]
        buf = np.zeros((n_owner, nq) + a.shape[1:], dtype=a.dtype)
        buf[owner, slot] = a
        out.append(buf)
    return out


# ---------------------------------------------------------------- cut cells


def _lift(ls: LevelSet, c: np.ndarray, nu: np.ndarray, tol: float = 1e-10, maxiter: int = 50):
    """Solve phi(c + lam * nu) = 0 for lam by Newton, per point."""
    lam = np.zeros(c.shape[:-1])
    for _ in range(maxiter):
        x = c + lam[..., None] * nu
        f = ls(x)
        if np.all(np.abs(f) <= tol):
            return lam, x
        df = np.einsum("...i,...i->...", ls.gradient(x), nu)
        step = np.where(np.abs(df) > 1e-300, f / np.where(df == 0, 1.0, df), 0.0)
        lam = lam - step
    x = c + lam[..., None] * nu
    if not np.all(np.abs(ls(x)) <= tol):
        raise ProjectionFailed("Newton lift onto phi = 0 did not converge in 50 iterations")
    return lam, x


def _chord_geometry(ls: LevelSet, p: np.ndarray, q: np.ndarray, s: np.ndarray):
    """Lift chord points onto the boundary.

    Returns lifted points gamma (m, ns, 2), tangent derivative d gamma / ds and
    the unit chord normal (m, 2) oriented towards phi > 0.
    """
    d = q - p
    length = np.linalg.norm(d, axis=-1)
    safe = np.where(length > 0, length, 1.0)
    nu = np.stack([d[:, 1], -d[:, 0]], axis=-1) / safe[:, None]
    mid = 0.5 * (p + q)
    flip = np.einsum("ij,ij->i", ls.gradient(mid), nu) < 0
    nu = np.where(flip[:, None], -nu, nu)
    c = p[:, None, :] + s[None, :, None] * d[:, None, :]
    nu_b = np.broadcast_to(nu[:, None, :], c.shape)
    lam, gamma = _lift(ls, c, nu_b)
    g = ls.gradient(gamma)
    gn = np.einsum("...i,...i->...", g, nu_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        dlam = -np.einsum("...i,...i->...", g, np.broadcast_to(d[:, None, :], c.shape)) / gn
    dgamma = d[:, None, :] + dlam[..., None] * nu_b
    degenerate = length < 1e-14
    dgamma[degenerate] = 0.0
    return gamma, dgamma


def _curved_cone(ls, apex, p, q, degree):
    """Rule on the region bounded by apex->p, apex->q and the boundary arc lifted from chord p-q.

    Also returns, per region, whether the arc is star-shaped from the apex
    (the cone Jacobian keeps one sign); otherwise some weights are negative.
    """
    n1 = max(1, (degree + 3) // 2)
    s, ws = gauss_line(n1 + 2)
    t, wt = _gauss_jacobi_t(n1)
    gamma, dgamma = _chord_geometry(ls, p, q, s)
    rel = gamma - apex[:, None, :]
    jac = dgamma[..., 0] * rel[..., 1] - dgamma[..., 1] * rel[..., 0]  # (m, ns)
    orient = np.sign((jac * ws).sum(axis=1, keepdims=True))
    jac = jac * np.where(orient == 0, 1.0, orient)
    star_shaped = np.all(jac >= 0, axis=1)
    pts = apex[:, None, None, :] + t[None, None, :, None] * rel[:, :, None, :]
    wts = jac[:, :, None] * ws[None, :, None] * wt[None, None, :]
    m = len(apex)
    return pts.reshape(m, -1, 2), wts.reshape(m, -1), star_shaped


def _surface_piece(ls, p, q, degree):
    npts = max(1, (degree + 2) // 2) + 2
    s, ws = gauss_line(npts)
    gamma, dgamma = _chord_geometry(ls, p, q, s)
    w = np.linalg.norm(dgamma, axis=-1) * ws
    g = ls.gradient(gamma)
    nrm = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return gamma, w, nrm


def _subdivide(tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    out = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    )
    return out.reshape(-1, 3, 2)


def _edge_param(ls, a, b, fa):
    """Root parameter on segments from an inside vertex a to an outside vertex b."""
    t = np.zeros(len(a))
    strict = fa < 0
    if np.any(strict):
        t[strict] = segment_roots(ls, a[strict], b[strict])
    return t


def segment_extreme(ls: LevelSet, a: np.ndarray, b: np.ndarray, sign: float = 1.0, nsamp: int = 33, iters: int = 40) -> np.ndarray:
    """max of sign * phi along segments [a, b] (m, 2).

    Dense sampling locates the best bracket; a golden-section search then
    polishes it, so a boundary that dips through the segment between two
    samples is still seen.
    """
    if len(a) == 0:
        return np.zeros(0)
    d = b - a
    s = np.linspace(0.0, 1.0, nsamp)
    vals = sign * ls(a[:, None, :] + s[None, :, None] * d[:, None, :])
    i = np.argmax(vals, axis=1)
    best = vals[np.arange(len(a)), i]
    lo = s[np.maximum(i - 1, 0)]
    hi = s[np.minimum(i + 1, nsamp - 1)]
    g = 0.5 * (np.sqrt(5.0) - 1.0)

    def fval(t):
        return sign * ls(a + t[:, None] * d)

    x1 = hi - g * (hi - lo)
    x2 = lo + g * (hi - lo)
    f1, f2 = fval(x1), fval(x2)
    for _ in range(iters):
        left = f1 > f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        nx1 = np.where(left, hi - g * (hi - lo), x2)
        nx2 = np.where(left, x1, lo + g * (hi - lo))
        fn = fval(np.where(left, nx1, nx2))
        f1, f2 = np.where(left, fn, f2), np.where(left, f1, fn)
        x1, x2 = nx1, nx2
        best = np.maximum(best, np.maximum(f1, f2))
    return best


def edge_extreme(ls: LevelSet, tris: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """max of sign * phi over the three edges of each triangle (m, 3, 2)."""
    m = len(tris)
    if m == 0:
        return np.zeros(0)
    a = tris.reshape(-1, 2)
    b = np.roll(tris, -1, axis=1).reshape(-1, 2)
    return segment_extreme(ls, a, b, sign).reshape(m, 3).max(axis=1)


def _sample_lattice(k: int) -> np.ndarray:
    """Barycentric lattice of order k on a triangle (includes vertices and edges)."""
    pts = [(i / k, j / k) for i in range(k + 1) for j in range(k + 1 - i)]
    lam = np.array(pts)
    return np.column_stack([1.0 - lam.sum(1), lam])


def _barycentric(tri: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points x (m, k, 2) in triangles tri (m, 3, 2)."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    J = np.stack([e1, e2], axis=-1)
    rel = x - tri[:, None, 0]
    lam = np.linalg.solve(J[:, None], rel[..., None])[..., 0]
    return np.concatenate([1.0 - lam.sum(-1, keepdims=True), lam], axis=-1)


def _resolve_leaves(ls, tri, f, ins, degree, tol, nsamp=6, force=False):
    """Inside/boundary rules for leaves with mixed vertex signs.

    Returns a validity mask and the rules of the valid leaves.  A leaf is
    invalid when its lifted arc leaves the triangle or when its same-sign edge
    is crossed by the boundary; such leaves need further refinement.
    """
    m = len(tri)
    odd_in = ins.sum(1) == 1
    odd = np.where(odd_in, np.argmax(ins, 1), np.argmax(~ins, 1))
    idx = (odd[:, None] + np.arange(3)[None, :]) % 3
    tri = np.take_along_axis(tri, idx[:, :, None], axis=1)
    f = np.take_along_axis(f, idx, axis=1)
    A, B, C = tri[:, 0], tri[:, 1], tri[:, 2]
    # apex (an inside vertex) and chord endpoints P -> Q; straight part for two inside vertices
    apex = np.where(odd_in[:, None], A, B)
    P = np.empty_like(A)
    Q = np.empty_like(A)
    o = odd_in
    if np.any(o):
        P[o] = A[o] + _edge_param(ls, A[o], B[o], f[o, 0])[:, None] * (B[o] - A[o])
        Q[o] = A[o] + _edge_param(ls, A[o], C[o], f[o, 0])[:, None] * (C[o] - A[o])
    o = ~odd_in
    if np.any(o):
        # cone from B over the chord P(on C-A) -> Q(on B-A), plus the straight triangle B, C, P
        Q[o] = B[o] + _edge_param(ls, B[o], A[o], f[o, 1])[:, None] * (A[o] - B[o])
        P[o] = C[o] + _edge_param(ls, C[o], A[o], f[o, 2])[:, None] * (A[o] - C[o])

    s = np.linspace(0.0, 1.0, nsamp + 2)[1:-1]
    gamma, _ = _chord_geometry(ls, P, Q, s)
    bary = _barycentric(tri, gamma)
    valid = np.all(bary >= -1e-10, axis=(1, 2))
    # every piece of the leaf boundary keeps one sign: for one inside vertex
    # A-P and Q-A are inside and P-B-C-Q outside; for two inside vertices
    # P-C-B-Q is inside and Q-A-P outside
    one = odd_in[:, None]
    ins_pieces = [
        (np.where(one, A, B), np.where(one, P, Q)),
        (np.where(one, Q, P), np.where(one, A, C)),
        (np.where(one, A, C), np.where(one, A, B)),  # degenerate for one inside vertex
    ]
    out_pieces = [
        (np.where(one, P, Q), np.where(one, B, A)),
        (np.where(one, B, A), np.where(one, C, P)),
        (np.where(one, C, A), np.where(one, Q, A)),  # degenerate for two inside vertices
    ]
    size = np.linalg.norm(B - C, axis=1) + np.linalg.norm(A - B, axis=1)
    slack = 1e-9 * size
    for a, b in ins_pieces:
        valid &= segment_extreme(ls, a, b, 1.0) <= slack
    for a, b in out_pieces:
        valid &= segment_extreme(ls, a, b, -1.0) <= slack
    pts, w, star_shaped = _curved_cone(ls, apex, P, Q, degree)
    valid &= star_shaped
    if force:
        valid[:] = True

    vol, srf = [], []
    v = valid
    if np.any(v):
        pts, w = pts[v], w[v]
        vol.append((np.repeat(np.flatnonzero(v), w.shape[1]), pts.reshape(-1, 2), w.ravel()))
        two = v & ~odd_in
        if np.any(two):
            p2, w2 = map_triangle_rule(np.stack([B[two], C[two], P[two]], 1), degree)
            vol.append((np.repeat(np.flatnonzero(two), w2.shape[1]), p2.reshape(-1, 2), w2.ravel()))
        g, sw, sn = _surface_piece(ls, P[v], Q[v], degree)
        srf.append((np.repeat(np.flatnonzero(v), sw.shape[1]), g.reshape(-1, 2), sw.ravel(), sn.reshape(-1, 2)))
    return valid, vol, srf


def cut_cell_rules(
    ls: LevelSet,
    tris: np.ndarray,
    degree: int,
    depth: int,
    tol: float = 0.0,
    samples: int = 4,
    surface: bool = True,
    extra_levels: int = 8,
):
    """Batched rules for the inside part and the boundary part of triangles ``tris`` (m, 3, 2).

    Returns (volume, surface) as tuples of flat arrays (owner, points, weights[, normals]).
    A vertex with phi < tol counts as inside.  Leaves that cannot be resolved
    at ``depth`` are refined for up to ``extra_levels`` further levels.
    """
    m = len(tris)
    lattice = _sample_lattice(samples)
    vol_parts, srf_parts = [], []

    def emit_full(tri, owner):
        if len(tri) == 0:
            return
        p, w = map_triangle_rule(tri, degree)
        vol_parts.append((np.repeat(owner, w.shape[1]), p.reshape(-1, 2), w.ravel()))

    cur, owner = tris.copy(), np.arange(m)
    last = depth + extra_levels
    for level in range(last + 1):
        if len(cur) == 0:
            break
        fv = ls(cur)
        inside = fv < tol
        fs = ls(np.einsum("sk,tkd->tsd", lattice, cur))
        all_in = np.all(fs < tol, axis=1)
        all_out = np.all(fs >= tol, axis=1)
        # a boundary curve entering the leaf crosses one of its edges
        if np.any(all_in):
            all_in[all_in] = edge_extreme(ls, cur[all_in], 1.0) < tol
        if np.any(all_out):
            all_out[all_out] = edge_extreme(ls, cur[all_out], -1.0) <= -tol
        emit_full(cur[all_in], owner[all_in])
        straddle = ~(all_in | all_out)
        if level < depth:
            cur = _subdivide(cur[straddle])
            owner = np.repeat(owner[straddle], 4)
            continue
        n_in = inside.sum(axis=1)
        mixed = straddle & (n_in > 0) & (n_in < 3)
        done = np.zeros(len(cur), dtype=bool)
        mi = np.flatnonzero(mixed)
        if len(mi):
            # at the last level every leaf is accepted; the residual error is O(size^3)
            valid, vol, srf = _resolve_leaves(
                ls, cur[mi], fv[mi], inside[mi], degree, tol, force=level == last
            )
            for own, p, w in vol:
                vol_parts.append((owner[mi][own], p, w))
            for own, p, w, n in srf:
                srf_parts.append((owner[mi][own], p, w, n))
            done[mi[valid]] = True
        uniform = straddle & ~mixed
        if level == last:
            full = uniform & (n_in == 3)
            emit_full(cur[full], owner[full])
            break
        rest = straddle & ~done
        cur = _subdivide(cur[rest])
        owner = np.repeat(owner[rest], 4)

    def cat(parts, k, shape):
        return np.concatenate([p[k] for p in parts]) if parts else np.zeros(shape)

    vol = (cat(vol_parts, 0, (0,)).astype(np.int64), cat(vol_parts, 1, (0, 2)), cat(vol_parts, 2, (0,)))
    if not surface:
        srf_parts = []
    srf = (
        cat(srf_parts, 0, (0,)).astype(np.int64),
        cat(srf_parts, 1, (0, 2)),
        cat(srf_parts, 2, (0,)),
        cat(srf_parts, 3, (0, 2)),
    )
    return vol, srf


def cut_face_rules(ls: LevelSet, a: np.ndarray, b: np.ndarray, degree: int, tol: float = 0.0, pieces: int = 4):
    """Gauss rules on the inside part of segments [a, b].

    Each segment is split into ``pieces`` equal parts and each part is
    assumed to be crossed at most once.  Returns points (nf, nq, 2) and
    weights (nf, nq); outside parts get zero weight.
    """
    x, w = gauss_line(max(1, (degree + 2) // 2))
    length = np.linalg.norm(b - a, axis=1)
    all_pts, all_w = [], []
    edges = np.linspace(0.0, 1.0, pieces + 1)
    for k in range(pieces):
        s0, s1 = edges[k], edges[k + 1]
        pa = a + s0 * (b - a)
        pb = a + s1 * (b - a)
        fa, fb = ls(pa), ls(pb)
        ina, inb = fa < tol, fb < tol
        lo = np.zeros(len(a))
        hi = np.ones(len(a))
        cross = ina != inb
        if np.any(cross):
            # root search always runs from the inside end
            st = np.where(ina[cross, None], pa[cross], pb[cross])
            en = np.where(ina[cross, None], pb[cross], pa[cross])
            fs = np.where(ina[cross], fa[cross], fb[cross])
            t = np.zeros(cross.sum())
            strict = fs < 0
            if np.any(strict):
                t[strict] = segment_roots(ls, st[strict], en[strict])
            tc = np.where(ina[cross], t, 1.0 - t)
            hi[cross] = np.where(ina[cross], tc, 1.0)
            lo[cross] = np.where(ina[cross], 0.0, tc)
        par = s0 + (s1 - s0) * (lo[:, None] + (hi - lo)[:, None] * x[None, :])
        all_pts.append(a[:, None, :] + par[..., None] * (b - a)[:, None, :])
        wk = ((s1 - s0) * (hi - lo) * length)[:, None] * w[None, :]
        wk[~ina & ~inb] = 0.0
        all_w.append(wk)
    return np.concatenate(all_pts, axis=1), np.concatenate(all_w, axis=1)
