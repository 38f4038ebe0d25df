"""Run pipeline, error norms, convergence tables and stability probes."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .cases import Coefficients, ManufacturedCase, builtin_case
from .cut import assign_interior_neighbors, build_quadrature, classify
from .errors import AssumptionViolated, NoInteriorElement, NormGramSingular, ValidationError
from .forms import Discretization, SaddleSystem, assemble_all, assemble_terms
from .geometry import BBox
from .mesh import build_background_mesh
from .solver import PRUNE_TOL, Solution, pruning, solve

log = logging.getLogger(__name__)

DOMAIN = BBox((-1.0, -1.0), (1.0, 1.0))


def auto_alpha(r: int) -> float:
    """Penalty 3 r^2 + 15 for vector degree r."""
    return 3.0 * r**2 + 15.0


@dataclass(frozen=True)
class Settings:
    """Discretization knobs shared by every level of a run."""

    alpha: Optional[float] = None  # None: auto_alpha(r)
    quad_degree: Optional[int] = None  # None: 2r + 2
    quad_depth: int = 2
    err_degree: Optional[int] = None  # None: 2r + 4
    err_depth: int = 3
    c_on_cut_part: bool = False
    strict: bool = False  # raise on faces crossed more than once
    prune_tol: float = PRUNE_TOL


@dataclass(eq=False)
class Problem:
    case: ManufacturedCase
    r: int
    m: int
    n: int
    offset: tuple
    mesh: object
    cls: object
    ext: object
    dofmap: object
    disc: Discretization
    system: SaddleSystem
    settings: Settings
    timings: dict = field(default_factory=dict)
    _grams: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return (DOMAIN.hi[0] - DOMAIN.lo[0]) / self.n

    def grams(self, which_u: str = "A", which_p: str = "C"):
        key = (which_u, which_p)
        if key not in self._grams:
            self._grams[key] = norm_grams(self.disc, which_u, which_p)
        return self._grams[key]

    def reduction(self):
        """Orthonormal reduced bases (P_u, P_p) actually used by the solver (None if nothing pruned)."""
        if "P" not in self._grams:
            Pu, Pp, dropped = pruning(self.dofmap, self.grams(), self.cls.cut, self.settings.prune_tol)
            self._grams["P"] = (Pu, Pp, dropped)
        return self._grams["P"]


def build_problem(case: ManufacturedCase, r: int, m: int, n: int, settings: Settings = Settings(),
                  offset=(0.0, 0.0)) -> Problem:
    """Mesh, classify, extend, assemble."""
    if r < 1 or m < 0:
        raise ValidationError(f"degrees must satisfy r >= 1 and m >= 0, got ({r}, {m})")
    t0 = time.perf_counter()
    if offset[0] or offset[1]:
        case = dataclasses.replace(case, levelset=case.levelset.shifted(*offset))
    mesh = build_background_mesh(DOMAIN, n)
    cls = classify(mesh, case.levelset, strict=settings.strict)
    ext = assign_interior_neighbors(cls, mesh)
    from .spaces import make_dofmap

    dm = make_dofmap(mesh, cls, r, m)
    t1 = time.perf_counter()
    quad = build_quadrature(mesh, cls, case.levelset, settings.quad_degree or 2 * r + 2, settings.quad_depth)
    alpha = settings.alpha if settings.alpha is not None else auto_alpha(r)
    disc = Discretization(mesh, cls, ext, dm, quad, case.coefficients(alpha), settings.c_on_cut_part)
    t2 = time.perf_counter()
    system = assemble_all(disc, case)
    t3 = time.perf_counter()
    return Problem(case, r, m, n, tuple(offset), mesh, cls, ext, dm, disc, system, settings,
                   dict(geometry_s=t1 - t0, quadrature_s=t2 - t1, assembly_s=t3 - t2))


def norm_grams(disc: Discretization, which_u: str = "A", which_p: str = "C"):
    n_u, n_p = disc.dofmap.n_u, disc.dofmap.n_p
    Wu = assemble_terms(disc.norm_terms_u(which_u), (n_u, n_u))
    Wp = assemble_terms(disc.norm_terms_p(which_p), (n_p, n_p))
    return Wu, Wp


def solve_problem(problem: Problem) -> Solution:
    t0 = time.perf_counter()
    sol = solve(problem.system, problem.grams(), problem.settings.prune_tol, problem.cls.cut)
    problem.timings["solve_s"] = time.perf_counter() - t0
    return sol


# ------------------------------------------------------------------ errors


@dataclass
class ErrorReport:
    l2_u: float
    anorm_u: float
    cnorm_p: float
    components_u: dict
    components_p: dict

    def as_dict(self) -> dict:
        return dict(l2_u=self.l2_u, anorm_u=self.anorm_u, cnorm_p=self.cnorm_p,
                    components_u=self.components_u, components_p=self.components_p)


def error_discretization(problem: Problem) -> Discretization:
    """Same spaces on a finer quadrature: two degrees higher, one level deeper by default."""
    s = problem.settings
    quad = build_quadrature(problem.mesh, problem.cls, problem.case.levelset,
                            s.err_degree or 2 * problem.r + 4, s.err_depth)
    return Discretization(problem.mesh, problem.cls, problem.ext, problem.dofmap, quad,
                          problem.disc.coef, problem.disc.c_on_cut_part)


def _squared_terms(terms, case, proj, x) -> dict:
    out: dict = {}
    for t in terms:
        d = t.exact(case, proj) - t.apply(x)
        out[t.name] = out.get(t.name, 0.0) + float(np.einsum("eq,eqc->", t.w, d * d))
    return out


def error_norms(sol: Solution, case: ManufacturedCase, disc: Discretization,
                proj: Optional[dict] = None) -> ErrorReport:
    """L2, A-norm and C-norm errors; traces of the exact solution are single valued.

    ``proj`` holds the full-cell L2 projections used for the exact extension
    jumps of the stabilization seminorms; computed here when omitted.
    """
    if proj is None:
        proj = disc.project(case)
    cu = _squared_terms(disc.norm_terms_u("A"), case, proj, sol.u)
    cp = _squared_terms(disc.norm_terms_p("C"), case, proj, sol.p)
    l2 = 0.0
    for q, v, _ in disc.volume_sets():
        d = case.u(q.points) - np.einsum("eqci,ei->eqc", v.val, sol.u[disc.u_idx(q.cells)])
        l2 += float(np.einsum("eq,eqc->", q.weights, d * d))
    return ErrorReport(math.sqrt(l2), math.sqrt(sum(cu.values())), math.sqrt(sum(cp.values())), cu, cp)


# ------------------------------------------------------------------ studies

COLUMNS = ["example", "r", "m", "n", "h", "l2_u", "order_l2", "anorm_u", "order_anorm",
           "cnorm_p", "order_cnorm", "n_dofs", "wall_time_s"]


def observed_orders(errors: Sequence[float], hs: Sequence[float]) -> list:
    """log(e_i / e_{i+1}) / log(h_i / h_{i+1}) for consecutive levels; first entry is NaN."""
    out = [math.nan]
    for i in range(1, len(errors)):
        e0, e1 = errors[i - 1], errors[i]
        if e0 > 0 and e1 > 0:
            out.append(math.log(e0 / e1) / math.log(hs[i - 1] / hs[i]))
        else:
            out.append(math.nan)
    return out


def lsq_slope(errors: Sequence[float], hs: Sequence[float], last: int = 3) -> float:
    e = np.asarray(errors[-last:], dtype=float)
    h = np.asarray(hs[-last:], dtype=float)
    if len(e) < 2 or np.any(e <= 0):
        return math.nan
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


@dataclass
class StudyTable:
    example: str
    r: int
    m: int
    rows: list  # dicts keyed by COLUMNS (orders filled in by finalize)
    skipped: list = field(default_factory=list)  # (n, reason)

    def finalize(self) -> "StudyTable":
        self.rows.sort(key=lambda row: row["n"])
        hs = [row["h"] for row in self.rows]
        for key, okey in (("l2_u", "order_l2"), ("anorm_u", "order_anorm"), ("cnorm_p", "order_cnorm")):
            for row, o in zip(self.rows, observed_orders([row[key] for row in self.rows], hs)):
                row[okey] = o
        return self

    def column(self, key) -> list:
        return [row[key] for row in self.rows]

    def finest_orders(self) -> dict:
        last = self.rows[-1]
        return {k: last[k] for k in ("order_l2", "order_anorm", "order_cnorm")}

    def slopes(self) -> dict:
        hs = self.column("h")
        return {k: lsq_slope(self.column(k), hs) for k in ("l2_u", "anorm_u", "cnorm_p")}

    def to_csv(self, with_header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if with_header:
            w.writerow(COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"### {self.example}, (r, m) = ({self.r}, {self.m})", "",
                 "| h | ‖u−u_h‖_L² | order | ⫫u−u_h⫫_A | order | ⫫p−p_h⫫_C | order |",
                 "|---|---|---|---|---|---|---|"]
        for row in self.rows:
            cells = [f"1/{round(1 / row['h'])}" if abs(1 / row["h"] - round(1 / row["h"])) < 1e-9 else f"{row['h']:.4g}"]
            for k, o in (("l2_u", "order_l2"), ("anorm_u", "order_anorm"), ("cnorm_p", "order_cnorm")):
                cells.append(f"{row[k]:.3e}")
                cells.append("-" if math.isnan(row[o]) else f"{row[o]:.2f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.10e}"
    return str(v)


def run_level(case: ManufacturedCase, r: int, m: int, n: int, settings: Settings = Settings(),
              offset=(0.0, 0.0)) -> tuple[dict, dict]:
    """One row of a study plus the diagnostics that go to the run record."""
    t0 = time.perf_counter()
    prob = build_problem(case, r, m, n, settings, offset)
    sol = solve_problem(prob)
    t1 = time.perf_counter()
    rep = error_norms(sol, prob.case, error_discretization(prob))
    wall = time.perf_counter() - t0
    row = dict(example=case.name, r=r, m=m, n=n, h=prob.h, l2_u=rep.l2_u, anorm_u=rep.anorm_u,
               cnorm_p=rep.cnorm_p, n_dofs=prob.dofmap.n_total, wall_time_s=round(wall, 3))
    diag = dict(n=n, residual=sol.residual, full_residual=sol.info["full_residual"],
                pivot_ratio=sol.info["pivot_ratio"], pruned=sol.info["pruned"],
                timings={**prob.timings, "errors_s": time.perf_counter() - t1},
                n_cut=int(len(prob.cls.cut)), c_delta=prob.ext.c_delta, n_active=int(len(prob.cls.active)),
                face_violations=[int(e) for e in prob.cls.violations],
                components_u=rep.components_u, components_p=rep.components_p)
    return row, diag


def _level_worker(args):
    name, k, r, m, n, settings, offset = args
    try:
        return n, run_level(builtin_case(name, k=k), r, m, n, settings, offset), None
    except (AssumptionViolated, NoInteriorElement) as exc:
        return n, None, f"{type(exc).__name__}: {exc}"


def convergence_study(case: ManufacturedCase, degrees: tuple, n_list: Sequence[int],
                      settings: Settings = Settings(), threads: int = 1,
                      offset=(0.0, 0.0)) -> tuple[StudyTable, list]:
    """Run every level; levels that violate a mesh assumption are skipped with a warning.

    Returns the table and the per-level diagnostics.  With ``threads > 1`` the
    levels run in separate processes (built-in examples only); results are
    merged by n, so the output does not depend on completion order.
    """
    n_list = list(n_list)
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be strictly increasing with at least two entries")
    r, m = degrees
    jobs = [(case.name, case.k, r, m, n, settings, tuple(offset)) for n in n_list]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_level_worker, jobs))
    else:
        results = []
        for job in jobs:
            try:
                results.append((job[4], run_level(case, r, m, job[4], settings, offset), None))
            except (AssumptionViolated, NoInteriorElement) as exc:
                results.append((job[4], None, f"{type(exc).__name__}: {exc}"))
    table = StudyTable(case.name, r, m, [])
    diags = []
    for n, res, err in sorted(results, key=lambda t: t[0]):
        if res is None:
            log.warning("level n=%d skipped: %s", n, err)
            table.skipped.append((n, err))
            continue
        table.rows.append(res[0])
        diags.append(res[1])
    return table.finalize(), diags


def is_monotone(values: Sequence[float], allow_first: bool = True) -> bool:
    """Strictly decreasing, except possibly between the first two levels."""
    pairs = list(zip(values, values[1:]))
    if allow_first and pairs:
        pairs = pairs[1:]
    return all(b < a for a, b in pairs)


# ------------------------------------------------------------------ offsets


def random_offsets(n: int, count: int, seed: int = 0, magnitude: Optional[float] = None) -> np.ndarray:
    """``count`` translations drawn uniformly from [-a, a]^2 with a = h/2 by default."""
    h = (DOMAIN.hi[0] - DOMAIN.lo[0]) / n
    a = h / 2 if magnitude is None else magnitude
    return np.random.default_rng(seed).uniform(-a, a, size=(count, 2))


def min_cut_fraction(problem: Problem) -> float:
    q = problem.disc.quad.cut
    if len(q.cells) == 0:
        return 1.0
    return float((q.weights.sum(axis=1) / problem.mesh.areas[q.cells]).min())


# ------------------------------------------------------------------ stability


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def _reduce(mat, P, Q=None):
    if P is None and Q is None:
        return mat
    P = sp.identity(mat.shape[0], format="csc") if P is None else P
    Q = P if Q is None else Q
    return P.T @ mat @ Q


def _chol(W, name):
    W = _dense(W)
    W = 0.5 * (W + W.T)
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise NormGramSingular(f"{name} Gram matrix is not positive definite") from None
    d = np.diag(L) ** 2
    if d.min() <= 1e-14 * d.max():
        raise NormGramSingular(f"{name} Gram matrix is numerically singular ({d.min() / d.max():.1e})")
    return L


def estimate_infsup(B, CJ, Wu, Wp, Pu=None, Pp=None) -> float:
    """beta = min_q max_(v, r) B_h(v, r; q) / (|(v, r)|_W |q|_C), with B_h(v, r; q) = b(v, q) - (c + j)(q, r).

    The coupling operator is [B^T; -(C+J)] (columns indexed by q) and the
    velocity-multiplier norm is blockdiag(Wu, Wp).  Then beta^2 is the
    smallest eigenvalue of B W_u^-1 B^T + (C+J) W_p^-1 (C+J) against W_p.
    ``Pu``/``Pp`` restrict both spaces to the reduced bases used by the solver.
    """
    B = _reduce(sp.csr_matrix(B), Pp, Pu)
    CJ = _reduce(sp.csr_matrix(CJ), Pp)
    Lu = _chol(_reduce(Wu, Pu), "velocity")
    Lp = _chol(_reduce(Wp, Pp), "multiplier")
    Xu = sla.solve_triangular(Lu, _dense(B).T, lower=True)
    Xp = sla.solve_triangular(Lp, _dense(CJ), lower=True)
    S = Xu.T @ Xu + Xp.T @ Xp
    # generalized problem S x = lam Wp x via the Cholesky factor of Wp
    Y = sla.solve_triangular(Lp, sla.solve_triangular(Lp, S, lower=True).T, lower=True)
    lam = np.linalg.eigvalsh(0.5 * (Y + Y.T))
    return float(math.sqrt(max(lam[0], 0.0)))


def infsup_dense_svd(B, CJ, Wu, Wp) -> float:
    """Reference: smallest singular value of W^-1/2 [B^T; -(C+J)] Wp^-1/2 by dense SVD."""
    Wu, Wp = _dense(Wu), _dense(Wp)
    iu = sla.inv(sla.sqrtm(0.5 * (Wu + Wu.T)).real)
    ip = sla.inv(sla.sqrtm(0.5 * (Wp + Wp.T)).real)
    op = np.vstack([_dense(B).T, -_dense(CJ)])
    Wi = sla.block_diag(iu, ip)
    s = np.linalg.svd(Wi @ op @ ip, compute_uv=False)
    return float(s.min())


def problem_infsup(problem: Problem, pruned: bool = True) -> float:
    S = problem.system
    Wu, Wp = problem.grams()
    Pu, Pp, _ = problem.reduction() if pruned else (None, None, 0)
    return estimate_infsup(S.B, S.C + S.J, Wu, Wp, Pu, Pp)


def condition_probe(system: SaddleSystem, with_stabilization: bool = True, Pu=None, Pp=None) -> tuple[float, float]:
    """(largest, smallest) singular value of the system matrix by dense SVD."""
    K = system.matrix(stabilized=with_stabilization)
    if Pu is not None or Pp is not None:
        Pu = sp.identity(system.n_u, format="csc") if Pu is None else Pu
        Pp = sp.identity(system.n_p, format="csc") if Pp is None else Pp
        K = _reduce(K, sp.block_diag([Pu, Pp], format="csc"))
    s = np.linalg.svd(_dense(K), compute_uv=False)
    return float(s[0]), float(s[-1])


def condition_number(svals: tuple) -> float:
    smax, smin = svals
    return math.inf if smin == 0 else smax / smin


def norm_equivalence(problem: Problem, samples: int = 100, seed: int = 0) -> dict:
    """Ratios A/a on V_h and C/c on Q_h: maximum over random fields, and the exact supremum.

    The supremum is the largest generalized eigenvalue, taken on the reduced
    bases the solver uses.
    """
    WA, WC = problem.grams("A", "C")
    Wa, Wc = problem.grams("a", "c")
    Pu, Pp, _ = problem.reduction()
    rng = np.random.default_rng(seed)
    out = {}
    for key, big, small, P in (("u", WA, Wa, Pu), ("p", WC, Wc, Pp)):
        X = rng.standard_normal((big.shape[0], samples))
        if P is not None:
            X = P @ (P.T @ X)
        num = np.einsum("ij,ij->j", X, big @ X)
        den = np.einsum("ij,ij->j", X, small @ X)
        ratios = np.sqrt(num / den)
        Bd, Sd = _dense(_reduce(big, P)), _dense(_reduce(small, P))
        L = _chol(Sd, key)
        Y = sla.solve_triangular(L, sla.solve_triangular(L, Bd, lower=True).T, lower=True)
        lam = np.linalg.eigvalsh(0.5 * (Y + Y.T))
        out[key] = dict(sample_min=float(ratios.min()), sample_max=float(ratios.max()),
                        inf=float(math.sqrt(max(lam[0], 0.0))), sup=float(math.sqrt(lam[-1])))
    return out


def consistency_residual(problem: Problem) -> float:
    """Dual-norm size of K z_I - f for the projected exact solution, sup over the solver's space.

    z_I collects the full-cell L2 projections of u and p; the residual is
    measured as sqrt(r^T W^-1 r) with W = blockdiag(W_A, W_C).
    """
    S = problem.system
    proj = problem.disc.project(problem.case)
    z = np.concatenate([proj["u"], proj["p"]])
    res = S.matrix() @ z - S.full_rhs()
    Wu, Wp = problem.grams()
    Pu, Pp, _ = problem.reduction()
    W = sp.block_diag([Wu, Wp], format="csc")
    if Pu is not None:
        P = sp.block_diag([Pu, Pp], format="csc")
        W = (P.T @ W @ P).tocsc()
        res = P.T @ res
    y = spl.splu(W).solve(res)
    return float(math.sqrt(max(res @ y, 0.0)))


def patch_test(r: int = 1, m: int = 0, n: int = 6, settings: Settings = Settings()) -> dict:
    """Solve the linear-field problem and report its errors and residuals."""
    from .cases import patch_case

    prob = build_problem(patch_case(), r, m, n, settings)
    sol = solve_problem(prob)
    rep = error_norms(sol, prob.case, error_discretization(prob))
    return dict(r=r, m=m, n=n, l2_u=rep.l2_u, anorm_u=rep.anorm_u, cnorm_p=rep.cnorm_p,
                residual=sol.residual, full_residual=sol.info["full_residual"])
