import math

import numpy as np
import pytest
import scipy.sparse as sp

from cutmaxwell.analysis import (
    COLUMNS,
    Settings,
    StudyTable,
    build_problem,
    condition_number,
    condition_probe,
    consistency_residual,
    convergence_study,
    error_discretization,
    error_norms,
    estimate_infsup,
    infsup_dense_svd,
    is_monotone,
    lsq_slope,
    min_cut_fraction,
    norm_equivalence,
    observed_orders,
    problem_infsup,
    random_offsets,
)
from cutmaxwell.cases import circle_case, star_case
from cutmaxwell.errors import NormGramSingular
from cutmaxwell.forms import SaddleSystem
from cutmaxwell.solver import Solution, solve

from conftest import cached_problem


def polar_l2_norm(u, radius, nr=80, nt=256):
    """||u||_L2 over a disk by Gauss-Legendre in r and the periodic trapezoid rule in theta."""
    x, w = np.polynomial.legendre.leggauss(nr)
    r = 0.5 * radius * (x + 1)
    wr = 0.5 * radius * w
    th = np.arange(nt) * 2 * np.pi / nt
    R, T = np.meshgrid(r, th, indexing="ij")
    pts = np.stack([R * np.cos(T), R * np.sin(T)], axis=-1)
    val = np.sum(u(pts) ** 2, axis=-1)
    return math.sqrt(np.sum(wr[:, None] * R * val) * 2 * np.pi / nt)


def test_zero_solution_matches_independent_quadrature(circle6):
    prob = circle6
    zero = Solution(np.zeros(prob.dofmap.n_u), np.zeros(prob.dofmap.n_p), 0.0)
    rep = error_norms(zero, prob.case, error_discretization(prob))
    assert rep.l2_u == pytest.approx(polar_l2_norm(prob.case.u, 0.7), abs=1e-6)


@pytest.mark.parametrize("example, r, m", [("circle", 2, 1), ("star", 2, 0)])
def test_error_components(example, r, m):
    prob = cached_problem(example, r, m, 12)
    sol = solve(prob.system)
    rep = error_norms(sol, prob.case, error_discretization(prob))
    assert all(v >= 0 for v in rep.components_u.values())
    assert all(v >= 0 for v in rep.components_p.values())
    assert rep.anorm_u**2 == pytest.approx(sum(rep.components_u.values()), rel=1e-12)
    assert rep.cnorm_p**2 == pytest.approx(sum(rep.components_p.values()), rel=1e-12)
    assert set(rep.as_dict()) == {"l2_u", "anorm_u", "cnorm_p", "components_u", "components_p"}


def test_projection_has_small_jumps():
    r = 2
    face, gamma = [], []
    for n in (12, 24):
        prob = cached_problem("circle", r, 1, n)
        proj = prob.disc.project(prob.case)
        rep = error_norms(Solution(proj["u"], proj["p"], 0.0), prob.case, prob.disc, proj)
        c = rep.components_u
        assert all(v >= 0 for v in c.values())
        face.append(c["face_tan_jump"] + c["face_nrm_jump"])
        gamma.append(c["gamma_tan_jump"])
    # squared seminorms: h^-1 |f| h^(2r+2) summed over O(h^-2) faces gives h^(2r);
    # the boundary strip has O(h^-1) cells, so that part is h^(2r+1)
    assert face[0] / face[1] > 0.9 * 2 ** (2 * r)
    assert gamma[0] / gamma[1] > 0.9 * 2 ** (2 * r + 1)


def test_observed_orders_and_slope():
    hs = [1.0, 0.5, 0.25, 0.125]
    errs = [3.0 * h**2 for h in hs]
    o = observed_orders(errs, hs)
    assert math.isnan(o[0])
    assert np.allclose(o[1:], 2.0)
    assert lsq_slope(errs, hs) == pytest.approx(2.0)
    assert math.isnan(observed_orders([1.0, 0.0], [1.0, 0.5])[1])


def test_monotonicity():
    assert is_monotone([1.0, 2.0, 1.0, 0.5])
    assert not is_monotone([1.0, 2.0, 1.0, 0.5], allow_first=False)
    assert not is_monotone([1.0, 0.5, 0.6])


def test_study_table_csv():
    rows = [dict(example="circle", r=1, m=0, n=n, h=2 / n, l2_u=1.0 / n**2, anorm_u=1.0 / n, cnorm_p=1.0 / n,
                 n_dofs=10 * n, wall_time_s=0.1) for n in (12, 6)]
    table = StudyTable("circle", 1, 0, rows).finalize()
    assert table.column("n") == [6, 12]
    lines = table.to_csv().splitlines()
    assert lines[0].split(",") == COLUMNS
    first = dict(zip(COLUMNS, lines[1].split(",")))
    assert first["order_l2"] == ""
    second = dict(zip(COLUMNS, lines[2].split(",")))
    assert float(second["order_l2"]) == pytest.approx(2.0)
    assert table.finest_orders()["order_anorm"] == pytest.approx(1.0)
    md = table.to_markdown()
    assert "| 1/3 |" in md and "| 1/6 |" in md


def test_study_merges_processes_deterministically():
    case = circle_case()
    a, _ = convergence_study(case, (1, 0), [4, 8], threads=1)
    b, _ = convergence_study(case, (1, 0), [4, 8], threads=2)
    drop = lambda t: [{k: v for k, v in row.items() if k != "wall_time_s"} for row in t.rows]
    assert drop(a) == drop(b)


def test_study_skips_violating_levels():
    table, diags = convergence_study(star_case(), (1, 0), [6, 12], Settings(strict=True))
    assert table.rows == [] and diags == []
    assert [n for n, _ in table.skipped] == [6, 12]


def test_random_offsets():
    d = random_offsets(8, 16, seed=3)
    assert d.shape == (16, 2)
    assert np.abs(d).max() <= 0.125
    assert np.array_equal(d, random_offsets(8, 16, seed=3))
    assert not np.array_equal(d, random_offsets(8, 16, seed=4))


# ------------------------------------------------------------------ inf-sup


def test_infsup_under_refinement():
    betas = [problem_infsup(cached_problem("circle", 1, 0, n)) for n in (4, 6, 8, 12)]
    assert min(betas) >= 0.5 * max(betas)
    assert min(betas) > 0


def test_infsup_matches_dense_svd():
    prob = cached_problem("circle", 1, 0, 4)
    S = prob.system
    Wu, Wp = prob.grams()
    est = estimate_infsup(S.B, S.C + S.J, Wu, Wp)
    assert est == pytest.approx(infsup_dense_svd(S.B, S.C + S.J, Wu, Wp), rel=1e-8)


def test_infsup_vanishes_without_coupling(circle6):
    S = circle6.system
    Wu, Wp = circle6.grams()
    Z = sp.csr_matrix(S.C.shape)
    assert estimate_infsup(0 * S.B, Z, Wu, Wp) == 0.0
    # the multiplier block alone already gives control of q
    assert estimate_infsup(0 * S.B, S.C + S.J, Wu, Wp) > 0


def test_infsup_scale_invariance(circle6):
    S = circle6.system
    Wu, Wp = circle6.grams()
    b1 = estimate_infsup(S.B, S.C + S.J, Wu, Wp)
    c = 37.5
    b2 = estimate_infsup(c * S.B, c * (S.C + S.J), c * Wu, c * Wp)
    assert b2 == pytest.approx(b1, rel=1e-10)


def test_singular_gram_is_reported(circle6):
    S = circle6.system
    Wu, Wp = circle6.grams()
    with pytest.raises(NormGramSingular):
        estimate_infsup(S.B, S.C + S.J, Wu, 0 * Wp)


# ------------------------------------------------------------------ conditioning


def test_identity_system_condition_number():
    I = sp.identity(4, format="csr")
    Z = sp.csr_matrix((4, 4))
    S = SaddleSystem(I, Z, Z, Z, sp.csr_matrix((3, 4)), sp.identity(3, format="csr"), sp.csr_matrix((3, 3)),
                     np.zeros(4), 0.0)
    assert condition_number(condition_probe(S)) == pytest.approx(1.0)


def test_stabilization_improves_worst_offset_conditioning():
    case = circle_case()
    probs = [build_problem(case, 1, 0, 8, Settings(), tuple(d)) for d in random_offsets(8, 16, seed=0)]
    worst = min(probs, key=min_cut_fraction)
    stab = condition_number(condition_probe(worst.system, True))
    unstab = condition_number(condition_probe(worst.system, False))
    assert unstab >= 10 * stab


# ------------------------------------------------------------------ norm equivalence


def test_norm_equivalence_bounds():
    out = {}
    for n in (8, 16):
        ne = norm_equivalence(cached_problem("circle", 1, 0, n), samples=100, seed=0)
        for key in ("u", "p"):
            assert ne[key]["inf"] >= 1 - 1e-10
            assert ne[key]["sample_min"] >= 1 - 1e-10
            assert ne[key]["sample_max"] <= ne[key]["sup"] * (1 + 1e-10)
        out[n] = ne
    for key in ("u", "p"):
        a, b = out[8][key]["sup"], out[16][key]["sup"]
        assert max(a, b) / min(a, b) < 2


def test_norm_equivalence_over_offsets():
    case = circle_case()
    sups = {"u": [], "p": []}
    for d in random_offsets(8, 16, seed=0):
        ne = norm_equivalence(build_problem(case, 1, 0, 8, Settings(), tuple(d)))
        for key in sups:
            sups[key].append(ne[key]["sup"])
    for key, v in sups.items():
        assert max(v) / min(v) < 2, key


def test_multiplier_stabilization_equivalence():
    """||q||^2 on the active cells against ||q||^2 on the interior cells plus j(q, q)."""
    case = circle_case()
    rng = np.random.default_rng(0)
    ratios = []
    for d in random_offsets(12, 16, seed=0):
        prob = build_problem(case, 1, 0, 12, Settings(), tuple(d))
        dm = prob.dofmap
        Q = rng.standard_normal((dm.n_p, 100))
        inner = (dm.p_dofs(prob.cls.interior) - dm.n_u).ravel()
        full = np.sum(Q * Q, axis=0)  # the basis is orthonormal on each full cell
        stab = np.sum(Q[inner] ** 2, axis=0) + np.einsum("ij,ij->j", Q, prob.system.J @ Q)
        ratios.append(full / stab)
    ratios = np.concatenate(ratios)
    assert ratios.max() / ratios.min() < 50


def test_curl_stabilization_equivalence():
    """Broken curl seminorm on the active cells against the curl on the inside parts plus g(v, v)."""
    from cutmaxwell.forms import Term, assemble_terms
    from cutmaxwell.quadrature import map_triangle_rule

    case = circle_case()
    rng = np.random.default_rng(0)
    ratios = []
    for d in random_offsets(8, 16, seed=0):
        prob = build_problem(case, 1, 0, 8, Settings(), tuple(d))
        disc, dm = prob.disc, prob.dofmap
        act = dm.active
        pts, w = map_triangle_rule(prob.mesh.cell_coords[act], 4)
        full = assemble_terms([Term("curl", "u", w, disc.vec(act, pts).rot, disc.u_idx(act))], (dm.n_u, dm.n_u))
        inside = assemble_terms([t for t in disc.terms_a0() if t.name == "curl"], (dm.n_u, dm.n_u))
        U = rng.standard_normal((dm.n_u, 100))
        ratios.append(np.einsum("ij,ij->j", U, full @ U) / np.einsum("ij,ij->j", U, (inside + prob.system.G) @ U))
    ratios = np.concatenate(ratios)
    assert ratios.max() / ratios.min() < 50


def test_consistency_residual_of_patch_vanishes():
    assert consistency_residual(cached_problem("patch", 1, 0, 6)) <= 1e-9


def test_consistency_residual_decreases():
    res = [consistency_residual(cached_problem("circle", 2, 1, n)) for n in (6, 12, 24)]
    assert res[0] > res[1] > res[2]
