from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp

from cutmaxwell.analysis import DOMAIN
from cutmaxwell.cases import vacuum
from cutmaxwell.cut import assign_interior_neighbors, build_quadrature, classify
from cutmaxwell.errors import DimensionMismatch
from cutmaxwell.forms import Discretization, assemble_all, assemble_rhs, assemble_system, write_coo
from cutmaxwell.geometry import constant
from cutmaxwell.mesh import build_background_mesh
from cutmaxwell.spaces import make_dofmap

from conftest import cached_problem

PAIRS = [(1, 0), (2, 1), (3, 2)]


def make_disc(ls, r, m, n, k=1.0, alpha=18.0):
    mesh = build_background_mesh(DOMAIN, n)
    cls = classify(mesh, ls, strict=False)
    ext = assign_interior_neighbors(cls, mesh)
    dm = make_dofmap(mesh, cls, r, m)
    quad = build_quadrature(mesh, cls, ls, 2 * r + 2, 2)
    return Discretization(mesh, cls, ext, dm, quad, vacuum(k, alpha))


def polynomial_coeffs(disc, u=None, p=None):
    """Full-cell projections of global fields (exact for polynomials)."""
    zero_u = lambda x: np.zeros(x.shape)
    zero_p = lambda x: np.zeros(x.shape[:-1])
    proj = disc.project(SimpleNamespace(u=u or zero_u, p=p or zero_p))
    return proj["u"], proj["p"]


def dense_min_eig_ratio(M):
    w = np.linalg.eigvalsh(M.toarray())
    return w[0] / max(abs(w[-1]), 1e-300)


@pytest.fixture(scope="module")
def sys6():
    return cached_problem("circle", 2, 1, 6)


def test_block_shapes_and_symmetry(sys6):
    S = sys6.system
    n_u, n_p = sys6.dofmap.n_u, sys6.dofmap.n_p
    assert S.B.shape == (n_p, n_u)
    for name in ("A0", "A1", "G", "M", "C", "J"):
        A = getattr(S, name)
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max(), name
    K = S.matrix()
    assert abs(K - K.T).max() <= 1e-12 * abs(K).max()


def test_semidefinite_blocks(sys6):
    S = sys6.system
    for name in ("A1", "G", "C", "J", "M"):
        assert dense_min_eig_ratio(getattr(S, name)) >= -1e-12, name


def test_coercivity_probe(sys6):
    S = sys6.system
    assert dense_min_eig_ratio(S.A0 + S.A1 + S.G) >= -1e-12


def test_stabilization_support(sys6):
    S, dm, ext = sys6.system, sys6.dofmap, sys6.ext
    ks, nb = ext.pairs()
    allowed_u = np.zeros(dm.n_u, bool)
    allowed_u[dm.u_dofs(np.concatenate([ks, nb])).ravel()] = True
    allowed_p = np.zeros(dm.n_p, bool)
    allowed_p[(dm.p_dofs(np.concatenate([ks, nb])) - dm.n_u).ravel()] = True
    assert not np.any(abs(S.G).sum(axis=1).A1[~allowed_u])
    assert not np.any(abs(S.J).sum(axis=1).A1[~allowed_p])


def test_mass_positive_on_cells_with_inside_part(sys6):
    S, dm = sys6.system, sys6.dofmap
    M = S.M.tocsr()
    for k in sys6.cls.cut:
        idx = dm.u_dofs(k)
        assert np.linalg.eigvalsh(M[idx][:, idx].toarray())[0] > 0


@pytest.mark.parametrize("r, m", PAIRS)
def test_stabilization_kernel_contains_global_polynomials(r, m):
    disc = cached_problem("circle", r, m, 8).disc
    S = cached_problem("circle", r, m, 8).system
    for a in range(r + 1):
        for b in range(r + 1 - a):
            mono = lambda x, a=a, b=b: x[..., 0] ** a * x[..., 1] ** b
            u, _ = polynomial_coeffs(disc, u=lambda x: np.stack([mono(x), 0.5 * mono(x)], axis=-1))
            assert u @ (S.G @ u) <= 1e-12
            if a + b <= m:
                _, p = polynomial_coeffs(disc, p=mono)
                assert p @ (S.J @ p) <= 1e-12


def test_stabilization_unit_jumps(sys6):
    S, dm, mesh = sys6.system, sys6.dofmap, sys6.mesh
    k = int(sys6.cls.cut[0])
    # q = 1 on K, 0 on its neighbour
    p = np.zeros(dm.n_p)
    p[dm.p_dofs(k)[0] - dm.n_u] = np.sqrt(mesh.areas[k])
    assert p @ (S.J @ p) == pytest.approx(mesh.areas[k], rel=1e-12)
    # rot u = 1 on K: u = (0, x) there, zero elsewhere
    u_all, _ = polynomial_coeffs(sys6.disc, u=lambda x: np.stack([0 * x[..., 0], x[..., 0]], axis=-1))
    u = np.zeros(dm.n_u)
    u[dm.u_dofs(k)] = u_all[dm.u_dofs(k)]
    assert u @ (S.G @ u) == pytest.approx(mesh.areas[k], rel=1e-12)


def test_constant_field_not_coupled(sys6):
    u, _ = polynomial_coeffs(sys6.disc, u=lambda x: np.stack([np.ones(x.shape[:-1]), -2 * np.ones(x.shape[:-1])], -1))
    assert np.abs(sys6.system.B @ u).max() < 1e-12


def test_mass_of_constant_field(circle6):
    u, _ = polynomial_coeffs(circle6.disc, u=lambda x: np.stack([np.ones(x.shape[:-1]), 0 * x[..., 0]], -1))
    assert u @ (circle6.system.M @ u) == pytest.approx(np.pi * 0.49, abs=1e-10)


def test_coupling_of_linear_field_without_boundary():
    disc = make_disc(constant(-1.0), 1, 0, 4)
    S = assemble_all(disc)
    mesh, dm = disc.mesh, disc.dofmap
    k = int(np.flatnonzero(np.all(mesh.edge_cells[mesh.cell_edges, 1] >= 0, axis=1))[0])  # off the box boundary
    u, _ = polynomial_coeffs(disc, u=lambda x: x.copy())
    p = np.zeros(dm.n_p)
    p[dm.p_dofs(k)[0] - dm.n_u] = np.sqrt(mesh.areas[k])
    assert p @ (S.B @ u) == pytest.approx(2 * mesh.areas[k], rel=1e-12)
    # unit jump of q across the three faces of the cell
    hf = mesh.edge_lengths[mesh.cell_edges[k]]
    assert p @ (S.C @ p) == pytest.approx(np.sum(hf * hf), rel=1e-12)


def test_continuous_multiplier_only_sees_boundary(sys6):
    disc, S = sys6.disc, sys6.system
    f = lambda x: x[..., 0] + 0.5
    _, p = polynomial_coeffs(disc, p=f)
    s = disc.quad.surface
    hK = sys6.mesh.diameters[s.cells][:, None]
    expected = float(np.sum(hK * s.weights * f(s.points) ** 2))
    assert p @ (S.C @ p) == pytest.approx(expected, rel=1e-10)


def test_rhs_examples(circle6):
    disc = circle6.disc
    zero = assemble_rhs(disc, lambda x: np.zeros(x.shape), lambda x, n: np.zeros(x.shape[:-1]))
    assert np.all(zero == 0)
    l = assemble_rhs(disc, lambda x: np.stack([np.ones(x.shape[:-1]), 0 * x[..., 0]], -1),
                     lambda x, n: np.zeros(x.shape[:-1]))
    v, _ = polynomial_coeffs(disc, u=lambda x: np.stack([np.ones(x.shape[:-1]), 0 * x[..., 0]], -1))
    assert l @ v == pytest.approx(np.pi * 0.49, abs=1e-10)


@pytest.mark.parametrize("r, m", PAIRS)
def test_patch_exact_coefficients_have_zero_residual(r, m):
    prob = cached_problem("patch", r, m, 6)
    S = prob.system
    proj = prob.disc.project(prob.case)
    res = S.matrix() @ np.concatenate([proj["u"], proj["p"]]) - S.full_rhs()
    assert np.linalg.norm(res) <= 1e-9 * max(1.0, np.linalg.norm(S.full_rhs()))


def test_dimension_checks(circle6):
    S = circle6.system
    blocks = dict(A0=S.A0, A1=S.A1, G=S.G, M=S.M, B=S.B, C=S.C, J=S.J)
    with pytest.raises(DimensionMismatch):
        assemble_system(blocks, circle6.disc.coef, np.zeros(S.n_u + 1))
    with pytest.raises(DimensionMismatch):
        assemble_system({**blocks, "B": S.B.T}, circle6.disc.coef, S.rhs)


def test_write_coo_round_trip(tmp_path, circle6):
    A = circle6.system.B
    path = tmp_path / "B.coo"
    write_coo(path, A)
    lines = path.read_text().splitlines()
    nr, nc, nnz = map(int, lines[0].lstrip("# ").split())
    data = np.loadtxt(lines[1:], ndmin=2)
    back = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(nr, nc))
    assert (nr, nc) == A.shape and nnz == sp.coo_matrix(A).nnz
    assert abs(back - A).max() == 0.0
