import numpy as np
import pytest
import scipy.sparse as sp

from cutmaxwell.analysis import Settings, patch_test
from cutmaxwell.errors import DimensionMismatch, SingularSystem
from cutmaxwell.forms import SaddleSystem, assemble_all
from cutmaxwell.geometry import circle
from cutmaxwell.solver import local_basis, pruning, pruning_operator, solve, solve_matrix

from conftest import cached_problem
from test_forms import make_disc


@pytest.mark.parametrize("r, m", [(1, 0), (2, 1), (3, 2), (2, 0)])
def test_patch_test(r, m):
    res = patch_test(r, m, 6, Settings())
    assert res["l2_u"] <= 1e-9
    assert res["anorm_u"] <= 1e-9
    assert res["cnorm_p"] <= 1e-9
    assert res["residual"] <= 1e-12


@pytest.mark.parametrize("k", [0.0, 1.0])
def test_homogeneous_data_gives_zero(k):
    disc = make_disc(circle(0.7), 1, 0, 6, k=k)
    S = assemble_all(disc)
    sol = solve(S)
    assert np.linalg.norm(sol.z) <= 1e-10


def test_zeroed_velocity_block_is_singular(circle6):
    S = circle6.system
    Z = sp.csr_matrix(S.A0.shape)
    broken = SaddleSystem(Z, Z, Z, Z, S.B, S.C, S.J, S.rhs, S.k, S.dofmap)
    with pytest.raises(SingularSystem):
        solve(broken)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_matrix(sp.identity(3), np.ones(4))


def test_solution_satisfies_system(circle6):
    sol = solve(circle6.system)
    K, f = circle6.system.matrix(), circle6.system.full_rhs()
    assert np.linalg.norm(K @ sol.z - f) <= 1e-10 * np.linalg.norm(f)
    assert sol.info["pruned"] == 0
    assert sol.info["pivot_ratio"] > 1e-15


def test_local_basis_drops_invisible_directions(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    block = Q @ np.diag([2.0, 1.0, 1e-20]) @ Q.T
    W = sp.block_diag([np.eye(3), block], format="csr")
    groups, dropped = local_basis(W, np.array([[0, 1, 2], [3, 4, 5]]))
    assert dropped == 1
    assert groups[0][1] is None
    V = groups[1][1]
    assert V.shape == (3, 2)
    assert np.abs(V.T @ Q[:, 2]).max() < 1e-12  # the dropped direction is the null one
    P = pruning_operator(6, groups)
    assert P.shape == (6, 5)
    assert np.allclose((P.T @ P).toarray(), np.eye(5), atol=1e-14)


def test_pruning_reduces_system_consistently(rng):
    # an SPD system with one cell direction of tiny energy: the reduced solve matches the projected exact one
    n = 6
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    K = sp.block_diag([np.diag([3.0, 2.0, 1.0]), Q @ np.diag([2.0, 1.0, 1e-18]) @ Q.T], format="csc")
    f = rng.standard_normal(n)
    groups, _ = local_basis(K, np.array([[3, 4, 5]]))
    P = pruning_operator(n, groups)
    z, info = solve_matrix(K, f, P)
    assert info["n_solved"] == 5
    y = np.linalg.solve((P.T @ K @ P).toarray(), P.T @ f)
    assert np.allclose(z, P @ y)
    with pytest.raises(SingularSystem):
        solve_matrix(K, f)


def test_no_pruning_on_smooth_cuts():
    prob = cached_problem("circle", 2, 1, 12)
    assert pruning(prob.dofmap, prob.grams(), prob.cls.cut)[2] == 0
