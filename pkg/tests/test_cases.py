import numpy as np
import pytest

from cutmaxwell.cases import CASES, builtin_case, circle_case, manufactured, patch_case, star_case
from cutmaxwell.errors import ValidationError
from cutmaxwell.cases import X, Y


def fd(f, p, axis, h=1e-5):
    e = np.zeros(2)
    e[axis] = h
    return (f(p + e) - f(p - e)) / (2 * h)


@pytest.mark.parametrize("name", sorted(CASES))
def test_strong_form_by_finite_differences(name, rng):
    """rot u from FD of u, then j = curl rot u - k^2 u - grad p from FD of rot u."""
    case = builtin_case(name)
    p = rng.uniform(-0.9, 0.9, size=(1000, 2))
    u = case.u
    rot_fd = fd(lambda x: u(x)[..., 1], p, 0) - fd(lambda x: u(x)[..., 0], p, 1)
    assert np.allclose(rot_fd, case.rot_u(p), atol=1e-8)
    div_fd = fd(lambda x: u(x)[..., 0], p, 0) + fd(lambda x: u(x)[..., 1], p, 1)
    assert np.allclose(div_fd, case.div_u(p), atol=1e-8)
    curl = np.stack([fd(case.rot_u, p, 1), -fd(case.rot_u, p, 0)], axis=-1)
    grad_p = np.stack([fd(case.p, p, 0), fd(case.p, p, 1)], axis=-1)
    j = curl - case.k**2 * u(p) - grad_p
    assert np.allclose(j, case.source(p), atol=1e-7)


def test_circle_and_star_are_divergence_free(rng):
    p = rng.uniform(-1, 1, size=(50, 2))
    assert np.allclose(circle_case().div_u(p), 0.0, atol=1e-13)
    assert np.allclose(star_case().div_u(p), 0.0, atol=1e-13)
    assert np.allclose(star_case().p(p), 0.0)


def test_circle_multiplier_vanishes_on_boundary():
    th = np.linspace(0, 2 * np.pi, 17)
    pts = 0.7 * np.stack([np.cos(th), np.sin(th)], axis=1)
    assert np.allclose(circle_case().p(pts), 0.0, atol=1e-14)


def test_patch_source_is_minus_u(rng):
    case = patch_case()
    p = rng.uniform(-1, 1, size=(20, 2))
    assert np.allclose(case.source(p), -case.u(p))
    assert np.allclose(case.rot_u(p), -2.0)


def test_tangential_datum_sign():
    case = patch_case()
    # u = (y, -x) at (0.7, 0) is (0, -0.7); n = (1, 0) so n x u = n_x u_y - n_y u_x = -0.7
    g = case.g(np.array([[0.7, 0.0]]), np.array([[1.0, 0.0]]))
    assert g[0] == pytest.approx(-0.7)


def test_wavenumber_enters_source():
    a = manufactured("t", None, X * Y, Y, X, k=2.0)
    p = np.array([[0.3, -0.4]])
    # curl rot u = curl(-x) = (0, 1); j = (0, 1) - 4 (xy, y) - (1, 0)
    assert np.allclose(a.source(p), [[-1 - 4 * 0.3 * -0.4, 1 - 4 * -0.4]])


def test_unknown_example():
    with pytest.raises(ValidationError):
        builtin_case("torus")
