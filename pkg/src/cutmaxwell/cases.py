"""Manufactured solutions: exact fields, their derivatives and the matching data.

Everything is derived symbolically with sympy from (u, p, mu_r, eps_r, k):

    j = curl(mu_r^-1 rot u) - k^2 eps_r u - eps_r grad p,   g = n x u,

with rot v = dx v_y - dy v_x, curl w = (dy w, -dx w) and n x v = n_x v_y - n_y v_x.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp

from .errors import ValidationError
from .geometry import LevelSet, circle, star

X, Y = sp.symbols("x y", real=True)


def _vectorize(expr) -> Callable[[np.ndarray], np.ndarray]:
    f = sp.lambdify((X, Y), expr, "numpy")

    def call(p):
        p = np.asarray(p, dtype=float)
        out = f(p[..., 0], p[..., 1])
        return np.broadcast_to(np.asarray(out, dtype=float), p.shape[:-1]).copy()

    return call


def _vectorize2(ex, ey) -> Callable[[np.ndarray], np.ndarray]:
    fx, fy = _vectorize(ex), _vectorize(ey)
    return lambda p: np.stack([fx(p), fy(p)], axis=-1)


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Material data and scheme parameters; mu_r and eps_r are callables on points."""

    mu_r: Callable
    eps_r: Callable
    grad_eps: Callable
    k: float = 1.0
    alpha: float = 18.0
    bounds: tuple = (1.0, 1.0)  # recorded (min, max) of mu_r and eps_r

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if self.k < 0:
            raise ValidationError("k must be non-negative")


def vacuum(k: float = 1.0, alpha: float = 18.0) -> Coefficients:
    one = lambda p: np.ones(np.shape(p)[:-1])
    zero = lambda p: np.zeros(np.shape(p))
    return Coefficients(one, one, zero, float(k), float(alpha), (1.0, 1.0))


def default_alpha(m: int) -> float:
    return 3.0 * (m + 1) ** 2 + 15.0


@dataclass(frozen=True, eq=False)
class ManufacturedCase:
    name: str
    levelset: LevelSet
    u: Callable
    rot_u: Callable
    div_u: Callable
    p: Callable
    grad_p: Callable
    source: Callable
    mu_r: Callable
    eps_r: Callable
    grad_eps: Callable
    k: float
    exprs: dict = field(default_factory=dict)

    def g(self, pts, normals) -> np.ndarray:
        """Tangential datum n x u at boundary points."""
        u = self.u(pts)
        return normals[..., 0] * u[..., 1] - normals[..., 1] * u[..., 0]

    def coefficients(self, alpha: float) -> Coefficients:
        return Coefficients(self.mu_r, self.eps_r, self.grad_eps, self.k, alpha)


def manufactured(name, levelset, ux, uy, p, mu=sp.Integer(1), eps=sp.Integer(1), k=1.0) -> ManufacturedCase:
    rot = sp.diff(uy, X) - sp.diff(ux, Y)
    w = rot / mu
    ks = sp.nsimplify(k)
    jx = sp.diff(w, Y) - ks**2 * eps * ux - eps * sp.diff(p, X)
    jy = -sp.diff(w, X) - ks**2 * eps * uy - eps * sp.diff(p, Y)
    jx, jy = sp.simplify(jx), sp.simplify(jy)
    return ManufacturedCase(
        name=name,
        levelset=levelset,
        u=_vectorize2(ux, uy),
        rot_u=_vectorize(rot),
        div_u=_vectorize(sp.diff(ux, X) + sp.diff(uy, Y)),
        p=_vectorize(p),
        grad_p=_vectorize2(sp.diff(p, X), sp.diff(p, Y)),
        source=_vectorize2(jx, jy),
        mu_r=_vectorize(mu),
        eps_r=_vectorize(eps),
        grad_eps=_vectorize2(sp.diff(eps, X), sp.diff(eps, Y)),
        k=float(k),
        exprs={"u": (ux, uy), "p": p, "rot_u": rot, "j": (jx, jy)},
    )


def circle_case(k: float = 1.0, radius: float = 0.7) -> ManufacturedCase:
    """Disk of radius 0.7; u = (cos pi x sin pi y, -sin pi x cos pi y), p = x^2 + y^2 - r^2."""
    pi = sp.pi
    r2 = sp.nsimplify(radius) ** 2
    return manufactured(
        "circle",
        circle(radius),
        sp.cos(pi * X) * sp.sin(pi * Y),
        -sp.sin(pi * X) * sp.cos(pi * Y),
        X**2 + Y**2 - r2,
        k=k,
    )


def star_case(k: float = 1.0) -> ManufacturedCase:
    """Five-lobed star; divergence-free u and p = 0."""
    e = sp.exp(X)
    return manufactured(
        "star",
        star(),
        -e * (Y * sp.cos(Y) + sp.sin(Y)),
        e * Y * sp.sin(Y),
        sp.Integer(0),
        k=k,
    )


def patch_case(k: float = 1.0) -> ManufacturedCase:
    """u = (y, -x), p = 0 on the disk; representable exactly for r >= 1."""
    return manufactured("patch", circle(0.7), Y, -X, sp.Integer(0), k=k)


CASES = {"circle": circle_case, "star": star_case, "patch": patch_case}


def builtin_case(name: str, k: float = 1.0) -> ManufacturedCase:
    try:
        return CASES[name](k=k)
    except KeyError:
        raise ValidationError(f"unknown example {name!r}; expected one of {sorted(CASES)}") from None
