"""Implicit geometry: level-set functions, normals and root finding on segments.

All level sets follow one sign convention: phi < 0 strictly inside the domain,
phi = 0 on the boundary.  Every callable works on arrays of points with a
trailing axis of length 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateGradient, NoSignChange, UnknownGeometry

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BBox:
    lo: tuple[float, float]
    hi: tuple[float, float]

    def __post_init__(self):
        if not (self.lo[0] < self.hi[0] and self.lo[1] < self.hi[1]):
            raise ValueError(f"degenerate box {self.lo} -> {self.hi}")

    @property
    def area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])


@dataclass(frozen=True)
class LevelSet:
    """A signed implicit function with its analytic gradient."""

    eval: ArrayFn
    grad: ArrayFn
    name: str = "custom"
    params: tuple[float, ...] = field(default_factory=tuple)

    def __call__(self, p) -> np.ndarray:
        return self.eval(np.asarray(p, dtype=float))

    def gradient(self, p) -> np.ndarray:
        return self.grad(np.asarray(p, dtype=float))

    def shifted(self, dx: float, dy: float) -> "LevelSet":
        """Translate the zero set by (dx, dy) without changing its shape."""
        off = np.array([dx, dy], dtype=float)
        f, g = self.eval, self.grad
        return LevelSet(
            eval=lambda p: f(np.asarray(p, dtype=float) - off),
            grad=lambda p: g(np.asarray(p, dtype=float) - off),
            name=self.name,
            params=self.params + (float(dx), float(dy)),
        )


def eval_levelset(ls: LevelSet, p) -> np.ndarray:
    return ls(p)


def circle(radius: float = 0.7, center: Sequence[float] = (0.0, 0.0)) -> LevelSet:
    c = np.asarray(center, dtype=float)
    r2 = radius * radius

    def f(p):
        d = p - c
        return d[..., 0] ** 2 + d[..., 1] ** 2 - r2

    def g(p):
        return 2.0 * (p - c)

    return LevelSet(f, g, "circle", (float(radius),))


def star(center: Sequence[float] = (0.0, 0.0)) -> LevelSet:
    """phi = r - 1/2 - sin(5 theta)/7 in polar coordinates about ``center``."""
    c = np.asarray(center, dtype=float)

    def f(p):
        d = p - c
        r = np.hypot(d[..., 0], d[..., 1])
        th = np.arctan2(d[..., 1], d[..., 0])
        return r - 0.5 - np.sin(5.0 * th) / 7.0

    def g(p):
        d = p - c
        x, y = d[..., 0], d[..., 1]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        th = np.arctan2(y, x)
        dc = (5.0 / 7.0) * np.cos(5.0 * th)
        gx = x / r + dc * y / r2
        gy = y / r - dc * x / r2
        return np.stack([gx, gy], axis=-1)

    return LevelSet(f, g, "star", ())


def half_plane(normal: Sequence[float], offset: float) -> LevelSet:
    """phi = n . x - offset; the inside is n . x < offset."""
    n = np.asarray(normal, dtype=float)

    def f(p):
        return p @ n - offset

    def g(p):
        return np.broadcast_to(n, np.shape(p)).copy()

    return LevelSet(f, g, "half_plane", (float(n[0]), float(n[1]), float(offset)))


def constant(value: float) -> LevelSet:
    def f(p):
        return np.full(np.shape(p)[:-1], float(value))

    def g(p):
        return np.zeros(np.shape(p))

    return LevelSet(f, g, "constant", (float(value),))


_BUILTIN = {
    "circle": lambda params: circle(*(params[:1] or [0.7]), center=params[1:3] or (0.0, 0.0)),
    "star": lambda params: star(center=params[:2] or (0.0, 0.0)),
}


def builtin_levelset(name: str, params: Sequence[float] = ()) -> LevelSet:
    """Catalog geometry by name: ``circle`` (params: radius[, cx, cy]) or ``star`` (params: [cx, cy])."""
    try:
        make = _BUILTIN[name]
    except KeyError:
        raise UnknownGeometry(f"unknown geometry {name!r}; expected one of {sorted(_BUILTIN)}") from None
    return make(list(params))


def boundary_normal(ls: LevelSet, p) -> np.ndarray:
    g = ls.gradient(p)
    nrm = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(nrm < 1e-12):
        raise DegenerateGradient(f"|grad phi| < 1e-12 at {p}")
    return g / nrm


def segment_roots(ls: LevelSet, a, b, rtol: float = 1e-12, maxiter: int = 100) -> np.ndarray:
    """Vectorized safeguarded Newton on the segment parameter.

    ``a`` and ``b`` are (..., 2) arrays whose endpoint values have opposite
    signs.  Returns the parameter t in [0, 1] of the root for every segment.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    fa = ls(a)
    fb = ls(b)
    if np.any(fa * fb > 0):
        raise NoSignChange("phi has the same sign at both segment endpoints")
    scale = np.maximum(np.abs(fa), np.abs(fb))
    d = b - a
    lo = np.zeros_like(fa)
    hi = np.ones_like(fa)
    flo = fa.copy()
    # linear interpolation start
    denom = fa - fb
    t = np.where(denom != 0, fa / np.where(denom != 0, denom, 1.0), 0.5)
    t = np.clip(t, 0.0, 1.0)
    for _ in range(maxiter):
        q = a + t[..., None] * d
        ft = ls(q)
        done = np.abs(ft) <= rtol * scale
        if np.all(done):
            break
        same = ft * flo > 0
        lo = np.where(same, t, lo)
        flo = np.where(same, ft, flo)
        hi = np.where(same, hi, t)
        dft = np.einsum("...i,...i->...", ls.gradient(q), d)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - ft / dft
        bad = ~np.isfinite(tn) | (tn <= lo) | (tn >= hi)
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        t = np.where(done, t, tn)
        if np.all(done | (hi - lo < 1e-17)):
            break
    return t


def segment_root(ls: LevelSet, a, b, tol: float = 1e-12) -> np.ndarray:
    """Point q on [a, b] with |phi(q)| <= tol * max(|phi(a)|, |phi(b)|)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = segment_roots(ls, a, b, rtol=tol)
    return a + t[..., None] * (b - a)
