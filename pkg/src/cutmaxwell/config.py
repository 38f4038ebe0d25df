"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .analysis import Settings, auto_alpha
from .cases import CASES
from .errors import ParseError, ValidationError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list:
    parts = [p for p in s.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return [int(p) for p in parts]


def _auto_float(s: str):
    return None if s.strip().lower() == "auto" else float(s)


def _auto_int(s: str):
    return None if s.strip().lower() == "auto" else int(s)


@dataclass
class RunConfig:
    example: str = "circle"
    r: int = 1
    m: int = 0
    n_list: list = field(default_factory=lambda: [6, 12, 24, 48])
    n: Optional[int] = None  # single-run mesh; defaults to n_list[0]
    k: float = 1.0
    alpha: Optional[float] = None  # None: auto
    quad_degree: Optional[int] = None
    quad_depth: int = 2
    err_degree: Optional[int] = None
    err_depth: int = 3
    c_on_cut_part: bool = False
    strict_faces: bool = False
    prune_tol: float = 1e-14
    sweep_count: int = 16
    sweep_magnitude: Optional[float] = None  # None: h/2
    sweep_n: int = 8
    seed: int = 0
    infsup_n_list: list = field(default_factory=lambda: [4, 6, 8, 12])
    out: str = "out"
    threads: int = 1
    dump_matrices: bool = False
    dump_geometry: bool = False

    @property
    def alpha_value(self) -> float:
        return auto_alpha(self.r) if self.alpha is None else self.alpha

    @property
    def single_n(self) -> int:
        return self.n if self.n is not None else self.n_list[0]

    def settings(self) -> Settings:
        return Settings(alpha=self.alpha, quad_degree=self.quad_degree, quad_depth=self.quad_depth,
                        err_degree=self.err_degree, err_depth=self.err_depth,
                        c_on_cut_part=self.c_on_cut_part, strict=self.strict_faces,
                        prune_tol=self.prune_tol)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha_value"] = self.alpha_value
        return d

    def validate(self) -> "RunConfig":
        if self.example not in CASES:
            raise ValidationError(f"unknown example {self.example!r}; expected one of {sorted(CASES)}")
        if self.r < 1 or self.m < 0:
            raise ValidationError(f"need r >= 1 and m >= 0, got r={self.r}, m={self.m}")
        if self.r < self.m + 1:
            raise ValidationError(f"degree pairing violated: r={self.r} < m+1={self.m + 1}")
        for name in ("n_list", "infsup_n_list"):
            ns = getattr(self, name)
            if not ns or any(v < 2 for v in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
                raise ValidationError(f"{name} must be a nonempty strictly ascending list of integers >= 2")
        if self.n is not None and self.n < 2:
            raise ValidationError("n must be >= 2")
        if self.k < 0:
            raise ValidationError("k must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if self.quad_depth < 0 or self.err_depth < 0:
            raise ValidationError("quadrature depths must be >= 0")
        for name in ("quad_degree", "err_degree"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.sweep_count < 1 or self.sweep_n < 2:
            raise ValidationError("sweep_count must be >= 1 and sweep_n >= 2")
        if self.sweep_magnitude is not None and self.sweep_magnitude < 0:
            raise ValidationError("sweep_magnitude must be non-negative")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if not self.prune_tol >= 0:
            raise ValidationError("prune_tol must be >= 0")
        return self


_PARSERS = {
    "example": str,
    "r": int,
    "m": int,
    "n_list": _int_list,
    "n": _auto_int,
    "k": float,
    "alpha": _auto_float,
    "quad_degree": _auto_int,
    "quad_depth": int,
    "err_degree": _auto_int,
    "err_depth": int,
    "c_on_cut_part": _bool,
    "strict_faces": _bool,
    "prune_tol": float,
    "sweep_count": int,
    "sweep_magnitude": _auto_float,
    "sweep_n": int,
    "seed": int,
    "infsup_n_list": _int_list,
    "out": str,
    "threads": int,
    "dump_matrices": _bool,
    "dump_geometry": _bool,
}


def parse_text(text: str) -> dict:
    """``key = value`` pairs; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or not val:
            raise ParseError(f"line {lineno}: empty key or value")
        if key not in _PARSERS:
            raise ParseError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` (already typed; None = unset)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from None
        values.update(parse_text(text))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _PARSERS:
            raise ValidationError(f"unknown setting {key!r}")
        values[key] = val
    return RunConfig(**values).validate()
