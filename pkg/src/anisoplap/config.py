"""Flat ``key=value`` run configuration with dotted keys.

Example::

    # torsion suite
    domain.lower = -1, -1
    domain.upper = 1, 1
    mesh.resolutions = 33, 65, 129
    norm.family = euclidean
    solve.p = 1.5, 2, 3
    source.preset = torsion
    regions.R = 0.4, 0.2, 0.1
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .expr import ExprError, parse
from .norms import make_norm
from .solver import default_eps_schedule, manufactured_torsion
from .verify import ESTIMATES

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "SOURCE_PRESETS", "BOUNDARY_PRESETS"]

SOURCE_PRESETS = ("torsion", "zero", "sine", "expr")
BOUNDARY_PRESETS = ("exact", "zero", "affine", "expr")


class ConfigError(ValueError):
    pass


def _floats(text):
    try:
        return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from exc


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _words(text):
    return tuple(t.strip() for t in text.replace(";", ",").split(",") if t.strip())


@dataclass
class RunConfig:
    lower: tuple = (-1.0, -1.0)
    upper: tuple = (1.0, 1.0)
    resolutions: tuple = (33, 65, 129)
    norm_family: str = "euclidean"
    norm_weights: tuple | None = None
    norm_a: float = 1.0
    norm_b: float = 1.0
    norm_p_comb: float = 2.0
    p_values: tuple = (2.0,)
    source_preset: str = "torsion"
    source_expr: str | None = None
    source_extra: tuple = ()
    boundary_preset: str | None = None
    boundary_expr: str | None = None
    boundary_slope: tuple | None = None
    eps_schedule: tuple | None = None
    eps_floor: float = 1e-4
    tol: float = 1e-10
    max_iter: int = 200
    center: tuple | None = None
    radii: tuple = (0.4, 0.2, 0.1)
    checks: tuple = tuple(ESTIMATES)
    morrey_lambda: float | None = None
    output_dir: str = "out"
    seed: int = 0
    source_path: str | None = field(default=None, repr=False)

    # -- derived -------------------------------------------------------------
    @property
    def dim(self):
        return len(self.lower)

    @property
    def domain_center(self):
        return tuple((a + b) / 2 for a, b in zip(self.lower, self.upper))

    @property
    def region_center(self):
        return self.center if self.center is not None else self.domain_center

    def norm(self):
        return make_norm(self.norm_family, self.dim, self.norm_weights, self.norm_a, self.norm_b,
                         self.norm_p_comb)

    def schedule(self, h):
        if self.eps_schedule is not None:
            return self.eps_schedule
        return default_eps_schedule(0.0 if self.eps_floor else h, self.eps_floor or 1e-4)

    def sources(self):
        """``[(name, callable or constant)]``: the main source then the extras."""
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        out = []
        if self.source_preset == "torsion":
            out.append(("torsion", 1.0))
        elif self.source_preset == "zero":
            out.append(("zero", 0.0))
        elif self.source_preset == "sine":
            def sine(x, lo=lo, hi=hi):
                return np.prod(np.sin(np.pi * (x - lo) / (hi - lo)), axis=-1)
            out.append(("sine", sine))
        else:
            out.append((f"expr:{self.source_expr}", parse(self.source_expr)))
        for text in self.source_extra:
            out.append((f"expr:{text}", parse(text)))
        return out

    def boundary_for(self, source_name, p, norm):
        preset = self.boundary_preset
        if preset is None:
            if source_name == "torsion" and norm.is_euclidean:
                preset = "exact"
            elif source_name == "zero":
                preset = "affine"
            else:
                preset = "zero"
        if preset == "exact":
            if source_name != "torsion":
                raise ConfigError("boundary.preset=exact needs source.preset=torsion")
            if not norm.is_euclidean:
                raise ConfigError("the exact torsion solution needs norm.family=euclidean")
            return manufactured_torsion(p, self.dim, radius=1.0, center=self.region_center).u
        if preset == "zero":
            return 0.0
        if preset == "affine":
            slope = np.asarray(self.boundary_slope or (1.0,) + (0.5,) * (self.dim - 1))
            return lambda x, c=slope: np.asarray(x) @ c
        return parse(self.boundary_expr)

    def describe(self):
        lines = []
        for f in fields(self):
            if f.name == "source_path":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines)


_KEYS = {
    "domain.lower": ("lower", _floats),
    "domain.upper": ("upper", _floats),
    "mesh.resolutions": ("resolutions", _ints),
    "norm.family": ("norm_family", str.strip),
    "norm.weights": ("norm_weights", _floats),
    "norm.a": ("norm_a", float),
    "norm.b": ("norm_b", float),
    "norm.p_comb": ("norm_p_comb", float),
    "solve.p": ("p_values", _floats),
    "solve.tol": ("tol", float),
    "solve.max_iter": ("max_iter", int),
    "source.preset": ("source_preset", str.strip),
    "source.expr": ("source_expr", str.strip),
    "source.extra": ("source_extra", lambda s: tuple(t.strip() for t in s.split(";") if t.strip())),
    "boundary.preset": ("boundary_preset", str.strip),
    "boundary.expr": ("boundary_expr", str.strip),
    "boundary.slope": ("boundary_slope", _floats),
    "eps.schedule": ("eps_schedule", _floats),
    "eps.floor": ("eps_floor", float),
    "regions.center": ("center", _floats),
    "regions.R": ("radii", _floats),
    "verify.checks": ("checks", _words),
    "verify.morrey_lambda": ("morrey_lambda", float),
    "output.dir": ("output_dir", str.strip),
    "seed": ("seed", int),
}


def parse_config(text, source_path=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name, conv = _KEYS[key]
        try:
            values[name] = conv(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg = RunConfig(**values, source_path=source_path)
    validate(cfg)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from exc
    return parse_config(text, source_path=str(path))


def validate(cfg):
    if len(cfg.lower) != len(cfg.upper) or cfg.dim not in (2, 3):
        raise ConfigError("domain must be a 2-D or 3-D box")
    if any(b <= a for a, b in zip(cfg.lower, cfg.upper)):
        raise ConfigError("domain.upper must exceed domain.lower")
    r = cfg.resolutions
    if not r or any(x < 3 for x in r) or any(b <= a for a, b in zip(r, r[1:])):
        raise ConfigError("mesh.resolutions must be strictly increasing integers >= 3")
    if not cfg.p_values or any(not p > 1 for p in cfg.p_values):
        raise ConfigError("solve.p values must exceed 1")
    if cfg.source_preset not in SOURCE_PRESETS:
        raise ConfigError(f"unknown source preset {cfg.source_preset!r}; choose from {', '.join(SOURCE_PRESETS)}")
    if cfg.source_preset == "expr" and not cfg.source_expr:
        raise ConfigError("source.preset=expr needs source.expr")
    if cfg.boundary_preset is not None and cfg.boundary_preset not in BOUNDARY_PRESETS:
        raise ConfigError(f"unknown boundary preset {cfg.boundary_preset!r}")
    if cfg.boundary_preset == "expr" and not cfg.boundary_expr:
        raise ConfigError("boundary.preset=expr needs boundary.expr")
    unknown = [c for c in cfg.checks if c not in ESTIMATES and c != "all"]
    if unknown:
        raise ConfigError(f"unknown estimate ids: {', '.join(unknown)}")
    if "all" in cfg.checks:
        cfg.checks = tuple(ESTIMATES)
    if cfg.eps_schedule is not None:
        s = cfg.eps_schedule
        if any(not 0 <= e < 1 for e in s) or any(b >= a for a, b in zip(s, s[1:])):
            raise ConfigError("eps.schedule must be strictly decreasing in [0, 1)")
    if not cfg.radii or any(r <= 0 for r in cfg.radii):
        raise ConfigError("regions.R must be positive")
    if cfg.center is not None and len(cfg.center) != cfg.dim:
        raise ConfigError("regions.center has the wrong dimension")
    if cfg.morrey_lambda is not None and not cfg.dim - 2 < cfg.morrey_lambda < cfg.dim:
        raise ConfigError(f"verify.morrey_lambda must lie in ({cfg.dim - 2}, {cfg.dim})")
    try:
        cfg.norm()
        cfg.sources()
        if cfg.boundary_preset == "expr":
            parse(cfg.boundary_expr)
    except ExprError as exc:
        raise ConfigError(f"bad expression: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not math.isfinite(cfg.tol) or cfg.tol <= 0:
        raise ConfigError("solve.tol must be positive")
    return cfg
