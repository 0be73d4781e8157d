"""Registered runs with exact or reference solutions.

Presets live in code so that the exact-solution oracles are versioned with
the solver they check.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .kernels import DomainError
from .polys import ParabolicPolynomial, caloric_extension
from .reduction import ObstacleSpec, obstacle_preset
from .solver import SignoriniProblem


@dataclass
class PresetRun:
    problem: SignoriniProblem
    obstacle: ObstacleSpec
    exact: Optional[Callable] = None
    kappa: Optional[float] = None
    p_kappa: Optional[ParabolicPolynomial] = None
    expected: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    defaults: Dict[str, Dict[str, str]]
    build: Callable


_REGISTRY: Dict[str, Preset] = {}


def register(name: str, description: str, defaults: Dict[str, Dict[str, str]]):
    def deco(fn):
        _REGISTRY[name] = Preset(name, description, defaults, fn)
        return fn
    return deco


def get_preset(name: str) -> Preset:
    from .config import ConfigError

    if name not in _REGISTRY:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(_REGISTRY))}")
    return _REGISTRY[name]


def preset_names() -> list:
    return sorted(_REGISTRY)


def _obstacle(cfg, default: str) -> ObstacleSpec:
    name = cfg.get("run", "obstacle") or default
    return obstacle_preset(name, cfg.n, cfg.get("run", "obstacle_coeffs") or None)


def _poly_field(p: ParabolicPolynomial):
    pf = p.to_float()
    return lambda X, Y, t=0.0: pf(X, Y, t)


def _at_start(f, g):
    """Initial data ``f(., ., -T)``."""
    return lambda X, Y: f(X, Y, -g.T)


def build(cfg) -> PresetRun:
    return get_preset(cfg.preset).build(cfg)


_EXACT_GRID = {"grid": {"nx": "65", "ny": "65", "nt": "256", "T": "0.25"},
               "solver": {"outer_bc": "analytic-trace"}}


@register("zero", "zero data and zero obstacle; the solution vanishes", {})
def _zero(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    psi = _obstacle(cfg, "zero")
    z = lambda X, Y, t=0.0: np.zeros(np.shape(Y))
    return PresetRun(SignoriniProblem(g, w, psi, None, z, z, "zero"), psi, z)


@register("p2-singular", "exact solution x1^2 - y^2/(1+a), singular of order 2 at the origin",
          {**_EXACT_GRID, "functional": {"kappa": "2"}})
def _p2(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    p = caloric_extension(ParabolicPolynomial.monomial(cfg.n, (2,) + (0,) * (cfg.n - 1)), w)
    f = _poly_field(p)
    psi = _obstacle(cfg, "zero")
    return PresetRun(SignoriniProblem(g, w, psi, None, _at_start(f, g), f, "p2-singular"), psi, f, 2.0, p,
                     {"label": "singular", "kappa": 2.0, "d_kappa": cfg.n - 1})


@register("time-like", "exact solution -t - y^2/(2(1+a)), time-like singular point",
          {**_EXACT_GRID, "functional": {"kappa": "2"}})
def _timelike(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    p = caloric_extension(-ParabolicPolynomial.t(cfg.n), w)
    f = _poly_field(p)
    psi = _obstacle(cfg, "zero")
    return PresetRun(SignoriniProblem(g, w, psi, None, _at_start(f, g), f, "time-like"), psi, f, 2.0, p,
                     {"label": "singular", "kappa": 2.0, "d_kappa": cfg.n})


def _regular(X, Y, t=0.0):
    return np.real((X[..., 0] + 1j * np.abs(Y)) ** 1.5)


@register("regular-a0", "Re(x1 + i|y|)^{3/2} at a = 0; contact set {x1 <= 0}",
          {"grid": {"nx": "401", "ny": "201", "nt": "64", "T": "0.0625"},
           "solver": {"outer_bc": "analytic-trace"}, "functional": {"kappa": "1.5"}})
def _regular_a0(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    if w.a != 0:
        raise DomainError("regular-a0 is the a = 0 profile; set run.a = 0")
    psi = _obstacle(cfg, "zero")
    return PresetRun(SignoriniProblem(g, w, psi, None, _regular, _regular, "regular-a0"), psi, _regular,
                     1.5, None, {"label": "regular", "kappa": 1.5})


@register("manufactured", "exact solution (1+t)(x1^2 - y^2/(1+a)) with source x1^2 - y^2/(1+a)",
          {"grid": {"nx": "17", "ny": "17", "nt": "16", "T": "0.5"}})
def _manufactured(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    p = caloric_extension(ParabolicPolynomial.monomial(cfg.n, (2,) + (0,) * (cfg.n - 1)), w)
    pf = p.to_float()
    exact = lambda X, Y, t=0.0: (1 + t) * pf(X, Y, 0.0)
    src = lambda X, Y, t: pf(X, Y, 0.0)
    psi = _obstacle(cfg, "zero")
    return PresetRun(SignoriniProblem(g, w, psi, src, lambda X, Y: exact(X, Y, -g.T), exact, "manufactured"),
                     psi, exact)


@register("manufactured-smooth", "unconstrained e^t cos x1 cos y with matching source",
          {"grid": {"nx": "17", "ny": "17", "nt": "16", "T": "0.5"}})
def _manufactured_smooth(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    a = w.af
    exact = lambda X, Y, t=0.0: np.exp(t) * np.prod(np.cos(X), axis=-1) * np.cos(Y)

    def src(X, Y, t):
        Y = np.asarray(Y, float)
        with np.errstate(invalid="ignore", divide="ignore"):
            sinc = np.where(Y > 0, np.sin(Y) / np.where(Y > 0, Y, 1.0), 1.0)
        # (d_t - Delta_x - d_yy - (a/y) d_y) applied to the exact solution
        return np.exp(t) * np.prod(np.cos(X), axis=-1) * ((2 + X.shape[-1]) * np.cos(Y) + a * sinc)

    return PresetRun(SignoriniProblem(g, w, None, src, lambda X, Y: exact(X, Y, -g.T), exact,
                                      "manufactured-smooth"), obstacle_preset("zero", cfg.n), exact)


@register("sine-obstacle", "obstacle sin x1 with data sin x1 + x1^2 - y^2/(1+a)",
          {"grid": {"nx": "65", "ny": "65", "nt": "128", "T": "0.25"},
           "solver": {"outer_bc": "analytic-trace"}, "run": {"obstacle": "sine"}})
def _sine(cfg) -> PresetRun:
    g, w = cfg.grid, cfg.weight
    a = w.af
    psi = _obstacle(cfg, "sine")
    data = lambda X, Y, t=0.0: np.sin(X[..., 0]) + X[..., 0] ** 2 - Y ** 2 / (1 + a)
    return PresetRun(SignoriniProblem(g, w, psi, None, data, data, "sine-obstacle"), psi, None)
