"""Sectioned ``key = value`` run configuration.

Resolution order: built-in defaults, then preset defaults, then the config
file, then ``--override`` pairs. The resolved configuration is echoed in
full into every output.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, Optional

from .functionals import QuadratureRule
from .freeboundary import ClassifyConfig
from .kernels import DomainError, WeightParam
from .reduction import CutoffSpec
from .solver import HalfGrid, SolverConfig


class ConfigError(DomainError):
    """Invalid or inconsistent configuration."""


DEFAULTS: Dict[str, Dict[str, str]] = {
    "run": {"preset": "zero", "a": "0", "n": "1", "out": "out", "name": "",
            "obstacle": "", "obstacle_coeffs": ""},
    "grid": {"nx": "33", "ny": "33", "nt": "32", "R_x": "1", "R_y": "1", "T": "0.25"},
    "solver": {"psor_tol": "1e-10", "omega": "1.5", "psor_max_iters": "20000",
               "outer_bc": "analytic-trace", "contact_tol": "1e-8", "ordering": "lexicographic"},
    "functional": {"ell": "6", "sigma": "0.5", "kappa": "", "ladder_count": "9",
                   "ladder_ratio": "1.189207115002721", "r_max": "auto", "substeps": "4",
                   "C": "fit", "slack": "1e-3", "hermite_nodes": "40", "laguerre_nodes": "40",
                   "time_panels": "2", "time_nodes": "8", "c_trunc": "8", "center": "0"},
    "classify": {"class_tol": "0.1", "slope_threshold": "-0.5", "r_fit": "auto",
                 "trunc_threshold": "1e-5", "rank_tol": "1e-9", "points": "final"},
    "reduce": {"k": "auto", "ell": "auto", "cutoff_inner": "0.75", "cutoff_outer": "1.0",
               "region": "0.5"},
    "selftest": {"tol": "1e-4", "semigroup_tol": "1e-5", "frequency_tol": "1e-3"},
}


def _rational(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def _float(text: str, key: str) -> float:
    try:
        v = float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: not a number: {text!r}") from exc
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: not an integer: {text!r}") from exc


def parse_override(item: str):
    """``section.key=value`` into its three parts."""
    lhs, sep, value = item.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    return section, key, value.strip()


@dataclass
class RunConfig:
    """Resolved configuration; ``raw`` keeps the string form that gets echoed."""

    raw: Dict[str, Dict[str, str]]

    # -- construction -----------------------------------------------------

    @classmethod
    def resolve(cls, path: Optional[str] = None, preset: Optional[str] = None,
                overrides: Iterable[str] = ()) -> "RunConfig":
        from .presets import get_preset

        raw = {s: dict(v) for s, v in DEFAULTS.items()}
        file_raw: Dict[str, Dict[str, str]] = {}
        if path is not None:
            cp = configparser.ConfigParser(interpolation=None)
            cp.optionxform = str
            try:
                with open(path) as fh:
                    cp.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            file_raw = {s: dict(cp[s]) for s in cp.sections()}
        ovr = [parse_override(o) for o in overrides]
        name = preset
        if name is None:
            name = next((v for s, k, v in reversed(ovr) if (s, k) == ("run", "preset")), None)
        if name is None:
            name = file_raw.get("run", {}).get("preset", raw["run"]["preset"])
        layers = [get_preset(name).defaults, file_raw, {}]
        for s, k, v in ovr:
            layers[2].setdefault(s, {})[k] = v
        for layer in layers:
            for section, items in layer.items():
                if section not in raw:
                    raise ConfigError(f"unknown config section [{section}]")
                for k, v in items.items():
                    if k not in raw[section]:
                        raise ConfigError(f"unknown key {section}.{k}")
                    raw[section][k] = str(v)
        raw["run"]["preset"] = name
        if not raw["run"]["name"]:
            raw["run"]["name"] = name
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    def echo(self) -> str:
        """The resolved config as sectioned text, every key present."""
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            lines += [f"{k} = {self.raw[section][k]}" for k in DEFAULTS[section]]
        return "\n".join(lines) + "\n"

    def echo_lines(self, prefix: str = "# ") -> list:
        return [prefix + ln for ln in self.echo().splitlines()]

    # -- typed views ------------------------------------------------------

    @property
    def preset(self) -> str:
        return self.raw["run"]["preset"]

    @property
    def name(self) -> str:
        return self.raw["run"]["name"]

    @property
    def out(self) -> str:
        return self.raw["run"]["out"]

    @property
    def weight(self) -> WeightParam:
        return WeightParam(_rational(self.raw["run"]["a"]))

    @property
    def n(self) -> int:
        return _int(self.raw["run"]["n"], "run.n")

    @property
    def grid(self) -> HalfGrid:
        g = self.raw["grid"]
        return HalfGrid(self.n, _int(g["nx"], "grid.nx"), _int(g["ny"], "grid.ny"), _int(g["nt"], "grid.nt"),
                        _float(g["R_x"], "grid.R_x"), _float(g["R_y"], "grid.R_y"), _float(g["T"], "grid.T"))

    @property
    def solver(self) -> SolverConfig:
        s = self.raw["solver"]
        return SolverConfig(_float(s["psor_tol"], "solver.psor_tol"),
                            _int(s["psor_max_iters"], "solver.psor_max_iters"),
                            _float(s["omega"], "solver.omega"), s["outer_bc"],
                            _float(s["contact_tol"], "solver.contact_tol"), s["ordering"])

    @property
    def rule(self) -> QuadratureRule:
        f = self.raw["functional"]
        return QuadratureRule(_int(f["hermite_nodes"], "functional.hermite_nodes"),
                              _int(f["laguerre_nodes"], "functional.laguerre_nodes"),
                              _int(f["time_panels"], "functional.time_panels"),
                              _int(f["time_nodes"], "functional.time_nodes"),
                              _float(f["c_trunc"], "functional.c_trunc"))

    def functional_float(self, key: str) -> Optional[float]:
        v = self.raw["functional"][key]
        return None if v in ("", "auto", "fit") else _float(v, f"functional.{key}")

    @property
    def kappa(self) -> Optional[float]:
        return self.functional_float("kappa")

    @property
    def center(self):
        """``(x0, t0)`` from ``functional.center`` written as ``x1,..,xn:t`` or ``0``."""
        return parse_point(self.raw["functional"]["center"], self.n)

    @property
    def classify(self) -> ClassifyConfig:
        c, f = self.raw["classify"], self.raw["functional"]
        r_fit = None if c["r_fit"] == "auto" else _float(c["r_fit"], "classify.r_fit")
        return ClassifyConfig(class_tol=_float(c["class_tol"], "classify.class_tol"),
                              slope_threshold=_float(c["slope_threshold"], "classify.slope_threshold"),
                              r_fit=r_fit, ell=_float(f["ell"], "functional.ell"),
                              sigma=_float(f["sigma"], "functional.sigma"),
                              contact_tol=_float(self.raw["solver"]["contact_tol"], "solver.contact_tol"),
                              trunc_threshold=_float(c["trunc_threshold"], "classify.trunc_threshold"),
                              rank_tol=_float(c["rank_tol"], "classify.rank_tol"),
                              ladder_count=_int(f["ladder_count"], "functional.ladder_count"),
                              rule=self.rule)

    @property
    def cutoff(self) -> CutoffSpec:
        r = self.raw["reduce"]
        return CutoffSpec(_float(r["cutoff_inner"], "reduce.cutoff_inner"),
                          _float(r["cutoff_outer"], "reduce.cutoff_outer"))

    # -- invariants -------------------------------------------------------

    def validate(self):
        try:
            w = self.weight
        except DomainError as exc:
            raise ConfigError(f"run.a: {exc}") from exc
        if self.n < 1:
            raise ConfigError("run.n must be positive")
        try:
            self.grid
            self.solver
            self.rule
            self.classify
            self.cutoff
        except ConfigError:
            raise
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        f = self.raw["functional"]
        for key in ("ladder_ratio", "slack"):
            if not _float(f[key], f"functional.{key}") > 0:
                raise ConfigError(f"functional.{key} must be positive")
        if not _float(f["ladder_ratio"], "functional.ladder_ratio") > 1:
            raise ConfigError("functional.ladder_ratio must exceed 1")
        if _int(f["ladder_count"], "functional.ladder_count") < 3:
            raise ConfigError("functional.ladder_count must be at least 3")
        if _int(f["substeps"], "functional.substeps") < 1:
            raise ConfigError("functional.substeps must be positive")
        if f["C"] != "fit":
            _float(f["C"], "functional.C")
        for key in ("tol", "semigroup_tol", "frequency_tol"):
            if not _float(self.raw["selftest"][key], f"selftest.{key}") > 0:
                raise ConfigError(f"selftest.{key} must be positive")
        r_max = self.functional_float("r_max")
        if r_max is not None:
            g = self.grid
            x0, t0 = self.center
            dist = min(min(g.R_x - abs(v) for v in x0), g.R_y)
            bound = min(dist / self.rule.c_trunc, math.sqrt(max(g.T + t0, 0.0)))
            if not 0 < r_max <= bound:
                raise ConfigError(f"functional.r_max={r_max} exceeds the truncation bound {bound:.6g}")
        self.center
        _ = w


def parse_point(text: str, n: int):
    """``"x1,..,xn:t"``; a bare ``0`` is the origin at ``t = 0``."""
    text = text.strip()
    if text in ("", "0"):
        return (tuple([0.0] * n), 0.0)
    xs, _, t = text.partition(":")
    vals = [_float(v, "point") for v in xs.split(",")]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigError(f"point {text!r} needs {n} spatial coordinates")
    return (tuple(vals), _float(t, "point") if t else 0.0)
