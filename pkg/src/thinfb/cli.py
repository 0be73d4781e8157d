"""Command line entry point: ``thinfb {selftest,solve,functionals,classify,reduce}``.

Exit codes: 0 pass, 1 check failure, 2 usage or config error,
3 numerical nonconvergence.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import math
import os
import sys
from typing import List, Optional

import numpy as np

from . import freeboundary as fb
from . import functionals as fn
from .config import ConfigError, RunConfig, parse_point
from .kernels import DomainError, kernel_selftest
from .polys import ParabolicPolynomial, apply_La, caloric_extension
from .presets import PresetRun, build, preset_names
from .reduction import globalize, growth_bounds_check, taylor_order
from .solver import (NonConvergenceError, ScalarField, _atomic_write, read_snapshot, residual_check, solve,
                     write_snapshot)

log = logging.getLogger("thinfb")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NONCONV = 0, 1, 2, 3


class CheckFailure(Exception):
    """A completed run whose checks did not pass."""


def _path(cfg: RunConfig, suffix: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, f"{cfg.name}{suffix}")


def _write_text(path: str, text: str) -> str:
    _atomic_write(path, text.encode())
    return path


def _header(cfg: RunConfig, kind: str) -> List[str]:
    return [f"thinfb {kind}"] + cfg.echo().splitlines()


# ---------------------------------------------------------------------------
# selftest


def _monomial_battery(n: int, max_degree: int = 6, count: int = 20) -> List[ParabolicPolynomial]:
    out = []
    for deg in range(max_degree + 1):
        for j in range(deg // 2 + 1):
            rest = deg - 2 * j
            for alpha in itertools.product(range(rest + 1), repeat=n):
                if sum(alpha) == rest:
                    out.append(ParabolicPolynomial.monomial(n, alpha, 0, j))
    # spread the picks over all degrees
    idx = np.unique(np.linspace(0, len(out) - 1, min(count, len(out))).round().astype(int))
    return [out[i] for i in idx]


def run_selftest(cfg: RunConfig) -> tuple:
    """Return ``(passed, report_text)``; every check lists its measured defect."""
    w, n = cfg.weight, cfg.n
    st = cfg.raw["selftest"]
    tol, sg_tol, f_tol = float(st["tol"]), float(st["semigroup_tol"]), float(st["frequency_tol"])
    lines = []
    ok = True
    rep = kernel_selftest(w, n, tol, tol_semigroup=sg_tol)
    for c in rep.checks:
        lines.append(c.line())
        ok &= c.passed
    worst = 0
    for q in _monomial_battery(n):
        res = apply_La(caloric_extension(q, w), w)
        worst = max(worst, 0 if res.is_zero() else 1)
    good = worst == 0
    ok &= good
    lines.append(f"caloric_extension: {'PASS' if good else 'FAIL'} nonzero_residuals={worst} exact=rational")
    rule = cfg.rule
    for kappa in (2, 4):
        q = ParabolicPolynomial.monomial(n, (kappa,) + (0,) * (n - 1))
        S = fn.AnalyticField.from_polynomial(caloric_extension(q, w), w)
        try:
            v = fn.functional_suite(S, 0.5, rule, check=False)
            defect = abs(v.N - kappa) if v.N is not None else math.inf
        except (DomainError, FloatingPointError, np.linalg.LinAlgError):
            defect = math.inf
        if not math.isfinite(defect):
            defect = math.inf
        good = defect < f_tol * kappa
        ok &= good
        lines.append(f"quadrature_frequency_p{kappa}: {'PASS' if good else 'FAIL'} defect={defect:.3e} "
                     f"tol={f_tol * kappa:.1e} hermite={rule.hermite_nodes} laguerre={rule.laguerre_nodes}")
    return ok, "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# solve and snapshot access


def _meta(cfg: RunConfig) -> dict:
    return {f"config.{s}.{k}": v for s, items in cfg.raw.items() for k, v in items.items()}


def run_solve(cfg: RunConfig) -> tuple:
    """Solve the configured preset; returns ``(snapshot_path, field, preset_run)``."""
    pr = build(cfg)
    path = _path(cfg, ".snap")
    try:
        U = solve(pr.problem, cfg.solver)
    except NonConvergenceError as exc:
        _write_text(_path(cfg, ".nonconvergence.txt"),
                    "\n".join(_header(cfg, "nonconvergence") +
                              [f"step = {exc.step}", f"residual = {exc.residual!r}", f"message = {exc}"]) + "\n")
        raise
    rc = residual_check(U, pr.problem.source, pr.problem.obstacle)
    meta = {**_meta(cfg), "residual.interior_pde": repr(rc.interior_pde_residual),
            "residual.complementarity": repr(rc.complementarity_residual),
            "residual.flux_sign": repr(rc.flux_sign_violation)}
    if pr.exact is not None:
        X, Y = U.grid.bulk_points()
        err = max(float(np.max(np.abs(U.values[m] - pr.exact(X, Y, tm)))) for m, tm in enumerate(U.grid.t))
        meta["exact.max_error"] = repr(err)
    thin = U.thin[-1]
    gap = thin - np.broadcast_to(pr.obstacle(U.grid.thin_points(), 0.0), thin.shape)
    meta["contact_fraction"] = repr(float(np.mean(np.abs(gap) <= cfg.solver.contact_tol * max(1.0, np.max(np.abs(thin))))))
    write_snapshot(path, U, meta)
    return path, U, pr


def _load(cfg: RunConfig, snapshot: Optional[str]):
    """Snapshot from disk (with the preset's source and obstacle attached) or a fresh solve."""
    if snapshot is None:
        _, U, pr = run_solve(cfg)
        return U, pr
    U = read_snapshot(snapshot)
    pr = build(cfg)
    g = pr.problem.grid
    if U.grid != g or U.w != cfg.weight:
        raise ConfigError(f"snapshot {snapshot} does not match the configured grid/weight")
    return ScalarField(U.grid, U.w, U.values, U.provenance, pr.problem.source, pr.obstacle, U.meta), pr


# ---------------------------------------------------------------------------
# functionals


def _ladder(cfg: RunConfig, S, center) -> np.ndarray:
    f = cfg.raw["functional"]
    count, ratio = int(f["ladder_count"]), float(f["ladder_ratio"])
    r_max = cfg.functional_float("r_max")
    if r_max is None:
        return fn.default_ladder(S, cfg.rule, count, ratio, int(f["substeps"]), center)
    return fn.ladder(r_max, count, ratio)


def run_functionals(cfg: RunConfig, snapshot: Optional[str] = None) -> tuple:
    U, pr = _load(cfg, snapshot)
    center = cfg.center
    W = U
    if pr.obstacle is not None and pr.obstacle.sympy_expr != 0:
        from .reduction import subtract_obstacle
        W = subtract_obstacle(U, pr.obstacle)[0]
    S = fn.GridField(W)
    f = cfg.raw["functional"]
    radii = _ladder(cfg, S, center)
    kappa = cfg.kappa
    p_kappa = pr.p_kappa if (kappa is not None and pr.p_kappa is not None) else None
    C = "fit" if f["C"] == "fit" else float(f["C"])
    prof = fn.frequency_profile(S, radii, ell=float(f["ell"]), sigma=float(f["sigma"]), C=C, kappa=kappa,
                                p_kappa=p_kappa, rule=cfg.rule, center=center, slack=float(f["slack"]),
                                substeps=int(f["substeps"]))
    comments = _header(cfg, "functionals") + [
        f"C = {'' if prof.C is None else prof.C}", f"phi_monotone = {prof.phi_monotone(float(f['slack']))}"]
    path = _write_text(_path(cfg, ".functionals.csv"), prof.to_csv(comments))
    return path, prof


# ---------------------------------------------------------------------------
# classify


def _points(cfg: RunConfig, U: ScalarField, gm: np.ndarray):
    spec = cfg.raw["classify"]["points"].strip()
    if spec == "all":
        return fb.gamma_points(gm, U.grid)
    if spec == "final":
        return [p for p in fb.gamma_points(gm, U.grid) if abs(p[1]) <= 1e-12]
    return [parse_point(item, cfg.n) for item in spec.split(";") if item.strip()]


def run_classify(cfg: RunConfig, snapshot: Optional[str] = None) -> tuple:
    U, pr = _load(cfg, snapshot)
    ccfg = cfg.classify
    gm = fb.extended_free_boundary(U, pr.obstacle, ccfg.contact_tol)
    records = []
    for p in _points(cfg, U, gm):
        try:
            records.append(fb.classify_point(U, p, ccfg, pr.obstacle, gamma_mask=gm))
        except DomainError as exc:
            log.warning("skipping %s: %s", p, exc)
    records = fb.enforce_gap(records, U.w, ccfg.class_tol)
    lines = ["# " + ln for ln in _header(cfg, "classify")] + [r.to_line() for r in records]
    path = _write_text(_path(cfg, ".records.txt"), "\n".join(lines) + "\n")
    buckets = fb.stratify(records, cfg.n)
    _write_text(_path(cfg, ".strata.json"), fb.strata_json(buckets))
    return path, records


# ---------------------------------------------------------------------------
# reduce


def run_reduce(cfg: RunConfig, snapshot: Optional[str] = None) -> tuple:
    U, pr = _load(cfg, snapshot)
    r = cfg.raw["reduce"]
    psi = pr.obstacle
    ell = psi.ell if r["ell"] == "auto" else float(r["ell"])
    if r["k"] == "auto":
        if ell is None:
            raise ConfigError("reduce.k = auto needs reduce.ell or an obstacle with a regularity order")
        k = taylor_order(ell)
    else:
        k = int(r["k"])
    if ell is None:
        ell = k + 1.0
    red = globalize(U, psi, k, cutoff=cfg.cutoff)
    region = float(r["region"])
    gr = growth_bounds_check(red.F_k, U.grid, ell, region)
    tol = cfg.solver.contact_tol
    g1 = fb.extended_free_boundary(U, psi, tol)
    g2 = fb.extended_free_boundary(red.V, None, tol)
    inner = np.all(np.abs(U.grid.thin_points()) <= cfg.cutoff.inner + 1e-12, axis=-1)
    mismatch = int(np.sum(g1[:, inner] != g2[:, inner]))
    snap = write_snapshot(_path(cfg, ".reduced.snap"), red.V, {**_meta(cfg), "reduction.k": k})
    lines = _header(cfg, "reduce") + [
        f"k = {k}", f"ell = {ell!r}", f"q_k = {';'.join(ln.strip() for ln in red.q_k.to_text().splitlines())}",
        f"M_value = {gr.M_value!r}", f"M_gradient = {gr.M_gradient!r}", f"M_time = {gr.M_time!r}",
        f"gamma_nodes_U = {int(g1[:, inner].sum())}", f"gamma_nodes_V = {int(g2[:, inner].sum())}",
        f"gamma_mismatch = {mismatch}", f"snapshot = {os.path.basename(snap)}"]
    path = _write_text(_path(cfg, ".reduce.txt"), "\n".join(lines) + "\n")
    return path, gr, mismatch


# ---------------------------------------------------------------------------
# entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thinfb", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("selftest", "solve", "functionals", "classify", "reduce"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--preset", metavar="NAME", help="one of: " + ", ".join(preset_names()))
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--override", metavar="SECTION.KEY=VALUE", action="append", default=[])
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("functionals", "classify", "reduce"):
            sp.add_argument("--snapshot", metavar="PATH", help="read a THINFB1 snapshot instead of solving")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.override)
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    try:
        cfg = RunConfig.resolve(args.config, args.preset, overrides)
        if args.command == "selftest":
            ok, text = run_selftest(cfg)
            _write_text(_path(cfg, ".selftest.txt"), "\n".join(_header(cfg, "selftest")) + "\n" + text)
            sys.stdout.write(text)
            return EXIT_OK if ok else EXIT_FAIL
        if args.command == "solve":
            path, _, _ = run_solve(cfg)
            print(path)
        elif args.command == "functionals":
            path, _ = run_functionals(cfg, args.snapshot)
            print(path)
        elif args.command == "classify":
            path, records = run_classify(cfg, args.snapshot)
            for rec in records:
                print(rec.to_line())
            print(path)
        else:
            path, gr, mismatch = run_reduce(cfg, args.snapshot)
            print(path)
            if mismatch or not gr.finite:
                return EXIT_FAIL
        return EXIT_OK
    except NonConvergenceError as exc:
        print(f"thinfb: nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (ConfigError, DomainError, OSError) as exc:
        print(f"thinfb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
