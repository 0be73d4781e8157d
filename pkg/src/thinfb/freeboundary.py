"""Coincidence sets, extended free boundary, frequency limits and point classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Sequence

import numpy as np

from .functionals import (FrequencyProfile, GridField, QuadratureRule, as_sampler, default_ladder,
                          frequency_profile, _strip_nodes, _shifted)
from .kernels import DomainError, WeightParam
from .polys import (ParabolicPolynomial, caloric_extension, parabolic_monomial_basis,
                    spatial_dimension, validate_P_kappa_plus)
from .solver import HalfGrid, ScalarField, sample_field, weighted_normal_derivative


@dataclass(frozen=True)
class ClassifyConfig:
    class_tol: float = 0.1
    slope_threshold: float = -0.5
    r_fit: Optional[float] = None
    ell: float = 6.0
    sigma: float = 0.5
    contact_tol: float = 1e-8
    trunc_threshold: float = 1e-5
    rank_tol: float = 1e-9
    min_radii: int = 5
    ladder_count: int = 9
    rule: QuadratureRule = QuadratureRule()
    require_gamma: bool = True
    resolution_cells: float = 10.0

    def __post_init__(self):
        for k in ("class_tol", "contact_tol", "trunc_threshold", "rank_tol"):
            if not getattr(self, k) > 0:
                raise DomainError(f"{k} must be positive")
        if not (self.ell >= 2 and 0 < self.sigma < 1):
            raise DomainError("need ell >= 2 and sigma in (0, 1)")


# ---------------------------------------------------------------------------
# sets on the thin space-time grid


def _thin_obstacle(U: ScalarField, psi: Optional[Callable]) -> np.ndarray:
    g = U.grid
    psi = U.obstacle if psi is None else psi
    if psi is None:
        return np.zeros_like(U.thin)
    Xt = g.thin_points()
    return np.stack([np.broadcast_to(psi(Xt, tm), g.thin_shape) for tm in g.t])


def _scale(*arrays) -> float:
    m = max((float(np.max(np.abs(a))) for a in arrays if np.size(a)), default=0.0)
    return m if m > 0 else 1.0


def coincidence_mask(U: ScalarField, psi: Optional[Callable] = None, contact_tol: float = 1e-8) -> np.ndarray:
    """``U(x, 0, t) - psi(x, t) <= contact_tol * scale`` on every thin node."""
    obs = _thin_obstacle(U, psi)
    return (U.thin - obs) <= contact_tol * _scale(U.thin, obs)


def _graph_boundary(Z: np.ndarray, ignore: Optional[np.ndarray] = None) -> np.ndarray:
    """Nodes of ``Z`` with at least one grid neighbour (in x or t) outside ``Z``.

    Neighbours beyond the grid, or flagged in ``ignore``, do not count.
    """
    ignore = np.zeros_like(Z) if ignore is None else ignore
    out = np.zeros_like(Z)
    for ax in range(Z.ndim):
        for shift in (1, -1):
            nb = np.roll(Z, shift, axis=ax)
            valid = ~np.roll(ignore, shift, axis=ax)
            idx = [slice(None)] * Z.ndim
            idx[ax] = 0 if shift == 1 else -1
            valid[tuple(idx)] = False
            out |= Z & valid & ~nb
    return out & ~ignore


def _lateral_edge(grid: HalfGrid, shape) -> np.ndarray:
    edge = np.zeros(shape, dtype=bool)
    for ax in range(1, grid.n + 1):
        idx = [slice(None)] * len(shape)
        idx[ax] = 0
        edge[tuple(idx)] = True
        idx[ax] = -1
        edge[tuple(idx)] = True
    return edge


def free_boundary(U: ScalarField, psi: Optional[Callable] = None, contact_tol: float = 1e-8) -> np.ndarray:
    """Discrete boundary of the coincidence set."""
    lam = coincidence_mask(U, psi, contact_tol)
    return _graph_boundary(lam, _lateral_edge(U.grid, lam.shape))


def extended_free_boundary(U: ScalarField, psi: Optional[Callable] = None, contact_tol: float = 1e-8,
                           flux_method: str = "balance") -> np.ndarray:
    """Discrete extended free boundary on the thin space-time grid graph.

    The union of the boundaries of ``Z = {U - psi <= tol, -d_y^a U <= tol}``
    and of the coincidence set. On a grid the set ``Z`` of a regular point
    can be empty (the flux only vanishes in the limit), while the
    coincidence-set boundary always lies in the continuum extended free
    boundary. Lateral edge nodes are neither reported nor used as neighbours.
    """
    lam = -weighted_normal_derivative(U, flux_method)
    obs = _thin_obstacle(U, psi)
    gap = U.thin - obs
    tol = contact_tol * _scale(U.thin, obs)
    contact = gap <= tol
    Z = contact & (lam <= tol)
    edge = _lateral_edge(U.grid, Z.shape)
    return _graph_boundary(Z, edge) | _graph_boundary(contact, edge)


def node_of(grid: HalfGrid, point) -> tuple:
    """Nearest thin node ``(m, i[, k])`` to ``point = (x0, t0)``."""
    x0, t0 = point
    x0 = np.broadcast_to(np.asarray(x0, float), (grid.n,))
    m = int(np.argmin(np.abs(grid.t - t0)))
    return (m,) + tuple(int(np.argmin(np.abs(grid.x - v))) for v in x0)


def gamma_points(mask: np.ndarray, grid: HalfGrid) -> list:
    """Coordinates ``((x...), t)`` of the nodes set in a thin space-time mask."""
    pts = []
    for idx in zip(*np.nonzero(mask)):
        m, rest = idx[0], idx[1:]
        pts.append((tuple(float(grid.x[i]) for i in rest), float(grid.t[m])))
    return pts


# ---------------------------------------------------------------------------
# density


@dataclass
class DensityProfile:
    radii: np.ndarray
    density: np.ndarray
    reliable: np.ndarray
    slope: float

    def pairs(self):
        return [(float(r), float(d)) for r, d in zip(self.radii, self.density)]

    def tends_to_zero(self, threshold: float = -0.5) -> bool:
        return self.slope <= threshold


def _cylinder(grid: HalfGrid, point, r: float):
    x0, t0 = point
    x0 = np.broadcast_to(np.asarray(x0, float), (grid.n,))
    tmask = (grid.t > t0 - r * r - 1e-12) & (grid.t <= t0 + 1e-12)
    Xt = grid.thin_points()
    xmask = np.sum((Xt - x0) ** 2, axis=-1) < r * r
    return tmask[(slice(None),) + (None,) * grid.n] & xmask[None]


def density_profile(mask: np.ndarray, grid: HalfGrid, point, radii: Optional[Sequence[float]] = None,
                    count: int = 6) -> DensityProfile:
    """Node-counting estimate of ``|Lambda cap Q_r| / |Q_r|`` on backward cylinders.

    Radii below three grid cells, or whose cylinder leaves the grid, are
    flagged unreliable. The slope is a log-log fit over reliable radii;
    ``-inf`` when the density vanishes at every reliable radius.
    """
    x0, t0 = point
    x0 = np.broadcast_to(np.asarray(x0, float), (grid.n,))
    r_lo = 3 * grid.h_x
    r_box = min(grid.R_x - float(np.max(np.abs(x0))), math.sqrt(max(grid.T + t0, 0.0)))
    r_hi = 0.9 * r_box
    if radii is None:
        if r_hi <= r_lo:
            raise DomainError("grid too small for a density profile at this point")
        radii = np.geomspace(r_hi, r_lo, count)
    radii = np.asarray(radii, float)
    dens, rel = [], []
    for r in radii:
        Q = _cylinder(grid, (x0, t0), r)
        tot = int(Q.sum())
        dens.append(float((mask & Q).sum()) / tot if tot else math.nan)
        rel.append(bool(r_lo * (1 - 1e-9) <= r <= r_box and tot > 0))
    dens, rel = np.array(dens), np.array(rel)
    sel = rel & np.isfinite(dens)
    if sel.sum() >= 2:
        d, rr = dens[sel], radii[sel]
        pos = d > 0
        if d[np.argmin(rr)] == 0 or pos.sum() < 2:
            # empty at the finest reliable radius: faster than any power
            slope = -math.inf
        else:
            slope = float(np.polyfit(np.log(rr[pos]), np.log(d[pos]), 1)[0])
    else:
        slope = math.nan
    return DensityProfile(radii, dens, rel, slope)


# ---------------------------------------------------------------------------
# frequency limit


@dataclass
class KappaEstimate:
    kappa: Optional[float]
    uncertainty: float
    n_reliable: int
    at_ceiling: bool
    slope: float = 0.0

    @property
    def defined(self) -> bool:
        return self.kappa is not None


def estimate_kappa(profile: FrequencyProfile, cfg: ClassifyConfig = ClassifyConfig(),
                   h: float = 0.0) -> KappaEstimate:
    """Extrapolate ``N(U, r)`` to ``r -> 0`` by a linear fit in ``r^{1-sigma}``.

    Radii below ``cfg.resolution_cells * h`` are dropped when enough
    resolved radii remain; on under-resolved grids all radii are used.
    """
    r = profile.radii
    N = profile.column("N")
    te = profile.column("trunc_err")
    ok = np.isfinite(N) & (te <= cfg.trunc_threshold)
    resolved = ok & (r >= cfg.resolution_cells * h)
    if int(resolved.sum()) >= cfg.min_radii:
        ok = resolved
    n_ok = int(ok.sum())
    if n_ok < cfg.min_radii:
        if not np.isfinite(N).any():
            return KappaEstimate(None, math.inf, n_ok, False)
        raise DomainError(f"only {n_ok} reliable radii, need {cfg.min_radii}")
    xs = r[ok] ** (1 - profile.sigma)
    A = np.stack([np.ones_like(xs), xs], axis=1)
    coef, *_ = np.linalg.lstsq(A, N[ok], rcond=None)
    resid = N[ok] - A @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    kappa = float(coef[0])
    unc = rms + float(np.max(te[ok]))
    ceiling = profile.ell - 1 + profile.sigma
    return KappaEstimate(kappa, unc, n_ok, kappa >= ceiling - 1e-9, float(coef[1]))


# ---------------------------------------------------------------------------
# blowups


@dataclass
class BlowupFit:
    polynomial: ParabolicPolynomial
    residual: float
    condition: float
    r_fit: float


def blowup_basis(n: int, kappa: int, w: WeightParam) -> List[ParabolicPolynomial]:
    return [caloric_extension(q, w) for q in parabolic_monomial_basis(n, kappa)]


def extract_blowup(U, point, kappa: int, w: Optional[WeightParam] = None, r_fit: float = 0.1,
                   rule: QuadratureRule = QuadratureRule(), cond_max: float = 1e12) -> BlowupFit:
    """Weighted least-squares projection of the homogeneous rescaling onto the caloric basis.

    Fitting ``U(x0 + X, t0 + t)`` on the strip of radius ``r_fit`` with
    homogeneous basis polynomials yields the same coefficients as fitting the
    rescaling ``U o delta_{r_fit} / r_fit^kappa`` on the unit strip.
    """
    S = as_sampler(U)
    w = S.w if w is None else w
    kappa = int(round(kappa))
    basis = blowup_basis(S.n, kappa, w)
    X, Y, t, wsp, ws = _strip_nodes(w, S.n, r_fit, rule)
    tb = np.broadcast_to(t, Y.shape)
    shift = _shifted(S, point)
    u = S.value(*shift(X, Y, tb))
    weights = np.sqrt(ws[:, None] * wsp[None, :]).ravel()
    cols = np.stack([b.to_float()(X, Y, tb).ravel() * weights for b in basis], axis=1)
    rhs = u.ravel() * weights
    norms = np.linalg.norm(cols, axis=0)
    if np.any(norms == 0):
        raise DomainError("degenerate blowup basis")
    cond = float(np.linalg.cond(cols / norms))
    if not cond <= cond_max:
        raise DomainError(f"ill-conditioned blowup basis (condition {cond:.3e})")
    coef, *_ = np.linalg.lstsq(cols, rhs, rcond=None)
    fit = cols @ coef
    denom = float(np.linalg.norm(rhs))
    resid = float(np.linalg.norm(rhs - fit)) / denom if denom > 0 else 0.0
    p = ParabolicPolynomial.zero(S.n)
    for c, b in zip(coef, basis):
        p = p + b.to_float() * float(c)
    return BlowupFit(p, resid, cond, r_fit)


# ---------------------------------------------------------------------------
# classification


REGULAR, SINGULAR, DEGENERATE, TOP, UNDETERMINED = (
    "regular", "singular", "degenerate-family", "top-truncation", "undetermined")


@dataclass
class ClassificationRecord:
    point: tuple
    kappa_hat: Optional[float]
    kappa_uncertainty: float
    label: str
    kappa_class: Optional[float] = None
    density: List[tuple] = field(default_factory=list)
    density_slope: float = math.nan
    blowup: Optional[ParabolicPolynomial] = None
    blowup_residual: Optional[float] = None
    d_kappa: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def to_line(self) -> str:
        """One ``key=value`` group per record; polynomials as ``;``-joined terms."""
        x0, t0 = self.point
        items = [
            ("x", ",".join(format(v, ".12g") for v in x0)),
            ("t", format(t0, ".12g")),
            ("label", self.label),
            ("kappa_hat", "" if self.kappa_hat is None else format(self.kappa_hat, ".10g")),
            ("kappa_unc", format(self.kappa_uncertainty, ".6g")),
            ("kappa_class", "" if self.kappa_class is None else format(self.kappa_class, ".10g")),
            ("d_kappa", "" if self.d_kappa is None else str(self.d_kappa)),
            ("density_slope", format(self.density_slope, ".6g")),
            ("blowup_residual", "" if self.blowup_residual is None else format(self.blowup_residual, ".6g")),
            ("blowup", "" if self.blowup is None else ";".join(
                ln.strip() for ln in _rounded(self.blowup).to_text().splitlines())),
        ]
        items += [(f"diag.{k}", _fmt_diag(v)) for k, v in sorted(self.diagnostics.items())]
        return " ".join(f"{k}={str(v).replace(' ', '')}" for k, v in items)


def _rounded(p: ParabolicPolynomial, digits: int = 10) -> ParabolicPolynomial:
    if p.coefficient_mode == "exact":
        return p
    floor = 10.0 ** -digits * p.coefficient_scale()
    return ParabolicPolynomial(p.n, {k: float(f"{float(c):.{digits}g}") for k, c in p.terms.items()
                                     if abs(float(c)) > floor})


def _fmt_diag(v) -> str:
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def _thin_sup(U: ScalarField, point, r: float, kind: str, psi) -> float:
    g = U.grid
    x0, t0 = point
    x0 = np.broadcast_to(np.asarray(x0, float), (g.n,))
    Xt = g.thin_points()
    d2 = np.sum((Xt - x0) ** 2, axis=-1)
    dt = g.t - t0
    if kind == "ell":
        m = int(np.argmin(np.abs(dt)))
        sel = np.zeros(U.thin.shape, dtype=bool)
        sel[m] = d2 <= r * r
    elif kind == "par":
        sel = ((dt > -r * r - 1e-12) & (dt <= 1e-12))[(slice(None),) + (None,) * g.n] & (d2 <= r * r)[None]
    else:
        sel = (dt[(slice(None),) + (None,) * g.n] ** 2 + d2[None] <= r * r) & (dt <= 1e-12)[(slice(None),) + (None,) * g.n]
    vals = np.abs(U.thin - _thin_obstacle(U, psi))[sel]
    return float(vals.max()) if vals.size else math.nan


def regularity_diagnostics(U: ScalarField, point, psi=None, radii: Sequence[float] = ()) -> dict:
    """``sup |u| / r^{1+s}`` over balls, parabolic cylinders and space-time balls.

    Reported at the smallest radius only; these carry no classification weight.
    """
    if not len(radii):
        return {}
    s = float(U.w.s)
    r = float(min(radii))
    return {f"L_{k}": _thin_sup(U, point, r, k, psi) / r ** (1 + s) for k in ("ell", "par", "hyp")}


def _nearest_even(k: float) -> int:
    m = max(1, int(round(k / 2)))
    return 2 * m


def _nearest_family(k: float, a: float) -> float:
    m = max(1, int(round((k - 1 + a) / 2)))
    return 2 * m + 1 - a


def classify_point(U: ScalarField, point, cfg: ClassifyConfig = ClassifyConfig(), psi=None,
                   gamma_mask: Optional[np.ndarray] = None) -> ClassificationRecord:
    """Decide regular / singular / degenerate-family / top-truncation at a thin point.

    Works on ``W = U - psi`` (with the matching source) when an obstacle is
    present. Singular requires the frequency, the density decay and the
    blowup class to agree; any disagreement yields ``undetermined``.
    """
    x0, t0 = point
    x0 = tuple(np.broadcast_to(np.asarray(x0, float), (U.grid.n,)).tolist())
    point = (x0, float(t0))
    W = U
    obstacle = psi if psi is not None else U.obstacle
    if obstacle is not None and hasattr(obstacle, "sympy_expr"):
        from .reduction import subtract_obstacle
        W = subtract_obstacle(U, obstacle)[0]
    elif obstacle is not None:
        W = ScalarField(U.grid, U.w, U.values - _thin_obstacle(U, obstacle)[..., None], U.provenance,
                        U.source, None, dict(U.meta))
    if cfg.require_gamma:
        gm = extended_free_boundary(U, obstacle, cfg.contact_tol) if gamma_mask is None else gamma_mask
        if not gm[node_of(U.grid, point)]:
            raise DomainError(f"point {point} is not on the extended free boundary")
    w = U.w
    a, s = float(w.a), float(w.s)
    tol = cfg.class_tol
    diag: dict = {}
    lam = coincidence_mask(U, obstacle, cfg.contact_tol)
    dens = density_profile(lam, U.grid, point)
    diag["density_final"] = float(dens.density[np.isfinite(dens.density)][-1]) if np.isfinite(dens.density).any() else math.nan
    diag.update(regularity_diagnostics(U, point, obstacle, dens.radii[dens.reliable]))

    S = GridField(W)
    try:
        radii = default_ladder(S, cfg.rule, cfg.ladder_count, center=point)
        prof = frequency_profile(S, radii, ell=cfg.ell, sigma=cfg.sigma, rule=cfg.rule, center=point)
        est = estimate_kappa(prof, cfg, max(U.grid.h_x, U.grid.h_y))
    except DomainError as exc:
        diag["error"] = str(exc)
        return ClassificationRecord(point, None, math.inf, UNDETERMINED, density=dens.pairs(),
                                    density_slope=dens.slope, diagnostics=diag)
    diag["C_fit"] = prof.C
    diag["phi_monotone"] = prof.phi_monotone()
    if not est.defined:
        diag["reason"] = "H vanishes on the ladder"
        return ClassificationRecord(point, None, math.inf, UNDETERMINED, density=dens.pairs(),
                                    density_slope=dens.slope, diagnostics=diag)
    k = est.kappa
    rec = ClassificationRecord(point, k, est.uncertainty, UNDETERMINED, density=dens.pairs(),
                               density_slope=dens.slope, diagnostics=diag)
    ceiling = cfg.ell - 1 + cfg.sigma
    if k < 1 + s - tol:
        diag["inconsistency"] = "kappa below 1+s"
        return rec
    if 1 + s + tol < k < 2 - tol:
        diag["inconsistency"] = "kappa inside the frequency gap (1+s, 2)"
        return rec
    if abs(k - (1 + s)) <= tol:
        rec.label, rec.kappa_class = REGULAR, 1 + s
        return rec
    if est.at_ceiling or k >= ceiling - tol:
        rec.label, rec.kappa_class = TOP, ceiling
        return rec
    even = _nearest_even(k)
    fam = _nearest_family(k, a)
    if abs(k - even) <= tol:
        r_fit = cfg.r_fit if cfg.r_fit is not None else 2 * float(np.min(prof.radii))
        r_fit = min(r_fit, float(np.max(prof.radii)))
        try:
            fit = extract_blowup(S, point, even, w, r_fit, cfg.rule)
        except DomainError as exc:
            diag["blowup_error"] = str(exc)
            return rec
        rec.blowup, rec.blowup_residual = fit.polynomial, fit.residual
        slack = max(1e-12, 10 * fit.residual)
        member = validate_P_kappa_plus(fit.polynomial, w, even, nonneg_tol=slack, caloric_tol=1e-8)
        zero_density = dens.tends_to_zero(cfg.slope_threshold)
        diag["blowup_in_P"] = member.in_P_kappa_plus
        diag["zero_density"] = zero_density
        ref = fit.polynomial.coefficient_scale()
        rec.d_kappa = spatial_dimension(fit.polynomial, even, rank_tol=max(cfg.rank_tol, 10 * fit.residual),
                                        reference_scale=ref)
        if member.in_P_kappa_plus and zero_density:
            rec.label, rec.kappa_class = SINGULAR, even
        else:
            diag["reason"] = "singular-point conditions disagree"
        return rec
    if abs(k - fam) <= tol:
        rec.label, rec.kappa_class = DEGENERATE, fam
        return rec
    diag["reason"] = "kappa matches no admissible value"
    return rec


def classify_all(U: ScalarField, cfg: ClassifyConfig = ClassifyConfig(), psi=None,
                 points: Optional[Sequence] = None) -> List[ClassificationRecord]:
    gm = extended_free_boundary(U, psi, cfg.contact_tol)
    if points is None:
        points = gamma_points(gm, U.grid)
    return [classify_point(U, p, cfg, psi, gamma_mask=gm) for p in points]


def enforce_gap(records: Sequence[ClassificationRecord], w: WeightParam, tol: float = 0.1) -> List[ClassificationRecord]:
    """Downgrade any final label whose frequency sits strictly inside ``(1+s, 2)``."""
    s = float(w.s)
    for rec in records:
        if rec.label != UNDETERMINED and rec.kappa_hat is not None and 1 + s + tol < rec.kappa_hat < 2 - tol:
            rec.label = UNDETERMINED
            rec.diagnostics["inconsistency"] = "kappa inside the frequency gap (1+s, 2)"
    return list(records)


# ---------------------------------------------------------------------------
# stratification


def stratify(records: Sequence[ClassificationRecord], n: int) -> dict:
    """Group singular records by ``(kappa, d_kappa)``; ``d = n`` is time-like."""
    buckets: dict = {}
    for rec in records:
        if rec.label != SINGULAR:
            continue
        key = (int(rec.kappa_class), int(rec.d_kappa))
        b = buckets.setdefault(key, {"kappa": key[0], "d": key[1], "count": 0, "points": [],
                                     "kind": "time-like" if key[1] == n else "space-like"})
        b["count"] += 1
        b["points"].append([list(rec.point[0]), rec.point[1]])
    return dict(sorted(buckets.items()))


def strata_summary(buckets: dict) -> str:
    lines = ["kappa d kind count"]
    for (k, d), b in buckets.items():
        lines.append(f"{k} {d} {b['kind']} {b['count']}")
    return "\n".join(lines) + "\n"


def strata_json(buckets: dict) -> str:
    payload = [{k: v for k, v in b.items()} for b in buckets.values()]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
