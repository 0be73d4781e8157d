"""Gaussian-weighted strip quadrature and the frequency-type functionals.

Integrals over the backward strip ``(-r^2, 0) x R^{n+1}_+`` against the
backward fundamental solution are computed after the substitution
``t = -r^2 s^2``, ``x = 2 sqrt|t| u``, ``y = 2 sqrt|t| sqrt(v)``. The weight
then factors into a Gauss-Hermite weight per ``x`` axis and a generalized
Gauss-Laguerre weight with exponent ``(a - 1) / 2`` in ``v``; with
normalized weights the spatial integral is a plain expectation.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import ndimage, special
from scipy.interpolate import RegularGridInterpolator

from .kernels import DomainError, WeightParam
from .polys import ParabolicPolynomial, validate_P_kappa_plus, z_apply
from .solver import HalfGrid, ScalarField


# ---------------------------------------------------------------------------
# quadrature rule


@lru_cache(maxsize=64)
def _hermite(nodes: int):
    u, wt = np.polynomial.hermite.hermgauss(nodes)
    return u, wt / math.sqrt(math.pi)


@lru_cache(maxsize=64)
def _laguerre(nodes: int, alpha: float):
    v, wt = special.roots_genlaguerre(nodes, alpha)
    return np.sqrt(v), wt / special.gamma(alpha + 1)


@lru_cache(maxsize=64)
def _time_nodes(panels: int, nodes: int):
    g, gw = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, 1.0, panels + 1)
    s, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s.append(lo + (hi - lo) * (g + 1) / 2)
        ws.append(gw * (hi - lo) / 2)
    return np.concatenate(s), np.concatenate(ws)


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor rule for strip integrals; node counts per axis."""

    hermite_nodes: int = 40
    laguerre_nodes: int = 40
    time_panels: int = 2
    time_nodes: int = 8
    c_trunc: float = 8.0

    def __post_init__(self):
        if min(self.hermite_nodes, self.laguerre_nodes, self.time_panels, self.time_nodes) < 1:
            raise DomainError("quadrature node counts must be positive")
        if not self.c_trunc > 0:
            raise DomainError("c_trunc must be positive")

    def refined(self, factor: int = 2) -> "QuadratureRule":
        return replace(self, hermite_nodes=self.hermite_nodes * factor,
                       laguerre_nodes=self.laguerre_nodes * factor,
                       time_panels=self.time_panels * factor)

    def slice_points(self, w: WeightParam, n: int):
        """Reference nodes ``(xi, eta, weight)`` with weights summing to one."""
        u, wu = _hermite(self.hermite_nodes)
        v, wv = _laguerre(self.laguerre_nodes, (w.af - 1) / 2)
        grids = np.meshgrid(*([u] * n + [v]), indexing="ij")
        wgrids = np.meshgrid(*([wu] * n + [wv]), indexing="ij")
        xi = np.stack([g.ravel() for g in grids[:-1]], axis=-1)
        weight = np.prod([g.ravel() for g in wgrids], axis=0)
        return xi, grids[-1].ravel(), weight

    def time_points(self):
        """Nodes ``s`` in ``(0, 1)`` and weights for ``int_0^1 2 s g(s) ds``."""
        s, ws = _time_nodes(self.time_panels, self.time_nodes)
        return s, 2 * s * ws


# ---------------------------------------------------------------------------
# field samplers


class FieldSampler:
    """Point evaluation of ``U``, its derivatives and the source ``F``.

    Subclasses implement :meth:`value`, :meth:`gradient` (trailing axis
    ``n + 1`` with the ``y`` component last) and :meth:`time_derivative`.
    """

    n: int
    w: WeightParam

    def value(self, X, Y, t):
        raise NotImplementedError

    def gradient(self, X, Y, t):
        raise NotImplementedError

    def time_derivative(self, X, Y, t):
        raise NotImplementedError

    def source(self, X, Y, t):
        return np.zeros(np.shape(Y))

    def has_source(self) -> bool:
        return False

    # truncation bookkeeping; analytic samplers are unbounded in extent
    def box_distance(self, center):
        return math.inf, math.inf, math.inf

    def max_abs(self) -> float:
        return 0.0


class AnalyticField(FieldSampler):
    """Closed-form field. Missing derivatives are taken by central differences."""

    def __init__(self, fn: Callable, n: int, w: WeightParam, grad: Optional[Callable] = None,
                 dt: Optional[Callable] = None, source: Optional[Callable] = None,
                 fd_step: float = 1e-6):
        self.fn, self.n, self.w = fn, n, w
        self._grad, self._dt, self._src = grad, dt, source
        self.fd_step = fd_step

    @classmethod
    def from_polynomial(cls, p: ParabolicPolynomial, w: WeightParam,
                        source: Optional[ParabolicPolynomial | Callable] = None) -> "AnalyticField":
        pf = p.to_float()
        grads = [pf.dx(i) for i in range(p.n)] + [pf.dy()]
        pt = pf.dt()
        src = source.to_float() if isinstance(source, ParabolicPolynomial) else source
        return cls(pf, p.n, w,
                   grad=lambda X, Y, t: np.stack([np.broadcast_to(g(X, Y, t), np.shape(Y)) for g in grads], axis=-1),
                   dt=lambda X, Y, t: np.broadcast_to(pt(X, Y, t), np.shape(Y)),
                   source=src)

    def value(self, X, Y, t):
        return np.broadcast_to(self.fn(X, Y, t), np.shape(Y))

    def gradient(self, X, Y, t):
        if self._grad is not None:
            return self._grad(X, Y, t)
        h = self.fd_step
        comps = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = h
            comps.append((self.value(X + e, Y, t) - self.value(X - e, Y, t)) / (2 * h))
        comps.append((self.value(X, Y + h, t) - self.value(X, np.abs(Y - h), t)) / (2 * h))
        return np.stack(comps, axis=-1)

    def time_derivative(self, X, Y, t):
        if self._dt is not None:
            return self._dt(X, Y, t)
        h = self.fd_step
        return (self.value(X, Y, t + h) - self.value(X, Y, t - h)) / (2 * h)

    def source(self, X, Y, t):
        if self._src is None:
            return np.zeros(np.shape(Y))
        return np.broadcast_to(self._src(X, Y, t), np.shape(Y))

    def has_source(self) -> bool:
        return self._src is not None


class GridField(FieldSampler):
    """Cubic-spline sampler of a :class:`ScalarField`, extended by zero outside the box.

    The ``y`` axis is mirrored about the thin space, so sampled values are
    even in ``y`` and the sampled ``U_y`` vanishes at ``y = 0``.
    """

    def __init__(self, U: ScalarField, order: int = 3):
        self.U = U
        self.grid = U.grid
        self.n, self.w = U.grid.n, U.w
        self.order = order
        self._tpad = min(4, U.grid.nt)
        g = self.grid
        V = U.values
        eo = 2 if min(g.nx, g.ny) >= 3 else 1
        grads = []
        for ax in range(1, g.n + 1):
            grads.append(self._extend(np.gradient(V, g.h_x, axis=ax, edge_order=eo), even=True))
        padded = np.concatenate([V[..., 1:2], V], axis=-1)
        grads.append(self._extend(np.gradient(padded, g.h_y, axis=-1)[..., 1:], even=False))
        if g.nt >= 2:
            ut = np.gradient(V, g.h_t, axis=0, edge_order=2)
        elif g.nt == 1:
            ut = np.gradient(V, g.h_t, axis=0)
        else:
            ut = np.zeros_like(V)
        self._coef_u = self._prefilter(self._extend(V, even=True))
        self._coef_grad = [self._prefilter(d) for d in grads]
        self._coef_t = self._prefilter(self._extend(ut, even=True))
        self._max = float(np.max(np.abs(V)))

    def _extend(self, arr, even: bool):
        """Reflect across ``y = 0`` (even for ``U``, odd for ``U_y``) and pad time.

        Time is padded by point reflection about the end slices, which keeps
        fields that are linear in ``t`` exactly linear for the spline.
        """
        refl = arr[..., :0:-1]
        arr = np.concatenate([refl if even else -refl, arr], axis=-1)
        p = min(self._tpad, arr.shape[0] - 1)
        if p > 0:
            top = 2 * arr[-1:] - arr[-2:-p - 2:-1]
            bot = 2 * arr[:1] - arr[p:0:-1]
            arr = np.concatenate([bot, arr, top], axis=0)
        return arr

    def _prefilter(self, arr):
        if self.order <= 1:
            return np.ascontiguousarray(arr)
        return ndimage.spline_filter(arr, order=self.order, mode="mirror")

    def _coords(self, X, Y, t):
        g = self.grid
        Y = np.asarray(Y, float)
        shape = Y.shape
        t = np.broadcast_to(np.asarray(t, float), shape)
        X = np.broadcast_to(np.asarray(X, float), shape + (g.n,))
        cs = [((t + g.T) / g.h_t + self._tpad).ravel()]
        inside = (t >= -g.T - 1e-12) & (t <= 1e-12) & (Y <= g.R_y + 1e-12)
        for i in range(g.n):
            cs.append(((X[..., i] + g.R_x) / g.h_x).ravel())
            inside &= np.abs(X[..., i]) <= g.R_x + 1e-12
        cs.append((np.abs(Y) / g.h_y + (g.ny - 1)).ravel())
        return np.array(cs), inside, shape

    def _sample(self, coef, X, Y, t):
        cs, inside, shape = self._coords(X, Y, t)
        out = np.zeros(cs.shape[1])
        sel = inside.ravel()
        if sel.any():
            out[sel] = ndimage.map_coordinates(coef, cs[:, sel], order=self.order,
                                               mode="mirror", prefilter=False)
        return out.reshape(shape)

    def value(self, X, Y, t):
        return self._sample(self._coef_u, X, Y, t)

    def gradient(self, X, Y, t):
        return np.stack([self._sample(c, X, Y, t) for c in self._coef_grad], axis=-1)

    def time_derivative(self, X, Y, t):
        return self._sample(self._coef_t, X, Y, t)

    def source(self, X, Y, t):
        F = self.U.source
        if F is None:
            return np.zeros(np.shape(Y))
        _, inside, shape = self._coords(X, Y, t)
        vals = np.broadcast_to(F(np.asarray(X, float), np.asarray(Y, float), t), shape)
        return np.where(inside, vals, 0.0)

    def has_source(self) -> bool:
        return self.U.source is not None

    def box_distance(self, center):
        g = self.grid
        x0, t0 = center
        dx = min(g.R_x - abs(float(v)) for v in np.atleast_1d(x0))
        return dx, g.R_y, g.T + t0

    def max_abs(self) -> float:
        return self._max


def as_sampler(U) -> FieldSampler:
    if isinstance(U, FieldSampler):
        return U
    if isinstance(U, ScalarField):
        return GridField(U)
    raise DomainError(f"cannot sample {type(U).__name__}")


# ---------------------------------------------------------------------------
# strip integrals


def _center(n: int, center):
    if center is None:
        return np.zeros(n), 0.0
    x0, t0 = center
    return np.broadcast_to(np.asarray(x0, float), (n,)).copy(), float(t0)


def truncation_estimate(sampler: FieldSampler, r: float, center=None, H: Optional[float] = None) -> float:
    """Gaussian tail mass beyond the box at ``|t| = r^2`` times ``max|U|^2 / H``."""
    n, a = sampler.n, sampler.w.af
    dx, dy, _ = sampler.box_distance(_center(n, center))
    tail = 0.0
    if math.isfinite(dx):
        tail += n * math.erfc(dx / (2 * r))
    if math.isfinite(dy):
        tail += float(special.gammaincc((a + 1) / 2, dy ** 2 / (4 * r ** 2)))
    if tail == 0.0:
        return 0.0
    m2 = sampler.max_abs() ** 2
    if H is None or H <= 0:
        return 0.0 if m2 == 0 else math.inf
    return tail * m2 / H


def max_admissible_radius(sampler: FieldSampler, rule: QuadratureRule, center=None) -> float:
    dx, dy, dt = sampler.box_distance(_center(sampler.n, center))
    return min(min(dx, dy) / rule.c_trunc, math.sqrt(max(dt, 0.0)))


def check_radius(sampler: FieldSampler, r: float, rule: QuadratureRule, center=None):
    if not r > 0:
        raise DomainError("radius must be positive")
    dx, dy, dt = sampler.box_distance(_center(sampler.n, center))
    if min(dx, dy) < rule.c_trunc * r:
        raise DomainError(
            f"radius {r:.4g} too large: box distance {min(dx, dy):.4g} < c_trunc*r = {rule.c_trunc * r:.4g}")
    if dt < r * r * (1 - 1e-12):
        raise DomainError(f"radius {r:.4g} too large: strip needs |t| up to {r * r:.4g}, grid has {dt:.4g}")


def _strip_nodes(w: WeightParam, n: int, r: float, rule: QuadratureRule):
    xi, eta, wsp = rule.slice_points(w, n)
    s, ws = rule.time_points()
    sc = 2 * r * s  # 2 sqrt|t|
    X = sc[:, None, None] * xi[None, :, :]
    Y = sc[:, None] * eta[None, :]
    t = -(r * s) ** 2
    return X, Y, t[:, None], wsp, ws


def strip_integral(f: Callable, w: WeightParam, n: int, r: float, rule: QuadratureRule = QuadratureRule()) -> float:
    """``(1/r^2) int f G y^a dX dt`` over the backward strip of radius ``r``.

    ``f(X, Y, t)`` is evaluated at local coordinates with ``X`` carrying a
    trailing axis of length ``n``.

    >>> round(strip_integral(lambda X, Y, t: np.ones_like(Y), WeightParam(0.5), 1, 0.5), 12)
    1.0
    """
    X, Y, t, wsp, ws = _strip_nodes(w, n, r, rule)
    vals = np.asarray(f(X, Y, np.broadcast_to(t, Y.shape)), float)
    return float(ws @ (vals @ wsp))


def slice_integral(f: Callable, w: WeightParam, n: int, t: float, rule: QuadratureRule = QuadratureRule()) -> float:
    """``int f(., t) G(., t) y^a dX`` on the single slice ``t < 0``."""
    xi, eta, wsp = rule.slice_points(w, n)
    sc = 2 * math.sqrt(abs(t))
    vals = np.asarray(f(sc * xi, sc * eta, np.full(eta.shape, t)), float)
    return float(vals @ wsp)


@dataclass
class FunctionalValues:
    r: float
    H: float
    D: float
    I: float
    N: Optional[float]
    Ntilde: Optional[float]
    trunc_err: float
    UF: float = 0.0

    @property
    def defined(self) -> bool:
        return self.N is not None


def _shifted(sampler: FieldSampler, center):
    x0, t0 = _center(sampler.n, center)
    return (lambda X, Y, t: (X + x0, Y, t + t0))


def functional_suite(U, r: float, rule: QuadratureRule = QuadratureRule(), center=None,
                     check: bool = True) -> FunctionalValues:
    """``H``, ``D``, ``I`` and the two frequencies at radius ``r``."""
    S = as_sampler(U)
    if check:
        check_radius(S, r, rule, center)
    shift = _shifted(S, center)
    X, Y, t, wsp, ws = _strip_nodes(S.w, S.n, r, rule)
    tb = np.broadcast_to(t, Y.shape)
    Xa, Ya, ta = shift(X, Y, tb)
    u = S.value(Xa, Ya, ta)
    grad = S.gradient(Xa, Ya, ta)
    absT = np.abs(tb)

    def integ(vals):
        return float(ws @ (vals @ wsp))

    H = integ(u * u)
    D = integ(absT * np.sum(grad * grad, axis=-1))
    UF = integ(absT * u * S.source(Xa, Ya, ta)) if S.has_source() else 0.0
    I = D - UF
    if H > 0:
        N, Nt = 2 * I / H, 2 * D / H
    else:
        N = Nt = None
    return FunctionalValues(r, H, D, I, N, Nt, truncation_estimate(S, r, center, H), UF)


def height(U, r: float, rule: QuadratureRule = QuadratureRule(), center=None, check: bool = True) -> float:
    S = as_sampler(U)
    if check:
        check_radius(S, r, rule, center)
    shift = _shifted(S, center)
    return strip_integral(lambda X, Y, t: S.value(*shift(X, Y, t)) ** 2, S.w, S.n, r, rule)


def z_derivative(S: FieldSampler, X, Y, t, Xa=None, Ya=None, ta=None):
    """``ZU = <X, grad U> + 2 t U_t`` in local coordinates ``(X, Y, t)``."""
    Xa = X if Xa is None else Xa
    Ya = Y if Ya is None else Ya
    ta = t if ta is None else ta
    g = S.gradient(Xa, Ya, ta)
    return np.sum(X * g[..., :-1], axis=-1) + Y * g[..., -1] + 2 * t * S.time_derivative(Xa, Ya, ta)


# ---------------------------------------------------------------------------
# Almgren-Poon quantity


def ladder(r_max: float, count: int = 9, ratio: float = 2 ** 0.25) -> np.ndarray:
    """Decreasing geometric radius ladder starting at ``r_max``."""
    if count < 1 or not r_max > 0 or not ratio > 1:
        raise DomainError("invalid ladder specification")
    return r_max * ratio ** -np.arange(count, dtype=float)


def default_ladder(U, rule: QuadratureRule = QuadratureRule(), count: int = 9,
                   ratio: float = 2 ** 0.25, substeps: int = 4, center=None) -> np.ndarray:
    """Largest ladder whose log-derivative stencil still passes the truncation check."""
    S = as_sampler(U)
    r_top = max_admissible_radius(S, rule, center) * ratio ** (-2.0 / substeps) * (1 - 1e-9)
    if not math.isfinite(r_top):
        r_top = 0.4
    return ladder(r_top, count, ratio)


def _log_derivative(logr: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``df/dlog r`` on a uniform grid: 5-point centered inside, lower order at the ends."""
    m = len(logr)
    h = logr[1] - logr[0]
    d = np.gradient(f, h, edge_order=2 if m >= 3 else 1)
    if m >= 5:
        d[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    return d


def almgren_phi(radii: Sequence[float], H: Sequence[float], ell: float, sigma: float, C: float = 0.0):
    """Truncated frequency on a log-uniform ladder.

    ``Phi = (1/2) r e^{C r^{1-sigma}} d/dr log max{H, r^{2l-2+2sigma}} + 2(e^{C r^{1-sigma}} - 1)``.
    Returns ``(Phi, in_E)`` in the order of ``radii``; ``in_E`` flags radii
    where ``H`` exceeds the truncation floor.
    """
    r = np.asarray(radii, float)
    Hs = np.asarray(H, float)
    if r.size < 3:
        raise DomainError("need at least 3 ladder radii for the log-derivative")
    if not (ell >= 2 and 0 < sigma < 1):
        raise DomainError("need ell >= 2 and sigma in (0, 1)")
    order = np.argsort(r)
    rs, Hsorted = r[order], Hs[order]
    logr = np.log(rs)
    if not np.allclose(np.diff(logr), logr[1] - logr[0], rtol=1e-8, atol=1e-12):
        raise DomainError("radii must be log-uniform")
    floor = rs ** (2 * ell - 2 + 2 * sigma)
    g = np.log(np.maximum(Hsorted, floor))
    dlog = _log_derivative(logr, g)
    e = np.exp(C * rs ** (1 - sigma))
    phi = 0.5 * e * dlog + 2 * (e - 1)
    out = np.empty_like(phi)
    inE = np.empty(r.size, dtype=bool)
    out[order] = phi
    inE[order] = Hsorted > floor
    return out, inE


def phi_from_logderiv(r, dlog, sigma: float, C: float):
    e = np.exp(C * np.asarray(r) ** (1 - sigma))
    return 0.5 * e * np.asarray(dlog) + 2 * (e - 1)


def is_nondecreasing(r, values, slack: float) -> bool:
    order = np.argsort(r)
    v = np.asarray(values, float)[order]
    return bool(np.all(np.diff(v) >= -slack))


C_CANDIDATES = tuple(round(0.1 * k, 1) for k in range(101))


def fit_C(r, dlog, sigma: float, slack: float = 1e-3, candidates=C_CANDIDATES) -> Optional[float]:
    """Smallest candidate ``C`` making the ladder of Phi nondecreasing within ``slack``."""
    for C in candidates:
        if is_nondecreasing(r, phi_from_logderiv(r, dlog, sigma, C), slack):
            return float(C)
    return None


# ---------------------------------------------------------------------------
# Weiss and Monneau


def weiss(U, kappa: float, r: float, rule: QuadratureRule = QuadratureRule(), center=None,
          values: Optional[FunctionalValues] = None) -> float:
    """``r^{-2 kappa} (D - kappa H / 2)``."""
    v = values or functional_suite(U, r, rule, center)
    return (v.D - kappa * v.H / 2) / r ** (2 * kappa)


def weiss_via_frequency(v: FunctionalValues, kappa: float) -> float:
    """The same quantity written as ``(H / 2 r^{2 kappa}) (Ntilde - kappa)``."""
    if v.Ntilde is None:
        return 0.0
    return v.H / (2 * v.r ** (2 * kappa)) * (v.Ntilde - kappa)


def monneau(U, kappa: int, p: ParabolicPolynomial, r: float, rule: QuadratureRule = QuadratureRule(),
            center=None, validate: bool = True, nonneg_tol: float = 1e-12) -> float:
    """``r^{-(2 kappa + 2)} int (U - p)^2 G y^a`` over the strip of radius ``r``."""
    S = as_sampler(U)
    if validate:
        rep = validate_P_kappa_plus(p, S.w, kappa, nonneg_tol=nonneg_tol)
        if not rep.in_P_kappa_plus:
            raise DomainError(f"comparison polynomial is not admissible: {rep.notes or 'conditions fail'}")
    check_radius(S, r, rule, center)
    pf = p.to_float()
    shift = _shifted(S, center)

    def f(X, Y, t):
        return (S.value(*shift(X, Y, t)) - pf(X, Y, t)) ** 2

    return strip_integral(f, S.w, S.n, r, rule) / r ** (2 * kappa)


# ---------------------------------------------------------------------------
# frequency profile


@dataclass
class ProfileRow:
    r: float
    H: float
    D: float
    I: float
    N: Optional[float]
    Ntilde: Optional[float]
    Phi: Optional[float]
    W: Optional[float]
    M: Optional[float]
    trunc_err: float
    in_E: bool
    dlogH: float


CSV_HEADER = "r,H,D,I,N,Ntilde,Phi,W,M,trunc_err"


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return format(float(v), ".17g")


@dataclass
class FrequencyProfile:
    rows: List[ProfileRow]
    ell: float
    sigma: float
    C: Optional[float]
    kappa: Optional[float] = None
    center: tuple = ((), 0.0)
    meta: dict = field(default_factory=dict)

    @property
    def radii(self) -> np.ndarray:
        return np.array([row.r for row in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(row, name) is None else getattr(row, name) for row in self.rows])

    def phi_monotone(self, slack: float = 1e-3) -> bool:
        phi = self.column("Phi")
        ok = np.isfinite(phi)
        return is_nondecreasing(self.radii[ok], phi[ok], slack)

    def to_csv(self, comments: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for c in comments:
            buf.write(f"# {c}\n")
        buf.write(CSV_HEADER + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(getattr(row, k)) for k in CSV_HEADER.split(",")) + "\n")
        return buf.getvalue()


def frequency_profile(U, radii: Sequence[float], *, ell: float = 6.0, sigma: float = 0.5,
                      C="fit", kappa: Optional[float] = None, p_kappa: Optional[ParabolicPolynomial] = None,
                      rule: QuadratureRule = QuadratureRule(), center=None, slack: float = 1e-3,
                      substeps: int = 4, monneau_validate: bool = True, nonneg_tol: float = 1e-12) -> FrequencyProfile:
    """Evaluate all functionals on a geometric ladder.

    ``d/dr log H`` is taken by a 5-point stencil on a log grid refined by
    ``substeps`` between consecutive ladder radii. ``C="fit"`` selects the
    smallest candidate making Phi nondecreasing within ``slack``.
    """
    S = as_sampler(U)
    radii = np.sort(np.asarray(radii, float))[::-1]
    if radii.size < 3:
        raise DomainError("need at least 3 ladder radii")
    logs = np.log(radii)
    step = (logs[0] - logs[1]) / substeps
    fine = logs[-1] + step * np.arange(-2, (radii.size - 1) * substeps + 3)
    rf = np.exp(fine)
    check_radius(S, float(rf.max()), rule, center)
    Hf = np.array([height(S, float(rr), rule, center, check=False) for rr in rf])
    floor = rf ** (2 * ell - 2 + 2 * sigma)
    g = np.log(np.maximum(Hf, floor))
    dfine = _log_derivative(fine, g)
    idx = 2 + substeps * np.arange(radii.size)[::-1]
    dlog = dfine[idx]
    inE = Hf[idx] > floor[idx]
    if C == "fit":
        Cv = fit_C(radii, dlog, sigma, slack)
        C_used = 0.0 if Cv is None else Cv
    else:
        Cv = C_used = float(C)
    phi = phi_from_logderiv(radii, dlog, sigma, C_used)
    rows = []
    for k, r in enumerate(radii):
        v = functional_suite(S, float(r), rule, center, check=False)
        W = weiss(S, kappa, r, values=v) if kappa is not None else None
        M = (monneau(S, int(kappa), p_kappa, float(r), rule, center, validate=monneau_validate,
                     nonneg_tol=nonneg_tol)
             if (p_kappa is not None and kappa is not None) else None)
        rows.append(ProfileRow(float(r), v.H, v.D, v.I, v.N, v.Ntilde,
                               float(phi[k]),
                               W, M, v.trunc_err, bool(inE[k]), float(dlog[k])))
    xc, tc = _center(S.n, center)
    return FrequencyProfile(rows, ell, sigma, Cv, kappa, (tuple(xc.tolist()), tc),
                            {"C_fit_failed": Cv is None and C == "fit"})


# ---------------------------------------------------------------------------
# rescalings


def rescale(U: ScalarField, r: float, mode: str = "almgren", kappa: Optional[float] = None,
            rule: QuadratureRule = QuadratureRule(), target: Optional[HalfGrid] = None) -> ScalarField:
    """Almgren (``U o delta_r / H(U, r)^{1/2}``) or homogeneous (``U o delta_r / r^kappa``) rescaling.

    Without ``target`` the same samples are relabelled on the grid dilated by
    ``1/r``, which is exact. With ``target`` the rescaled field is resampled
    by multilinear interpolation (zero outside the source box).
    """
    if mode == "almgren":
        H = height(U, r, rule)
        if not H > 0:
            raise DomainError("H(U, r) = 0: Almgren rescaling undefined")
        factor = 1.0 / math.sqrt(H)
    elif mode == "homogeneous":
        if kappa is None:
            raise DomainError("homogeneous rescaling needs kappa")
        factor = r ** -kappa
    else:
        raise DomainError(f"unknown rescaling mode {mode!r}")
    g = U.grid
    src = U.source
    new_src = None if src is None else (
        lambda X, Y, t, _f=src: factor * r * r * np.asarray(_f(r * np.asarray(X), r * np.asarray(Y), r * r * np.asarray(t))))
    scaled_grid = HalfGrid(g.n, g.nx, g.ny, g.nt, g.R_x / r, g.R_y / r, g.T / r ** 2)
    out = ScalarField(scaled_grid, U.w, factor * U.values, "rescaled", new_src, None,
                      {**U.meta, "rescale_mode": mode, "rescale_r": r})
    if target is None:
        return out
    axes = [scaled_grid.t] + [scaled_grid.x] * g.n + [scaled_grid.y]
    interp = RegularGridInterpolator(axes, out.values, method="linear", bounds_error=False, fill_value=0.0)
    mesh = np.meshgrid(*([target.t] + [target.x] * target.n + [target.y]), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = interp(pts).reshape((target.nt + 1,) + target.shape)
    return ScalarField(target, U.w, vals, "rescaled", new_src, None, dict(out.meta))


# ---------------------------------------------------------------------------
# first-variation checks


@dataclass
class VariationReport:
    radii: np.ndarray
    height_defect: np.ndarray
    slice_defect: np.ndarray
    energy_defect: np.ndarray
    izu_defect: np.ndarray

    def max_mid(self, name: str, drop: int = 1) -> float:
        arr = getattr(self, name)
        mid = arr[drop:len(arr) - drop] if len(arr) > 2 * drop else arr
        return float(np.max(mid)) if mid.size else 0.0


def _rel(num: float, den: float) -> float:
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return abs(num) / abs(den)


def variation_checks(U, radii: Sequence[float], rule: QuadratureRule = QuadratureRule(), center=None,
                     delta: float = 0.02) -> VariationReport:
    """Relative defects of the first-variation identities along a ladder.

    Per radius: ``|H' - 4I/r| / |H'|``; the slice identity
    ``int_{t=-r^2} U^2 G y^a = H (1 + N)``; the energy variation
    ``D' = r^{-3} int (ZU)^2 G y^a + 2 r^{-3} int |t| ZU F G y^a``; and the
    two expressions of ``I`` (``D - int |t| U F`` against ``(1/2) int U ZU``).
    Derivatives in ``r`` use a 5-point stencil with log-step ``delta``.
    """
    S = as_sampler(U)
    radii = np.asarray(radii, float)
    if radii.size < 5:
        raise DomainError("variation checks need at least 5 radii")
    shift = _shifted(S, center)
    hd, sd, ed, zd = [], [], [], []
    for r in radii:
        check_radius(S, float(r * math.exp(2 * delta)), rule, center)
        rs = r * np.exp(delta * np.arange(-2, 3))
        Hs, Ds = [], []
        for rr in rs:
            v = functional_suite(S, float(rr), rule, center, check=False)
            Hs.append(v.H)
            Ds.append(v.D)
        v = functional_suite(S, float(r), rule, center, check=False)
        stencil = np.array([1, -8, 0, 8, -1]) / (12 * delta)
        dH = float(stencil @ np.array(Hs)) / r
        dD = float(stencil @ np.array(Ds)) / r
        if v.H == 0 and dH == 0:
            hd.append(0.0), sd.append(0.0), ed.append(0.0), zd.append(0.0)
            continue
        hd.append(_rel(dH - 4 * v.I / r, dH))
        h_slice = slice_integral(lambda X, Y, t: S.value(*shift(X, Y, t)) ** 2, S.w, S.n, -r * r, rule)
        sd.append(_rel(h_slice - v.H * (1 + (v.N or 0.0)), h_slice))

        def zz(X, Y, t):
            Xa, Ya, ta = shift(X, Y, t)
            z = z_derivative(S, X, Y, t, Xa, Ya, ta)
            out = z * z
            if S.has_source():
                out = out + 2 * np.abs(t) * z * S.source(Xa, Ya, ta)
            return out

        def uz(X, Y, t):
            Xa, Ya, ta = shift(X, Y, t)
            return S.value(Xa, Ya, ta) * z_derivative(S, X, Y, t, Xa, Ya, ta)

        rhs = strip_integral(zz, S.w, S.n, float(r), rule) / r
        ed.append(_rel(dD - rhs, dD if dD != 0 else rhs))
        I_z = 0.5 * strip_integral(uz, S.w, S.n, float(r), rule)
        zd.append(_rel(I_z - v.I, v.I if v.I != 0 else I_z))
    return VariationReport(radii, np.array(hd), np.array(sd), np.array(ed), np.array(zd))
