"""Reduction of a thin obstacle problem with obstacle ``psi`` to one with zero obstacle.

The obstacle is subtracted after removing the caloric extension of its
parabolic Taylor polynomial, and the result is localized with a product
cutoff ``zeta(X) = zeta1(|x|) zeta2(y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import sympy
from scipy.interpolate import RegularGridInterpolator

from .kernels import DomainError, WeightParam
from .polys import ParabolicPolynomial, caloric_extension, taylor_polynomial
from .solver import HalfGrid, ScalarField


# ---------------------------------------------------------------------------
# obstacles


class ObstacleSpec:
    """Obstacle ``psi(x, t)`` given as a sympy expression in ``x1..xn, t``.

    Derivatives are symbolic, then compiled with :func:`sympy.lambdify`.
    """

    def __init__(self, expr, n: int, ell: Optional[float] = None, name: str = "custom", M: Optional[float] = None):
        self.n = int(n)
        self.xs = sympy.symbols(" ".join(f"x{i + 1}" for i in range(self.n)), real=True)
        if self.n == 1:
            self.xs = (self.xs,) if not isinstance(self.xs, tuple) else self.xs
        self.t = sympy.Symbol("t", real=True)
        self.sympy_expr = sympy.sympify(expr, locals={str(s): s for s in (*self.xs, self.t)})
        extra = self.sympy_expr.free_symbols - set(self.xs) - {self.t}
        if extra:
            raise DomainError(f"obstacle depends on unknown symbols {sorted(map(str, extra))}")
        self.ell, self.name, self.M = ell, name, M
        self._fn = self._compile(self.sympy_expr)
        lap = sum(sympy.diff(self.sympy_expr, x, 2) for x in self.xs)
        self._heat = self._compile(lap - sympy.diff(self.sympy_expr, self.t))
        self._grad = [self._compile(sympy.diff(self.sympy_expr, x)) for x in self.xs]

    def _compile(self, e):
        f = sympy.lambdify((*self.xs, self.t), e, modules="numpy")

        def call(x, t):
            x = np.asarray(x, float)
            shape = x.shape[:-1]
            return np.broadcast_to(np.asarray(f(*[x[..., i] for i in range(self.n)], t), float), shape)

        return call

    def __call__(self, x, t):
        return self._fn(x, t)

    def heat(self, x, t):
        """``(Delta_x - d_t) psi``."""
        return self._heat(x, t)

    def grad(self, x, t):
        return np.stack([g(x, t) for g in self._grad], axis=-1)

    @lru_cache(maxsize=256)
    def _derivative_expr(self, alpha: tuple, j: int):
        e = self.sympy_expr
        for x, k in zip(self.xs, alpha):
            if k:
                e = sympy.diff(e, x, k)
        if j:
            e = sympy.diff(e, self.t, j)
        return e

    def derivative(self, alpha, j, x, t):
        """``d_x^alpha d_t^j psi`` at one point; exact for rational values."""
        e = self._derivative_expr(tuple(int(v) for v in alpha), int(j))
        subs = {s: sympy.nsimplify(float(v), rational=True) for s, v in zip(self.xs, np.atleast_1d(x))}
        subs[self.t] = sympy.nsimplify(float(t), rational=True)
        val = e.subs(subs)
        if val.is_Rational:
            return Fraction(int(val.p), int(val.q))
        val = complex(sympy.N(val, 30))
        if not math.isfinite(val.real) or val.imag != 0:
            raise DomainError(f"derivative {alpha}, {j} is not finite at the center")
        return val.real

    @classmethod
    def from_polynomial(cls, p: ParabolicPolynomial, name: str = "custom", ell: Optional[float] = None):
        if p.depends_on_y():
            raise DomainError("obstacles live on the thin space")
        n = p.n
        xs = sympy.symbols(" ".join(f"x{i + 1}" for i in range(n)), real=True)
        xs = (xs,) if n == 1 and not isinstance(xs, tuple) else xs
        t = sympy.Symbol("t", real=True)
        e = sympy.Integer(0)
        for (alpha, _, j), c in p.terms.items():
            coeff = sympy.Rational(c.numerator, c.denominator) if isinstance(c, Fraction) else sympy.Float(c)
            e += coeff * sympy.Mul(*[x ** k for x, k in zip(xs, alpha)]) * t ** j
        return cls(e, n, ell, name)

    def __repr__(self):
        return f"ObstacleSpec({self.sympy_expr}, n={self.n}, name={self.name!r})"


def obstacle_preset(name: str, n: int = 1, coefficients: Optional[str] = None) -> ObstacleSpec:
    """Registered obstacles: ``zero``, ``quadratic`` (``x1^2 + t``), ``sine`` (``sin x1``), ``custom``.

    ``custom`` takes a polynomial in the term-list text format, with ``;``
    or newlines between terms.
    """
    if name == "zero":
        return ObstacleSpec(0, n, None, name)
    if name == "quadratic":
        return ObstacleSpec("x1**2 + t", n, None, name)
    if name == "sine":
        return ObstacleSpec("sin(x1)", n, 4.0, name)
    if name == "custom":
        if not coefficients:
            raise DomainError("custom obstacle needs a coefficient list")
        try:
            p = ParabolicPolynomial.from_text(coefficients.replace(";", "\n"))
        except (ValueError, KeyError) as exc:
            raise DomainError(f"cannot parse obstacle coefficients {coefficients!r}: {exc}") from exc
        if p.n != n:
            p = ParabolicPolynomial(n, {(tuple(list(a) + [0] * (n - len(a))), m, j): c for (a, m, j), c in p.terms.items()})
        return ObstacleSpec.from_polynomial(p, name)
    raise DomainError(f"unknown obstacle preset {name!r}")


def taylor_order(ell: float) -> int:
    """``k`` paired with the regularity order ``ell = k + gamma``, ``gamma in (0, 1]``.

    >>> taylor_order(4.0), taylor_order(3.5)
    (3, 3)
    """
    if ell < 2:
        raise DomainError("regularity order must be at least 2")
    return math.ceil(ell) - 1 if float(ell).is_integer() else math.floor(ell)


# ---------------------------------------------------------------------------
# cutoff


def _smoothstep(u, profile: str):
    u = np.clip(u, 0.0, 1.0)
    if profile == "quintic":
        S = np.clip(u ** 3 * (10 - 15 * u + 6 * u * u), 0.0, 1.0)
        return S, 30 * u * u * (1 - u) ** 2, 60 * u * (1 - u) * (1 - 2 * u)
    if profile == "linear":
        inside = (u > 0) & (u < 1)
        return u, inside.astype(float), np.zeros_like(u)
    raise DomainError(f"unknown cutoff profile {profile!r}")


@dataclass(frozen=True)
class CutoffSpec:
    """``zeta = zeta1(|x|) zeta2(y)``; equal to one below ``inner`` and zero beyond ``outer``.

    ``y_variable="square"`` builds ``zeta2`` as a function of ``y^2``, which
    makes ``zeta_y = O(y)`` for any profile.
    """

    inner: float = 0.75
    outer: float = 1.0
    profile: str = "quintic"
    y_variable: str = "square"
    inner_y: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.inner < self.outer:
            raise DomainError("need 0 <= inner < outer")
        if self.y_variable not in ("square", "abs"):
            raise DomainError("y_variable must be 'square' or 'abs'")
        _smoothstep(np.zeros(1), self.profile)
        y = np.geomspace(1e-8, 1e-4, 5)
        ratio = np.abs(self.zeta2(y)[1]) / y
        if ratio[0] > 10 * ratio[-1] + 1e-6:
            raise DomainError("cutoff has zeta_y not O(y) at the thin space")

    @property
    def _iy(self) -> float:
        return self.inner if self.inner_y is None else self.inner_y

    def zeta1(self, rho):
        """Values, first and second derivative in ``rho = |x|``."""
        u = (np.asarray(rho, float) - self.inner) / (self.outer - self.inner)
        S, S1, S2 = _smoothstep(u, self.profile)
        d = 1.0 / (self.outer - self.inner)
        return 1 - S, -S1 * d, -S2 * d * d

    def zeta2(self, y):
        y = np.asarray(y, float)
        if self.y_variable == "square":
            lo, hi = self._iy ** 2, self.outer ** 2
            S, S1, S2 = _smoothstep((y * y - lo) / (hi - lo), self.profile)
            d = 1.0 / (hi - lo)
            # d/dy Z(y^2) = 2y Z', d2/dy2 = 2Z' + 4y^2 Z''
            return 1 - S, -2 * y * S1 * d, -(2 * S1 * d + 4 * y * y * S2 * d * d)
        S, S1, S2 = _smoothstep((np.abs(y) - self._iy) / (self.outer - self._iy), self.profile)
        d = 1.0 / (self.outer - self._iy)
        return 1 - S, -S1 * d * np.sign(y), -S2 * d * d

    def zeta2_over_y(self, y):
        """``zeta2'(y) / y``, finite at ``y = 0``."""
        y = np.asarray(y, float)
        if self.y_variable == "square":
            lo, hi = self._iy ** 2, self.outer ** 2
            _, S1, _ = _smoothstep((y * y - lo) / (hi - lo), self.profile)
            return -2 * S1 / (hi - lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.zeta2(y)[1] / np.where(y > 0, y, 1.0)
        return np.where(y > 0, out, 0.0)

    def evaluate(self, X, Y, w: WeightParam):
        """``(zeta, grad zeta, y^{-a} div(y^a grad zeta))`` at points ``(X, Y)``."""
        X = np.asarray(X, float)
        n = X.shape[-1]
        rho = np.sqrt(np.sum(X * X, axis=-1))
        z1, d1, dd1 = self.zeta1(rho)
        z2, d2, dd2 = self.zeta2(Y)
        safe = np.where(rho > 0, rho, 1.0)
        # d1 vanishes near rho = 0 because the profile is flat below inner
        unit = np.where(rho[..., None] > 0, X / safe[..., None], 0.0)
        grad = np.concatenate([(d1 * z2)[..., None] * unit, (z1 * d2)[..., None]], axis=-1)
        lap_x = dd1 + np.where(rho > 0, (n - 1) * d1 / safe, 0.0)
        L = lap_x * z2 + z1 * (dd2 + w.af * self.zeta2_over_y(Y))
        return z1 * z2, grad, L


# ---------------------------------------------------------------------------
# grid-backed source


class GridSource:
    """Source sampled on a grid; exact lookup on nodes, multilinear elsewhere."""

    def __init__(self, grid: HalfGrid, values: np.ndarray):
        self.grid = grid
        self.values = np.asarray(values, float)
        axes = [grid.t] + [grid.x] * grid.n + [grid.y]
        self._interp = RegularGridInterpolator(axes, self.values, bounds_error=False, fill_value=0.0)

    def __call__(self, X, Y, t):
        g = self.grid
        X = np.asarray(X, float)
        Y = np.asarray(Y, float)
        if np.ndim(t) == 0 and Y.shape == g.shape:
            m = int(round((float(t) + g.T) / g.h_t))
            if 0 <= m <= g.nt and abs(g.t[m] - float(t)) <= 1e-12 * max(1.0, g.T):
                Xg, Yg = g.bulk_points()
                if np.array_equal(X, Xg) and np.array_equal(Y, Yg):
                    return self.values[m]
        shape = np.broadcast_shapes(X.shape[:-1], Y.shape, np.shape(t))
        Xb = np.broadcast_to(X, shape + (g.n,))
        pts = np.concatenate([np.broadcast_to(t, shape)[..., None], Xb,
                              np.abs(np.broadcast_to(Y, shape))[..., None]], axis=-1)
        return self._interp(pts.reshape(-1, g.n + 2)).reshape(shape)


# ---------------------------------------------------------------------------
# reduction steps


def _sample_thin(psi: ObstacleSpec, grid: HalfGrid, fn=None) -> np.ndarray:
    fn = psi if fn is None else fn
    Xt = grid.thin_points()
    return np.stack([np.broadcast_to(fn(Xt, tm), grid.thin_shape) for tm in grid.t])


def _sample_bulk(fn: Optional[Callable], grid: HalfGrid) -> np.ndarray:
    shape = (grid.nt + 1,) + grid.shape
    if fn is None:
        return np.zeros(shape)
    X, Y = grid.bulk_points()
    return np.stack([np.broadcast_to(fn(X, Y, tm), grid.shape) for tm in grid.t])


def subtract_obstacle(U: ScalarField, psi: ObstacleSpec):
    """``W = U - psi`` (``psi`` extended constantly in ``y``) and its source ``F - (d_t - Delta_x) psi``."""
    if psi.n != U.grid.n:
        raise DomainError("obstacle dimension does not match the field")
    g = U.grid
    W = U.values - _sample_thin(psi, g)[..., None]
    F = U.source

    def Ftilde(X, Y, t, _F=F):
        base = psi.heat(X, t)
        if _F is not None:
            base = base + _F(X, Y, t)
        return np.broadcast_to(base, np.shape(Y))

    out = ScalarField(g, U.w, W, U.provenance, Ftilde, lambda x, t: np.zeros(np.shape(x)[:-1]),
                      {**U.meta, "obstacle_subtracted": psi.name})
    return out, Ftilde


@dataclass
class Reduction:
    V: ScalarField
    F_k: np.ndarray
    k: int
    ell: Optional[float]
    q_k: ParabolicPolynomial
    q_tilde: ParabolicPolynomial
    center: tuple
    meta: dict = field(default_factory=dict)


def _grid_gradient(V: np.ndarray, g: HalfGrid) -> list:
    grads = [np.gradient(V, g.h_x, axis=ax, edge_order=2) for ax in range(1, g.n + 1)]
    padded = np.concatenate([V[..., 1:2], V], axis=-1)
    grads.append(np.gradient(padded, g.h_y, axis=-1)[..., 1:])
    return grads


def globalize(U: ScalarField, psi: ObstacleSpec, k: Optional[int] = None, w: Optional[WeightParam] = None,
              cutoff: CutoffSpec = CutoffSpec(), center=None) -> Reduction:
    """Build ``V_k = zeta (U_k - psi_k)`` and its source ``F_k`` on the grid of ``U``.

    ``U_k = U - q~_k`` and ``psi_k = psi - q_k``, with ``q_k`` the parabolic
    Taylor polynomial of ``psi`` at ``center`` and ``q~_k`` its caloric
    extension. With ``W = U_k - psi_k`` the source is
    ``zeta (F + Delta psi_k - d_t psi_k) - W y^{-a} div(y^a grad zeta) - 2 <grad W, grad zeta>``.
    The cutoff is centred at ``x0``; time is not shifted.
    """
    g = U.grid
    w = U.w if w is None else w
    ell = psi.ell
    if k is None:
        if ell is None:
            raise DomainError("need k or a regularity order on the obstacle")
        k = taylor_order(ell)
    if k < 2:
        raise DomainError("Taylor order k must be at least 2")
    x0 = np.zeros(g.n) if center is None else np.broadcast_to(np.asarray(center[0], float), (g.n,))
    t0 = 0.0 if center is None else float(center[1])
    q = taylor_polynomial(psi, (x0, t0), k)
    qt = caloric_extension(q, w)
    qf, qtf = q.to_float(), qt.to_float()
    X, Y = g.bulk_points()
    Xl = X - x0
    ts = g.t - t0
    psi_thin = _sample_thin(psi, g)
    q_bulk = np.stack([np.broadcast_to(qtf(Xl, Y, tm), g.shape) for tm in ts])
    q_thin = np.stack([np.broadcast_to(qf(Xl[..., 0, :], 0.0, tm), g.thin_shape) for tm in ts])
    # W = U_k - psi_k = U - q~ - psi + q
    Wv = U.values - q_bulk - (psi_thin - q_thin)[..., None]
    zeta, gz, Lz = cutoff.evaluate(Xl, Y, w)
    V = zeta[None] * Wv
    # heat of psi_k: (Delta - d_t)(psi - q)
    heat_q = qf.laplacian_x() - qf.dt()
    heat_psi = _sample_thin(psi, g, psi.heat) - np.stack(
        [np.broadcast_to(heat_q(Xl[..., 0, :], 0.0, tm), g.thin_shape) for tm in ts])
    base = heat_psi[..., None] + _sample_bulk(U.source, g)
    grads = _grid_gradient(Wv, g)
    cross = sum(gr * gz[..., i][None] for i, gr in enumerate(grads))
    Fk = zeta[None] * base - Wv * Lz[None] - 2 * cross
    src = GridSource(g, Fk)
    Vf = ScalarField(g, w, V, "solver", src, lambda x, t: np.zeros(np.shape(x)[:-1]),
                     {**U.meta, "reduction_k": k, "reduction_ell": ell, "obstacle": psi.name})
    return Reduction(Vf, Fk, k, ell, q, qt, (tuple(x0.tolist()), t0),
                     {"k_rule": "k = ceil(ell) - 1 for integer ell, floor(ell) otherwise"})


@dataclass
class GrowthReport:
    ell: float
    M_value: float
    M_gradient: float
    M_time: float
    region: float
    excluded: float

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.M_value, self.M_gradient, self.M_time))

    def as_dict(self) -> dict:
        return {"ell": self.ell, "M_value": self.M_value, "M_gradient": self.M_gradient,
                "M_time": self.M_time, "region": self.region, "excluded": self.excluded}


def growth_bounds_check(F, grid: HalfGrid, ell: float, region: float = 0.5,
                        exclude_cells: float = 3.0) -> GrowthReport:
    """Measured constants in ``|F| <= M |(X,t)|^{l-2}``, ``|grad F| <= M |(X,t)|^{l-3}``, ``|F_t| <= M |(X,t)|^{l-4}``.

    ``F`` is a node array ``(nt+1, nx[, nx], ny)`` or a bulk callable.
    Derivatives are difference quotients. Sups run over nodes with
    ``|x_i|, y <= region``, ``t >= -region^2`` and parabolic distance to the
    origin at least ``exclude_cells`` grid cells.
    """
    g = grid
    Fv = F if isinstance(F, np.ndarray) else _sample_bulk(F, g)
    X, Y = g.bulk_points()
    dist = np.sqrt(np.sum(X * X, axis=-1)[None] + Y[None] ** 2 + np.abs(g.t)[(slice(None),) + (None,) * (g.n + 1)])
    sel = np.ones(Fv.shape, dtype=bool)
    sel &= (np.all(np.abs(X) <= region + 1e-12, axis=-1) & (Y <= region + 1e-12))[None]
    sel &= (g.t >= -region ** 2 - 1e-12)[(slice(None),) + (None,) * (g.n + 1)]
    excl = exclude_cells * max(g.h_x, g.h_y)
    sel &= dist >= excl
    grads = _grid_gradient(Fv, g)
    gnorm = np.sqrt(sum(gr * gr for gr in grads))
    Ft = np.gradient(Fv, g.h_t, axis=0, edge_order=2) if g.nt >= 2 else np.zeros_like(Fv)

    def sup(vals, power):
        if not sel.any():
            return 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(vals[sel]) / dist[sel] ** power
        return float(np.max(r)) if r.size else 0.0

    return GrowthReport(ell, sup(Fv, ell - 2), sup(gnorm, ell - 3), sup(Ft, ell - 4), region, excl)
