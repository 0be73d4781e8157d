r"""Bessel function, Bessel heat kernel and the Neumann fundamental solution.

All kernels are evaluated in log space and exponentiated once, since the
raw product ``z**nu * I_nu(z) * exp(-(y**2 + eta**2) / (4 t))`` overflows
long before the kernel itself does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np
from scipy import special

Real = Union[float, Fraction]


class DomainError(ValueError):
    """Input outside the domain of an operation."""


@dataclass(frozen=True)
class WeightParam:
    """The weight exponent ``a`` of ``|y|**a`` and its fractional order ``s``.

    ``a`` may be a :class:`fractions.Fraction`, in which case ``s`` is exact
    too and polynomial arithmetic stays rational.
    """

    a: Real

    def __post_init__(self):
        a = self.a
        if isinstance(a, int):
            object.__setattr__(self, "a", Fraction(a))
            a = self.a
        if not math.isfinite(float(a)) or not (-1 < a < 1):
            raise DomainError(f"weight exponent a={a!r} must lie in (-1, 1)")

    @classmethod
    def from_s(cls, s: Real) -> "WeightParam":
        return cls(1 - 2 * s)

    @property
    def s(self) -> Real:
        return (1 - self.a) / 2

    @property
    def af(self) -> float:
        return float(self.a)


@dataclass(frozen=True)
class KernelEvalPolicy:
    series_terms_max: int = 400
    series_asymptotic_crossover: float = 30.0
    abs_tol: float = 1e-14

    def __post_init__(self):
        if self.series_terms_max < 20:
            raise DomainError("series_terms_max must be >= 20")
        if not self.abs_tol > 0:
            raise DomainError("abs_tol must be positive")


DEFAULT_POLICY = KernelEvalPolicy()


def _check_finite(*vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite input")


def _log_bessel_series(nu: float, z: np.ndarray, policy: KernelEvalPolicy) -> np.ndarray:
    # log of sum_k (z/2)^(nu+2k) / (k! Gamma(k+nu+1)); all terms positive for nu > -1
    lz = np.log(z) - math.log(2.0)
    log_first = nu * lz - special.gammaln(nu + 1.0)
    acc = np.ones_like(z)
    log_term = np.zeros_like(z)
    for k in range(1, policy.series_terms_max):
        log_term = log_term + 2.0 * lz - math.log(k) - math.log(k + nu)
        term = np.exp(log_term)
        acc = acc + term
        if np.all(term <= policy.abs_tol * 1e-3 * acc):
            break
    return log_first + np.log(acc)


def _log_bessel_asymptotic(nu: float, z: np.ndarray, policy: KernelEvalPolicy) -> np.ndarray:
    # I_nu(z) ~ e^z / sqrt(2 pi z) * sum_k (-1)^k a_k(nu) / z^k
    mu = 4.0 * nu * nu
    acc = np.ones_like(z)
    term = np.ones_like(z)
    prev = np.full_like(z, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for k in range(1, policy.series_terms_max):
        term = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * z)
        # stop each entry at its smallest term (the series is divergent)
        active &= np.abs(term) < prev
        acc = np.where(active, acc + term, acc)
        prev = np.where(active, np.abs(term), prev)
        if not np.any(active & (np.abs(term) > policy.abs_tol * 1e-3)):
            break
    return z - 0.5 * np.log(2.0 * np.pi * z) + np.log(acc)


def log_bessel_i(nu: float, z, policy: KernelEvalPolicy = DEFAULT_POLICY):
    """Natural log of ``I_nu(z)`` for ``z > 0`` (``-inf``/``0``/``inf`` at ``z = 0``)."""
    nu = float(nu)
    if not nu > -1:
        raise DomainError(f"order nu={nu} must exceed -1")
    z = np.asarray(z, dtype=float)
    _check_finite(z)
    if np.any(z < 0):
        raise DomainError("argument z must be nonnegative")
    out = np.empty_like(z)
    zero = z == 0
    big = z > policy.series_asymptotic_crossover
    small = ~zero & ~big
    if nu > 0:
        out[zero] = -np.inf
    elif nu == 0:
        out[zero] = 0.0
    else:
        out[zero] = np.inf
    if np.any(small):
        out[small] = _log_bessel_series(nu, z[small], policy)
    if np.any(big):
        out[big] = _log_bessel_asymptotic(nu, z[big], policy)
    return out if out.ndim else float(out)


def bessel_i(nu: float, z, policy: KernelEvalPolicy = DEFAULT_POLICY):
    """Modified Bessel function of the first kind ``I_nu(z)`` for real ``z >= 0``.

    Power series below ``policy.series_asymptotic_crossover`` and the
    large-argument Hankel expansion above it.

    Examples
    --------
    >>> round(bessel_i(0.5, 2.0), 7)
    2.0462369
    """
    return np.exp(log_bessel_i(nu, z, policy))


def _log_heat_kernel_at_zero(a: float, y, t):
    return -a * math.log(2.0) - special.gammaln((a + 1) / 2) - 0.5 * (a + 1) * np.log(t) - y * y / (4 * t)


def log_heat_kernel_1d(w: WeightParam, y, eta, t, policy: KernelEvalPolicy = DEFAULT_POLICY):
    """Log of the Bessel heat kernel; ``-inf`` for ``t <= 0``."""
    a = w.af
    y, eta, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, eta, t)))
    _check_finite(y, eta, t)
    if np.any(y < 0) or np.any(eta < 0):
        raise DomainError("y and eta must be nonnegative")
    out = np.full(y.shape, -np.inf)
    live = t > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        # an underflowing product is treated like a point on the thin space
        at_zero = live & (y * eta / np.where(live, 2 * t, 1.0) == 0)
    if np.any(at_zero):
        other = np.maximum(y[at_zero], eta[at_zero])
        out[at_zero] = _log_heat_kernel_at_zero(a, other, t[at_zero])
    gen = live & ~at_zero
    if np.any(gen):
        yy, ee, tt = y[gen], eta[gen], t[gen]
        z = yy * ee / (2 * tt)
        nu = (a - 1) / 2
        # z - (y^2+eta^2)/(4t) = -(y-eta)^2/(4t); keeps the exponent O(1)
        log_scaled_i = log_bessel_i(nu, z, policy) - z
        out[gen] = (
            -0.5 * (a + 1) * np.log(2 * tt)
            + 0.5 * (1 - a) * np.log(z)
            + log_scaled_i
            - (yy - ee) ** 2 / (4 * tt)
        )
    return out if out.ndim else float(out)


def heat_kernel_1d(w: WeightParam, y, eta, t, policy: KernelEvalPolicy = DEFAULT_POLICY):
    """Bessel heat kernel ``p^(a)(y, eta, t)``, reflected at ``y = 0``.

    Identically zero for ``t <= 0``. When ``y`` or ``eta`` vanishes the
    closed Gaussian form is used instead of the Bessel limit.
    """
    return np.exp(log_heat_kernel_1d(w, y, eta, t, policy))


def euclidean_heat_kernel(x, xi, t):
    """Standard heat kernel on ``R^n``; ``x``, ``xi`` have trailing axis ``n``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(t, dtype=float)
    n = x.shape[-1]
    d2 = np.sum((x - xi) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (4 * np.pi * t) ** (-n / 2) * np.exp(-d2 / (4 * t))
    return np.where(t > 0, val, 0.0)


def log_neumann_fundamental(w: WeightParam, n: int, X, t):
    """Log of the forward kernel with pole at the origin, ``t > 0``."""
    a = w.af
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    if X.shape[-1] != n + 1:
        raise DomainError(f"point must have {n + 1} coordinates")
    r2 = np.sum(X * X, axis=-1)
    return (
        -0.5 * n * math.log(4 * math.pi)
        - a * math.log(2.0)
        - special.gammaln((a + 1) / 2)
        - 0.5 * (n + a + 1) * np.log(t)
        - r2 / (4 * t)
    )


def neumann_fundamental(w: WeightParam, n: int, X, t, backward: bool = False):
    """Neumann fundamental solution of the extension operator, pole at the origin.

    With ``backward=True`` this is the backward kernel, defined for ``t < 0``
    as the forward kernel at ``|t|``.
    """
    t = np.asarray(t, dtype=float)
    X = np.asarray(X, dtype=float)
    _check_finite(X, t)
    if np.any(X[..., -1] < 0):
        raise DomainError("the extension coordinate y must be nonnegative")
    if backward:
        if np.any(t >= 0):
            raise DomainError("backward kernel requires t < 0")
        t = -t
    elif np.any(t <= 0):
        raise DomainError("forward kernel requires t > 0")
    val = np.exp(log_neumann_fundamental(w, n, X, t))
    return val if val.ndim else float(val)


# ---------------------------------------------------------------------------
# self-tests


@dataclass
class CheckResult:
    name: str
    value: float
    expected: float
    defect: float
    tol: float
    nodes: int
    converged: bool

    @property
    def passed(self) -> bool:
        return self.converged and self.defect < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        conv = "" if self.converged else " (quadrature not converged)"
        return (
            f"{status} {self.name}: value={self.value:.12g} expected={self.expected:.12g} "
            f"defect={self.defect:.3e} tol={self.tol:.1e} nodes={self.nodes}{conv}"
        )


@dataclass
class SelftestReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list:
        return [c.line() for c in self.checks]


def _refine(evaluate, tol: float, nodes_max: int, nodes_start: int = 16):
    """Double the node count until successive values agree to ``tol / 10``."""
    n = min(nodes_start, nodes_max)
    prev = evaluate(n)
    while 2 * n <= nodes_max:
        n *= 2
        cur = evaluate(n)
        if abs(cur - prev) < tol / 10:
            return cur, n, True
        prev = cur
    return prev, n, False


def _laguerre_log_nodes(n: int, alpha: float):
    v, wts = special.roots_genlaguerre(n, alpha)
    with np.errstate(divide="ignore"):
        return v, np.log(wts)


def mass_integral(w: WeightParam, y: float, t: float, nodes: int, policy=DEFAULT_POLICY) -> float:
    """``int_0^inf p^(a)(y, eta, t) eta^a d eta`` by generalized Gauss-Laguerre in ``eta**2``."""
    a = w.af
    v, lw = _laguerre_log_nodes(nodes, (a - 1) / 2)
    eta = 2 * math.sqrt(t) * np.sqrt(v)
    lp = log_heat_kernel_1d(w, y, eta, t, policy)
    return 0.5 * (2 * math.sqrt(t)) ** (a + 1) * float(np.sum(np.exp(lp + v + lw)))


def semigroup_integral(w: WeightParam, y: float, eta: float, s: float, t: float, nodes: int,
                       policy=DEFAULT_POLICY) -> float:
    """``int_0^inf p(y, z, t) p(z, eta, s) z^a dz``."""
    a = w.af
    tau = t * s / (t + s)
    v, lw = _laguerre_log_nodes(nodes, (a - 1) / 2)
    zeta = 2 * math.sqrt(tau) * np.sqrt(v)
    lp = log_heat_kernel_1d(w, y, zeta, t, policy) + log_heat_kernel_1d(w, zeta, eta, s, policy)
    return 0.5 * (2 * math.sqrt(tau)) ** (a + 1) * float(np.sum(np.exp(lp + v + lw)))


def slice_mass(w: WeightParam, n: int, t: float, nodes: int) -> float:
    """``int_{R^{n+1}_+} G_a(X, t) y^a dX`` for ``t > 0`` by tensor quadrature."""
    a = w.af
    u, hw = special.roots_hermite(nodes)
    v, lw = _laguerre_log_nodes(nodes, (a - 1) / 2)
    with np.errstate(divide="ignore"):
        lhw = np.log(hw)
    sc = 2 * math.sqrt(t)
    grids = np.meshgrid(*([u] * n), v, indexing="ij")
    lgrid = np.meshgrid(*([lhw] * n), lw, indexing="ij")
    xs = [sc * g for g in grids[:n]]
    yv = sc * np.sqrt(grids[n])
    X = np.stack(xs + [yv], axis=-1)
    lg = log_neumann_fundamental(w, n, X, t)
    expo = lg + sum(g * g for g in grids[:n]) + grids[n] + sum(lgrid)
    jac = sc ** n * 0.5 * sc ** (a + 1)
    return jac * float(np.sum(np.exp(expo)))


def strip_mass(w: WeightParam, n: int, r: float, nodes: int, time_nodes: int = 8) -> float:
    """``r**-2`` times the integral of the backward kernel over the strip of radius ``r``."""
    s, sw = special.roots_legendre(time_nodes)
    s = 0.5 * (s + 1)
    sw = 0.5 * sw
    # t = -r^2 s^2, (1/r^2) dt = 2 s ds
    total = 0.0
    for sk, wk in zip(s, sw):
        total += wk * 2 * sk * slice_mass(w, n, (r * sk) ** 2, nodes)
    return total


def kernel_selftest(w: WeightParam, n: int = 1, tol: float = 1e-4, *, y: float = 1.0,
                    t_mass: float = 1.0, sg_y: float = 0.5, sg_eta: float = 1.5,
                    sg_s: float = 0.3, sg_t: float = 0.7, r: float = 0.5,
                    nodes_max: int = 256, tol_semigroup: float | None = None,
                    policy: KernelEvalPolicy = DEFAULT_POLICY) -> SelftestReport:
    """Quadrature defects of the mass, Chapman-Kolmogorov and strip-mass identities.

    Each quadrature doubles its node count until two successive values agree
    to ``tol / 10``; a check whose quadrature never settles below
    ``nodes_max`` is reported as failed.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    tol_sg = tol if tol_semigroup is None else tol_semigroup
    report = SelftestReport()

    val, nodes, ok = _refine(lambda k: mass_integral(w, y, t_mass, k, policy), tol, nodes_max)
    report.checks.append(CheckResult("mass", val, 1.0, abs(val - 1.0), tol, nodes, ok))

    exact = float(heat_kernel_1d(w, sg_y, sg_eta, sg_s + sg_t, policy))
    val, nodes, ok = _refine(
        lambda k: semigroup_integral(w, sg_y, sg_eta, sg_s, sg_t, k, policy) / exact, tol_sg, nodes_max
    )
    report.checks.append(CheckResult("semigroup", val * exact, exact, abs(val - 1.0), tol_sg, nodes, ok))

    nodes_strip = min(nodes_max, 64 if n == 1 else 24)
    val, nodes, ok = _refine(lambda k: strip_mass(w, n, r, k), tol, nodes_strip, nodes_start=4)
    report.checks.append(CheckResult("strip_mass", val, 1.0, abs(val - 1.0), tol, nodes, ok))
    return report
