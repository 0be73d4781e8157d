"""Polynomials in ``(x, y, t)`` with parabolic degree bookkeeping.

A term ``c * x^alpha * y^m * t^j`` has parabolic degree ``|alpha| + m + 2j``.
Coefficients are :class:`~fractions.Fraction` (exact mode) or ``float``;
with a rational weight exponent every operation here stays exact.
"""
from __future__ import annotations

import itertools
import re
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Number
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .kernels import DomainError, WeightParam

Key = Tuple[Tuple[int, ...], int, int]
_RATIONAL = re.compile(r"[+-]?\d+(/\d+)?")


def _is_exact(c) -> bool:
    return isinstance(c, (int, Fraction))


def _clean(c):
    if isinstance(c, int) and not isinstance(c, bool):
        return Fraction(c)
    return c


class ParabolicPolynomial:
    """Immutable sparse polynomial in ``x in R^n``, ``y`` and ``t``."""

    __slots__ = ("n", "terms")

    def __init__(self, n: int, terms: Optional[Dict[Key, object]] = None):
        self.n = int(n)
        clean: Dict[Key, object] = {}
        for (alpha, m, j), c in (terms or {}).items():
            alpha = tuple(int(v) for v in alpha)
            if len(alpha) != self.n:
                raise DomainError(f"multi-index {alpha} does not match n={self.n}")
            if min(alpha + (m, j), default=0) < 0:
                raise DomainError("negative exponent")
            if c != 0:
                clean[(alpha, int(m), int(j))] = _clean(c)
        self.terms = clean

    # construction ---------------------------------------------------------

    @classmethod
    def monomial(cls, n: int, alpha=None, m: int = 0, j: int = 0, coeff=1) -> "ParabolicPolynomial":
        alpha = tuple(alpha) if alpha is not None else (0,) * n
        return cls(n, {(alpha, m, j): coeff})

    @classmethod
    def constant(cls, n: int, c) -> "ParabolicPolynomial":
        return cls.monomial(n, coeff=c)

    @classmethod
    def zero(cls, n: int) -> "ParabolicPolynomial":
        return cls(n)

    @classmethod
    def x(cls, n: int, i: int) -> "ParabolicPolynomial":
        alpha = [0] * n
        alpha[i] = 1
        return cls.monomial(n, alpha)

    @classmethod
    def y(cls, n: int) -> "ParabolicPolynomial":
        return cls.monomial(n, m=1)

    @classmethod
    def t(cls, n: int) -> "ParabolicPolynomial":
        return cls.monomial(n, j=1)

    # basic properties -----------------------------------------------------

    @property
    def coefficient_mode(self) -> str:
        return "exact" if all(_is_exact(c) for c in self.terms.values()) else "float"

    @property
    def degree(self) -> int:
        """Maximal parabolic degree; ``-1`` for the zero polynomial."""
        return max((sum(a) + m + 2 * j for (a, m, j) in self.terms), default=-1)

    @property
    def homogeneous_degree(self) -> Optional[int]:
        degs = {sum(a) + m + 2 * j for (a, m, j) in self.terms}
        return degs.pop() if len(degs) == 1 else None

    def is_zero(self) -> bool:
        return not self.terms

    def is_even_in_y(self) -> bool:
        return all(m % 2 == 0 for (_, m, _) in self.terms)

    def depends_on_y(self) -> bool:
        return any(m for (_, m, _) in self.terms)

    def coefficient_scale(self) -> float:
        return max((abs(float(c)) for c in self.terms.values()), default=0.0)

    def to_float(self) -> "ParabolicPolynomial":
        return ParabolicPolynomial(self.n, {k: float(c) for k, c in self.terms.items()})

    # arithmetic -------------------------------------------------------------

    def _check(self, other: "ParabolicPolynomial"):
        if other.n != self.n:
            raise DomainError("polynomials live in different dimensions")

    def __add__(self, other):
        if isinstance(other, Number):
            other = ParabolicPolynomial.constant(self.n, other)
        self._check(other)
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, 0) + c
        return ParabolicPolynomial(self.n, out)

    __radd__ = __add__

    def __neg__(self):
        return ParabolicPolynomial(self.n, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Number):
            return ParabolicPolynomial(self.n, {k: c * other for k, c in self.terms.items()})
        self._check(other)
        out: Dict[Key, object] = {}
        for (a1, m1, j1), c1 in self.terms.items():
            for (a2, m2, j2), c2 in other.terms.items():
                k = (tuple(p + q for p, q in zip(a1, a2)), m1 + m2, j1 + j2)
                out[k] = out.get(k, 0) + c1 * c2
        return ParabolicPolynomial(self.n, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise DomainError("polynomial powers need a nonnegative integer exponent")
        out = ParabolicPolynomial.constant(self.n, 1)
        for _ in range(k):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, ParabolicPolynomial):
            return NotImplemented
        return self.n == other.n and self.terms == other.terms

    def __hash__(self):
        return hash((self.n, frozenset(self.terms.items())))

    def allclose(self, other: "ParabolicPolynomial", tol: float = 1e-12) -> bool:
        diff = self - other
        scale = max(self.coefficient_scale(), other.coefficient_scale(), 1e-300)
        return diff.coefficient_scale() <= tol * scale

    # calculus ----------------------------------------------------------------

    def dx(self, i: int, order: int = 1) -> "ParabolicPolynomial":
        out = {}
        for (a, m, j), c in self.terms.items():
            if a[i] < order:
                continue
            f = math.perm(a[i], order)
            na = list(a)
            na[i] -= order
            out[(tuple(na), m, j)] = c * f
        return ParabolicPolynomial(self.n, out)

    def dy(self, order: int = 1) -> "ParabolicPolynomial":
        return ParabolicPolynomial(
            self.n,
            {(a, m - order, j): c * math.perm(m, order) for (a, m, j), c in self.terms.items() if m >= order},
        )

    def dt(self, order: int = 1) -> "ParabolicPolynomial":
        return ParabolicPolynomial(
            self.n,
            {(a, m, j - order): c * math.perm(j, order) for (a, m, j), c in self.terms.items() if j >= order},
        )

    def laplacian_x(self) -> "ParabolicPolynomial":
        out = ParabolicPolynomial.zero(self.n)
        for i in range(self.n):
            out = out + self.dx(i, 2)
        return out

    def thin_trace(self) -> "ParabolicPolynomial":
        return ParabolicPolynomial(self.n, {k: c for k, c in self.terms.items() if k[1] == 0})

    def dilate(self, lam) -> "ParabolicPolynomial":
        """``p o delta_lam``: each term scales by ``lam`` to its parabolic degree."""
        return ParabolicPolynomial(
            self.n, {(a, m, j): c * lam ** (sum(a) + m + 2 * j) for (a, m, j), c in self.terms.items()}
        )

    def at_origin(self):
        return self.terms.get(((0,) * self.n, 0, 0), 0)

    # evaluation ----------------------------------------------------------------

    def __call__(self, x, y, t):
        """Evaluate at ``x`` (trailing axis ``n``), ``y``, ``t``; broadcasts."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DomainError(f"x must have trailing dimension {self.n}")
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], y.shape, t.shape)
        out = np.zeros(shape)
        for (a, m, j), c in self.terms.items():
            term = np.full(shape, float(c))
            for i, p in enumerate(a):
                if p:
                    term = term * x[..., i] ** p
            if m:
                term = term * y ** m
            if j:
                term = term * t ** j
            out = out + term
        return out

    # text form ------------------------------------------------------------------

    def _sorted_keys(self):
        return sorted(self.terms, key=lambda k: (sum(k[0]) + k[1] + 2 * k[2], k))

    def to_text(self) -> str:
        """One line per term: ``coeff * x1^a1 * ... * xn^an * y^m * t^j``."""
        keys = self._sorted_keys() or [((0,) * self.n, 0, 0)]
        lines = []
        for k in keys:
            c = self.terms.get(k, Fraction(0))
            a, m, j = k
            cs = str(c) if _is_exact(c) else repr(float(c))
            parts = [cs] + [f"x{i + 1}^{p}" for i, p in enumerate(a)] + [f"y^{m}", f"t^{j}"]
            lines.append(" * ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ParabolicPolynomial":
        terms: Dict[Key, object] = {}
        n = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split("*")]
            cs, factors = parts[0], parts[1:]
            coeff = Fraction(cs) if _RATIONAL.fullmatch(cs) else float(cs)
            alpha, m, j = [], 0, 0
            for f in factors:
                name, _, p = f.partition("^")
                p = int(p) if p else 1
                if name.startswith("x"):
                    alpha.append((int(name[1:]), p))
                elif name == "y":
                    m = p
                elif name == "t":
                    j = p
                else:
                    raise DomainError(f"unknown variable {name!r}")
            dim = max((i for i, _ in alpha), default=0)
            n = dim if n is None else n
            if dim != n:
                raise DomainError("inconsistent dimension across terms")
            a = [0] * n
            for i, p in alpha:
                a[i - 1] = p
            k = (tuple(a), m, j)
            terms[k] = terms.get(k, 0) + coeff
        if n is None:
            raise DomainError("empty polynomial text")
        return cls(n, terms)

    def __repr__(self):
        if not self.terms:
            return f"ParabolicPolynomial(n={self.n}, 0)"
        body = " + ".join(line.replace(" * ", "*") for line in self.to_text().splitlines())
        return f"ParabolicPolynomial(n={self.n}, {body})"


# ---------------------------------------------------------------------------
# operators


def heat_operator(p: ParabolicPolynomial) -> ParabolicPolynomial:
    """``(Delta_x - d/dt) p``."""
    return p.laplacian_x() - p.dt()


def caloric_extension(q: ParabolicPolynomial, w: WeightParam) -> ParabolicPolynomial:
    """The unique even-in-``y`` extension of ``q(x, t)`` annihilated by the extension operator.

    ``q~ = sum_k (-1)^k c_k (Delta_x - d_t)^k q * y^(2k)`` with
    ``c_k = prod_{i<=k} 1 / (2i (2i - 2s))``; the sum is finite.

    >>> from fractions import Fraction
    >>> q = ParabolicPolynomial.monomial(1, (2,))
    >>> caloric_extension(q, WeightParam(Fraction(0))).terms[((0,), 2, 0)]
    Fraction(-1, 1)
    """
    if q.depends_on_y():
        raise DomainError("caloric_extension expects a polynomial in (x, t) only")
    s = w.s
    out = ParabolicPolynomial.zero(q.n)
    cur = q
    ck = Fraction(1)
    k = 0
    y2 = ParabolicPolynomial.monomial(q.n, m=2)
    ypow = ParabolicPolynomial.constant(q.n, 1)
    while not cur.is_zero():
        out = out + cur * ypow * ((-1) ** k * ck)
        k += 1
        ck = ck / (2 * k * (2 * k - 2 * s))
        cur = heat_operator(cur)
        ypow = ypow * y2
    return out


def apply_La(p: ParabolicPolynomial, w: WeightParam) -> ParabolicPolynomial:
    """``(d_t - Delta_x - d_y^2 - (a/y) d_y) p`` as a polynomial; zero iff ``p`` is a-caloric."""
    if not p.is_even_in_y():
        raise DomainError("odd powers of y: (a/y) d_y p is not a polynomial")
    a = w.a
    bessel = ParabolicPolynomial(
        p.n, {(al, m - 2, j): c * (m * (m - 1 + a)) for (al, m, j), c in p.terms.items() if m >= 2}
    )
    return p.dt() - p.laplacian_x() - bessel


def z_apply(p: ParabolicPolynomial) -> ParabolicPolynomial:
    """``<X, grad p> + 2 t p_t``; multiplies each term by its parabolic degree."""
    return ParabolicPolynomial(p.n, {k: c * (sum(k[0]) + k[1] + 2 * k[2]) for k, c in p.terms.items()})


def parabolic_monomial_basis(n: int, kappa: int):
    """All ``x^alpha t^j`` with ``|alpha| + 2j = kappa``."""
    out = []
    for j in range(kappa // 2 + 1):
        deg = kappa - 2 * j
        for alpha in _multi_indices(n, deg):
            out.append(ParabolicPolynomial.monomial(n, alpha, 0, j))
    return out


def _multi_indices(n: int, deg: int):
    for combo in itertools.combinations_with_replacement(range(n), deg):
        a = [0] * n
        for i in combo:
            a[i] += 1
        yield tuple(a)


# ---------------------------------------------------------------------------
# membership and stratification


@dataclass
class MembershipReport:
    is_caloric: bool
    residual: ParabolicPolynomial
    is_even: bool
    thin_nonneg: bool
    worst_thin_value: float
    homogeneity: Optional[int]
    kappa: int
    in_P_kappa_plus: bool
    notes: list = field(default_factory=list)


def _parabolic_sphere_samples(n: int, resolution: int):
    rho = np.linspace(0.0, 1.0, resolution)
    if n == 1:
        x = np.concatenate([rho, -rho])[:, None]
        t = -(1 - np.concatenate([rho, rho]) ** 2)
        return x, t
    if n == 2:
        th = np.linspace(0.0, 2 * np.pi, resolution, endpoint=False)
        R, TH = np.meshgrid(rho, th, indexing="ij")
        x = np.stack([R * np.cos(TH), R * np.sin(TH)], axis=-1).reshape(-1, 2)
        return x, -(1 - R.ravel() ** 2)
    # higher n: random directions, deterministic seed
    rng = np.random.default_rng(0)
    d = rng.normal(size=(resolution * 50, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    R = np.repeat(rho, 50)[: len(d), None]
    return R * d, -(1 - R[:, 0] ** 2)


def validate_P_kappa_plus(p: ParabolicPolynomial, w: WeightParam, kappa: int, *,
                          resolution: int = 1000, nonneg_tol: float = 1e-12,
                          caloric_tol: float = 1e-10) -> MembershipReport:
    """Check the four defining conditions of the class of κ-homogeneous blowups.

    Nonnegativity of the thin trace is certified only numerically, by
    sampling the parabolic sphere ``|x|^2 + |t| = 1, t <= 0``; it suffices by
    homogeneity. Tolerances are relative to the largest coefficient.
    """
    notes = []
    scale = p.coefficient_scale() or 1.0
    even = p.is_even_in_y()
    if even:
        residual = apply_La(p, w)
        if residual.coefficient_mode == "exact" and p.coefficient_mode == "exact":
            caloric = residual.is_zero()
        else:
            caloric = residual.coefficient_scale() <= caloric_tol * scale
    else:
        residual = ParabolicPolynomial.zero(p.n)
        caloric = False
        notes.append("odd powers of y present")
    xs, ts = _parabolic_sphere_samples(p.n, resolution)
    vals = p.thin_trace()(xs, 0.0, ts)
    worst = float(vals.min()) if vals.size else 0.0
    nonneg = worst >= -nonneg_tol * scale
    homog = p.homogeneous_degree
    kappa_ok = kappa >= 2 and kappa % 2 == 0
    if not kappa_ok:
        notes.append(f"kappa={kappa} is not a positive even integer")
    if homog != kappa:
        notes.append(f"homogeneity {homog} differs from kappa={kappa}")
    member = bool(caloric and nonneg and even and kappa_ok and homog == kappa and not p.is_zero())
    return MembershipReport(caloric, residual, even, nonneg, worst, homog, kappa, member, notes)


def spatial_dimension(p: ParabolicPolynomial, kappa: int, n: Optional[int] = None, *,
                      rank_tol: float = 1e-9, reference_scale: float = 0.0) -> int:
    """Dimension of the common kernel of the constant vectors ``grad_x d_x^alpha d_t^j p``.

    Rows range over ``|alpha| + 2j = kappa - 1``. Singular values above
    ``rank_tol * max(sigma_max, reference_scale)`` count towards the rank;
    pass ``reference_scale`` for fitted polynomials whose rows may all be
    noise.
    """
    n = p.n if n is None else n
    if n != p.n:
        raise DomainError("dimension mismatch")
    if not p.is_zero() and p.homogeneous_degree != kappa:
        raise DomainError(f"polynomial is not parabolically {kappa}-homogeneous")
    rows = []
    for j in range(max(kappa - 1, -1) // 2 + 1):
        deg = kappa - 1 - 2 * j
        if deg < 0:
            continue
        for alpha in _multi_indices(n, deg):
            q = p.dt(j) if j else p
            for i, ai in enumerate(alpha):
                if ai:
                    q = q.dx(i, ai)
            rows.append([float(q.dx(i).at_origin()) for i in range(n)])
    if not rows:
        return n
    s = np.linalg.svd(np.asarray(rows, dtype=float), compute_uv=False)
    smax = float(s.max()) if s.size else 0.0
    thresh = rank_tol * max(smax, reference_scale)
    rank = int(np.sum(s > thresh)) if smax > 0.0 else 0
    return n - rank


def taylor_polynomial(psi, center=None, k: int = 2) -> ParabolicPolynomial:
    """Parabolic Taylor polynomial of degree ``k`` in local coordinates about ``center``.

    ``psi`` must expose ``psi.n`` and ``psi.derivative(alpha, j, x, t)``.
    The result is a polynomial in ``(x - x0, t - t0)``.
    """
    n = psi.n
    x0, t0 = (np.zeros(n), 0.0) if center is None else (np.asarray(center[0], float), float(center[1]))
    terms: Dict[Key, object] = {}
    for deg in range(k + 1):
        for j in range(deg // 2 + 1):
            for alpha in _multi_indices(n, deg - 2 * j):
                try:
                    d = psi.derivative(alpha, j, x0, t0)
                except (KeyError, NotImplementedError, AttributeError) as exc:
                    raise DomainError(f"obstacle lacks derivative alpha={alpha}, j={j}") from exc
                if d is None:
                    raise DomainError(f"obstacle lacks derivative alpha={alpha}, j={j}")
                denom = math.prod(math.factorial(v) for v in alpha) * math.factorial(j)
                if _is_exact(d):
                    terms[(alpha, 0, j)] = Fraction(d) / denom
                else:
                    terms[(alpha, 0, j)] = float(d) / denom
    return ParabolicPolynomial(n, terms)
