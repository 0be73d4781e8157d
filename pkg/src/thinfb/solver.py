"""Finite-volume solver for the weighted parabolic thin obstacle problem.

The bulk equation ``y^a U_t = div(y^a grad U) + y^a F`` is discretized on
a half grid ``y >= 0`` with backward Euler in time. Each cell carries its
exact weighted mass ``(1/h_y) int_cell y^a dy``; the fluxes use half-node
weights ``((y_j + y_{j+1}) / 2)^a``. The thin row ``j = 0`` couples to the
obstacle through a linear complementarity problem that is solved by
projected SOR.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numba
import numpy as np
import scipy.sparse as sp

from .kernels import DomainError, WeightParam


class NonConvergenceError(RuntimeError):
    """Projected SOR exceeded its iteration budget."""

    def __init__(self, msg: str, residual: float, step: int | None = None):
        super().__init__(msg)
        self.residual = residual
        self.step = step


# ---------------------------------------------------------------------------
# grid and field types


@dataclass(frozen=True)
class HalfGrid:
    """Tensor grid on ``[-R_x, R_x]^n x [0, R_y] x [-T, 0]``.

    Node counts are given directly; ``nx`` should be odd so that ``x = 0``
    is a node.
    """

    n: int
    nx: int
    ny: int
    nt: int
    R_x: float = 1.0
    R_y: float = 1.0
    T: float = 0.25

    def __post_init__(self):
        if self.n not in (1, 2):
            raise DomainError("only n in {1, 2} is supported")
        if min(self.nx, self.ny) < 3 or self.nt < 1:
            raise DomainError("need at least 3 nodes per spatial axis and one time step")
        if min(self.R_x, self.R_y, self.T) <= 0:
            raise DomainError("extents must be positive")

    @property
    def h_x(self) -> float:
        return 2.0 * self.R_x / (self.nx - 1)

    @property
    def h_y(self) -> float:
        return self.R_y / (self.ny - 1)

    @property
    def h_t(self) -> float:
        return self.T / self.nt

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.R_x, self.R_x, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.ny) * self.h_y

    @property
    def t(self) -> np.ndarray:
        return -self.T + np.arange(self.nt + 1) * self.h_t

    @property
    def shape(self) -> tuple:
        """Shape of one time slice ``(nx, [nx,] ny)``."""
        return (self.nx,) * self.n + (self.ny,)

    @property
    def thin_shape(self) -> tuple:
        return (self.nx,) * self.n

    def bulk_points(self):
        """``(X, Y)`` with ``X[..., i]`` the ``x_i`` coordinate of every node."""
        axes = [self.x] * self.n + [self.y]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh[:-1], axis=-1), mesh[-1]

    def thin_points(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.x] * self.n), indexing="ij")
        return np.stack(mesh, axis=-1)

    def origin_index(self) -> tuple:
        i0 = int(np.argmin(np.abs(self.x)))
        return (i0,) * self.n

    def refined(self, factor: int = 2, time_factor: Optional[int] = None) -> "HalfGrid":
        tf = factor if time_factor is None else time_factor
        return HalfGrid(self.n, (self.nx - 1) * factor + 1, (self.ny - 1) * factor + 1,
                        self.nt * tf, self.R_x, self.R_y, self.T)


@dataclass
class ScalarField:
    """Samples ``values[m, i(, k), j]`` of ``U`` at ``(x_i, y_j, t_m)``."""

    grid: HalfGrid
    w: WeightParam
    values: np.ndarray
    provenance: str = "solver"
    source: Optional[Callable] = None
    obstacle: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.nt + 1,) + self.grid.shape
        if self.values.shape != expected:
            raise DomainError(f"values have shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field values must be finite")

    @property
    def thin(self) -> np.ndarray:
        return self.values[..., 0]

    def scaled(self, c: float) -> "ScalarField":
        src = self.source
        scaled_src = None if src is None else (lambda x, y, t, _s=src: c * _s(x, y, t))
        obs = self.obstacle
        scaled_obs = None if obs is None else (lambda x, t, _o=obs: c * _o(x, t))
        return ScalarField(self.grid, self.w, c * self.values, self.provenance, scaled_src,
                           scaled_obs, dict(self.meta))


def sample_field(grid: HalfGrid, w: WeightParam, fn: Callable, provenance: str = "analytic",
                 source: Optional[Callable] = None, obstacle: Optional[Callable] = None) -> ScalarField:
    """Sample ``fn(x, y, t)`` at every node of ``grid``."""
    X, Y = grid.bulk_points()
    vals = np.stack([np.broadcast_to(fn(X, Y, tm), grid.shape) for tm in grid.t])
    return ScalarField(grid, w, vals, provenance, source, obstacle)


# ---------------------------------------------------------------------------
# configuration and problem


@dataclass(frozen=True)
class SolverConfig:
    psor_tol: float = 1e-10
    psor_max_iters: int = 20000
    omega: float = 1.5
    outer_bc: str = "zero-Dirichlet"
    contact_tol: float = 1e-8
    ordering: str = "lexicographic"

    def __post_init__(self):
        if not self.psor_tol > 0:
            raise DomainError("psor_tol must be positive")
        if not 0 < self.omega < 2:
            raise DomainError("relaxation omega must lie in (0, 2)")
        if self.psor_max_iters < 1:
            raise DomainError("psor_max_iters must be positive")
        if self.outer_bc not in ("zero-Dirichlet", "analytic-trace"):
            raise DomainError(f"unknown outer_bc {self.outer_bc!r}")
        if self.ordering not in ("lexicographic", "red-black"):
            raise DomainError(f"unknown ordering {self.ordering!r}")
        if not self.contact_tol > 0:
            raise DomainError("contact_tol must be positive")


@dataclass
class SignoriniProblem:
    """Data for one run. Callables take ``x`` with trailing axis ``n``.

    ``obstacle(x, t)`` is sampled on the thin space; ``None`` means no
    constraint. ``source(x, y, t)``, ``initial(x, y)`` and
    ``boundary(x, y, t)`` are bulk callables.
    """

    grid: HalfGrid
    w: WeightParam
    obstacle: Optional[Callable] = None
    source: Optional[Callable] = None
    initial: Optional[Callable] = None
    boundary: Optional[Callable] = None
    name: str = "custom"


# ---------------------------------------------------------------------------
# assembly


def cell_weights(grid: HalfGrid, w: WeightParam) -> np.ndarray:
    """``m_j = (1/h_y) int_{cell j} y^a dy``; the thin cell is ``[0, h_y/2]``."""
    a, h = w.af, grid.h_y
    y = grid.y
    lo = np.maximum(y - h / 2, 0.0)
    hi = y + h / 2
    return (hi ** (1 + a) - lo ** (1 + a)) / ((1 + a) * h)


def flux_weights(grid: HalfGrid, w: WeightParam) -> np.ndarray:
    """Half-node weights ``((y_j + y_{j+1}) / 2)^a``, length ``ny - 1``."""
    y = grid.y
    return (0.5 * (y[:-1] + y[1:])) ** w.af


@dataclass
class Operator:
    """Assembled stiffness ``K`` (symmetric), per-node mass and masks.

    The pointwise discrete operator is ``L U = -(K U) / mass``, an
    approximation of ``y^{-a} div(y^a grad U)``.
    """

    grid: HalfGrid
    w: WeightParam
    K: sp.csr_matrix
    mass: np.ndarray
    dirichlet: np.ndarray
    thin: np.ndarray

    def apply(self, U: np.ndarray) -> np.ndarray:
        flat = np.asarray(U, float).ravel()
        return (-(self.K @ flat) / self.mass).reshape(self.grid.shape)


def _tridiag(lower, diag, upper):
    return sp.diags([lower, diag, upper], [-1, 0, 1], format="csr")


def assemble_operator(grid: HalfGrid, w: WeightParam) -> Operator:
    """Conservative stencil of ``div(y^a grad .)`` with exact cell masses."""
    if not isinstance(w, WeightParam):
        w = WeightParam(w)
    nx, ny = grid.nx, grid.ny
    m = cell_weights(grid, w)
    wf = flux_weights(grid, w) / grid.h_y ** 2
    # 1-D pieces; boundary rows are Dirichlet and never used
    dx = _tridiag(-np.ones(nx - 1), 2.0 * np.ones(nx), -np.ones(nx - 1)) / grid.h_x ** 2
    diag_y = np.zeros(ny)
    diag_y[:-1] += wf
    diag_y[1:] += wf
    ky = _tridiag(-wf, diag_y, -wf)
    My = sp.diags(m)
    Ix = sp.identity(nx, format="csr")
    if grid.n == 1:
        K = sp.kron(dx, My) + sp.kron(Ix, ky)
        mass = np.broadcast_to(m, grid.shape).ravel()
    else:
        K = sp.kron(sp.kron(dx, Ix), My) + sp.kron(sp.kron(Ix, dx), My) + sp.kron(sp.kron(Ix, Ix), ky)
        mass = np.broadcast_to(m, grid.shape).ravel()
    K = sp.csr_matrix(K)
    K.sort_indices()
    dmask = np.zeros(grid.shape, dtype=bool)
    for ax in range(grid.n):
        idx = [slice(None)] * (grid.n + 1)
        idx[ax] = 0
        dmask[tuple(idx)] = True
        idx[ax] = -1
        dmask[tuple(idx)] = True
    dmask[..., -1] = True
    tmask = np.zeros(grid.shape, dtype=bool)
    tmask[..., 0] = True
    return Operator(grid, w, K, np.ascontiguousarray(mass, dtype=float), dmask.ravel(), tmask.ravel())


# ---------------------------------------------------------------------------
# projected SOR


@numba.njit(cache=True)
def _psor(indptr, indices, data, b, u, order, thin, psi, omega, tol, max_iters, h_y, scale):
    n_order = order.shape[0]
    last_update = 0.0
    comp = 0.0
    for it in range(1, max_iters + 1):
        last_update = 0.0
        for k in range(n_order):
            i = order[k]
            s = b[i]
            diag = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    diag = data[p]
                else:
                    s -= data[p] * u[j]
            new = u[i] + omega * (s / diag - u[i])
            if thin[i] and new < psi[i]:
                new = psi[i]
            d = abs(new - u[i])
            if d > last_update:
                last_update = d
            u[i] = new
        if last_update <= tol * scale:
            comp = 0.0
            for k in range(n_order):
                i = order[k]
                if not thin[i]:
                    continue
                r = -b[i]
                for p in range(indptr[i], indptr[i + 1]):
                    r += data[p] * u[indices[p]]
                lam = h_y * r
                g = u[i] - psi[i]
                v = abs(min(g, lam))
                if v > comp:
                    comp = v
            if comp <= tol * scale:
                return it, last_update, comp
    return -1, last_update, comp


def _sweep_order(grid: HalfGrid, dirichlet: np.ndarray, ordering: str) -> np.ndarray:
    free = np.flatnonzero(~dirichlet)
    if ordering == "lexicographic":
        return free.astype(np.int64)
    idx = np.indices(grid.shape).reshape(grid.n + 1, -1).sum(axis=0)
    parity = idx[free] % 2
    return np.concatenate([free[parity == 0], free[parity == 1]]).astype(np.int64)


class _Stepper:
    """Holds the system matrix for a fixed ``h_t`` and performs one step."""

    def __init__(self, grid: HalfGrid, w: WeightParam, cfg: SolverConfig, op: Optional[Operator] = None):
        self.grid, self.w, self.cfg = grid, w, cfg
        self.op = op or assemble_operator(grid, w)
        A = (self.op.K + sp.diags(self.op.mass / grid.h_t)).tocsr()
        A.sort_indices()
        self.A = A
        self.order = _sweep_order(grid, self.op.dirichlet, cfg.ordering)
        self.thin = self.op.thin & ~self.op.dirichlet

    def step(self, u_prev, F_slice, psi_slice, bc_slice=None, guess=None):
        g = self.grid
        mass = self.op.mass
        b = mass * (np.ravel(u_prev) / g.h_t)
        if F_slice is not None:
            b = b + mass * np.ravel(np.broadcast_to(F_slice, g.shape))
        u = np.array(np.ravel(u_prev if guess is None else guess), dtype=float)
        dm = self.op.dirichlet
        u[dm] = 0.0 if bc_slice is None else np.ravel(np.broadcast_to(bc_slice, g.shape))[dm]
        psi = np.full(u.size, -np.inf)
        if psi_slice is not None:
            psi_thin = np.broadcast_to(psi_slice, g.thin_shape)
            psi.reshape(g.shape)[..., 0] = psi_thin
        thin_free = self.thin
        u[thin_free] = np.maximum(u[thin_free], psi[thin_free])
        finite_psi = psi[np.isfinite(psi)]
        scale = max(1.0, float(np.max(np.abs(u))), float(np.max(np.abs(finite_psi))) if finite_psi.size else 0.0)
        its, upd, comp = _psor(self.A.indptr, self.A.indices, self.A.data, b, u, self.order,
                               thin_free, psi, self.cfg.omega, self.cfg.psor_tol,
                               self.cfg.psor_max_iters, g.h_y, scale)
        if its < 0:
            raise NonConvergenceError(
                f"projected SOR did not converge in {self.cfg.psor_max_iters} sweeps "
                f"(update {upd:.3e}, complementarity {comp:.3e})", max(upd, comp))
        return u.reshape(g.shape), its, comp


def step_implicit(grid: HalfGrid, w: WeightParam, u_prev, F_slice, psi_slice,
                  cfg: SolverConfig = SolverConfig(), bc_slice=None) -> np.ndarray:
    """One backward-Euler step with thin-space complementarity."""
    u, _, _ = _Stepper(grid, w, cfg).step(u_prev, F_slice, psi_slice, bc_slice)
    return u


def solve(problem: SignoriniProblem, cfg: SolverConfig = SolverConfig()) -> ScalarField:
    """Integrate from ``t = -T`` to ``0``; deterministic for a fixed config."""
    g, w = problem.grid, problem.w
    X, Y = g.bulk_points()
    Xt = g.thin_points()
    ts = g.t
    if problem.initial is not None:
        u0 = np.broadcast_to(problem.initial(X, Y), g.shape)
    elif problem.boundary is not None:
        u0 = np.broadcast_to(problem.boundary(X, Y, ts[0]), g.shape)
    else:
        u0 = np.zeros(g.shape)
    out = np.empty((g.nt + 1,) + g.shape)
    out[0] = u0
    stepper = _Stepper(g, w, cfg)
    iters, comps = [], []
    for m in range(1, g.nt + 1):
        tm = ts[m]
        F = None if problem.source is None else problem.source(X, Y, tm)
        psi = None if problem.obstacle is None else problem.obstacle(Xt, tm)
        bc = None
        if cfg.outer_bc == "analytic-trace":
            if problem.boundary is None:
                raise DomainError("analytic-trace boundary mode needs boundary data")
            bc = problem.boundary(X, Y, tm)
        try:
            out[m], its, comp = stepper.step(out[m - 1], F, psi, bc)
        except NonConvergenceError as exc:
            exc.step = m
            raise
        iters.append(its)
        comps.append(comp)
    meta = {"problem": problem.name, "psor_iters_total": int(sum(iters)),
            "psor_iters_max": int(max(iters)), "complementarity_max": float(max(comps))}
    return ScalarField(g, w, out, "solver", problem.source, problem.obstacle, meta)


# ---------------------------------------------------------------------------
# diagnostics


def _thin_balance(U: ScalarField, F: Optional[Callable]) -> np.ndarray:
    """``lambda = -d_y^a U`` on the thin space from the discrete cell balance."""
    g, w = U.grid, U.w
    m0 = cell_weights(g, w)[0]
    w_half = flux_weights(g, w)[0]
    V = U.values
    u0, u1 = V[..., 0], V[..., 1]
    ut = np.empty_like(u0)
    if g.nt >= 1:
        ut[1:] = (u0[1:] - u0[:-1]) / g.h_t
        ut[0] = ut[1]
    lap = np.zeros_like(u0)
    for ax in range(1, g.n + 1):
        lap += (np.roll(u0, -1, ax) - 2 * u0 + np.roll(u0, 1, ax)) / g.h_x ** 2
    f0 = np.zeros_like(u0)
    if F is not None:
        X, Y = g.bulk_points()
        f0 = np.stack([np.broadcast_to(F(X, Y, tm), g.shape)[..., 0] for tm in g.t])
    lam = g.h_y * m0 * (ut - lap - f0) - w_half * (u1 - u0) / g.h_y
    return lam


def _edge_mask(g: HalfGrid) -> np.ndarray:
    mask = np.zeros(g.thin_shape, dtype=bool)
    for ax in range(g.n):
        idx = [slice(None)] * g.n
        idx[ax] = 0
        mask[tuple(idx)] = True
        idx[ax] = -1
        mask[tuple(idx)] = True
    return mask


def weighted_normal_derivative(U: ScalarField, method: str = "one-sided",
                               F: Optional[Callable] = None) -> np.ndarray:
    """Estimate ``d_y^a U = lim y^a U_y`` on the thin space for every time slice.

    ``one-sided`` uses ``y_{1/2}^a (U_1 - U_0) / h_y``. ``extrapolated`` fits
    ``A + B y^{1-a} + C y^2`` through the first three nodes and returns
    ``(1 - a) B``. ``balance`` reads it off the discrete thin-cell balance,
    the quantity the solver's complementarity acts on; it needs the source
    ``F`` (taken from the field when omitted). Values on the lateral edge
    are unreliable for ``balance``.
    """
    g, w = U.grid, U.w
    V = U.values
    h, a = g.h_y, w.af
    if method == "one-sided":
        return flux_weights(g, w)[0] * (V[..., 1] - V[..., 0]) / h
    if method == "extrapolated":
        ys = np.array([0.0, h, 2 * h])
        M = np.stack([np.ones(3), ys ** (1 - a), ys ** 2], axis=1)
        coef = np.linalg.solve(M, np.stack([V[..., 0], V[..., 1], V[..., 2]], axis=-1)[..., None])
        return (1 - a) * coef[..., 1, 0]
    if method == "balance":
        return -_thin_balance(U, F if F is not None else U.source)
    raise DomainError(f"unknown method {method!r}")


@dataclass
class ResidualReport:
    interior_pde_residual: float
    complementarity_residual: float
    flux_sign_violation: float

    def passed(self, tol: float) -> bool:
        return max(self.interior_pde_residual, self.complementarity_residual,
                   self.flux_sign_violation) <= tol


def residual_check(U: ScalarField, F: Optional[Callable] = None, psi: Optional[Callable] = None) -> ResidualReport:
    """Max-norm residuals of the discrete equation and complementarity conditions.

    Lateral and top boundary nodes and the initial slice are excluded.
    """
    g, w = U.grid, U.w
    F = U.source if F is None else F
    psi = U.obstacle if psi is None else psi
    op = assemble_operator(g, w)
    X, Y = g.bulk_points()
    interior = ~op.dirichlet.reshape(g.shape)
    interior[..., 0] = False
    pde = 0.0
    for m in range(1, g.nt + 1):
        ut = (U.values[m] - U.values[m - 1]) / g.h_t
        r = ut - op.apply(U.values[m])
        if F is not None:
            r = r - np.broadcast_to(F(X, Y, g.t[m]), g.shape)
        if interior.any():
            pde = max(pde, float(np.max(np.abs(r[interior]))))
    lam = _thin_balance(U, F)[1:]
    edge = _edge_mask(g)
    gap = U.thin[1:].copy()
    if psi is not None:
        Xt = g.thin_points()
        gap = gap - np.stack([np.broadcast_to(psi(Xt, tm), g.thin_shape) for tm in g.t[1:]])
        comp = np.abs(np.minimum(gap, lam))
    else:
        comp = np.abs(lam)
    comp = float(np.max(comp[:, ~edge])) if comp.size else 0.0
    viol = float(np.max(np.maximum(-lam[:, ~edge], 0.0))) if lam.size else 0.0
    return ResidualReport(pde, comp, viol)


# ---------------------------------------------------------------------------
# snapshot I/O

MAGIC = b"THINFB1\n"
_HEADER = struct.Struct("<qd3d3dq")


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_snapshot(path: str, U: ScalarField, metadata: Optional[dict] = None) -> str:
    """Write the binary snapshot and a ``<path>.meta`` sidecar of ``key = value`` lines."""
    g = U.grid
    header = _HEADER.pack(g.n, U.w.af, g.h_x, g.h_y, g.h_t, g.R_x, g.R_y, g.T, g.nt + 1)
    body = np.ascontiguousarray(U.values, dtype="<f8").tobytes()
    _atomic_write(path, MAGIC + header + body)
    meta = {"provenance": U.provenance, **U.meta, **(metadata or {})}
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    _atomic_write(path + ".meta", ("\n".join(lines) + "\n").encode())
    return path


def _weight_from_float(a: float) -> WeightParam:
    fr = Fraction(a).limit_denominator(1000)
    return WeightParam(fr if float(fr) == a else a)


def read_snapshot(path: str) -> ScalarField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise DomainError(f"{path}: not a THINFB1 snapshot")
    n, a, hx, hy, ht, Rx, Ry, T, ns = _HEADER.unpack_from(raw, len(MAGIC))
    nx = int(round(2 * Rx / hx)) + 1
    ny = int(round(Ry / hy)) + 1
    grid = HalfGrid(int(n), nx, ny, int(ns) - 1, Rx, Ry, T)
    off = len(MAGIC) + _HEADER.size
    count = int(ns) * math.prod(grid.shape)
    vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape((int(ns),) + grid.shape)
    meta = {}
    if os.path.exists(path + ".meta"):
        with open(path + ".meta") as fh:
            for line in fh:
                k, sep, v = line.partition(" = ")
                if sep:
                    meta[k.strip()] = v.strip()
    return ScalarField(grid, _weight_from_float(a), vals.astype(float), "solver", meta=meta)
