"""Potential solve on the fixed rectangle.

With psi = phi~ - z' the transformed problem reads

    -Lt psi = f   in Omega,   psi = 0 on the boundary,

where Lt is the pushed-forward anisotropic Laplacian eps² d_x² + d_z² and
f = Lt z'. Lt has non-constant coefficients in front of w_x'x', w_x'z',
w_z'z' and w_z'; no w_x' term appears.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.sparse import linalg as spla

from .core import (AdmissibilityError, Field2D, Grid, GridFunction1D, MembranePair,
                   Params, admissible_check, d2_dx2, d_dx)


class LinearSolveError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class TransformedOperator:
    """Coefficient fields of Lt on the full grid plus the interior matrix of -Lt."""

    grid: Grid
    c_xx: np.ndarray
    c_xz: np.ndarray
    c_zz: np.ndarray
    c_z: np.ndarray
    matrix: sparse.csc_matrix

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Discrete Lt w at interior nodes (array of shape (nx-2, nz-2))."""
        hx, hz = self.grid.hx, self.grid.hz
        c = (slice(1, -1), slice(1, -1))
        wxx = (w[2:, 1:-1] - 2 * w[1:-1, 1:-1] + w[:-2, 1:-1]) / hx**2
        wzz = (w[1:-1, 2:] - 2 * w[1:-1, 1:-1] + w[1:-1, :-2]) / hz**2
        wxz = (w[2:, 2:] - w[2:, :-2] - w[:-2, 2:] + w[:-2, :-2]) / (4 * hx * hz)
        wz = (w[1:-1, 2:] - w[1:-1, :-2]) / (2 * hz)
        return (self.c_xx[c] * wxx + self.c_xz[c] * wxz
                + self.c_zz[c] * wzz + self.c_z[c] * wz)


@dataclass(frozen=True)
class PotentialField:
    phi_tilde: Field2D
    psi: Field2D

    @property
    def grid(self) -> Grid:
        return self.phi_tilde.grid


@dataclass(frozen=True)
class TraceForcing:
    g1: GridFunction1D
    g2: GridFunction1D
    trace1: GridFunction1D
    trace0: GridFunction1D
    potential: PotentialField


def coefficient_fields(m: MembranePair, eps: float):
    """(c_xx, c_xz, c_zz, c_z) of Lt sampled on every grid node."""
    g = m.grid
    ux, vx = d_dx(m.u, g.hx), d_dx(m.v, g.hx)
    uxx, vxx = d2_dx2(m.u, g.hx), d2_dx2(m.v, g.hx)
    zp = g.z[None, :]
    gap = m.gap[:, None]
    slope = zp * (ux - vx)[:, None] + vx[:, None]
    e2 = eps * eps
    c_xx = np.full((g.nx, g.nz), e2)
    c_xz = -2.0 * e2 * slope / gap
    c_zz = (1.0 + e2 * slope**2) / gap**2
    c_z = e2 * (2.0 * (ux - vx)[:, None] / gap**2 * slope
                - (zp * (uxx - vxx)[:, None] + vxx[:, None]) / gap)
    return c_xx, c_xz, c_zz, c_z


@lru_cache(maxsize=16)
def _stencil_pattern(nx: int, nz: int):
    """Row/column indices of the nine-point stencil restricted to interior unknowns."""
    mi, mj = nx - 2, nz - 2
    ii, jj = np.meshgrid(np.arange(1, nx - 1), np.arange(1, nz - 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    rows = (ii - 1) * mj + (jj - 1)
    pattern = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ni, nj = ii + di, jj + dj
            keep = (ni >= 1) & (ni <= mi) & (nj >= 1) & (nj <= mj)
            cols = (ni - 1) * mj + (nj - 1)
            pattern.append((di, dj, keep, rows[keep], cols[keep]))
    return pattern


def _matrix(grid: Grid, c_xx, c_xz, c_zz, c_z) -> sparse.csc_matrix:
    hx, hz = grid.hx, grid.hz
    inner = (slice(1, -1), slice(1, -1))
    cxx, cxz, czz, cz = (c[inner].ravel() for c in (c_xx, c_xz, c_zz, c_z))
    # weights of -Lt for each neighbour offset
    weights = {
        (0, 0): 2 * cxx / hx**2 + 2 * czz / hz**2,
        (-1, 0): -cxx / hx**2,
        (1, 0): -cxx / hx**2,
        (0, 1): -czz / hz**2 - cz / (2 * hz),
        (0, -1): -czz / hz**2 + cz / (2 * hz),
        (1, 1): -cxz / (4 * hx * hz),
        (-1, -1): -cxz / (4 * hx * hz),
        (1, -1): cxz / (4 * hx * hz),
        (-1, 1): cxz / (4 * hx * hz),
    }
    rows, cols, data = [], [], []
    for di, dj, keep, r, c in _stencil_pattern(grid.nx, grid.nz):
        rows.append(r)
        cols.append(c)
        data.append(weights[(di, dj)][keep])
    n = (grid.nx - 2) * (grid.nz - 2)
    return sparse.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))


def _validate(m: MembranePair, p: Params, kappa, check_admissible):
    m.require_open_gap()
    if check_admissible:
        report = admissible_check(m, p, closure=True, kappa=kappa)
        if not report.in_S:
            raise AdmissibilityError(
                f"state outside S̄_q(κ): violated {', '.join(report.violated)}")


def assemble(m: MembranePair, p: Params, kappa: float | None = None,
             check_admissible: bool = True) -> TransformedOperator:
    _validate(m, p, kappa, check_admissible)
    coeffs = coefficient_fields(m, p.eps)
    return TransformedOperator(m.grid, *coeffs, matrix=_matrix(m.grid, *coeffs))


def source_term(m: MembranePair, p: Params, kappa: float | None = None,
                check_admissible: bool = True) -> Field2D:
    """f = Lt z'. The discrete operator applied to z' reduces to the w_z' coefficient."""
    _validate(m, p, kappa, check_admissible)
    return Field2D(coefficient_fields(m, p.eps)[3], m.grid)


def _backward_error(A, x, b) -> float:
    r = A @ x - b
    scale = spla.norm(A, np.inf) * np.max(np.abs(x), initial=0.0) + np.max(np.abs(b), initial=0.0)
    return float(np.max(np.abs(r), initial=0.0) / scale) if scale > 0 else 0.0


def solve_dirichlet(op: TransformedOperator, rhs: np.ndarray, tol: float = 1e-10,
                    backend: str = "direct") -> np.ndarray:
    """Solve -Lt w = rhs with w = 0 on the boundary; returns w on the full grid.

    ``rhs`` is given on the full grid; boundary entries are ignored. The
    accepted residual is normwise-relative, |Aw - b| / (|A| |w| + |b|).
    """
    g = op.grid
    b = np.asarray(rhs, dtype=float)[1:-1, 1:-1].ravel()
    A = op.matrix
    if backend == "direct":
        x = spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(b)
    elif backend == "bicgstab":
        ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.bicgstab(A, b, rtol=min(tol, 1e-12), atol=0.0, M=M, maxiter=2000)
        if info != 0:
            raise LinearSolveError("bicgstab did not converge", _backward_error(A, x, b))
    else:
        raise ValueError(f"unknown linear backend {backend!r}")
    res = _backward_error(A, x, b)
    if not np.all(np.isfinite(x)) or res > tol:
        raise LinearSolveError("linear solve failed", res)
    w = np.zeros((g.nx, g.nz))
    w[1:-1, 1:-1] = x.reshape(g.nx - 2, g.nz - 2)
    return w


def solve_potential(m: MembranePair, p: Params, kappa: float | None = None,
                    check_admissible: bool = True, backend: str = "direct") -> PotentialField:
    op = assemble(m, p, kappa, check_admissible)
    f = op.c_z
    psi = solve_dirichlet(op, f, p.linear_tol, backend)
    phi = psi + m.grid.z[None, :]
    # boundary rows carry the Dirichlet data exactly
    phi[0, :] = phi[-1, :] = m.grid.z
    phi[:, 0], phi[:, -1] = 0.0, 1.0
    return PotentialField(Field2D(phi, m.grid), Field2D(psi, m.grid))


def boundary_traces(phi: PotentialField):
    """d phi~/dz' at z'=1 and z'=0 by three-point one-sided differences."""
    w, g = phi.phi_tilde.values, phi.grid
    t1 = (3 * w[:, -1] - 4 * w[:, -2] + w[:, -3]) / (2 * g.hz)
    t0 = (-3 * w[:, 0] + 4 * w[:, 1] - w[:, 2]) / (2 * g.hz)
    return GridFunction1D(t1, g, "trace"), GridFunction1D(t0, g, "trace")


def trace_forcing(m: MembranePair, p: Params, phi: PotentialField | None = None,
                  **solve_kw) -> TraceForcing:
    """Squared field strength on each membrane, (g1, g2)."""
    if phi is None:
        phi = solve_potential(m, p, **solve_kw)
    t1, t0 = boundary_traces(phi)
    g = m.grid
    e2 = p.eps**2
    gap2 = m.gap**2
    g1 = (1 + e2 * d_dx(m.u, g.hx) ** 2) / gap2 * t1.values**2
    g2 = (1 + e2 * d_dx(m.v, g.hx) ** 2) / gap2 * t0.values**2
    return TraceForcing(GridFunction1D(g1, g, "forcing"), GridFunction1D(g2, g, "forcing"),
                        t1, t0, phi)


@dataclass(frozen=True)
class BarrierReport:
    stationary_lower: float
    stationary_upper: float
    power_lower: float
    power_upper: float
    n: int | None
    slack: float

    @property
    def power_applicable(self) -> bool:
        return self.n is not None

    @property
    def passed(self) -> bool:
        margins = [self.stationary_lower, self.stationary_upper]
        if self.power_applicable:
            margins += [self.power_lower, self.power_upper]
        return min(margins) >= -self.slack


def barrier_exponent(m: MembranePair, cap: int = 64) -> int | None:
    """Smallest even n with v <= -x^n and u >= x^n - 1 at all nodes, or None."""
    x = m.grid.x
    for n in range(2, cap + 1, 2):
        xn = x**n
        if np.all(m.v <= -xn) and np.all(m.u >= xn - 1.0):
            return n
    return None


def barrier_check(m: MembranePair, p: Params, phi: PotentialField | None = None,
                  n: int | None = None) -> BarrierReport:
    """Margins of the potential against the linear and power-law barriers.

    Margins are min(phi - lower) and min(upper - phi) over all nodes,
    evaluated in physical height z = v + z'(u - v).
    """
    if phi is None:
        phi = solve_potential(m, p, check_admissible=False)
    g = m.grid
    w = phi.phi_tilde.values
    gap = m.gap[:, None]
    zp = g.z[None, :]
    z = m.v[:, None] + zp * gap
    st_lo = float(np.min(w - zp * gap))
    st_hi = float(np.min(1.0 - (1.0 - zp) * gap - w))
    if n is None:
        n = barrier_exponent(m)
    if n is not None:
        xn = (g.x**n)[:, None]
        pw_lo = float(np.min(w - (xn + z)))
        pw_hi = float(np.min((2.0 + z - xn) - w))
    else:
        pw_lo = pw_hi = 0.0
    return BarrierReport(st_lo, st_hi, pw_lo, pw_hi, n, 10.0 * max(g.hx, g.hz) ** 2)


def gradient_energy(phi: PotentialField, m: MembranePair, p: Params) -> float:
    """Integral of |grad_eps phi|² over Omega_{u,v}, evaluated on the fixed rectangle."""
    g = m.grid
    w = phi.phi_tilde.values
    wx = np.gradient(w, g.hx, axis=0, edge_order=2)
    wz = np.gradient(w, g.hz, axis=1, edge_order=2)
    ux, vx = d_dx(m.u, g.hx), d_dx(m.v, g.hx)
    gap = m.gap[:, None]
    slope = (g.z[None, :] * (ux - vx)[:, None] + vx[:, None]) / gap
    integrand = (p.eps**2 * (wx - slope * wz) ** 2 + wz**2 / gap**2) * gap
    return float(trapezoid(trapezoid(integrand, g.z, axis=1), g.x))
