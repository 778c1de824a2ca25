"""Grids, membrane states, discrete norms and the moving-domain coordinate map.

The physical domain between the membranes is

    Omega_{u,v} = {(x, z) : -1 < x < 1, v(x) < z < u(x)}

and every field is carried on the fixed rectangle Omega = [-1, 1] x [0, 1]
through the map T(x, z) = (x, (z - v) / (u - v)).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid


class DomainCollapsedError(ValueError):
    """Raised when the gap u - v is not strictly positive somewhere."""


class AdmissibilityError(ValueError):
    """Raised when a state is outside the closed admissible set."""


@dataclass(frozen=True)
class Grid:
    nx: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 9 or n % 2 == 0:
                raise ValueError(f"{name} must be odd ≥ 9, got {n}")

    @property
    def hx(self) -> float:
        return 2.0 / (self.nx - 1)

    @property
    def hz(self) -> float:
        return 1.0 / (self.nz - 1)

    @cached_property
    def x(self) -> np.ndarray:
        x = -1.0 + self.hx * np.arange(self.nx)
        # exact end points and an exact zero at the centre node
        x[0], x[-1], x[self.nx // 2] = -1.0, 1.0, 0.0
        x[self.nx // 2 + 1:] = -x[self.nx // 2 - 1::-1]
        x.setflags(write=False)
        return x

    @cached_property
    def z(self) -> np.ndarray:
        z = self.hz * np.arange(self.nz)
        z[-1] = 1.0
        z.setflags(write=False)
        return z


def make_grid(nx: int, nz: int) -> Grid:
    return Grid(nx, nz)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def d_dx(f: np.ndarray, h: float) -> np.ndarray:
    """Central first difference, second-order one-sided at the ends."""
    return np.gradient(f, h, edge_order=2)


def d2_dx2(f: np.ndarray, h: float) -> np.ndarray:
    """Second difference; four-point second-order one-sided formula at the ends."""
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h**2
    out[-1] = (2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / h**2
    return out


@dataclass(frozen=True)
class GridFunction1D:
    values: np.ndarray
    grid: Grid
    role: str = "displacement"

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.nx,):
            raise ValueError(f"expected {self.grid.nx} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function has non-finite values")
        if self.role not in ("displacement", "forcing", "residual", "trace"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Field2D:
    """Values on the fixed rectangle, indexed [i, j] for (x_i, z'_j)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.nx, self.grid.nz):
            raise ValueError(f"expected shape {(self.grid.nx, self.grid.nz)}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field has non-finite values")
        object.__setattr__(self, "values", vals)

    def mirrored(self) -> "Field2D":
        return Field2D(self.values[::-1, :], self.grid)


@dataclass(frozen=True)
class MembranePair:
    """Membrane displacements u (upper) and v (lower) on the x-grid.

    Boundary nodes are pinned to u(±1) = 0 and v(±1) = -1 unless
    ``pinned=False``, which unit tests use for x-independent states.
    """

    grid: Grid
    u: np.ndarray
    v: np.ndarray
    pinned: bool = True

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.shape != (self.grid.nx,) or v.shape != (self.grid.nx,):
            raise ValueError("u and v must have one value per x node")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("membrane displacements must be finite")
        if self.pinned:
            u[0] = u[-1] = 0.0
            v[0] = v[-1] = -1.0
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))

    @classmethod
    def flat(cls, grid: Grid) -> "MembranePair":
        return cls(grid, np.zeros(grid.nx), -np.ones(grid.nx))

    @classmethod
    def parabolic(cls, grid: Grid, a: float, b: float | None = None) -> "MembranePair":
        """u = -a (1 - x²), v = -1 + b (1 - x²); b defaults to a."""
        b = a if b is None else b
        bump = 1.0 - grid.x**2
        return cls(grid, -a * bump, -1.0 + b * bump)

    @classmethod
    def from_vhat(cls, grid: Grid, u, vhat, pinned: bool = True) -> "MembranePair":
        return cls(grid, u, np.asarray(vhat, dtype=float) - 1.0, pinned=pinned)

    @property
    def vhat(self) -> np.ndarray:
        return self.v + 1.0

    @property
    def gap(self) -> np.ndarray:
        return self.u - self.v

    @property
    def min_gap(self) -> float:
        return float(np.min(self.gap))

    def mirrored(self) -> "MembranePair":
        return MembranePair(self.grid, self.u[::-1], self.v[::-1], pinned=self.pinned)

    def mirror_mismatch(self) -> float:
        return float(max(np.max(np.abs(self.u - self.u[::-1])),
                         np.max(np.abs(self.v - self.v[::-1]))))

    def require_open_gap(self):
        if not np.all(self.gap > 0.0):
            raise DomainCollapsedError("domain collapsed: u - v <= 0 at some node")


@dataclass(frozen=True)
class Params:
    eps: float = 0.1
    lam: float = 0.5
    mu: float = 0.5
    kappa: float = 0.05
    q: float = 4.0
    dt: float | None = None
    t_end: float = 0.1
    gap_tol: float = 1e-3
    linear_tol: float = 1e-10
    norm_cap: float = 1e3
    sample_every: int = 10

    def __post_init__(self):
        checks = [
            ("eps", 0.0 < self.eps <= 1.0, "must lie in (0, 1]"),
            ("lam", self.lam >= 0.0, "must be non-negative"),
            ("mu", self.mu >= 0.0, "must be non-negative"),
            ("kappa", 0.0 < self.kappa < 0.5, "must lie in (0, 1/2)"),
            ("q", self.q >= 2.0 and np.isfinite(self.q), "must lie in [2, inf)"),
            ("dt", self.dt is None or self.dt > 0.0, "must be positive"),
            ("t_end", self.t_end > 0.0, "must be positive"),
            ("gap_tol", self.gap_tol > 0.0, "must be positive"),
            ("linear_tol", self.linear_tol > 0.0, "must be positive"),
            ("norm_cap", self.norm_cap > 0.0, "must be positive"),
            ("sample_every", int(self.sample_every) == self.sample_every and self.sample_every >= 1,
             "must be a positive integer"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name} {msg}, got {getattr(self, name)!r}")

    def step_size(self, grid: Grid) -> float:
        if self.dt is not None:
            return self.dt
        return 0.25 * grid.hx**2 / max(1.0, self.lam, self.mu)


def discrete_norm(f: GridFunction1D, order: int = 2, q: float = 4.0) -> float:
    """Discrete W^{order}_q surrogate: trapezoid quadrature of |f|^q, |f'|^q, |f''|^q."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    if not q >= 2.0:
        raise ValueError("q must lie in [2, inf)")
    x, h = f.grid.x, f.grid.hx
    terms = [f.values]
    if order >= 1:
        terms.append(d_dx(f.values, h))
    if order >= 2:
        terms.append(d2_dx2(f.values, h))
    total = sum(trapezoid(np.abs(t) ** q, x) for t in terms)
    return float(total ** (1.0 / q))


@dataclass(frozen=True)
class AdmissibilityReport:
    min_gap: float
    norm_u: float
    norm_v: float
    in_S: bool
    violated: tuple[str, ...] = field(default_factory=tuple)


def admissibility_from_values(min_gap, norm_u, norm_v, kappa, boundary_ok=True,
                              closure=False) -> AdmissibilityReport:
    violated = []
    if not boundary_ok:
        violated.append("boundary")
    if closure:
        gap_ok = min_gap >= 2 * kappa
        nu_ok, nv_ok = norm_u <= 1 / kappa, norm_v <= 1 / kappa
    else:
        gap_ok = min_gap > 2 * kappa
        nu_ok, nv_ok = norm_u < 1 / kappa, norm_v < 1 / kappa
    if not gap_ok:
        violated.append("gap")
    if not nu_ok:
        violated.append("norm_u")
    if not nv_ok:
        violated.append("norm_v")
    return AdmissibilityReport(float(min_gap), float(norm_u), float(norm_v),
                               not violated, tuple(violated))


def admissible_check(m: MembranePair, p: Params, closure: bool = False,
                     kappa: float | None = None) -> AdmissibilityReport:
    """Membership of ``m`` in S_q(kappa), or its closure when ``closure`` is set."""
    kappa = p.kappa if kappa is None else kappa
    boundary_ok = (m.u[0] == 0.0 and m.u[-1] == 0.0 and m.v[0] == -1.0 and m.v[-1] == -1.0)
    norm_u = discrete_norm(GridFunction1D(m.u, m.grid), 2, p.q)
    norm_v = discrete_norm(GridFunction1D(m.vhat, m.grid), 2, p.q)
    return admissibility_from_values(m.min_gap, norm_u, norm_v, kappa, boundary_ok, closure)


@dataclass(frozen=True)
class MovingSamples:
    """Samples of a function on Omega_{u,v}: column i holds values at heights z[i, :]."""

    z: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        z, vals = _frozen(self.z), _frozen(self.values)
        if z.shape != vals.shape or z.ndim != 2:
            raise ValueError("z and values must be matching 2-D arrays")
        if np.any(np.diff(z, axis=1) <= 0.0):
            raise ValueError("sample heights must increase along each column")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "values", vals)


def moving_nodes(m: MembranePair) -> np.ndarray:
    """Physical heights T^{-1}(x_i, z'_j) of the fixed-grid nodes, end rows exact."""
    m.require_open_gap()
    zp = m.grid.z
    z = m.v[:, None] + zp[None, :] * m.gap[:, None]
    z[:, 0], z[:, -1] = m.v, m.u
    return z


def push_forward(w: MovingSamples, m: MembranePair) -> Field2D:
    """w~(x', z') = w(T^{-1}(x', z')), piecewise-linear in z along each column."""
    z_target = moving_nodes(m)
    if w.z.shape[0] != m.grid.nx:
        raise ValueError("sample columns must match the x-grid")
    if np.any(w.z[:, 0] > m.v + 1e-14) or np.any(w.z[:, -1] < m.u - 1e-14):
        raise ValueError("samples do not cover the gap in every column")
    out = np.empty((m.grid.nx, m.grid.nz))
    for i in range(m.grid.nx):
        out[i] = np.interp(z_target[i], w.z[i], w.values[i])
    return Field2D(out, m.grid)


def pull_back(wt: Field2D, m: MembranePair, z: np.ndarray | None = None) -> MovingSamples:
    """w(x, z) = w~(T(x, z)), piecewise-linear in z' along each column.

    ``z`` gives the physical sample heights per column (default: the mapped
    fixed-grid nodes, where no interpolation is needed).
    """
    m.require_open_gap()
    if z is None:
        return MovingSamples(moving_nodes(m), wt.values.copy())
    z = np.asarray(z, dtype=float)
    zp = (z - m.v[:, None]) / m.gap[:, None]
    if np.any(zp < -1e-12) or np.any(zp > 1 + 1e-12):
        raise ValueError("sample heights fall outside the membrane gap")
    vals = np.empty_like(z)
    for i in range(m.grid.nx):
        vals[i] = np.interp(zp[i], m.grid.z, wt.values[i])
    return MovingSamples(z, vals)
