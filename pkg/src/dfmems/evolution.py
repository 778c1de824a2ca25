"""Time integration of the coupled membrane system.

The evolved unknowns are u and vhat = v + 1, both with zero Dirichlet data:

    d/dt (u, vhat) + diag(A(eps u), A(eps vhat)) (u, vhat) = (-lam g1, mu g2),
    A(w) z = -z_xx / (1 + w_x²)^{3/2}.

Each step freezes the curvature coefficient and the forcing at the current
state and solves two tridiagonal systems (semi-implicit Euler).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from .core import GridFunction1D, MembranePair, Params, d_dx, discrete_norm
from .elliptic import LinearSolveError, PotentialField, gradient_energy, trace_forcing
from .export import write_csv, write_state_csv

log = logging.getLogger(__name__)

TERMINATIONS = ("completed", "touchdown", "norm_blowup", "solver_failure")
DIAGNOSTIC_COLUMNS = ("min_gap", "E_t", "energy", "norm_u", "norm_v", "g1_max", "g2_max")


def curvature_apply(w1, w2, h: float | None = None):
    """A(w1) w2 at interior nodes; boundary entries are zero.

    Accepts GridFunction1D pairs (returns one) or raw arrays with spacing h.
    """
    if isinstance(w2, GridFunction1D):
        if not isinstance(w1, GridFunction1D) or w1.grid != w2.grid:
            raise ValueError("w1 and w2 must live on the same grid")
        out = curvature_apply(w1.values, w2.values, w2.grid.hx)
        return GridFunction1D(out, w2.grid, "residual")
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    out = np.zeros_like(w2)
    slope = (w1[2:] - w1[:-2]) / (2 * h)
    out[1:-1] = -(w2[2:] - 2 * w2[1:-1] + w2[:-2]) / h**2 / (1 + slope**2) ** 1.5
    return out


def curvature_coefficient(w: np.ndarray, scale: float, h: float) -> np.ndarray:
    """(1 + (scale w)_x²)^{-3/2} at interior nodes."""
    slope = scale * (w[2:] - w[:-2]) / (2 * h)
    return (1 + slope**2) ** -1.5


def _diffusion_solve(coef: np.ndarray, dt: float, h: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (I + dt diag(coef) (-D2)) w = rhs on interior nodes; zero ends."""
    r = dt * coef / h**2
    n = r.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -r[:-1]
    ab[1] = 1 + 2 * r
    ab[2, :-1] = -r[1:]
    out = np.zeros(n + 2)
    out[1:-1] = solve_banded((1, 1), ab, rhs[1:-1])
    return out


def imex_update(state: MembranePair, dt: float, force_u, force_vhat, curv_scale: float):
    """One semi-implicit step; returns the new (u, vhat) arrays without validation."""
    h = state.grid.hx
    u, vh = state.u, state.vhat
    cu = curvature_coefficient(u, curv_scale, h)
    cv = curvature_coefficient(vh, curv_scale, h)
    u_new = _diffusion_solve(cu, dt, h, u + dt * force_u)
    v_new = _diffusion_solve(cv, dt, h, vh + dt * force_vhat)
    return u_new, v_new


def step_imex(state: MembranePair, p: Params, dt: float, forcing=None) -> MembranePair:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if p.lam == 0 and p.mu == 0:
        g1 = g2 = np.zeros(state.grid.nx)
    else:
        if forcing is None:
            forcing = trace_forcing(state, p)
        g1, g2 = forcing.g1.values, forcing.g2.values
    u, vh = imex_update(state, dt, -p.lam * g1, p.mu * g2, p.eps)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(vh))) or np.min(1 + u - vh) <= 0:
        raise ValueError("gap collapsed during step")
    return MembranePair.from_vhat(state.grid, u, vh)


def gap_functional(state: MembranePair) -> float:
    """E = -1/2 ∫ (u - (v + 1)) dx."""
    return float(-0.5 * trapezoid(state.u - state.vhat, state.grid.x))


def _elastic(w, eps, h, x):
    return float(trapezoid(np.sqrt(1 + (eps * d_dx(w, h)) ** 2) - 1, x))


def total_energy(state: MembranePair, phi: PotentialField, p: Params) -> float:
    """lam eps² ∫|grad_eps phi|² + elastic energy of u + (lam/mu) elastic energy of v."""
    g = state.grid
    if p.mu == 0:
        if p.lam != 0:
            raise ValueError("tension ratio lam/mu undefined for mu = 0")
        ratio = 1.0
    else:
        ratio = p.lam / p.mu
    return (p.lam * p.eps**2 * gradient_energy(phi, state, p)
            + _elastic(state.u, p.eps, g.hx, g.x) + ratio * _elastic(state.v, p.eps, g.hx, g.x))


def touchdown_bound(u0: np.ndarray, v0: np.ndarray, x: np.ndarray, p: Params) -> float | None:
    """Upper bound on the existence time, or None when max(lam, mu) <= 4/eps."""
    m = max(p.lam, p.mu)
    if m <= 4.0 / p.eps:
        return None
    return float(trapezoid(np.abs(np.asarray(u0) - np.asarray(v0)), x) / (m - 4.0 / p.eps))


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    diagnostics: dict
    termination: str
    dt: float

    @property
    def final(self) -> MembranePair:
        return self.states[-1]

    def max_mirror_mismatch(self) -> float:
        return max(s.mirror_mismatch() for s in self.states)

    def sign_violation(self) -> float:
        """Largest excursion of u above 0 or of v below -1 over all samples."""
        return max(max(float(np.max(s.u)), float(np.max(-1.0 - s.v))) for s in self.states)

    def write(self, out_dir, snapshots: bool = True):
        from pathlib import Path
        out = Path(out_dir)
        rows = zip(self.times, *(self.diagnostics[c] for c in DIAGNOSTIC_COLUMNS))
        write_csv(out / "trajectory.csv", ("t",) + DIAGNOSTIC_COLUMNS, rows)
        if snapshots:
            for k, s in enumerate(self.states):
                write_state_csv(out / "snapshots" / f"state_{k:05d}.csv", s)


@dataclass
class TouchdownReport:
    bound_applicable: bool
    analytic_bound: float | None
    observed_time: float | None
    min_gap_at_end: float
    termination: str
    dt: float

    @property
    def consistent(self) -> bool:
        if not (self.bound_applicable and self.termination == "touchdown"):
            return True
        return self.observed_time <= self.analytic_bound + self.dt

    def as_dict(self) -> dict:
        return {"bound_applicable": self.bound_applicable, "analytic_bound": self.analytic_bound,
                "observed_time": self.observed_time, "min_gap_at_end": self.min_gap_at_end,
                "termination": self.termination, "dt": self.dt, "consistent": self.consistent}


# forcing callback: state -> (g1, g2, potential or None)
Forcing = Callable[[MembranePair], tuple]
Energy = Callable[[MembranePair, object], float]


@dataclass
class _Recorder:
    p: Params
    energy: Energy
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def __call__(self, t, state, g1, g2, pot):
        g = state.grid
        self.times.append(float(t))
        self.states.append(state)
        self.rows.append((state.min_gap, gap_functional(state), self.energy(state, pot),
                          discrete_norm(GridFunction1D(state.u, g), 2, self.p.q),
                          discrete_norm(GridFunction1D(state.vhat, g), 2, self.p.q),
                          float(np.max(g1)), float(np.max(g2))))

    def trajectory(self, termination, dt) -> Trajectory:
        cols = np.array(self.rows, dtype=float).reshape(-1, len(DIAGNOSTIC_COLUMNS))
        diag = {c: cols[:, k] for k, c in enumerate(DIAGNOSTIC_COLUMNS)}
        return Trajectory(np.array(self.times), self.states, diag, termination, dt)


def _locate_touchdown(state, dt, fu, fv, scale, gap_tol):
    """Shorten the final step so the gap lands in [gap_tol/2, gap_tol)."""
    lo, hi = 0.0, dt
    best = None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        u, vh = imex_update(state, mid, fu, fv, scale)
        gmin = np.min(1 + u - vh) if np.all(np.isfinite(u)) and np.all(np.isfinite(vh)) else -np.inf
        if gmin >= gap_tol:
            lo = mid
        elif gmin >= 0.5 * gap_tol:
            return mid, u, vh
        else:
            hi = mid
            if gmin > 0:
                best = (mid, u, vh)
    if best is None:
        raise LinearSolveError("touchdown localisation failed", float("nan"))
    return best


def integrate(initial: MembranePair, p: Params, forcing: Forcing, energy: Energy,
              curv_scale: float) -> Trajectory:
    """Shared driver for the full and the narrow-gap model."""
    grid = initial.grid
    dt = p.step_size(grid)
    n_steps = max(1, int(np.ceil(p.t_end / dt - 1e-9)))
    if (n_steps - 1) * dt >= p.t_end:
        n_steps -= 1
    rec = _Recorder(p, energy)
    state = initial
    g1, g2, pot = forcing(state)
    rec(0.0, state, g1, g2, pot)
    termination = "completed"
    for n in range(n_steps):
        fu, fv = -p.lam * g1, p.mu * g2
        # the last step is shortened so the run ends exactly at t_end
        k = dt if n < n_steps - 1 else p.t_end - n * dt
        u, vh = imex_update(state, k, fu, fv, curv_scale)
        t = (n + 1) * dt if n < n_steps - 1 else float(p.t_end)
        finite = np.all(np.isfinite(u)) and np.all(np.isfinite(vh))
        if not finite or np.min(1 + u - vh) < p.gap_tol:
            h, u, vh = _locate_touchdown(state, k, fu, fv, curv_scale, p.gap_tol)
            state = MembranePair.from_vhat(grid, u, vh)
            g1, g2, pot = forcing(state)
            rec(float(n * dt + h), state, g1, g2, pot)
            termination = "touchdown"
            break
        state = MembranePair.from_vhat(grid, u, vh)
        try:
            g1, g2, pot = forcing(state)
        except LinearSolveError as exc:
            log.warning("elliptic solve failed at t=%g: %s", t, exc)
            termination = "solver_failure"
            break
        nu = discrete_norm(GridFunction1D(state.u, grid), 2, p.q)
        nv = discrete_norm(GridFunction1D(state.vhat, grid), 2, p.q)
        if max(nu, nv) > p.norm_cap:
            rec(t, state, g1, g2, pot)
            termination = "norm_blowup"
            break
        if (n + 1) % p.sample_every == 0 or n == n_steps - 1:
            rec(t, state, g1, g2, pot)
    return rec.trajectory(termination, dt)


def _full_forcing(p: Params, backend="direct") -> Forcing:
    def forcing(state):
        if p.lam == 0 and p.mu == 0:
            pot = None
            z = np.zeros(state.grid.nx)
            return z, z, pot
        tf = trace_forcing(state, p, check_admissible=False, backend=backend)
        return tf.g1.values, tf.g2.values, tf.potential
    return forcing


def _full_energy(p: Params) -> Energy:
    from .elliptic import solve_potential

    def energy(state, pot):
        if pot is None:
            pot = solve_potential(state, p, check_admissible=False)
        return total_energy(state, pot, p)
    return energy


def evolve(initial: MembranePair, p: Params, backend: str = "direct"):
    """Integrate the full model; returns (Trajectory, TouchdownReport)."""
    if np.any(initial.v < -1) or np.any(initial.u > 0) or initial.min_gap <= 0:
        raise ValueError("initial data must satisfy -1 <= v0 < u0 <= 0")
    traj = integrate(initial, p, _full_forcing(p, backend), _full_energy(p), p.eps)
    bound = touchdown_bound(initial.u, initial.v, initial.grid.x, p)
    applicable = bound is not None and initial.mirror_mismatch() <= 1e-12
    observed = float(traj.times[-1]) if traj.termination == "touchdown" else None
    report = TouchdownReport(applicable, bound, observed, traj.final.min_gap,
                             traj.termination, traj.dt)
    return traj, report
