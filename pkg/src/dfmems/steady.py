"""Stationary states: thresholds, residuals, Newton/continuation and linear stability.

Unknowns are packed as X = (u[1:-1], vhat[1:-1]) with vhat = v + 1, so both
halves carry zero Dirichlet data.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

from .core import (AdmissibilityError, DomainCollapsedError, Grid, GridFunction1D,
                   MembranePair, Params, d_dx)
from .elliptic import LinearSolveError, PotentialField, solve_potential, boundary_traces
from .evolution import curvature_apply, evolve
from .export import write_csv
from .narrow_gap import worker_count

log = logging.getLogger(__name__)

_SOLVE_ERRORS = (AdmissibilityError, DomainCollapsedError, LinearSolveError)


def J(r):
    """∫_0^r (1 + s²)^{-5/2} ds in closed form."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("J is defined for r >= 0")
    out = r * (2 * r**2 + 3) / (3 * (r**2 + 1) ** 1.5)
    return float(out) if out.ndim == 0 else out


def xi0(eps: float) -> float:
    """Non-existence threshold min{2 J(eps)/eps, 2/(3 eps)}."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return min(2 * J(eps) / eps, 2 / (3 * eps))


def _pack(m: MembranePair) -> np.ndarray:
    return np.concatenate([m.u[1:-1], m.vhat[1:-1]])


def _unpack(X: np.ndarray, grid: Grid) -> MembranePair:
    n = grid.nx - 2
    u = np.zeros(grid.nx)
    vh = np.zeros(grid.nx)
    u[1:-1], vh[1:-1] = X[:n], X[n:]
    return MembranePair.from_vhat(grid, u, vh)


def _second_diff(w: np.ndarray, h: float) -> np.ndarray:
    return (w[2:] - 2 * w[1:-1] + w[:-2]) / h**2


def h_eps(U: MembranePair, p: Params, phi: PotentialField | None = None, **solve_kw):
    """Quintic-factor trace terms (h1, h2) on all nodes."""
    if phi is None:
        phi = solve_potential(U, p, **solve_kw)
    t1, t0 = boundary_traces(phi)
    g, e2 = U.grid, p.eps**2
    gap2 = U.gap**2
    h1 = (1 + e2 * d_dx(U.u, g.hx) ** 2) ** 2.5 * t1.values**2 / gap2
    h2 = (1 + e2 * d_dx(U.v, g.hx) ** 2) ** 2.5 * t0.values**2 / gap2
    return h1, h2, phi


def stationary_residual(U: MembranePair, p: Params, phi: PotentialField | None = None,
                        **solve_kw):
    """(r1, r2) with r1 = u_xx - lam h1 and r2 = v_xx + mu h2; zero boundary entries."""
    h1, h2, _ = h_eps(U, p, phi, **solve_kw)
    g = U.grid
    r1 = np.zeros(g.nx)
    r2 = np.zeros(g.nx)
    r1[1:-1] = _second_diff(U.u, g.hx) - p.lam * h1[1:-1]
    r2[1:-1] = _second_diff(U.v, g.hx) + p.mu * h2[1:-1]
    return GridFunction1D(r1, g, "residual"), GridFunction1D(r2, g, "residual")


def dirichlet_inverse(f: np.ndarray, h: float) -> np.ndarray:
    """A(0)^{-1} f, i.e. solve -w_xx = f with w(±1) = 0."""
    n = f.size - 2
    ab = np.empty((3, n))
    ab[0], ab[1], ab[2] = -1.0 / h**2, 2.0 / h**2, -1.0 / h**2
    out = np.zeros(f.size)
    out[1:-1] = solve_banded((1, 1), ab, f[1:-1])
    return out


def fixed_point_map(Lambda, U: MembranePair, p: Params, **solve_kw) -> MembranePair:
    """F(Lambda, U) = U + diag(L1, -L2) A(0)^{-1} h, returned in the (u, vhat) convention.

    The returned pair's ``u`` and ``vhat`` hold the two components of F, so
    F = 0 corresponds to the flat pair.
    """
    l1, l2 = (float(Lambda[0]), float(Lambda[1]))
    h = U.grid.hx
    if l1 == 0 and l2 == 0:
        return MembranePair.from_vhat(U.grid, U.u, U.vhat)
    h1, h2, _ = h_eps(U, replace(p, lam=l1, mu=l2), **solve_kw)
    F1 = U.u + l1 * dirichlet_inverse(h1, h)
    F2 = U.vhat - l2 * dirichlet_inverse(h2, h)
    return MembranePair.from_vhat(U.grid, F1, F2)


def fd_jacobian(fun, X: np.ndarray, rel_step: float = 1e-6, threads: int | None = None):
    """Central finite-difference Jacobian, columns evaluated concurrently."""
    step = rel_step * max(1.0, float(np.max(np.abs(X))))
    n = X.size

    def column(k):
        e = np.zeros(n)
        e[k] = step
        return (fun(X + e) - fun(X - e)) / (2 * step)

    workers = threads or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, range(n)))
    else:
        cols = [column(k) for k in range(n)]
    return np.column_stack(cols)


@dataclass
class SteadyState:
    U: MembranePair
    Phi: PotentialField | None
    residual_norm: float
    newton_iters: int
    converged: bool
    lam: float
    mu: float

    def convex(self, tol: float = 1e-8) -> bool:
        """U1 and -U2 have interior second differences >= -tol."""
        h = self.U.grid.hx
        d1 = _second_diff(self.U.u, h)
        d2 = -_second_diff(self.U.v, h)
        return bool(np.all(d1 >= -tol) and np.all(d2 >= -tol))


def _residual_fn(p: Params, grid: Grid, kappa: float | None):
    def R(X):
        U = _unpack(X, grid)
        r1, r2 = stationary_residual(U, p, kappa=kappa)
        return np.concatenate([r1.values[1:-1], r2.values[1:-1]])
    return R


def solve_steady(p: Params, init: MembranePair, max_iters: int = 50, tol: float = 1e-10,
                 min_damping: float = 2.0**-10, kappa: float | None = None,
                 threads: int | None = None) -> SteadyState:
    """Damped Newton on the stationary residual with a finite-difference Jacobian.

    A step is accepted at the first damping factor 1, 1/2, ... that keeps the
    state admissible and lowers the max-norm residual. Failure is reported
    through ``converged=False``.
    """
    grid = init.grid
    R = _residual_fn(p, grid, kappa)
    X = _pack(init)
    r = R(X)
    rn = float(np.max(np.abs(r)))
    it = 0
    failed = False
    while rn > tol and it < max_iters:
        Jm = fd_jacobian(R, X, threads=threads)
        try:
            dX = np.linalg.solve(Jm, -r)
        except np.linalg.LinAlgError:
            failed = True
            break
        t = 1.0
        accepted = False
        while t >= min_damping:
            Xn = X + t * dX
            try:
                rt = R(Xn)
            except _SOLVE_ERRORS:
                t *= 0.5
                continue
            rtn = float(np.max(np.abs(rt)))
            if rtn < rn:
                X, r, rn, accepted = Xn, rt, rtn, True
                break
            t *= 0.5
        it += 1
        if not accepted:
            failed = True
            break
    U = _unpack(X, grid)
    converged = (rn <= tol) and not (failed and rn > tol)
    phi = solve_potential(U, p, kappa=kappa) if converged else None
    return SteadyState(U, phi, rn, it, converged, p.lam, p.mu)


def init_family(grid: Grid):
    """Admissible starting guesses used to probe uniqueness and non-existence."""
    return [MembranePair.flat(grid),
            MembranePair.parabolic(grid, 0.05),
            MembranePair.parabolic(grid, 0.1, 0.02),
            MembranePair.parabolic(grid, 0.2)]


@dataclass
class ContinuationResult:
    lambda_values: np.ndarray
    states: list
    fold_estimate: float | None
    fold_detected: bool
    ratio: float
    eps: float
    tol: float = 1e-2

    @property
    def xi0(self) -> float:
        return xi0(self.eps)

    @property
    def within_bound(self) -> bool:
        if self.fold_estimate is None:
            return True
        return max(1.0, self.ratio) * self.fold_estimate <= self.xi0 + self.tol

    def rows(self):
        return [(lam, s.residual_norm, s.U.min_gap, s.newton_iters)
                for lam, s in zip(self.lambda_values, self.states)]

    def write(self, path):
        return write_csv(path, ("lambda", "residual", "min_gap", "newton_iters"), self.rows())


def pullin_sweep(p: Params, lambda_grid, grid: Grid, ratio: float = 1.0,
                 halvings: int = 8, threads: int | None = None) -> ContinuationResult:
    """Natural-parameter continuation in lam with mu = ratio * lam.

    Each target is approached from the last converged state; on failure the
    increment is halved up to ``halvings`` times before the sweep stops.
    """
    lams = np.asarray(lambda_grid, dtype=float)
    if lams.size == 0 or np.any(lams < 0) or np.any(np.diff(lams) <= 0):
        raise ValueError("lambda_grid must be non-negative and strictly increasing")
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    reached, states = [], []
    current = MembranePair.flat(grid)
    last = None
    halted = False

    def attempt(lam, start):
        return solve_steady(replace(p, lam=lam, mu=ratio * lam), start, threads=threads)

    for target in lams:
        if last is None:
            s = attempt(target, current)
            if not s.converged:
                halted = True
                break
            reached.append(target)
            states.append(s)
            current, last = s.U, target
            continue
        step = target - last
        min_step = step * 2.0**-halvings
        while last < target and not halted:
            trial = min(last + step, target)
            s = attempt(trial, current)
            if s.converged:
                reached.append(trial)
                states.append(s)
                current, last = s.U, trial
            else:
                step *= 0.5
                if step < min_step:
                    halted = True
        if halted:
            break
    fold = float(reached[-1]) if reached else None
    return ContinuationResult(np.array(reached), states, fold, halted, ratio, p.eps)


def _Q(p: Params, grid: Grid, kappa=None):
    """Right-hand side of the evolution system at interior nodes."""
    forced = not (p.lam == 0 and p.mu == 0)

    def Q(X):
        U = _unpack(X, grid)
        h = grid.hx
        q1 = -curvature_apply(p.eps * U.u, U.u, h)
        q2 = -curvature_apply(p.eps * U.vhat, U.vhat, h)
        if forced:
            from .elliptic import trace_forcing
            tf = trace_forcing(U, p, kappa=kappa)
            q1 = q1 - p.lam * tf.g1.values
            q2 = q2 + p.mu * tf.g2.values
        return np.concatenate([q1[1:-1], q2[1:-1]])
    return Q


def linearize(S: SteadyState | MembranePair, p: Params, threads: int | None = None,
              kappa: float | None = None) -> np.ndarray:
    """Dense finite-difference Jacobian DQ of the evolution right-hand side."""
    U = S.U if isinstance(S, SteadyState) else S
    if isinstance(S, SteadyState):
        p = replace(p, lam=S.lam, mu=S.mu)
    return fd_jacobian(_Q(p, U.grid, kappa), _pack(U), threads=threads)


def curvature_jacobian(w: np.ndarray, eps: float, h: float) -> np.ndarray:
    """Analytic Jacobian of w -> A(eps w) w with respect to interior values."""
    w = np.asarray(w, dtype=float)
    n = w.size - 2
    d2 = _second_diff(w, h)
    s = eps * (w[2:] - w[:-2]) / (2 * h)
    c = (1 + s**2) ** -1.5
    dc = -3 * s * (1 + s**2) ** -2.5  # dc/ds
    Jm = np.zeros((n, n))
    idx = np.arange(n)
    Jm[idx, idx] = 2 * c / h**2
    # slope dependence: ds_i/dw_{i+1} = eps/(2h), ds_i/dw_{i-1} = -eps/(2h)
    Jm[idx[1:], idx[:-1]] = -c[1:] / h**2 - d2[1:] * dc[1:] * (-eps / (2 * h))
    Jm[idx[:-1], idx[1:]] = -c[:-1] / h**2 - d2[:-1] * dc[:-1] * (eps / (2 * h))
    return Jm


def spectral_abscissa(Jm: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(Jm).real))


@dataclass
class StabilityReport:
    spectral_abscissa: float
    fitted_decay_rate: float | None
    matrix_dim: int
    times: np.ndarray
    distances: np.ndarray
    termination: str
    sign_violation: float = 0.0

    def as_dict(self) -> dict:
        return {"spectral_abscissa": self.spectral_abscissa,
                "fitted_decay_rate": self.fitted_decay_rate,
                "matrix_dim": self.matrix_dim, "termination": self.termination,
                "sign_violation": self.sign_violation,
                "n_samples": int(self.times.size)}


def fit_decay(times, dist, floor: float):
    """Least-squares slope of -log(dist) over the last half of samples above ``floor``."""
    times, dist = np.asarray(times), np.asarray(dist)
    half = times.size // 2
    t, d = times[half:], dist[half:]
    keep = d > floor
    if np.count_nonzero(keep) < 3:
        return None
    slope = np.polyfit(t[keep], np.log(d[keep]), 1)[0]
    return float(-slope)


def default_perturbation(grid: Grid, rho: float = 1e-3):
    """Boundary-compatible push of both membranes towards each other's rest position."""
    bump = rho * (1 - grid.x**2)
    return -bump, bump


def stability_experiment(S: SteadyState, p: Params, perturbation=None, t_end: float = 3.0,
                         threads: int | None = None) -> StabilityReport:
    """Evolve from U + perturbation and compare the decay with the linearization."""
    U = S.U
    grid = U.grid
    du, dvh = perturbation if perturbation is not None else default_perturbation(grid)
    pr = replace(p, lam=S.lam, mu=S.mu, t_end=t_end)
    start = MembranePair.from_vhat(grid, U.u + du, U.vhat + dvh)
    traj, _ = evolve(start, pr)
    dist = np.array([max(np.max(np.abs(s.u - U.u)), np.max(np.abs(s.v - U.v)))
                     for s in traj.states])
    Jm = linearize(S, pr, threads=threads)
    # distances below the steady residual level are not resolvable
    floor = max(100 * np.finfo(float).eps, 100 * S.residual_norm)
    pert = max(float(np.max(np.abs(du))), float(np.max(np.abs(dvh))))
    rate = fit_decay(traj.times, dist, floor) if pert > floor else None
    return StabilityReport(spectral_abscissa(Jm), rate, Jm.shape[0], traj.times, dist,
                           traj.termination, traj.sign_violation())

