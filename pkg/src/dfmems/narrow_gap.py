"""Narrow-gap (vanishing aspect ratio) limit and its comparison with the full model.

In the limit the potential is linear across the gap, phi = (z - v)/(u - v),
so both membranes are driven by 1/(u - v)² and the curvature operator
reduces to A(0) = -d²/dx².
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import trapezoid

from .core import MembranePair, MovingSamples, Params, d_dx, moving_nodes
from .evolution import Trajectory, evolve, imex_update, integrate
from .export import write_csv


def sar_potential(state: MembranePair) -> MovingSamples:
    """phi = (z - v)/(u - v) at the mapped fixed-grid nodes of the gap."""
    z = moving_nodes(state)
    vals = (z - state.v[:, None]) / state.gap[:, None]
    vals[:, 0], vals[:, -1] = 0.0, 1.0
    return MovingSamples(z, vals)


def _sar_forcing(state: MembranePair):
    g = 1.0 / state.gap**2
    return g, g, None


def sar_step(state: MembranePair, lam: float, mu: float, dt: float) -> MembranePair:
    if dt <= 0:
        raise ValueError("dt must be positive")
    state.require_open_gap()
    g, _, _ = _sar_forcing(state)
    u, vh = imex_update(state, dt, -lam * g, mu * g, 0.0)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(vh))) or np.min(1 + u - vh) <= 0:
        raise ValueError("gap collapsed during step")
    return MembranePair.from_vhat(state.grid, u, vh)


def sar_energy(state: MembranePair, p: Params) -> float:
    """lam ∫ dx/(u - v) + ½∫u_x² + (lam/mu) ½∫v_x²."""
    g = state.grid
    ratio = p.lam / p.mu if p.mu > 0 else 1.0
    return float(p.lam * trapezoid(1.0 / state.gap, g.x)
                 + 0.5 * trapezoid(d_dx(state.u, g.hx) ** 2, g.x)
                 + 0.5 * ratio * trapezoid(d_dx(state.v, g.hx) ** 2, g.x))


def sar_evolve(initial: MembranePair, p: Params) -> Trajectory:
    if np.any(initial.v < -1) or np.any(initial.u > 0) or initial.min_gap <= 0:
        raise ValueError("initial data must satisfy -1 <= v0 < u0 <= 0")
    return integrate(initial, p, _sar_forcing, lambda s, _pot: sar_energy(s, p), 0.0)


def _column_l2_sq(z_nodes, phi_nodes, v_star, u_star):
    """∫_{-1}^{0} (phi 1_[v,u] - phi_* 1_[v*,u*])² dz for one column, exactly.

    phi is piecewise linear between z_nodes, phi_* is linear on [v*, u*]; the
    integrand is piecewise quadratic so two-point Gauss per piece is exact.
    """
    lo = min(z_nodes[0], v_star)
    hi = max(z_nodes[-1], u_star)
    brk = np.unique(np.concatenate([z_nodes, [v_star, u_star, lo, hi]]))
    a, b = brk[:-1], brk[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    off = half / np.sqrt(3.0)
    total = 0.0
    for zq in (mid - off, mid + off):
        inside = (zq >= z_nodes[0]) & (zq <= z_nodes[-1])
        f = np.where(inside, np.interp(zq, z_nodes, phi_nodes), 0.0)
        inside_s = (zq >= v_star) & (zq <= u_star)
        f_s = np.where(inside_s, (zq - v_star) / (u_star - v_star), 0.0)
        total += np.sum(half * (f - f_s) ** 2)
    return total


def potential_distance(phi_eps: MovingSamples, state_star: MembranePair) -> float:
    """L²(I x (-1, 0)) distance between zero-extended potentials."""
    cols = [_column_l2_sq(phi_eps.z[i], phi_eps.values[i], state_star.v[i], state_star.u[i])
            for i in range(phi_eps.z.shape[0])]
    return float(np.sqrt(trapezoid(cols, state_star.grid.x)))


def state_distance(a: Trajectory, b: Trajectory) -> float:
    """max over common sample times of the nodewise sup distance."""
    if len(a.times) != len(b.times) or not np.array_equal(a.times, b.times):
        raise ValueError("trajectories do not share a time grid")
    return max(max(float(np.max(np.abs(sa.u - sb.u))), float(np.max(np.abs(sa.v - sb.v))))
               for sa, sb in zip(a.states, b.states))


@dataclass
class ConvergenceTable:
    eps: np.ndarray
    d_state: np.ndarray
    d_potential: np.ndarray

    def strictly_decreasing(self) -> bool:
        """Both distances decrease as eps decreases."""
        order = np.argsort(self.eps)[::-1]
        ds, dp = self.d_state[order], self.d_potential[order]
        return bool(np.all(np.diff(ds) < 0) and np.all(np.diff(dp) < 0))

    def rows(self):
        return list(zip(self.eps, self.d_state, self.d_potential))

    def write(self, path):
        return write_csv(path, ("eps", "d_state", "d_potential"), self.rows())


def worker_count() -> int:
    env = os.environ.get("MEMS_SIM_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("MEMS_SIM_THREADS must be a positive integer")
        return n
    return os.cpu_count() or 1


def _full_member(initial, p, eps):
    traj, _ = evolve(initial, replace(p, eps=eps))
    return traj


def compare_to_sar(eps_list, initial: MembranePair, p: Params,
                   reference: Trajectory | None = None) -> ConvergenceTable:
    """Distance of full-model runs to the narrow-gap run, one row per eps.

    All runs share ``initial``, the grid and the time step; the time step is
    frozen from the narrow-gap configuration so every member samples the
    same instants.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("eps_list is empty")
    p = replace(p, dt=p.step_size(initial.grid))
    star = reference if reference is not None else sar_evolve(initial, p)
    if star.termination != "completed":
        raise ValueError(f"narrow-gap reference run ended with {star.termination}")
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(eps_list))) as pool:
        runs = list(pool.map(lambda e: _full_member(initial, p, e), eps_list))
    d_state, d_pot = [], []
    from .elliptic import solve_potential
    for e, traj in zip(eps_list, runs):
        if traj.termination != "completed":
            raise ValueError(f"full-model run at eps={e} ended with {traj.termination}")
        d_state.append(state_distance(traj, star))
        fin = traj.final
        phi = solve_potential(fin, replace(p, eps=e), check_admissible=False)
        samples = MovingSamples(moving_nodes(fin), phi.phi_tilde.values)
        d_pot.append(potential_distance(samples, star.final))
    return ConvergenceTable(np.array(eps_list), np.array(d_state), np.array(d_pot))
