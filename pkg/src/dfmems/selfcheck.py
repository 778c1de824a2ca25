"""Fast invariant suite exercised by ``dfmems selfcheck``.

Every check is deterministic and runs on small grids; each returns the
measured quantity and whether it meets its threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MembranePair, Params, make_grid
from .elliptic import barrier_check, solve_potential, trace_forcing
from .evolution import evolve, gap_functional, touchdown_bound
from .narrow_gap import sar_evolve, sar_potential
from .steady import J, curvature_jacobian, fd_jacobian, fixed_point_map, xi0


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool


def _le(name, value, threshold):
    return CheckResult(name, float(value), float(threshold), bool(value <= threshold))


def _flat_potential():
    g = make_grid(33, 33)
    phi = solve_potential(MembranePair.flat(g), Params(eps=0.5))
    return _le("flat_potential_exact", np.max(np.abs(phi.phi_tilde.values - g.z[None, :])), 1e-10)


def _flat_forcing():
    g = make_grid(33, 33)
    tf = trace_forcing(MembranePair.flat(g), Params(eps=0.5))
    err = max(np.max(np.abs(tf.g1.values - 1)), np.max(np.abs(tf.g2.values - 1)))
    return _le("flat_forcing_unit", err, 1e-8)


def _potential_even():
    g = make_grid(33, 17)
    m = MembranePair.parabolic(g, 0.2, 0.1)
    w = solve_potential(m, Params(eps=0.3)).phi_tilde
    return _le("potential_even", np.max(np.abs(w.values - w.mirrored().values)), 1e-12)


def _barrier():
    g = make_grid(33, 17)
    m = MembranePair.parabolic(g, 0.2, 0.1)
    rep = barrier_check(m, Params(eps=0.3))
    margin = min(rep.stationary_lower, rep.stationary_upper) + rep.slack
    return CheckResult("potential_barriers", margin, 0.0, rep.passed)


def _J_closed_form():
    return _le("J_at_one", abs(J(1.0) - 5 / (6 * np.sqrt(2))), 1e-12)


def _xi0_limit():
    return _le("xi0_small_eps", abs(xi0(0.01) - 2), 1e-3)


def _bound_value():
    g = make_grid(33, 9)
    m = MembranePair.flat(g)
    b = touchdown_bound(m.u, m.v, g.x, Params(eps=0.1, lam=100, mu=100))
    return _le("touchdown_bound_value", abs(b - 1 / 30), 1e-14)


def _gap_functional():
    return _le("gap_functional_flat", abs(gap_functional(MembranePair.flat(make_grid(33, 9)))), 0.0)


def _fixed_point_origin():
    g = make_grid(33, 17)
    F = fixed_point_map((0.0, 0.0), MembranePair.flat(g), Params())
    return _le("fixed_point_origin", max(np.max(np.abs(F.u)), np.max(np.abs(F.vhat))), 0.0)


def _curvature_gradient():
    g = make_grid(33, 9)
    w = -0.2 * (1 - g.x**2) * (1 + 0.3 * g.x)
    eps = 0.5
    Ja = curvature_jacobian(w, eps, g.hx)

    def f(X):
        full = np.concatenate([[0.0], X, [0.0]])
        c = (1 + (eps * (full[2:] - full[:-2]) / (2 * g.hx)) ** 2) ** -1.5
        return -(full[2:] - 2 * full[1:-1] + full[:-2]) / g.hx**2 * c

    Jf = fd_jacobian(f, w[1:-1], threads=1)
    return _le("curvature_jacobian", np.linalg.norm(Ja - Jf) / np.linalg.norm(Ja), 1e-5)


def _short_evolution():
    g = make_grid(33, 17)
    p = Params(eps=0.2, lam=0.5, mu=0.5, t_end=0.01, sample_every=5)
    traj, _ = evolve(MembranePair.parabolic(g, 0.1, 0.05), p)
    return [_le("evolve_even", traj.max_mirror_mismatch(), 1e-9),
            _le("evolve_sign_bounds", traj.sign_violation(), 1e-8)]


def _sar_mirror():
    g = make_grid(33, 9)
    m = MembranePair.parabolic(g, 0.1)
    traj = sar_evolve(m, Params(lam=0.5, mu=0.5, t_end=0.02, sample_every=1))
    err = max(np.max(np.abs(s.u + 1 + s.v)) for s in traj.states)
    return _le("sar_mirror_identity", err, 1e-10)


def _sar_potential_bc():
    g = make_grid(33, 9)
    s = sar_potential(MembranePair.parabolic(g, 0.2, 0.1))
    err = max(np.max(np.abs(s.values[:, 0])), np.max(np.abs(s.values[:, -1] - 1)))
    return _le("sar_potential_bc", err, 0.0)


CHECKS = (_flat_potential, _flat_forcing, _potential_even, _barrier, _J_closed_form,
          _xi0_limit, _bound_value, _gap_functional, _fixed_point_origin,
          _curvature_gradient, _short_evolution, _sar_mirror, _sar_potential_bc)


def run_all() -> list[CheckResult]:
    out = []
    for chk in CHECKS:
        res = chk()
        out.extend(res if isinstance(res, list) else [res])
    return out
