"""Acceptance criteria 1-13, each at its stated tolerance and runtime budget.

Every criterion records one PASS/FAIL line, printed in the terminal summary.
"""
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from conftest import ACCEPTANCE_RESULTS, random_state
from oracles import exact_psi, manufactured_forcing, membrane_exprs
from dfmems.cli import run
from dfmems.core import MembranePair, Params, make_grid
from dfmems.elliptic import assemble, solve_dirichlet, solve_potential, trace_forcing
from dfmems.evolution import curvature_apply, evolve
from dfmems.narrow_gap import compare_to_sar, sar_evolve
from dfmems.steady import (J, curvature_jacobian, fd_jacobian, init_family, linearize,
                           pullin_sweep, solve_steady, spectral_abscissa,
                           stability_experiment, xi0)


def record(num, title, ok, detail):
    ACCEPTANCE_RESULTS.append((num, title, bool(ok), detail))
    assert ok, f"criterion {num} ({title}) failed: {detail}"


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# shared runs, reused by criterion 12 (sign bounds along every evolution run)
@pytest.fixture(scope="module")
def touchdown_run():
    g = make_grid(257, 17)
    p = Params(eps=0.1, lam=100, mu=100, dt=1e-6, t_end=0.05)
    return timed(evolve, MembranePair.flat(g), p) + (p,)


@pytest.fixture(scope="module")
def even_run():
    g = make_grid(65, 33)
    p = Params(eps=0.1, lam=0.5, mu=0.5, t_end=0.1, sample_every=1)
    return evolve(MembranePair.parabolic(g, 0.2, 0.1), p)


@pytest.fixture(scope="module")
def sar_mirror_run():
    g = make_grid(65, 9)
    p = Params(lam=0.5, mu=0.5, t_end=0.1, sample_every=1)
    return sar_evolve(MembranePair.parabolic(g, 0.25), p)


@pytest.fixture(scope="module")
def steady_states():
    g = make_grid(65, 33)
    p = Params(eps=0.1, lam=0.05, mu=0.05)
    inits = init_family(g)[:3]
    return p, [solve_steady(p, m) for m in inits]


@pytest.fixture(scope="module")
def stability(steady_states):
    p, states = steady_states
    return timed(stability_experiment, states[0], p, t_end=3.0)


def test_criterion_01_flat_state_oracle():
    g = make_grid(65, 65)
    m = MembranePair.flat(g)
    p = Params(eps=0.1)
    (phi, t_phi) = timed(solve_potential, m, p)
    tf, t_tf = timed(trace_forcing, m, p)
    e_phi = np.max(np.abs(phi.phi_tilde.values - g.z[None, :]))
    e_g = max(np.max(np.abs(tf.g1.values - 1)), np.max(np.abs(tf.g2.values - 1)))
    runtime = t_phi + t_tf
    record(1, "flat-state oracle", e_phi <= 1e-10 and e_g <= 1e-8 and runtime < 1.0,
           f"phi err {e_phi:.2e} (<=1e-10), g err {e_g:.2e} (<=1e-8), {runtime:.3f}s (<1s)")


def test_criterion_02_manufactured_convergence():
    t0 = time.perf_counter()
    orders_all = []
    for seed in (101, 102, 103):
        rng = np.random.default_rng(seed)
        coeffs = (rng.uniform(0.05, 0.3), rng.uniform(-0.5, 0.5),
                  rng.uniform(0.05, 0.3), rng.uniform(-0.5, 0.5))
        eps = rng.uniform(0.2, 1.0)
        F = manufactured_forcing(*membrane_exprs(*coeffs), eps)
        a, b, c, d = coeffs
        errs = []
        for n in (33, 65, 129):
            g = make_grid(n, n)
            bump = 1 - g.x**2
            m = MembranePair(g, -a * bump * (1 + b * g.x), -1 + c * bump * (1 + d * g.x))
            psi = solve_dirichlet(assemble(m, Params(eps=eps)),
                                  F(g.x[:, None], g.z[None, :]) * np.ones((n, n)))
            err = psi - exact_psi(g)
            errs.append(np.sqrt(trapezoid(trapezoid(err**2, g.z, axis=1), g.x)))
        orders_all.extend(np.log2(np.array(errs[:-1]) / np.array(errs[1:])))
    runtime = time.perf_counter() - t0
    worst = min(orders_all)
    record(2, "manufactured-solution convergence", worst >= 1.8 and runtime < 30,
           f"min observed L2 order {worst:.3f} (>=1.8) over 3 states, {runtime:.1f}s (<30s)")


def test_criterion_03_threshold_functions():
    t0 = time.perf_counter()
    e_J1 = abs(J(1.0) - 5 / (6 * np.sqrt(2)))
    r = np.linspace(0, 100, 10_001)
    j = J(r)
    inc = bool(np.all(np.diff(j) > 0))
    concave = bool(np.all(np.diff(j, 2) <= 1e-15))
    sup = float(np.max(j))
    e_xi = abs(xi0(0.01) - 2)
    runtime = time.perf_counter() - t0
    ok = e_J1 <= 1e-12 and inc and concave and sup < 2 / 3 and e_xi < 1e-3 and runtime < 1
    record(3, "threshold functions", ok,
           f"|J(1)-5/(6√2)|={e_J1:.1e}, increasing={inc}, concave={concave}, "
           f"sup J={sup:.6f}<2/3, |xi0(0.01)-2|={e_xi:.2e}, {runtime:.3f}s")


def test_criterion_04_touchdown_bound(touchdown_run):
    (traj, rep), runtime, p = touchdown_run
    ok = (rep.termination == "touchdown" and rep.bound_applicable
          and rep.observed_time <= 1 / 30 + p.dt and runtime < 120)
    record(4, "touchdown bound", ok,
           f"termination={rep.termination}, T_obs={rep.observed_time:.6g} <= "
           f"{rep.analytic_bound:.6g}+dt, nx=257, {runtime:.1f}s (<120s)")


@pytest.mark.parametrize("eps", [0.3, 0.1])
def test_criterion_05_pullin_vs_nonexistence(eps):
    res, runtime = timed(pullin_sweep, Params(eps=eps), np.linspace(0, 2 / eps, 81),
                         make_grid(33, 17))
    ok = res.fold_estimate is not None and res.fold_estimate <= xi0(eps) + 1e-2 and runtime < 300
    record(5, f"pull-in vs non-existence (eps={eps})", ok,
           f"fold {res.fold_estimate:.5f} <= xi0+0.01 = {xi0(eps) + 1e-2:.5f}, {runtime:.1f}s (<300s)")


def test_criterion_06_symmetry_preservation(even_run):
    traj, _ = even_run
    mm = traj.max_mirror_mismatch()
    ok = mm <= 1e-9 and traj.times[-1] == 0.1
    record(6, "symmetry preservation", ok,
           f"max mirror mismatch {mm:.2e} (<=1e-9) over {len(traj.times)} samples to t=0.1")


def test_criterion_07_sar_mirror_identity(sar_mirror_run):
    traj = sar_mirror_run
    err = max(np.max(np.abs(s.u + 1 + s.v)) for s in traj.states)
    record(7, "narrow-gap mirror identity", err <= 1e-10,
           f"max |u+1+v| {err:.2e} (<=1e-10) over {len(traj.states)} steps")


def test_criterion_08_vanishing_aspect_ratio():
    g = make_grid(65, 17)
    table, runtime = timed(compare_to_sar, [0.2, 0.1, 0.05, 0.025], MembranePair.flat(g),
                           Params(lam=0.5, mu=0.5, t_end=0.1))
    ok = table.strictly_decreasing() and runtime < 600
    ds = ", ".join(f"{v:.2e}" for v in table.d_state)
    dp = ", ".join(f"{v:.2e}" for v in table.d_potential)
    record(8, "vanishing-aspect-ratio convergence", ok,
           f"d_state [{ds}], d_potential [{dp}], strictly decreasing={table.strictly_decreasing()}, "
           f"{runtime:.1f}s (<600s)")


def test_criterion_09_steady_states(steady_states):
    _, states = steady_states
    res = max(s.residual_norm for s in states)
    conv = all(s.converged for s in states)
    even = max(s.U.mirror_mismatch() for s in states)
    convex = all(s.convex() for s in states)
    ref = states[0].U
    spread = max(max(np.max(np.abs(s.U.u - ref.u)), np.max(np.abs(s.U.v - ref.v))) for s in states)
    ok = conv and res <= 1e-10 and even <= 1e-9 and convex and spread <= 1e-8
    record(9, "steady states", ok,
           f"residual {res:.1e} (<=1e-10), mirror {even:.1e}, convex={convex}, "
           f"spread over 3 inits {spread:.1e} (<=1e-8)")


def test_criterion_10_stability(stability):
    rep, runtime = stability
    t0 = time.perf_counter()
    g = make_grid(129, 9)
    top = spectral_abscissa(linearize(MembranePair.flat(g), Params(eps=0.1, lam=0, mu=0), threads=1))
    runtime += time.perf_counter() - t0
    rel = abs(top + np.pi**2 / 4) / (np.pi**2 / 4)
    ok = (rep.spectral_abscissa < 0 and rep.fitted_decay_rate is not None
          and rep.fitted_decay_rate > 0 and rel <= 0.02 and runtime < 300)
    record(10, "stability", ok,
           f"abscissa {rep.spectral_abscissa:.4f}<0, fitted rate {rep.fitted_decay_rate}, "
           f"top eig at Lambda=0 {top:.4f} (rel err {rel:.1e} <= 2%), {runtime:.1f}s (<300s)")


def test_stability_rate_matches_linearization(stability):
    # not an acceptance criterion: linearization dominance at the smallest Lambda
    rep, _ = stability
    ratio = rep.fitted_decay_rate / abs(rep.spectral_abscissa)
    assert 0.5 <= ratio <= 2.0


def test_criterion_11_gradient_check():
    rng = np.random.default_rng(2024)
    g = make_grid(65, 9)
    worst = 0.0
    for _ in range(5):
        w = random_state(g, rng).u
        eps = rng.uniform(0.1, 1.0)
        Ja = curvature_jacobian(w, eps, g.hx)
        f = lambda X: curvature_apply(eps * np.r_[0, X, 0], np.r_[0, X, 0], g.hx)[1:-1]
        Jf = fd_jacobian(f, w[1:-1], threads=1)
        worst = max(worst, np.linalg.norm(Ja - Jf) / np.linalg.norm(Ja))
    record(11, "curvature Jacobian gradient check", worst <= 1e-5,
           f"max relative error {worst:.2e} (<=1e-5) on 5 random states")


def test_criterion_12_sign_bounds(touchdown_run, even_run, sar_mirror_run, stability):
    rep, _ = stability
    trajs = [touchdown_run[0][0], even_run[0], sar_mirror_run]
    worst_u = max(max(float(np.max(s.u)) for s in t.states) for t in trajs)
    worst_v = min(min(float(np.min(s.v)) for s in t.states) for t in trajs)
    ok = (worst_u <= 1e-8 and worst_v >= -1 - 1e-8 and rep.termination == "completed"
          and rep.sign_violation <= 1e-8)
    record(12, "sign bounds along evolution runs", ok,
           f"max u {worst_u:.2e} (<=1e-8), min v {worst_v:.12f} (>=-1-1e-8) on criteria 4/6/7 runs; "
           f"stability run excursion {rep.sign_violation:.1e}")


def test_criterion_13_determinism(tmp_path, capsys):
    def files(root):
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    codes = []
    for tag in ("a", "b"):
        codes.append(run(["selfcheck", "-o", str(tmp_path / f"sc_{tag}")]))
        codes.append(run(["evolve", "--nx", "33", "--nz", "17", "--init", "parabolic:0.2",
                          "--t-end", "0.02", "-o", str(tmp_path / f"ev_{tag}")]))
    capsys.readouterr()
    same_sc = files(tmp_path / "sc_a") == files(tmp_path / "sc_b")
    same_ev = files(tmp_path / "ev_a") == files(tmp_path / "ev_b")
    n_files = len(files(tmp_path / "ev_a")) + len(files(tmp_path / "sc_a"))
    ok = same_sc and same_ev and codes == [0, 0, 0, 0]
    record(13, "determinism", ok,
           f"selfcheck identical={same_sc}, evolve identical={same_ev} ({n_files} files), "
           f"exit codes {codes}")
