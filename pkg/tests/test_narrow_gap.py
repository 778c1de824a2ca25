import numpy as np
import pytest

from conftest import random_even_state, random_state
from dfmems.core import MembranePair, MovingSamples, Params, make_grid, moving_nodes
from dfmems.evolution import step_imex
from dfmems.narrow_gap import (ConvergenceTable, compare_to_sar, potential_distance,
                               sar_evolve, sar_potential, sar_step, state_distance,
                               worker_count)


def test_sar_potential_flat(small_grid):
    s = sar_potential(MembranePair.flat(small_grid))
    assert np.max(np.abs(s.values - (s.z + 1))) < 1e-15


def test_sar_potential_boundary_exact(small_grid, rng):
    s = sar_potential(random_state(small_grid, rng))
    assert np.all(s.values[:, 0] == 0.0) and np.all(s.values[:, -1] == 1.0)


def test_sar_potential_slope(small_grid, rng):
    m = random_state(small_grid, rng)
    s = sar_potential(m)
    dz = np.diff(s.values, axis=1) / np.diff(s.z, axis=1)
    assert np.max(np.abs(dz - 1 / m.gap[:, None])) < 1e-10


def test_sar_potential_collapsed(small_grid):
    m = MembranePair(small_grid, np.full(small_grid.nx, -0.5), np.full(small_grid.nx, -0.5))
    with pytest.raises(ValueError, match="domain collapsed"):
        sar_potential(m)


def test_sar_step_flat_matches_full_model(small_grid):
    m = MembranePair.flat(small_grid)
    a = sar_step(m, 1.0, 2.0, 1e-4)
    b = step_imex(m, Params(eps=0.3, lam=1.0, mu=2.0), 1e-4)
    assert np.max(np.abs(a.u - b.u)) < 1e-14 and np.max(np.abs(a.v - b.v)) < 1e-14


def test_sar_first_step_forcing_sign(small_grid):
    m1 = sar_step(MembranePair.flat(small_grid), 1.0, 1.0, 1e-4)
    assert np.all(m1.u[1:-1] < 0) and np.all(m1.vhat[1:-1] > 0)


def test_sar_mirror_identity_each_step(small_grid, rng):
    a = rng.uniform(0.05, 0.3)
    m = MembranePair.parabolic(small_grid, a)
    for _ in range(50):
        m = sar_step(m, 0.8, 0.8, 2e-4)
        assert np.max(np.abs(m.u + 1 + m.v)) <= 1e-10


def test_sar_local_order(rng):
    g = make_grid(33, 9)
    m0 = random_state(g, rng)
    diffs = []
    for dt in (2.5e-4, 1.25e-4, 6.25e-5):
        one = sar_step(m0, 0.5, 0.5, dt)
        two = sar_step(sar_step(m0, 0.5, 0.5, dt / 2), 0.5, 0.5, dt / 2)
        diffs.append(max(np.max(np.abs(one.u - two.u)), np.max(np.abs(one.v - two.v))))
    assert np.all(np.log2(np.array(diffs[:-1]) / np.array(diffs[1:])) >= 1.8)


def test_sar_small_voltage_completes(small_grid):
    traj = sar_evolve(MembranePair.flat(small_grid), Params(lam=0.5, mu=0.5, t_end=0.1))
    assert traj.termination == "completed"
    assert np.min(traj.diagnostics["min_gap"]) > 0.5


def test_sar_large_voltage_touches_down(small_grid):
    traj = sar_evolve(MembranePair.flat(small_grid), Params(lam=50, mu=50, t_end=0.1))
    assert traj.termination == "touchdown"
    assert 0 < traj.final.min_gap < 1e-3


def test_sar_even_states(small_grid, rng):
    traj = sar_evolve(random_even_state(small_grid, rng), Params(lam=1.0, mu=0.3, t_end=0.05))
    assert traj.max_mirror_mismatch() <= 1e-12
    assert traj.sign_violation() <= 1e-8


def test_one_step_gap_shrinks_with_eps(rng):
    g = make_grid(33, 17)
    m = random_state(g, rng)
    sar = sar_step(m, 0.5, 0.5, 1e-4)
    diffs = []
    for eps in (0.2, 0.1, 0.05):
        full = step_imex(m, Params(eps=eps, lam=0.5, mu=0.5), 1e-4)
        diffs.append(np.max(np.abs(full.u - sar.u)) + np.max(np.abs(full.v - sar.v)))
    assert diffs[0] > diffs[1] > diffs[2]


def test_self_comparison_is_zero(small_grid):
    p = Params(lam=0.5, mu=0.5, t_end=0.02)
    traj = sar_evolve(MembranePair.flat(small_grid), p)
    assert state_distance(traj, traj) == 0.0
    fin = traj.final
    assert potential_distance(sar_potential(fin), fin) < 1e-15


def test_potential_distance_of_disjoint_support():
    g = make_grid(33, 9)
    flat = MembranePair.flat(g)
    # a potential that is zero everywhere differs from phi_* = z + 1 by ∫∫ (z+1)² = 2/3
    zero = MovingSamples(moving_nodes(flat), np.zeros((g.nx, g.nz)))
    assert abs(potential_distance(zero, flat) - np.sqrt(2 / 3)) < 1e-14


def test_mismatched_time_grids_rejected(small_grid):
    a = sar_evolve(MembranePair.flat(small_grid), Params(t_end=0.01))
    b = sar_evolve(MembranePair.flat(small_grid), Params(t_end=0.02))
    with pytest.raises(ValueError, match="time grid"):
        state_distance(a, b)


def test_compare_monotone_small():
    g = make_grid(33, 17)
    table = compare_to_sar([0.2, 0.1, 0.05], MembranePair.flat(g),
                           Params(lam=0.5, mu=0.5, t_end=0.05))
    assert table.strictly_decreasing(), table.rows()


def test_convergence_table_csv(tmp_path):
    t = ConvergenceTable(np.array([0.2, 0.1]), np.array([2.0, 1.0]), np.array([0.5, 0.25]))
    t.write(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "eps,d_state,d_potential", "0.2,2.0,0.5", "0.1,1.0,0.25"]
    assert t.strictly_decreasing()
    assert not ConvergenceTable(t.eps, t.d_state[::-1], t.d_potential).strictly_decreasing()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MEMS_SIM_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MEMS_SIM_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("MEMS_SIM_THREADS")
    assert worker_count() >= 1
