"""Command-line driver: ``dfmems <subcommand> [--config FILE] [overrides]``.

Exit codes: 0 success, 1 model-level outcome that fails the run's check,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import Grid, MembranePair, Params, make_grid
from .export import write_csv, write_json, write_potential_csv, write_state_csv

log = logging.getLogger("dfmems")

EXIT_OK, EXIT_MODEL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    eps: float = 0.1
    lam: float = 0.5
    mu: float = 0.5
    kappa: float = 0.05
    q: float = 4.0
    nx: int = 65
    nz: int = 33
    dt: float | None = None
    t_end: float = 0.1
    gap_tol: float = 1e-3
    init: str = "flat"
    output_dir: str = "out"
    sample_every: int = 10

    def params(self) -> Params:
        return Params(eps=self.eps, lam=self.lam, mu=self.mu, kappa=self.kappa, q=self.q,
                      dt=self.dt, t_end=self.t_end, gap_tol=self.gap_tol,
                      sample_every=self.sample_every)

    def grid(self) -> Grid:
        return make_grid(self.nx, self.nz)

    def initial_state(self) -> MembranePair:
        return build_init(self.init, self.grid())


# config key -> (attribute, converter)
_KEYS = {
    "eps": ("eps", float), "lambda": ("lam", float), "mu": ("mu", float),
    "kappa": ("kappa", float), "q": ("q", float), "nx": ("nx", int), "nz": ("nz", int),
    "dt": ("dt", float), "t_end": ("t_end", float), "gap_tol": ("gap_tol", float),
    "init": ("init", str), "output_dir": ("output_dir", str),
    "sample_every": ("sample_every", int),
}


def _parse_init(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "flat" and not arg:
        return "flat", None
    if kind == "parabolic":
        try:
            a = float(arg)
        except ValueError:
            raise ConfigError(f"init: bad parabolic amplitude {arg!r}") from None
        if not 0.0 <= a < 0.5:
            raise ConfigError(f"init: parabolic amplitude must lie in [0, 1/2), got {a!r} "
                              "(the gap at x=0 is 1-2a)")
        return "parabolic", a
    if kind == "file" and arg:
        return "file", arg
    raise ConfigError(f"init: expected flat | parabolic:a | file:path, got {spec!r}")


def build_init(spec: str, grid: Grid) -> MembranePair:
    kind, arg = _parse_init(spec)
    if kind == "flat":
        return MembranePair.flat(grid)
    if kind == "parabolic":
        return MembranePair.parabolic(grid, arg)
    path = Path(arg)
    if not path.is_file():
        raise ConfigError(f"init: file not found: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (grid.nx, 3):
        raise ConfigError(f"init: {path} must hold {grid.nx} rows of x,u,v")
    if np.max(np.abs(data[:, 0] - grid.x)) > 1e-12:
        raise ConfigError(f"init: x column of {path} does not match the grid")
    return MembranePair(grid, data[:, 1], data[:, 2])


def _validate(cfg: SimConfig):
    checks = [
        ("eps", 0.0 < cfg.eps <= 1.0, "must lie in (0, 1]"),
        ("lambda", cfg.lam >= 0.0, "must be non-negative"),
        ("mu", cfg.mu >= 0.0, "must be non-negative"),
        ("kappa", 0.0 < cfg.kappa < 0.5, "must lie in (0, 1/2)"),
        ("q", cfg.q >= 2.0, "must be at least 2"),
        ("nx", cfg.nx >= 9 and cfg.nx % 2 == 1, "must be odd and at least 9"),
        ("nz", cfg.nz >= 9 and cfg.nz % 2 == 1, "must be odd and at least 9"),
        ("dt", cfg.dt is None or cfg.dt > 0.0, "must be positive"),
        ("t_end", cfg.t_end > 0.0, "must be positive"),
        ("gap_tol", cfg.gap_tol > 0.0, "must be positive"),
        ("sample_every", cfg.sample_every >= 1, "must be a positive integer"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{key} {msg}")
    _parse_init(cfg.init)


def parse_config(path=None, **overrides) -> SimConfig:
    """Read a flat key=value file (``#`` comments allowed) and apply overrides."""
    cfg = SimConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            if key not in _KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr, conv = _KEYS[key]
            try:
                setattr(cfg, attr, conv(value))
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, _KEYS[key][0], value)
    _validate(cfg)
    return cfg


def _out(cfg: SimConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_evolve(cfg, args):
    from .evolution import evolve
    traj, rep = evolve(cfg.initial_state(), cfg.params())
    out = _out(cfg)
    traj.write(out)
    write_json(out / "touchdown.json", rep.as_dict())
    if args.dump_potential:
        from .elliptic import solve_potential
        phi = solve_potential(traj.final, cfg.params(), check_admissible=False)
        write_potential_csv(out / "final_potential.csv", phi)
    print(f"termination={traj.termination} t={float(traj.times[-1])!r} "
          f"min_gap={rep.min_gap_at_end!r}")
    return _expect(traj.termination, args.expect)


def cmd_sar(cfg, args):
    from .narrow_gap import sar_evolve
    traj = sar_evolve(cfg.initial_state(), cfg.params())
    traj.write(_out(cfg))
    print(f"termination={traj.termination} t={float(traj.times[-1])!r}")
    return _expect(traj.termination, args.expect)


def _expect(termination, expect):
    if termination in ("norm_blowup", "solver_failure"):
        return EXIT_MODEL
    if expect != "any" and termination != expect:
        return EXIT_MODEL
    return EXIT_OK


def cmd_sar_compare(cfg, args):
    from .narrow_gap import compare_to_sar
    eps_list = [float(e) for e in args.eps_list.split(",")]
    table = compare_to_sar(eps_list, cfg.initial_state(), cfg.params())
    table.write(_out(cfg) / "convergence.csv")
    for e, ds, dp in table.rows():
        print(f"eps={e!r} d_state={ds!r} d_potential={dp!r}")
    ok = table.strictly_decreasing()
    print(f"{'PASS' if ok else 'FAIL'} distances strictly decreasing in eps")
    return EXIT_OK if ok else EXIT_MODEL


def cmd_steady(cfg, args):
    from .steady import solve_steady
    S = solve_steady(cfg.params(), cfg.initial_state())
    out = _out(cfg)
    write_json(out / "steady.json", {
        "converged": S.converged, "residual_norm": S.residual_norm,
        "newton_iters": S.newton_iters, "lambda": S.lam, "mu": S.mu,
        "min_gap": S.U.min_gap, "mirror_mismatch": S.U.mirror_mismatch(),
        "convex": S.convex()})
    write_state_csv(out / "steady_state.csv", S.U)
    if args.dump_potential and S.Phi is not None:
        write_potential_csv(out / "steady_potential.csv", S.Phi)
    print(f"converged={S.converged} residual={S.residual_norm!r} iters={S.newton_iters}")
    return EXIT_OK if S.converged else EXIT_MODEL


def cmd_sweep(cfg, args):
    from .steady import pullin_sweep
    lam_max = args.lambda_max if args.lambda_max is not None else 2.0 / cfg.eps
    grid = np.linspace(0.0, lam_max, args.points)
    res = pullin_sweep(cfg.params(), grid, cfg.grid(), ratio=args.ratio)
    out = _out(cfg)
    res.write(out / "continuation.csv")
    write_json(out / "sweep.json", {
        "eps": cfg.eps, "ratio": args.ratio, "fold_estimate": res.fold_estimate,
        "fold_detected": res.fold_detected, "xi0": res.xi0, "within_bound": res.within_bound})
    print(f"fold_estimate={res.fold_estimate!r} xi0={res.xi0!r} within_bound={res.within_bound}")
    return EXIT_OK if res.within_bound else EXIT_MODEL


def cmd_stability(cfg, args):
    from .steady import default_perturbation, solve_steady, stability_experiment
    p = cfg.params()
    S = solve_steady(p, cfg.initial_state())
    if not S.converged:
        print("steady solve did not converge", file=sys.stderr)
        return EXIT_MODEL
    rep = stability_experiment(S, p, default_perturbation(S.U.grid, args.rho), t_end=args.horizon)
    out = _out(cfg)
    write_json(out / "stability.json", rep.as_dict())
    write_csv(out / "stability_distance.csv", ("t", "distance"), zip(rep.times, rep.distances))
    print(f"spectral_abscissa={rep.spectral_abscissa!r} fitted_decay_rate={rep.fitted_decay_rate!r}")
    ok = rep.spectral_abscissa < 0 and (rep.fitted_decay_rate is None or rep.fitted_decay_rate > 0)
    return EXIT_OK if ok else EXIT_MODEL


def cmd_bound_check(cfg, args):
    from .evolution import evolve, touchdown_bound
    m0 = cfg.initial_state()
    p = cfg.params()
    bound = touchdown_bound(m0.u, m0.v, m0.grid.x, p)
    if bound is not None:
        # run just past the bound so the check always terminates
        p = replace(p, t_end=bound + 2 * p.step_size(m0.grid))
    traj, rep = evolve(m0, p)
    write_json(_out(cfg) / "bound_check.json", rep.as_dict())
    print(f"analytic_bound={rep.analytic_bound!r} observed_time={rep.observed_time!r} "
          f"termination={rep.termination}")
    if rep.bound_applicable and rep.termination != "touchdown":
        return EXIT_MODEL
    return EXIT_OK if rep.consistent else EXIT_MODEL


def cmd_selfcheck(cfg, args):
    from .selfcheck import run_all
    results = run_all()
    write_csv(_out(cfg) / "selfcheck.csv", ("check", "value", "threshold", "passed"),
              ((r.name, r.value, r.threshold, r.passed) for r in results))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} value={r.value!r} threshold={r.threshold!r}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_MODEL


COMMANDS = {
    "evolve": cmd_evolve, "sar": cmd_sar, "sar-compare": cmd_sar_compare,
    "steady": cmd_steady, "sweep": cmd_sweep, "stability": cmd_stability,
    "bound-check": cmd_bound_check, "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfmems",
                                     description="Two-membrane electrostatic MEMS simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="key=value configuration file")
        sp.add_argument("--eps", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--mu", type=float)
        sp.add_argument("--kappa", type=float)
        sp.add_argument("--nx", type=int)
        sp.add_argument("--nz", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--t-end", dest="t_end", type=float)
        sp.add_argument("--gap-tol", dest="gap_tol", type=float)
        sp.add_argument("--init")
        sp.add_argument("-o", "--output-dir", dest="output_dir")
        sp.add_argument("--sample-every", dest="sample_every", type=int)
        if name in ("evolve", "steady"):
            sp.add_argument("--dump-potential", action="store_true",
                            help="also write phi~ as x,z,phi rows")
        if name in ("evolve", "sar"):
            sp.add_argument("--expect", choices=("any", "completed", "touchdown"), default="any")
        if name == "sar-compare":
            sp.add_argument("--eps-list", default="0.2,0.1,0.05,0.025")
        if name == "sweep":
            sp.add_argument("--lambda-max", type=float)
            sp.add_argument("--points", type=int, default=81)
            sp.add_argument("--ratio", type=float, default=1.0)
        if name == "stability":
            sp.add_argument("--rho", type=float, default=1e-3)
            sp.add_argument("--horizon", type=float, default=3.0)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {"eps": args.eps, "lambda": args.lam, "mu": args.mu, "kappa": args.kappa,
                 "nx": args.nx, "nz": args.nz, "dt": args.dt, "t_end": args.t_end,
                 "gap_tol": args.gap_tol, "init": args.init, "output_dir": args.output_dir,
                 "sample_every": args.sample_every}
    try:
        cfg = parse_config(args.config, **overrides)
        cfg.initial_state()
    except ConfigError as exc:
        print(f"dfmems: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except ValueError as exc:
        print(f"dfmems: {exc}", file=sys.stderr)
        return EXIT_MODEL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
