"""``nsv`` command line: run, verify, galerkin, stability.

Exit codes: 0 success, 1 a mandatory estimate failed, 2 configuration or usage
error, 3 numerical abort (non-finite state).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import coupling, galerkin, io, verify
from .config import ConfigError, _float, load_config
from .core import ParticleEnsemble, SimConfig, sample_maxwellian

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("nsv")


def _csv_list(conv):
    def parse(text):
        try:
            return [conv(t) for t in text.replace(",", " ").split()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}")
    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="nsv", description="Navier-Stokes-Vlasov simulator and estimate checker")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="coupled simulation to sim.t_end")
    r.add_argument("config")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    r.add_argument("--out", help="output directory (default: sim.output)")

    v = sub.add_parser("verify", help="run an estimate suite on fresh desk-scale runs")
    v.add_argument("suite")
    v.add_argument("--config", help="config file supplying the [verify] slacks")
    v.add_argument("--set", dest="overrides", action="append", default=[])
    v.add_argument("--out", default=".", help="directory for the JSON report")

    g = sub.add_parser("galerkin", help="Galerkin fixed points over modes x lambdas against a direct run")
    g.add_argument("config")
    g.add_argument("--modes", type=_csv_list(int))
    g.add_argument("--lambdas", type=_csv_list(_float))
    g.add_argument("--set", dest="overrides", action="append", default=[])
    g.add_argument("--out")

    s = sub.add_parser("stability", help="continuous-dependence experiment")
    s.add_argument("config")
    s.add_argument("--eps", type=_csv_list(float), default=[1e-2, 5e-3, 2.5e-3])
    s.add_argument("--target", choices=("u", "f"), default="u")
    s.add_argument("--set", dest="overrides", action="append", default=[])
    s.add_argument("--out")
    return p


def _out_dir(args, cfg):
    return io.ensure_dir(args.out or cfg["sim"]["output"])


def _manifest(cfg, overrides):
    m = io.RunManifest(config_hash=cfg.digest(), seed=cfg["sim"]["seed"], config=cfg.as_dict())
    m.config["overrides"] = list(overrides)
    return m


def _snapshot(out, state: coupling.SimState, seed, label):
    prefix = os.path.join(out, f"{label}")
    files = io.write_velocity(prefix, state.u, state.t)
    kin = state.kinetic
    if isinstance(kin, ParticleEnsemble):
        files += io.write_ensemble(prefix + "_particles.bin", kin, state.t, seed)
    else:
        files += io.write_phase_grid(prefix + "_f.bin", kin)
    return files


def cmd_run(args):
    cfg = load_config(args.config, args.overrides)
    out = _out_dir(args, cfg)
    sim = cfg.sim
    grid = cfg.grid()
    man = _manifest(cfg, args.overrides)
    state = coupling.initial_state(cfg.initial_velocity(grid), cfg.initial_kinetic(grid))
    every = sim.snapshot_every
    seed = cfg["sim"]["seed"]

    def on_step(st, row):
        if every and st.step % every == 0:
            man.add(_snapshot(out, st, seed, f"snap_{st.step:06d}"))

    ledger_path = os.path.join(out, "ledger.csv")
    try:
        state, ledger = coupling.run(state, sim, callback=on_step)
    except coupling.NumericalAbort as exc:
        log.error("%s", exc)
        man.add(_snapshot(out, exc.last_good, seed, "last_good"))
        man.status = "aborted"
        path = os.path.join(out, "manifest.json")
        man.add([path])
        man.write(path)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    ledger.write_csv(ledger_path)
    man.add([ledger_path])
    man.add(_snapshot(out, state, seed, "final"))
    man.status = "ok"
    manifest_path = os.path.join(out, "manifest.json")
    man.add([manifest_path])
    man.write(manifest_path)
    E = ledger.energies()
    print(f"{len(ledger.rows)} steps to t={state.t:.6g}; E {E[0]:.6g} -> {E[-1]:.6g}; "
          f"total residual {ledger.total_residual():.3e}; output in {out}")
    return EXIT_OK


def cmd_verify(args):
    if args.suite not in verify.SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(verify.SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = load_config(args.config, args.overrides)
    reports = verify.run_suite(args.suite, cfg["verify"])
    out = io.ensure_dir(args.out)
    path = os.path.join(out, f"verify_{args.suite}.json")
    with open(path, "w") as fh:
        json.dump([r.as_dict() for r in reports], fh, indent=1, default=_json_default)
    print(verify.format_table(reports))
    ok = verify.all_passed(reports)
    print(f"{'all mandatory estimates passed' if ok else 'FAILED'}; report in {path}")
    return EXIT_OK if ok else EXIT_FAIL


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return float(x)


def _lam_tag(lam):
    return "inf" if math.isinf(lam) else f"{lam:g}"


def cmd_galerkin(args):
    cfg = load_config(args.config, args.overrides)
    gl = cfg["galerkin"]
    modes = args.modes or gl["modes"]
    lams = args.lambdas or gl["lambdas"]
    if not modes or not lams:
        raise ConfigError("mode and lambda lists must be nonempty")
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ConfigError("lambda list must be strictly increasing")
    grid = cfg.grid()
    cap = galerkin.mode_cap(grid)
    if any(not 1 <= m <= cap for m in modes):
        raise ConfigError(f"mode counts must lie in [1, {cap}] for this grid")
    out = _out_dir(args, cfg)
    man = _manifest(cfg, args.overrides)
    sim = cfg.sim
    u0 = cfg.initial_velocity(grid)
    kin = _particles_for(cfg, grid)
    ref_cfg = SimConfig(dt=sim.dt, t_end=sim.t_end, mu=sim.mu, upwind=0.0, theta=0.5,
                        deposition=sim.deposition, seed=sim.seed)
    ref, _ = galerkin.direct_solve(u0, kin, ref_cfg)
    solver = galerkin.ParticleKineticSolver(kin, grid, sim.deposition)
    rows = []
    energy_tol = cfg["verify"]["galerkin_energy_tol"]
    all_ok = True
    for m in modes:
        gcfg = galerkin.GalerkinConfig(m=m, dt=sim.dt, t_end=sim.t_end, mu=sim.mu, tol=gl["tol"],
                                       max_iter=gl["max_iter"], substeps=gl["substeps"])
        md = galerkin.build_stokes_modes(grid, m)
        A = galerkin.advection_tensor(md)
        for lam in lams:
            tag = f"m{m}_lam{_lam_tag(lam)}"
            try:
                sol = galerkin.fixed_point_solve(u0, gcfg, lam, solver, md, A)
                history, converged = sol.log, True
                err = galerkin.field_trajectory_distance(sol.fields(), ref, sim.dt)
                lhs, rhs = sol.energy_balance()
                energy_ok = bool(lhs <= rhs * (1.0 + energy_tol))
            except galerkin.PicardDivergence as exc:
                history, converged = exc.history, False
                err = lhs = rhs = math.nan
                energy_ok = True  # nothing to check without a fixed point
            all_ok &= energy_ok
            man.add(io.write_csv(os.path.join(out, f"picard_{tag}.csv"), ("iter", "delta_L2", "contraction_ratio"),
                                 [(h.iter, h.delta_L2, h.contraction_ratio) for h in history]))
            rows.append((m, lam, err, len(history), int(converged), lhs, rhs, int(energy_ok)))
            print(f"m={m:<3d} lambda={_lam_tag(lam):<6} iterations={len(history):<3d} "
                  f"converged={converged} error={err:.4e} energy_ok={energy_ok}")
    man.add(io.write_csv(os.path.join(out, "galerkin_summary.csv"),
                         ("m", "lambda", "error_L2", "iterations", "converged", "energy_lhs", "energy_rhs",
                          "energy_ok"), rows))
    finite = [lam for lam in lams if math.isfinite(lam)]
    if finite:
        sweep = galerkin.lambda_sweep(u0, kin, sim, finite)
        man.add(io.write_csv(os.path.join(out, "lambda_sweep.csv"),
                             ("lambda", "diff_L2", "mask_measure", "chebyshev_bound", "max_u"),
                             [(r["lam"], r["diff_L2"], r["mask_measure"], r["chebyshev_bound"], r["max_u"])
                              for r in sweep]))
    path = os.path.join(out, "manifest.json")
    man.status = "ok"
    man.add([path])
    man.write(path)
    return EXIT_OK if all_ok else EXIT_FAIL


def _particles_for(cfg, grid):
    """The Picard map always solves the kinetic part with particles."""
    k = cfg["kinetic"]
    if k["particles"] == 0 or k["rho"] == 0:
        return ParticleEnsemble.empty()
    return sample_maxwellian(k["rho"], (k["vbar_x"], k["vbar_y"]), k["temperature"], k["particles"],
                             cfg["sim"]["seed"], grid)


def cmd_stability(args):
    cfg = load_config(args.config, args.overrides)
    if not args.eps or any(e <= 0 for e in args.eps):
        raise ConfigError("--eps needs positive values")
    out = _out_dir(args, cfg)
    man = _manifest(cfg, args.overrides)
    grid = cfg.grid()
    res = verify.stability_experiment(cfg.initial_velocity(grid), cfg.initial_kinetic(grid), cfg.sim,
                                      args.eps, target=args.target)
    man.add(io.write_csv(os.path.join(out, "stability.csv"), ("eps", "du_sup", "dm0_sup", "du_final"),
                         zip(res.eps, res.du_sup, res.dm0_sup, res.du_final)))
    reports = res.reports(cfg["verify"]["slope_tol"])
    print(verify.format_table(reports))
    path = os.path.join(out, "manifest.json")
    man.status = "ok"
    man.add([path])
    man.write(path)
    return EXIT_OK if verify.all_passed(reports) else EXIT_FAIL


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "galerkin": cmd_galerkin, "stability": cmd_stability}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
