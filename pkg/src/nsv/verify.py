"""Checkers for the a priori estimates, run on fresh desk-scale simulations.

Every check returns :class:`EstimateReport` objects: a measured left side, a
bound, and a declared slack. ``passed`` is ``lhs <= rhs * (1 + slack)``.
Diagnostics (``mandatory=False``) are reported but never fail a suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np

from . import coupling, fluid, kinetic
from .core import (Grid, ParticleEnsemble, PhaseGridDensity, SimConfig, VelocityField,
                   maxwellian_phase_grid, sample_maxwellian)

SUITES = ("energy", "maxprinciple", "moments", "mass", "stability", "all")


@dataclass
class EstimateReport:
    id: str
    lhs: float
    rhs: float
    slack: float = 0.0
    mandatory: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.lhs <= self.rhs * (1.0 + self.slack))

    def as_dict(self):
        d = {"id": self.id, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
             "mandatory": self.mandatory, "passed": self.passed}
        d["meta"] = self.meta
        return d


def format_table(reports: List[EstimateReport]):
    lines = [f"{'estimate':<34} {'measured':>13} {'bound':>13}  result"]
    for r in reports:
        tag = ("PASS" if r.passed else "FAIL") if r.mandatory else "info"
        lines.append(f"{r.id:<34} {r.lhs:>13.6g} {r.rhs:>13.6g}  {tag}")
    return "\n".join(lines)


def all_passed(reports):
    return all(r.passed for r in reports if r.mandatory)


# ---------------------------------------------------------------------------
# run helpers
# ---------------------------------------------------------------------------

def collect_run(u0: VelocityField, kin, cfg: SimConfig, every=1):
    """Coupled run keeping ``(t, u, kinetic)`` at step 0 and every ``every`` steps."""
    snaps = [(0.0, u0, kin)]

    def keep(state, row):
        if state.step % every == 0:
            snaps.append((state.t, state.u, state.kinetic))

    _, ledger = coupling.run(coupling.initial_state(u0, kin), cfg, callback=keep)
    return snaps, ledger


def smooth_perturbation(grid: Grid):
    """Unit-L2 divergence-free field, orthogonal in shape to the box vortex."""
    if grid.periodic:
        def psi(X, Y):
            return np.sin(2 * np.pi * X / grid.Lx) * np.cos(4 * np.pi * Y / grid.Ly)
    else:
        def psi(X, Y):
            return (np.sin(np.pi * X / grid.Lx) ** 2 * np.sin(2 * np.pi * Y / grid.Ly) ** 2
                    * (X / grid.Lx - 0.3))
    du = VelocityField.from_streamfunction(grid, psi)
    return du.scaled(1.0 / du.l2())


# ---------------------------------------------------------------------------
# maximum principle and moment bounds (phase grid)
# ---------------------------------------------------------------------------

GROWTH = PhaseGridDensity.GROWTH_RATE


def check_maximum_principle(snaps: List[PhaseGridDensity]):
    """``sup f(t) <= e^{2t} sup f0`` at every snapshot, zero slack; L2 growth as a diagnostic."""
    f0 = snaps[0]
    sup0 = float(np.max(f0.reduced)) * math.exp(GROWTH * f0.time)
    l2_0 = kinetic.lp_norm(f0, 2)
    worst, worst_t, l2_worst = 0.0, 0.0, 0.0
    ok = True
    for fg in snaps:
        t = fg.time - f0.time
        cap = math.exp(GROWTH * t) * sup0
        sup = kinetic.lp_norm(fg, math.inf)
        ok &= sup <= cap
        if cap > 0 and sup / cap > worst:
            worst, worst_t = sup / cap, t
        if l2_0 > 0:
            l2_worst = max(l2_worst, kinetic.lp_norm(fg, 2) / (math.exp(GROWTH * t * 0.5) * l2_0))
    sup_rep = EstimateReport("max_principle_sup", worst if ok else math.inf, 1.0,
                             meta={"worst_time": worst_t, "cap_factor_t1": math.exp(GROWTH)})
    l2_rep = EstimateReport("max_principle_L2_trend", l2_worst, 1.0, mandatory=False)
    return [sup_rep, l2_rep]


def _moment_constant(fg: PhaseGridDensity):
    m0 = kinetic.velocity_moment(fg, 0)
    m6 = kinetic.velocity_moment(fg, 6)
    finf = kinetic.lp_norm(fg, math.inf)
    pos = m0 > 0
    if not np.any(pos):
        return 0.0
    return float(np.max(m0[pos] / ((finf + 1.0) * m6[pos] ** 0.25)))


def check_moment_interpolation(snaps: List[PhaseGridDensity], growth=10.0):
    """``m0 <= C (||f||_inf + 1) m6^{1/4}`` with ``C`` from t=0, plus the support bound."""
    C0 = _moment_constant(snaps[0])
    Cmax = max(_moment_constant(fg) for fg in snaps)
    support_ratio = 0.0
    l4 = 0.0
    for fg in snaps:
        f = fg.values
        v = fg.v_nodes()
        VX, VY = np.meshgrid(v, v, indexing="ij")
        nz = np.any(f > 0, axis=(0, 1))
        if np.any(nz):
            R = float(np.max(np.hypot(VX, VY)[nz])) + fg.hv / math.sqrt(2.0)
            bound = math.pi * R * R * kinetic.lp_norm(fg, math.inf)
            support_ratio = max(support_ratio, float(np.max(kinetic.velocity_moment(fg, 0))) / bound)
        m0 = kinetic.velocity_moment(fg, 0)
        l4 = max(l4, float(np.sum(m0 ** 4) * fg.grid.cell_area) ** 0.25)
    return [
        EstimateReport("moment_constant_growth", Cmax, growth * C0, meta={"C0": C0}),
        EstimateReport("moment_support_bound", support_ratio, 1.0),
        EstimateReport("moment_m0_L4_sup", l4, math.inf, mandatory=False),
    ]


# ---------------------------------------------------------------------------
# mass
# ---------------------------------------------------------------------------

def check_mass_conservation(masses, backend, tol=1e-2, name=None):
    """Particles: exact constancy. Phase grid: relative drift below ``tol``."""
    masses = [float(m) for m in masses]
    M0 = masses[0]
    if backend == "particles":
        drift = max(abs(m - M0) for m in masses)
        return EstimateReport(name or "mass_particles", drift, 0.0, meta={"M0": M0})
    drift = max(abs(m - M0) for m in masses) / M0 if M0 > 0 else 0.0
    return EstimateReport(name or "mass_phase_grid", drift, tol, meta={"M0": M0})


def snapshot_masses(snaps):
    return [k.total_mass() for _, _, k in snaps]


# ---------------------------------------------------------------------------
# continuous dependence
# ---------------------------------------------------------------------------

@dataclass
class StabilityResult:
    eps: list
    du_sup: list       # sup over 0 < t <= T of ||u_eps - u||
    dm0_sup: list      # sup over 0 < t <= T of ||m0_eps - m0||
    du_final: list     # ||u_eps - u|| at T
    slope: float
    slope_final: float
    zero_identical: bool

    def reports(self, tol=0.1):
        return [
            EstimateReport("stability_slope_dev", abs(self.slope - 1.0), tol, meta={"slope": self.slope}),
            EstimateReport("stability_slope_final_dev", abs(self.slope_final - 1.0), tol, mandatory=False,
                           meta={"slope": self.slope_final}),
            EstimateReport("stability_eps0_identical", 0.0 if self.zero_identical else 1.0, 0.0),
        ]


def _perturbed_data(u0, kin, eps, target, du):
    if target == "u":
        return u0 + du.scaled(eps), kin
    if target == "f":
        g = u0.grid
        if isinstance(kin, ParticleEnsemble):
            s = np.sin(np.pi * kin.positions[:, 0] / g.Lx) * np.sin(np.pi * kin.positions[:, 1] / g.Ly)
            return u0, ParticleEnsemble(kin.positions, kin.velocities, kin.weights * (1.0 + eps * s))
        X, Y = g.cell_points()
        s = (np.sin(np.pi * X / g.Lx) * np.sin(np.pi * Y / g.Ly))[:, :, None, None]
        return u0, PhaseGridDensity(kin.reduced * (1.0 + eps * s), g, kin.vmax, kin.time)
    raise ValueError(f"unknown perturbation target {target!r}")


def _m0(kin, grid, cfg):
    st = coupling.SimState(0.0, VelocityField.zeros(grid), kin)
    return coupling.deposit(st, cfg).m0


def _moment_trajectory(u0, kin, cfg):
    us, m0 = [u0], [_m0(kin, u0.grid, cfg)]

    def keep(state, row):
        us.append(state.u)
        m0.append(_m0(state.kinetic, u0.grid, cfg))

    coupling.run(coupling.initial_state(u0, kin), cfg, callback=keep)
    return us, m0


def stability_experiment(u0: VelocityField, kin, cfg: SimConfig, eps_list, target="u", du=None):
    """Run base and perturbed data; fit the log-log slope of ``sup_t ||u_eps - u||`` against eps.

    The supremum skips t=0, where the difference is the perturbation itself.
    """
    du = du or smooth_perturbation(u0.grid)
    base_u, base_m = _moment_trajectory(u0, kin, cfg)
    again_u, again_m = _moment_trajectory(u0, kin, cfg)
    zero_identical = all(np.array_equal(a.ux, b.ux) and np.array_equal(a.uy, b.uy)
                         for a, b in zip(base_u, again_u)) and all(
        np.array_equal(a, b) for a, b in zip(base_m, again_m))
    du_sup, dm_sup, du_fin = [], [], []
    for eps in eps_list:
        pu, pk = _perturbed_data(u0, kin, eps, target, du)
        us, ms = _moment_trajectory(pu, pk, cfg)
        diffs = [(a - b).l2() for a, b in zip(us[1:], base_u[1:])]
        du_sup.append(max(diffs))
        du_fin.append(diffs[-1])
        dm_sup.append(max(float(np.sqrt(np.sum((a - b) ** 2) * u0.grid.cell_area))
                          for a, b in zip(ms[1:], base_m[1:])))
    return StabilityResult(list(eps_list), du_sup, dm_sup, du_fin, _slope(eps_list, du_sup),
                           _slope(eps_list, du_fin), zero_identical)


def _slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if not np.all(y > 0):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

@dataclass
class RefinementResult:
    dt: float
    residual: float
    residual_half: float
    T: float
    ledger: coupling.EnergyLedger
    ledger_half: coupling.EnergyLedger

    @property
    def ratio(self):
        return self.residual / self.residual_half

    @property
    def constant(self):
        """``C`` in ``|sum r dt| <= C dt T``, taken from the coarser run."""
        return abs(self.residual) / (self.dt * self.T)


def energy_refinement(u0, kin, cfg: SimConfig):
    """Total energy residual at ``dt`` and ``dt/2`` over the same horizon."""
    _, la = coupling.run(coupling.initial_state(u0, kin), cfg)
    half = replace(cfg, dt=cfg.dt / 2)
    _, lb = coupling.run(coupling.initial_state(u0, kin), half)
    return RefinementResult(cfg.dt, la.total_residual(), lb.total_residual(), cfg.t_end, la, lb)


def check_energy_inequality(ledger: coupling.EnergyLedger, C, name="energy"):
    """``E(t) <= E(0) + C dt t`` for every t, and ``int D <= E(0) - E(T) + C dt T``."""
    dt = ledger.dt
    E = ledger.energies()
    t = ledger.times()
    excess = float(np.max(E - E[0] - C * dt * t))
    D = ledger.column("D_visc") + ledger.column("D_drag")
    diss = float(np.sum(D) * dt)
    T = t[-1]
    budget = E[0] - E[-1] + C * dt * T
    return [
        EstimateReport(f"{name}_E_bound", excess, 0.0, meta={"C": C}),
        EstimateReport(f"{name}_dissipation_budget", diss, budget),
    ]


def check_refinement(res: RefinementResult, slack=0.25):
    return [
        EstimateReport("energy_residual_ratio_dev", abs(res.ratio - 2.0), 2.0 * slack,
                       meta={"ratio": res.ratio, "R_dt": res.residual, "R_dt_half": res.residual_half}),
        EstimateReport("energy_residual_sign", res.residual, 0.0, meta={"note": "negative when resolved"}),
    ]


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

# desk-scale defaults; every suite is a fresh, seeded run
DESK = {
    "energy": dict(N=32, particles=20000, amplitude=1.0, temperature=0.1, dt=2e-3, T=0.25),
    "phase": dict(N=16, nv=16, vmax=1.6, temperature=0.1, amplitude=1.0, dt=0.01, T=1.0),
    "mass": dict(N=32, particles=10000, dt=1e-3, T=0.1),
    "stability": dict(N=32, particles=10000, dt=1e-3, T=0.25, eps=(1e-2, 5e-3, 2.5e-3)),
}


def _noslip(n):
    return Grid(1.0, 1.0, n, n, False)


def suite_energy(slack=0.25, seed=0):
    p = DESK["energy"]
    g = _noslip(p["N"])
    u0 = fluid.box_vortex(g, p["amplitude"])
    ens = sample_maxwellian(1.0, (0.0, 0.0), p["temperature"], p["particles"], seed, g)
    cfg = SimConfig(dt=p["dt"], t_end=p["T"], seed=seed)
    res = energy_refinement(u0, ens, cfg)
    reports = check_refinement(res, slack)
    reports += check_energy_inequality(res.ledger, res.constant, "energy_coupled")
    _, ns = coupling.run(coupling.initial_state(u0, ParticleEnsemble.empty()), cfg)
    reports += check_energy_inequality(ns, res.constant, "energy_decoupled")
    # global equilibrium: cold particles at rest in a fluid at rest
    rest = ParticleEnsemble(ens.positions, np.zeros_like(ens.velocities), ens.weights)
    _, eq = coupling.run(coupling.initial_state(VelocityField.zeros(g), rest), cfg)
    drift = float(np.max(np.abs(eq.energies() - eq.energies()[0])))
    dmax = float(np.max(eq.column("D_visc") + eq.column("D_drag")))
    reports.append(EstimateReport("energy_equilibrium_drift", max(drift, dmax), 1e-10))
    return reports


def phase_grid_run(p=None, coupled=True):
    p = p or DESK["phase"]
    g = _noslip(p["N"])
    u0 = fluid.box_vortex(g, p["amplitude"]) if coupled else VelocityField.zeros(g)
    fg = maxwellian_phase_grid(g, 1.0, (0.0, 0.0), p["temperature"], p["vmax"], p["nv"])
    cfg = SimConfig(dt=p["dt"], t_end=p["T"], kinetic_backend="phase-grid")
    return collect_run(u0, fg, cfg)


def suite_maxprinciple(run=None):
    snaps, _ = run or phase_grid_run()
    return check_maximum_principle([k for _, _, k in snaps])


def suite_moments(run=None, growth=10.0):
    snaps, _ = run or phase_grid_run()
    return check_moment_interpolation([k for _, _, k in snaps], growth)


def suite_mass(tol=1e-2, seed=0):
    p = DESK["mass"]
    g = _noslip(p["N"])
    ens = sample_maxwellian(1.0, (0.0, 0.0), 0.1, p["particles"], seed, g)
    snaps, _ = collect_run(fluid.box_vortex(g), ens, SimConfig(dt=p["dt"], t_end=p["T"], seed=seed))
    reports = [check_mass_conservation(snapshot_masses(snaps), "particles")]
    still, _ = phase_grid_run(coupled=False)
    reports.append(check_mass_conservation(snapshot_masses(still), "phase-grid", 1e-3, "mass_phase_grid_at_rest"))
    moving, _ = phase_grid_run(coupled=True)
    reports.append(check_mass_conservation(snapshot_masses(moving), "phase-grid", tol, "mass_phase_grid_coupled"))
    return reports


def suite_stability(tol=0.1, seed=0):
    p = DESK["stability"]
    g = _noslip(p["N"])
    u0 = fluid.box_vortex(g)
    ens = sample_maxwellian(1.0, (0.0, 0.0), 0.1, p["particles"], seed, g)
    res = stability_experiment(u0, ens, SimConfig(dt=p["dt"], t_end=p["T"], seed=seed), p["eps"])
    return res.reports(tol)


def run_suite(name, vcfg=None):
    """Run a named suite. ``vcfg`` is the ``[verify]`` config section (slacks)."""
    if name not in SUITES:
        raise KeyError(name)
    v = vcfg or {}
    out = []
    if name in ("energy", "all"):
        out += suite_energy(v.get("energy_ratio_slack", 0.25))
    if name in ("maxprinciple", "moments", "all"):
        run = phase_grid_run()
        if name in ("maxprinciple", "all"):
            out += suite_maxprinciple(run)
        if name in ("moments", "all"):
            out += suite_moments(run, v.get("moment_growth", 10.0))
    if name in ("mass", "all"):
        out += suite_mass(v.get("mass_tol_phase", 1e-2))
    if name in ("stability", "all"):
        out += suite_stability(v.get("slope_tol", 0.1))
    return out
