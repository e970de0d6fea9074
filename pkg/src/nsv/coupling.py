"""Coupled Navier-Stokes-Vlasov time loop and the energy ledger.

Per step: deposit moments -> drag force (optionally truncated) -> fluid step
-> kinetic step driven by chi_lambda(u') -> ledger row.

The ledger tracks E = 1/2 int |u|^2 + int int f (1 + |v|^2 / 2), whose rate of
change is exactly -(int |grad u|^2 + int int f |u - v|^2) for smooth solutions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import fluid, kinetic
from .core import (MomentFields, ParticleEnsemble, PhaseGridDensity, PressureField, SimConfig,
                   VelocityField, interpolate_velocity)

LEDGER_COLUMNS = ("step", "time", "E_fluid", "E_kin", "D_visc", "D_drag", "residual", "mass", "max_u", "cfl")


class StaleMoments(RuntimeError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class EnergyRow:
    E_fluid: float
    E_kin: float
    D_visc: float
    D_drag: float
    mass: float

    @property
    def E(self):
        return self.E_fluid + self.E_kin


@dataclass
class SimState:
    t: float
    u: VelocityField
    kinetic: Union[ParticleEnsemble, PhaseGridDensity]
    p: Optional[PressureField] = None
    moments: Optional[MomentFields] = None
    step: int = 0
    energy: Optional[EnergyRow] = None

    @property
    def grid(self):
        return self.u.grid

    def moments_fresh(self):
        return self.moments is not None and self.moments.step == self.step


@dataclass
class EnergyLedger:
    initial: Optional[EnergyRow] = None
    rows: list = field(default_factory=list)
    dt: float = 0.0

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def energies(self):
        """E at t_0, t_1, ..., t_N."""
        return np.concatenate([[self.initial.E], self.column("E_fluid") + self.column("E_kin")])

    def times(self):
        return np.concatenate([[0.0], self.column("time")])

    def total_residual(self):
        """``sum_n r_n dt = E(T) - E(0) + sum_{n>=1} (D_visc + D_drag)_n dt``.

        Dissipation is sampled at the end of each step, so a negative total is
        the discrete form of the energy inequality.
        """
        return float(np.sum(self.column("residual")) * self.dt)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [_fmt(r[c]) for c in LEDGER_COLUMNS[1:]])


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# drag force
# ---------------------------------------------------------------------------

def _cells_to_faces(c, grid):
    if grid.periodic:
        return 0.5 * (c + np.roll(c, 1, 0)), 0.5 * (c + np.roll(c, 1, 1))
    fx = np.zeros(grid.ux_shape)
    fy = np.zeros(grid.uy_shape)
    fx[1:-1] = 0.5 * (c[1:] + c[:-1])
    fy[:, 1:-1] = 0.5 * (c[:, 1:] + c[:, :-1])
    return fx, fy


def coupling_force(m: MomentFields, u: VelocityField, step=None) -> fluid.ForceField:
    """``F = m1 - m0 u`` on velocity faces (the source term ``-int (u - v) f dv``)."""
    if step is not None and m.step != step:
        raise StaleMoments(f"moments deposited at step {m.step}, force requested at step {step}")
    g = u.grid
    if m.face is not None:
        m0x, m1x = m.face["m0x"], m.face["m1x"]
        m0y, m1y = m.face["m0y"], m.face["m1y"]
    else:
        m0x, m0y = _cells_to_faces(m.m0, g)
        m1x, _ = _cells_to_faces(m.m1x, g)
        _, m1y = _cells_to_faces(m.m1y, g)
    Fx = m1x - m0x * u.ux
    Fy = m1y - m0y * u.uy
    if not g.periodic:
        Fx[0, :] = Fx[-1, :] = 0.0
        Fy[:, 0] = Fy[:, -1] = 0.0
    return VelocityField(Fx, Fy, g)


def truncated_coupling_force(m: MomentFields, u: VelocityField, lam, step=None) -> fluid.ForceField:
    """Drag force masked to zero where ``|u| > lam``."""
    F = coupling_force(m, u, step)
    if math.isinf(lam):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        return F
    kx, ky = kinetic.truncation_masks(u, lam)
    return VelocityField(np.where(kx, F.ux, 0.0), np.where(ky, F.uy, 0.0), u.grid)


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def _kernel_drag(ens: ParticleEnsemble, u: VelocityField):
    """``sum_i w_i sum_f S_f(x_i) (u_f - v_i)^2`` per component.

    This is the drag dissipation seen by the discrete momentum exchange: it
    equals ``sum w |u(x_i) - v_i|^2`` plus the kernel variance of ``u``.
    """
    total = 0.0
    for comp, arr, vel in (("ux", u.ux, ens.velocities[:, 0]), ("uy", u.uy, ens.velocities[:, 1])):
        idx, wts = ens.stencil(u.grid, comp)
        vals = np.where(idx >= 0, arr.ravel()[np.maximum(idx, 0)], 0.0)
        total += float(np.sum(ens.weights * np.sum(wts * (vals - vel[:, None]) ** 2, axis=1)))
    return total


def energy_report(state: SimState, lam=math.inf, mu=1.0) -> EnergyRow:
    u = state.u
    E_fluid = 0.5 * u.dot(u)
    D_visc = mu * fluid.viscous_dissipation(u)
    uc = kinetic.truncate_velocity(u, lam)
    kin = state.kinetic
    if isinstance(kin, ParticleEnsemble):
        v2 = np.sum(kin.velocities ** 2, axis=1)
        E_kin = float(np.sum(kin.weights * (1.0 + 0.5 * v2)))
        D_drag = _kernel_drag(kin, uc) if kin.count else 0.0
        mass = kin.total_mass()
    else:
        f = kin.values
        v = kin.v_nodes()
        VX, VY = np.meshgrid(v, v, indexing="ij")
        dV = kin.cell_volume
        E_kin = float(np.einsum("ijkl,kl->", f, 1.0 + 0.5 * (VX ** 2 + VY ** 2)) * dV)
        X, Y = kin.grid.cell_points()
        ux, uy = kinetic.truncate_vectors(*interpolate_velocity(u, X.ravel(), Y.ravel()), lam)
        ux = ux.reshape(kin.grid.shape)[:, :, None, None]
        uy = uy.reshape(kin.grid.shape)[:, :, None, None]
        D_drag = float(np.sum(f * ((ux - VX) ** 2 + (uy - VY) ** 2)) * dV)
        mass = kin.total_mass()
    return EnergyRow(E_fluid, E_kin, D_visc, D_drag, mass)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def deposit(state: SimState, cfg: SimConfig) -> MomentFields:
    kin = state.kinetic
    if isinstance(kin, ParticleEnsemble):
        return kinetic.deposit_moments(kin, state.grid, cfg.deposition, step=state.step)
    return kinetic.moment_grid(kin, step=state.step)


def kinetic_step(kin, u, lam, dt):
    if isinstance(kin, ParticleEnsemble):
        return kinetic.push_particles(kin, u, dt, lam)
    return kinetic.sl_step(kin, u, lam, dt)


def _kinetic_finite(kin):
    if isinstance(kin, ParticleEnsemble):
        return kin.is_finite()
    return bool(np.all(np.isfinite(kin.reduced)))


def step(state: SimState, cfg: SimConfig, ws: fluid.PoissonWorkspace):
    """Advance one step. Returns ``(new_state, ledger_row_dict)``."""
    dt = cfg.dt
    lam = cfg.lam
    before = state.energy or energy_report(state, lam, cfg.mu)
    if not state.moments_fresh():
        state = replace(state, moments=deposit(state, cfg))
    F = truncated_coupling_force(state.moments, state.u, lam, step=state.step)
    u_new, p, rep = fluid.ns_step(state.u, F, cfg.mu, dt, ws, cfg.upwind, cfg.theta)
    if not u_new.is_finite():
        raise NumericalAbort(f"non-finite velocity after step {state.step + 1}", state)
    try:
        kin_new = kinetic_step(state.kinetic, u_new, lam, dt)
    except kinetic.ParticleEscape as exc:
        raise NumericalAbort(f"step {state.step + 1}: {exc}", state) from exc
    if not _kinetic_finite(kin_new):
        raise NumericalAbort(f"non-finite kinetic state after step {state.step + 1}", state)
    new = SimState(t=state.t + dt, u=u_new, kinetic=kin_new, p=p, step=state.step + 1)
    after = energy_report(new, lam, cfg.mu)
    new.energy = after
    row = {
        "step": new.step,
        "time": new.t,
        "E_fluid": after.E_fluid,
        "E_kin": after.E_kin,
        "D_visc": after.D_visc,
        "D_drag": after.D_drag,
        "residual": (after.E - before.E) / dt + after.D_visc + after.D_drag,
        "mass": after.mass,
        "max_u": u_new.max_abs(),
        "cfl": rep.cfl,
    }
    return new, row


def run(state: SimState, cfg: SimConfig, ws=None, n_steps=None, callback=None):
    """Integrate ``n_steps`` (default ``cfg.n_steps``). Returns ``(state, ledger)``."""
    ws = ws or fluid.PoissonWorkspace(state.grid)
    n_steps = cfg.n_steps if n_steps is None else n_steps
    cfg.check_stability(state.grid, max(state.u.max_abs(), 1e-300))
    if state.energy is None:
        state = replace(state, energy=energy_report(state, cfg.lam, cfg.mu))
    ledger = EnergyLedger(initial=state.energy, dt=cfg.dt)
    for _ in range(n_steps):
        state, row = step(state, cfg, ws)
        ledger.append(row)
        if callback is not None:
            callback(state, row)
    return state, ledger


def initial_state(u0: VelocityField, kin) -> SimState:
    return SimState(t=0.0, u=u0, kinetic=kin, p=PressureField(np.zeros(u0.grid.shape), u0.grid))
