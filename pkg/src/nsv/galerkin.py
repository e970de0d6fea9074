"""Galerkin approximation on discrete Stokes eigenmodes and its Picard fixed point.

The modes are eigenvectors of the grid Laplacian restricted to discretely
divergence-free face fields, so they are exact for the MAC discretization used
by :mod:`nsv.fluid`. Coefficients evolve by

    dg_i/dt = -mu e_i g_i - A_ijk g_j g_k + <F, phi_i>,
    A_ijk = <(phi_j . grad) phi_k, phi_i>,

where ``F`` is the drag force on the fluid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from . import coupling, fluid, kinetic
from .core import Grid, MomentFields, ParticleEnsemble, SimConfig, VelocityField

log = logging.getLogger(__name__)


class ModeError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class PicardDivergence(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def mode_cap(grid: Grid):
    return grid.Nx * grid.Ny // 4


def _free_faces(grid: Grid):
    """Boolean mask over the flat face vector of entries that are not pinned to zero."""
    fx = np.ones(grid.ux_shape, bool)
    fy = np.ones(grid.uy_shape, bool)
    if not grid.periodic:
        fx[0, :] = fx[-1, :] = False
        fy[:, 0] = fy[:, -1] = False
    return np.concatenate([fx.ravel(), fy.ravel()])


def _dense_operators(grid: Grid, free):
    """Laplacian (free x free) and divergence (cells x free) as dense matrices."""
    cols = np.flatnonzero(free)
    n_full = free.size
    L = np.empty((cols.size, cols.size))
    D = np.empty((grid.Nx * grid.Ny, cols.size))
    e = np.zeros(n_full)
    for j, c in enumerate(cols):
        e[c] = 1.0
        u = VelocityField.from_flat(e, grid)
        L[:, j] = fluid.laplacian(u).flat()[cols]
        D[:, j] = fluid.divergence(u).ravel()
        e[c] = 0.0
    return L, D


@dataclass
class StokesModes:
    eigenvalues: np.ndarray   # (m,), ascending
    basis: np.ndarray         # (m, n_faces) flat face vectors, orthonormal in VelocityField.dot
    grid: Grid
    residuals: np.ndarray = None

    @property
    def m(self):
        return len(self.eigenvalues)

    def mode(self, i) -> VelocityField:
        return VelocityField.from_flat(self.basis[i], self.grid)

    def coefficients(self, u: VelocityField):
        return self.basis @ u.flat() * self.grid.cell_area

    def field(self, g) -> VelocityField:
        return VelocityField.from_flat(np.asarray(g) @ self.basis, self.grid)

    def project(self, u: VelocityField) -> VelocityField:
        return self.field(self.coefficients(u))

    def gram(self):
        return self.basis @ self.basis.T * self.grid.cell_area


def _sign_fix(vecs, tol=1e-12):
    for i in range(vecs.shape[0]):
        nz = np.flatnonzero(np.abs(vecs[i]) > tol * np.max(np.abs(vecs[i])))
        if nz.size and vecs[i, nz[0]] < 0:
            vecs[i] *= -1.0
    return vecs


def build_stokes_modes(grid: Grid, m: int, tol=1e-8) -> StokesModes:
    """The ``m`` lowest eigenpairs of the discrete Stokes operator on ``grid``."""
    cap = mode_cap(grid)
    if not 1 <= m <= cap:
        raise ValueError(f"mode count must lie in [1, {cap}] for a {grid.Nx}x{grid.Ny} grid, got {m}")
    free = _free_faces(grid)
    L, D = _dense_operators(grid, free)
    Z = linalg.null_space(D)
    K = Z.T @ (-L) @ Z
    K = 0.5 * (K + K.T)
    try:
        vals, vecs = linalg.eigh(K, subset_by_index=[0, m - 1])
    except linalg.LinAlgError as exc:
        raise ModeError(f"eigensolver failed: {exc}") from exc
    full = np.zeros((m, free.size))
    full[:, free] = (Z @ vecs).T / math.sqrt(grid.cell_area)
    full = _sign_fix(full)
    vals = np.maximum(vals, 0.0) if grid.periodic else vals
    modes = StokesModes(vals, full, grid)
    modes.residuals = mode_residuals(modes)
    scale = np.maximum(1.0, np.abs(vals))
    bad = modes.residuals > tol * scale
    if np.any(bad) or np.any(vals < -tol):
        raise ModeError(f"mode residuals exceed {tol:g}: {modes.residuals[bad]}", modes.residuals)
    return modes


def mode_residuals(modes: StokesModes):
    """``|| P(L phi_i + e_i phi_i) ||`` per mode, ``P`` the discrete Leray projector."""
    ws = fluid.PoissonWorkspace(modes.grid)
    out = np.empty(modes.m)
    for i in range(modes.m):
        phi = modes.mode(i)
        r = fluid.laplacian(phi) + phi.scaled(modes.eigenvalues[i])
        out[i] = fluid.project(r, ws)[0].l2()
    return out


def advection_tensor(modes: StokesModes):
    """``A[i, j, k] = <(phi_j . grad) phi_k, phi_i>`` with the fluid module's centred convection."""
    m = modes.m
    phis = [modes.mode(i) for i in range(m)]
    A = np.empty((m, m, m))
    for j in range(m):
        for k in range(m):
            c = fluid.convection(phis[j], phis[k], upwind=0.0)
            A[:, j, k] = -(modes.basis @ c.flat()) * modes.grid.cell_area
    return A


@dataclass
class GalerkinState:
    g: np.ndarray
    t: float
    modes: StokesModes
    A: np.ndarray
    mu: float = 1.0


def galerkin_rhs(state: GalerkinState, G=None):
    """``-mu e_i g_i - A_ijk g_j g_k + <G, phi_i>``.

    ``G`` is a ForceField or an already projected coefficient vector.
    """
    g = state.g
    out = -state.mu * state.modes.eigenvalues * g - np.einsum("ijk,j,k->i", state.A, g, g)
    if G is not None:
        out = out + (state.modes.coefficients(G) if isinstance(G, VelocityField) else G)
    return out


@dataclass
class CoefficientTrajectory:
    times: np.ndarray
    g: np.ndarray            # (N+1, m)
    dissipation: np.ndarray  # cumulative int mu sum e_i g_i^2 at each time
    work: np.ndarray         # cumulative int <F, u_m> at each time

    def energy(self):
        return 0.5 * np.sum(self.g ** 2, axis=1)


def integrate_coefficients(modes, A, g0, forces, dt, mu=1.0, substeps=4) -> CoefficientTrajectory:
    """Classical RK4 with ``substeps`` per interval; ``forces[n]`` is held over ``[t_n, t_{n+1}]``.

    Dissipation and work integrals ride along as extra ODE components so the
    energy balance is checked at the integrator's order.
    """
    forces = np.asarray(forces, dtype=float)
    N, m = forces.shape[0], modes.m
    e = modes.eigenvalues
    h = dt / substeps

    def f(y, F):
        g = y[:m]
        dg = -mu * e * g - np.einsum("ijk,j,k->i", A, g, g) + F
        return np.concatenate([dg, [mu * np.dot(e, g * g), np.dot(F, g)]])

    out = np.empty((N + 1, m + 2))
    y = np.concatenate([np.asarray(g0, float), [0.0, 0.0]])
    out[0] = y
    for n in range(N):
        F = forces[n]
        for _ in range(substeps):
            k1 = f(y, F)
            k2 = f(y + 0.5 * h * k1, F)
            k3 = f(y + 0.5 * h * k2, F)
            k4 = f(y + h * k3, F)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = y
    return CoefficientTrajectory(np.arange(N + 1) * dt, out[:, :m], out[:, m], out[:, m + 1])


class ParticleKineticSolver:
    """Kinetic solve for a given velocity trajectory (frozen per step, truncated at ``lam``)."""

    def __init__(self, ensemble: ParticleEnsemble, grid: Grid, deposition="cic"):
        self.ensemble = ensemble
        self.grid = grid
        self.deposition = deposition

    def __call__(self, u_traj: List[VelocityField], lam, dt) -> List[MomentFields]:
        ens = self.ensemble
        out = []
        for n in range(len(u_traj) - 1):
            out.append(kinetic.deposit_moments(ens, self.grid, self.deposition, step=n))
            ens = kinetic.push_particles(ens, u_traj[n + 1], dt, lam)
        return out


@dataclass
class GalerkinConfig:
    m: int = 8
    dt: float = 1e-3
    t_end: float = 0.05
    mu: float = 1.0
    tol: float = 1e-10
    max_iter: int = 30
    substeps: int = 4

    def __post_init__(self):
        if self.substeps < 4:
            raise ValueError("coefficient integrator needs at least 4 substeps per step")
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass
class PicardLogEntry:
    iter: int
    delta_L2: float
    contraction_ratio: float


@dataclass
class GalerkinSolution:
    trajectory: CoefficientTrajectory
    modes: StokesModes
    log: List[PicardLogEntry] = field(default_factory=list)
    forces: Optional[np.ndarray] = None

    @property
    def iterations(self):
        return len(self.log)

    def fields(self):
        return [self.modes.field(g) for g in self.trajectory.g]

    def energy_balance(self):
        """``(lhs, rhs)`` of ``1/2|g(T)|^2 + int mu sum e g^2 <= 1/2|g(0)|^2 + int <F, u_m>``."""
        tr = self.trajectory
        E = tr.energy()
        return E[-1] + tr.dissipation[-1], E[0] + tr.work[-1]


def trajectory_distance(ga, gb, dt):
    """``L2(0,T; L2)`` distance of two coefficient trajectories (orthonormal modes)."""
    d2 = np.sum((np.asarray(ga) - np.asarray(gb)) ** 2, axis=1)
    return math.sqrt(dt * float(np.sum(d2[1:])))


def apply_map(modes, A, g0, u_traj, solver, lam, cfg: GalerkinConfig):
    """One application of S: kinetic solve with chi_lam(u~), projected force, coefficient ODE."""
    moments = solver(u_traj, lam, cfg.dt)
    forces = np.array([modes.coefficients(coupling.truncated_coupling_force(mo, u_traj[n], lam, step=n))
                       for n, mo in enumerate(moments)]).reshape(len(moments), modes.m)
    return integrate_coefficients(modes, A, g0, forces, cfg.dt, cfg.mu, cfg.substeps), forces


def fixed_point_solve(u0: VelocityField, cfg: GalerkinConfig, lam, solver: Callable,
                      modes: Optional[StokesModes] = None, A=None) -> GalerkinSolution:
    """Picard iteration of the map S starting from the uncoupled Galerkin trajectory."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    modes = modes or build_stokes_modes(u0.grid, cfg.m)
    A = advection_tensor(modes) if A is None else A
    g0 = modes.coefficients(u0)
    N = cfg.n_steps
    tr = integrate_coefficients(modes, A, g0, np.zeros((N, modes.m)), cfg.dt, cfg.mu, cfg.substeps)
    history = []
    prev = None
    forces = None
    for k in range(1, cfg.max_iter + 1):
        u_traj = [modes.field(g) for g in tr.g]
        new, forces = apply_map(modes, A, g0, u_traj, solver, lam, cfg)
        delta = trajectory_distance(new.g, tr.g, cfg.dt)
        ratio = delta / prev if prev else math.nan
        history.append(PicardLogEntry(k, delta, ratio))
        log.info("picard iter %d delta %.3e ratio %.3g", k, delta, ratio)
        tr = new
        if not math.isfinite(delta):
            break
        if delta < cfg.tol:
            return GalerkinSolution(tr, modes, history, forces)
        prev = delta
    raise PicardDivergence(f"no convergence after {len(history)} iterations "
                           f"(last delta {history[-1].delta_L2:.3e})", history)


# ---------------------------------------------------------------------------
# reference solver and sweeps
# ---------------------------------------------------------------------------

def direct_solve(u0: VelocityField, kin, cfg: SimConfig):
    """Full-grid coupled run; returns the velocity at every step and the ledger."""
    traj = [u0]
    state = coupling.initial_state(u0, kin)
    _, ledger = coupling.run(state, cfg, callback=lambda st, row: traj.append(st.u))
    return traj, ledger


def field_trajectory_distance(ua, ub, dt):
    return math.sqrt(dt * sum((a - b).dot(a - b) for a, b in zip(ua[1:], ub[1:])))


def mask_measure(u: VelocityField, lam):
    """Area where the truncation fires, counting x- and y-faces as half a cell each."""
    if math.isinf(lam):
        return 0.0
    kx, ky = kinetic.truncation_masks(u, lam)
    return 0.5 * (np.count_nonzero(~kx) + np.count_nonzero(~ky)) * u.grid.cell_area


def lambda_sweep(u0: VelocityField, kin, cfg: SimConfig, lams):
    """Truncated direct runs per ``lam`` against the untruncated run.

    Returns one dict per ``lam`` with the trajectory distance, the time-integrated
    mask measure and its Chebyshev bound ``int ||u||^2 dt / lam^2``.
    """
    lams = list(lams)
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda values must be strictly increasing")
    ref, _ = direct_solve(u0, kin, _with_lam(cfg, math.inf))
    rows = []
    for lam in lams:
        traj, _ = direct_solve(u0, kin, _with_lam(cfg, lam))
        meas = cfg.dt * sum(mask_measure(u, lam) for u in traj[:-1])
        energy = cfg.dt * sum(u.dot(u) for u in traj[:-1])
        rows.append({
            "lam": lam,
            "diff_L2": field_trajectory_distance(traj, ref, cfg.dt),
            "mask_measure": meas,
            "chebyshev_bound": energy / lam ** 2,
            "max_u": max(float(max(np.max(s) for s in kinetic.face_speeds(u))) for u in traj),
        })
    return rows


def _with_lam(cfg: SimConfig, lam):
    return replace(cfg, lam=lam)


def m_sweep(u0: VelocityField, kin: ParticleEnsemble, gcfg: GalerkinConfig, ms, lam=math.inf,
            sim: Optional[SimConfig] = None):
    """Galerkin fixed points for each ``m`` against a full-grid coupled reference."""
    sim = sim or SimConfig(dt=gcfg.dt, t_end=gcfg.t_end, mu=gcfg.mu, upwind=0.0, theta=0.5)
    ref, _ = direct_solve(u0, kin, sim)
    solver = ParticleKineticSolver(kin, u0.grid, sim.deposition)
    rows = []
    for m in ms:
        sol = fixed_point_solve(u0, _with_m(gcfg, m), lam, solver)
        rows.append({"m": m, "lam": lam, "error_L2": field_trajectory_distance(sol.fields(), ref, gcfg.dt),
                     "iterations": sol.iterations, "solution": sol})
    return rows


def _with_m(cfg: GalerkinConfig, m):
    return replace(cfg, m=m)
