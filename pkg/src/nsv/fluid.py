"""Incompressible Navier-Stokes on a MAC grid: advection, implicit diffusion, projection.

Both elliptic solves are exact fast-transform solves: sine transforms for the
no-slip velocity components, cosine transforms for the Neumann pressure, FFTs
on the periodic square.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .core import Grid, PressureField, VelocityField

ForceField = VelocityField


class WorkspaceMismatch(ValueError):
    pass


@dataclass
class StepReport:
    cfl: float
    div_residual: float
    iterations: int = 0
    cfl_warning: bool = False


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------

def divergence(u: VelocityField) -> np.ndarray:
    g = u.grid
    if g.periodic:
        dx = (np.roll(u.ux, -1, axis=0) - u.ux) / g.hx
        dy = (np.roll(u.uy, -1, axis=1) - u.uy) / g.hy
    else:
        dx = (u.ux[1:, :] - u.ux[:-1, :]) / g.hx
        dy = (u.uy[:, 1:] - u.uy[:, :-1]) / g.hy
    return dx + dy


def gradient(p: np.ndarray, grid: Grid) -> VelocityField:
    """Face gradient of a cell-centred scalar; zero on no-slip wall faces."""
    if grid.periodic:
        gx = (p - np.roll(p, 1, axis=0)) / grid.hx
        gy = (p - np.roll(p, 1, axis=1)) / grid.hy
        return VelocityField(gx, gy, grid)
    gx = np.zeros(grid.ux_shape)
    gy = np.zeros(grid.uy_shape)
    gx[1:-1, :] = (p[1:, :] - p[:-1, :]) / grid.hx
    gy[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / grid.hy
    return VelocityField(gx, gy, grid)


def _lap_tangential(a, hn, ht):
    """Laplacian of a normal-to-wall-x component block: Dirichlet faces along
    axis 0 (rows 0 and -1 are walls), reflected ghosts along axis 1."""
    out = np.zeros_like(a)
    inner = a[1:-1, :]
    d2n = (a[:-2, :] - 2.0 * inner + a[2:, :]) / hn ** 2
    pad = np.concatenate([-inner[:, :1], inner, -inner[:, -1:]], axis=1)
    d2t = (pad[:, :-2] - 2.0 * inner + pad[:, 2:]) / ht ** 2
    out[1:-1, :] = d2n + d2t
    return out


def laplacian(u: VelocityField) -> VelocityField:
    g = u.grid
    if g.periodic:
        def lap(a):
            return ((np.roll(a, 1, 0) - 2 * a + np.roll(a, -1, 0)) / g.hx ** 2
                    + (np.roll(a, 1, 1) - 2 * a + np.roll(a, -1, 1)) / g.hy ** 2)
        return VelocityField(lap(u.ux), lap(u.uy), g)
    lx = _lap_tangential(u.ux, g.hx, g.hy)
    ly = _lap_tangential(u.uy.T, g.hy, g.hx).T
    return VelocityField(lx, ly, g)


def viscous_dissipation(u: VelocityField) -> float:
    """Discrete Dirichlet form ``-<L u, u>``, the grid analogue of the gradient energy."""
    return -laplacian(u).dot(u)


def _conv_component(ax, ay, b, hx, hy, periodic, alpha):
    """Flux-form advection tendency ``-div(a b)`` for the x-face component ``b``.

    Fluxes through the staggered control volume use face-averaged advecting
    velocities and centred transported values blended with first-order upwind
    by ``alpha``. With ``alpha=0`` and discretely divergence-free ``a`` the
    operator is skew-adjoint.
    """
    if periodic:
        axr = np.roll(ax, -1, 0)
        bxr = np.roll(b, -1, 0)
        U = 0.5 * (ax + axr)
        flx = U * (0.5 * (b + bxr) - 0.5 * alpha * np.sign(U) * (bxr - b))
        V = 0.5 * (np.roll(ay, 1, 0) + ay)
        bys = np.roll(b, 1, 1)
        fly = V * (0.5 * (bys + b) - 0.5 * alpha * np.sign(V) * (b - bys))
        return -((flx - np.roll(flx, 1, 0)) / hx + (np.roll(fly, -1, 1) - fly) / hy)
    U = 0.5 * (ax[:-1] + ax[1:])
    flx = U * (0.5 * (b[:-1] + b[1:]) - 0.5 * alpha * np.sign(U) * (b[1:] - b[:-1]))
    V = 0.5 * (ay[:-1, :] + ay[1:, :])
    inner = b[1:-1, :]
    pad = np.pad(inner, ((0, 0), (1, 1)))
    fly = V * (0.5 * (pad[:, :-1] + pad[:, 1:]) - 0.5 * alpha * np.sign(V) * (pad[:, 1:] - pad[:, :-1]))
    out = np.zeros_like(b)
    out[1:-1, :] = -((flx[1:] - flx[:-1]) / hx + (fly[:, 1:] - fly[:, :-1]) / hy)
    return out


def convection(a: VelocityField, b: VelocityField, upwind=0.0) -> VelocityField:
    """Tendency ``-(a . grad) b`` in divergence form (``a`` assumed divergence free)."""
    g = a.grid
    tx = _conv_component(a.ux, a.uy, b.ux, g.hx, g.hy, g.periodic, upwind)
    ty = _conv_component(a.uy.T, a.ux.T, b.uy.T, g.hy, g.hx, g.periodic, upwind).T
    return VelocityField(tx, ty, g)


def cfl_number(u: VelocityField, dt):
    g = u.grid
    return float(dt * max(np.max(np.abs(u.ux)) / g.hx, np.max(np.abs(u.uy)) / g.hy))


def advect(u: VelocityField, dt, upwind=0.1):
    """Explicit advection substep. Returns ``(u_new, cfl, cfl_warning)``."""
    cfl = cfl_number(u, dt)
    return u + convection(u, u, upwind).scaled(dt), cfl, cfl > 1.0


# ---------------------------------------------------------------------------
# fast solvers
# ---------------------------------------------------------------------------

def _sin2(k, n):
    return np.sin(np.pi * k / (2.0 * n)) ** 2


class PoissonWorkspace:
    """Eigenvalue tables of the discrete Laplacians for one grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.tag = grid.tag
        Nx, Ny, hx, hy = grid.Nx, grid.Ny, grid.hx, grid.hy
        if grid.periodic:
            kx = np.arange(Nx)[:, None]
            ky = np.arange(Ny // 2 + 1)[None, :]
            lam = -4.0 / hx ** 2 * np.sin(np.pi * kx / Nx) ** 2 - 4.0 / hy ** 2 * np.sin(np.pi * ky / Ny) ** 2
            self.p_eig = lam
            self.ux_eig = lam
            self.uy_eig = lam
        else:
            kx = np.arange(Nx)[:, None]
            ky = np.arange(Ny)[None, :]
            self.p_eig = -4.0 / hx ** 2 * _sin2(kx, Nx) - 4.0 / hy ** 2 * _sin2(ky, Ny)
            # ux interior block: DST-I along x (k=1..Nx-1), DST-II along y (k=1..Ny)
            self.ux_eig = (-4.0 / hx ** 2 * _sin2(np.arange(1, Nx)[:, None], Nx)
                           - 4.0 / hy ** 2 * _sin2(np.arange(1, Ny + 1)[None, :], Ny))
            self.uy_eig = (-4.0 / hx ** 2 * _sin2(np.arange(1, Nx + 1)[:, None], Nx)
                           - 4.0 / hy ** 2 * _sin2(np.arange(1, Ny)[None, :], Ny))
        p_inv = np.zeros_like(self.p_eig)
        nz = self.p_eig != 0
        p_inv[nz] = 1.0 / self.p_eig[nz]
        self._p_inv = p_inv

    def check(self, grid):
        if grid.tag != self.tag:
            raise WorkspaceMismatch(f"workspace built for {self.tag}, field lives on {grid.tag}")

    def solve_poisson(self, rhs):
        """Zero-mean solution of the Neumann (or periodic) cell Laplacian."""
        if self.grid.periodic:
            return sfft.irfft2(sfft.rfft2(rhs) * self._p_inv, s=rhs.shape)
        r = sfft.dctn(rhs, type=2, norm="ortho")
        return sfft.idctn(r * self._p_inv, type=2, norm="ortho")

    def solve_helmholtz(self, rhs: VelocityField, c) -> VelocityField:
        """Solve ``(I - c L) w = rhs`` with the no-slip or periodic velocity Laplacian."""
        g = self.grid
        if g.periodic:
            wx = sfft.irfft2(sfft.rfft2(rhs.ux) / (1.0 - c * self.ux_eig), s=rhs.ux.shape)
            wy = sfft.irfft2(sfft.rfft2(rhs.uy) / (1.0 - c * self.uy_eig), s=rhs.uy.shape)
            return VelocityField(wx, wy, g)
        wx = np.zeros(g.ux_shape)
        wy = np.zeros(g.uy_shape)
        wx[1:-1, :] = _sin_solve(rhs.ux[1:-1, :], 1.0 - c * self.ux_eig, (1, 2))
        wy[:, 1:-1] = _sin_solve(rhs.uy[:, 1:-1], 1.0 - c * self.uy_eig, (2, 1))
        return VelocityField(wx, wy, g)


def _sin_solve(r, denom, types):
    tx, ty = types
    h = sfft.dst(sfft.dst(r, type=tx, axis=0, norm="ortho"), type=ty, axis=1, norm="ortho")
    h /= denom
    return sfft.idst(sfft.idst(h, type=ty, axis=1, norm="ortho"), type=tx, axis=0, norm="ortho")


# ---------------------------------------------------------------------------
# substeps
# ---------------------------------------------------------------------------

def diffuse(u: VelocityField, mu, dt, ws=None, theta=1.0) -> VelocityField:
    """Theta-scheme viscous substep; ``theta=1`` is backward Euler, ``0.5`` Crank-Nicolson."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    ws = ws or PoissonWorkspace(u.grid)
    ws.check(u.grid)
    rhs = u
    if theta < 1.0:
        rhs = u + laplacian(u).scaled((1.0 - theta) * dt * mu)
    return ws.solve_helmholtz(rhs, theta * dt * mu)


def project(u: VelocityField, ws: PoissonWorkspace):
    """Leray projection. Returns the divergence-free field and the potential (mean zero)."""
    ws.check(u.grid)
    phi = ws.solve_poisson(divergence(u))
    phi -= phi.mean()
    return u - gradient(phi, u.grid), PressureField(phi, u.grid)


def divergence_residual(u: VelocityField):
    """Max cell divergence relative to ``max|u| / h``."""
    g = u.grid
    scale = u.max_abs() / min(g.hx, g.hy)
    d = float(np.max(np.abs(divergence(u))))
    return d / scale if scale > 0 else d


def ns_step(u: VelocityField, F: ForceField, mu, dt, ws: PoissonWorkspace, upwind=0.1, theta=0.5):
    """One split step: advect + force, implicit diffusion, projection."""
    ustar, cfl, warn = advect(u, dt, upwind)
    ustar = ustar + F.scaled(dt)
    w = diffuse(ustar, mu, dt, ws, theta)
    unew, phi = project(w, ws)
    p = PressureField(phi.p / dt, u.grid)
    return unew, p, StepReport(cfl=cfl, div_residual=divergence_residual(unew), cfl_warning=warn)


# ---------------------------------------------------------------------------
# reference flows
# ---------------------------------------------------------------------------

def taylor_green(grid: Grid, t=0.0, mu=1.0, amplitude=1.0):
    """Face samples of the decaying Taylor-Green vortex on the periodic box."""
    kx = 2 * np.pi / grid.Lx
    ky = 2 * np.pi / grid.Ly
    decay = np.exp(-mu * (kx ** 2 + ky ** 2) * t) * amplitude
    X, Y = grid.ux_points()
    ux = decay * np.sin(kx * X) * np.cos(ky * Y)
    X, Y = grid.uy_points()
    uy = -decay * (kx / ky) * np.cos(kx * X) * np.sin(ky * Y)
    return VelocityField(ux, uy, grid)


def box_vortex(grid: Grid, amplitude=1.0):
    """No-slip compatible cellular vortex from ``psi = A sin^2(pi x/Lx) sin^2(pi y/Ly)``."""
    def psi(X, Y):
        return amplitude * np.sin(np.pi * X / grid.Lx) ** 2 * np.sin(np.pi * Y / grid.Ly) ** 2
    return VelocityField.from_streamfunction(grid, psi)
