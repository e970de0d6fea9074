"""Domain geometry, field containers, interpolation stencils and initial-data samplers.

Layout conventions (MAC grid, index ``[i, j]`` with ``i`` along x):

* ``ux`` lives on x-faces ``(i*hx, (j+1/2)*hy)``. With no-slip walls the array
  has shape ``(Nx+1, Ny)`` and the two wall columns ``i=0, Nx`` stay zero; with
  periodic boundaries it has shape ``(Nx, Ny)``.
* ``uy`` lives on y-faces ``((i+1/2)*hx, j*hy)``; shape ``(Nx, Ny+1)`` or ``(Nx, Ny)``.
* scalars (pressure, moments) live at cell centres, shape ``(Nx, Ny)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

NO_SLIP = "no-slip"
PERIODIC = "periodic"
SPECULAR = "specular"

FLUID_BCS = (NO_SLIP, PERIODIC)
KINETIC_BCS = (SPECULAR, PERIODIC)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    lengths: tuple = (1.0, 1.0)
    cells: tuple = (32, 32)
    bc_fluid: str = NO_SLIP
    bc_kinetic: str = SPECULAR
    dim: int = 2

    def validate(self):
        if self.dim != 2:
            raise DomainError(f"unsupported dimension: {self.dim} (only d=2 is implemented)")
        if len(self.lengths) != 2 or len(self.cells) != 2:
            raise DomainError("lengths and cells must have two entries")
        if any(not (L > 0) for L in self.lengths):
            raise DomainError(f"domain lengths must be positive, got {self.lengths}")
        if any(int(n) != n or n < 4 for n in self.cells):
            raise DomainError(f"cell counts must be integers >= 4, got {self.cells}")
        if self.bc_fluid not in FLUID_BCS:
            raise DomainError(f"unknown fluid boundary condition {self.bc_fluid!r}")
        if self.bc_kinetic not in KINETIC_BCS:
            raise DomainError(f"unknown kinetic boundary condition {self.bc_kinetic!r}")
        pair = (self.bc_fluid, self.bc_kinetic)
        if pair not in ((NO_SLIP, SPECULAR), (PERIODIC, PERIODIC)):
            raise DomainError(f"illegal boundary pair fluid={pair[0]}, kinetic={pair[1]}")


@dataclass(frozen=True)
class Grid:
    """Geometry handle returned by :func:`build_domain`."""

    Lx: float
    Ly: float
    Nx: int
    Ny: int
    periodic: bool

    @property
    def hx(self):
        return self.Lx / self.Nx

    @property
    def hy(self):
        return self.Ly / self.Ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def area(self):
        return self.Lx * self.Ly

    @property
    def ux_shape(self):
        return (self.Nx, self.Ny) if self.periodic else (self.Nx + 1, self.Ny)

    @property
    def uy_shape(self):
        return (self.Nx, self.Ny) if self.periodic else (self.Nx, self.Ny + 1)

    @property
    def shape(self):
        return (self.Nx, self.Ny)

    @property
    def tag(self):
        return (self.Lx, self.Ly, self.Nx, self.Ny, self.periodic)

    def x_centers(self):
        return (np.arange(self.Nx) + 0.5) * self.hx

    def y_centers(self):
        return (np.arange(self.Ny) + 0.5) * self.hy

    def x_faces(self):
        n = self.ux_shape[0]
        return np.arange(n) * self.hx

    def y_faces(self):
        n = self.uy_shape[1]
        return np.arange(n) * self.hy

    def ux_points(self):
        return np.meshgrid(self.x_faces(), self.y_centers(), indexing="ij")

    def uy_points(self):
        return np.meshgrid(self.x_centers(), self.y_faces(), indexing="ij")

    def cell_points(self):
        return np.meshgrid(self.x_centers(), self.y_centers(), indexing="ij")


def build_domain(spec: DomainSpec) -> Grid:
    spec.validate()
    return Grid(float(spec.lengths[0]), float(spec.lengths[1]),
                int(spec.cells[0]), int(spec.cells[1]),
                spec.bc_fluid == PERIODIC)


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------

@dataclass
class VelocityField:
    ux: np.ndarray
    uy: np.ndarray
    grid: Grid

    @classmethod
    def zeros(cls, grid):
        return cls(np.zeros(grid.ux_shape), np.zeros(grid.uy_shape), grid)

    def copy(self):
        return VelocityField(self.ux.copy(), self.uy.copy(), self.grid)

    def __add__(self, other):
        return VelocityField(self.ux + other.ux, self.uy + other.uy, self.grid)

    def __sub__(self, other):
        return VelocityField(self.ux - other.ux, self.uy - other.uy, self.grid)

    def scaled(self, a):
        return VelocityField(a * self.ux, a * self.uy, self.grid)

    def dot(self, other):
        """Discrete L2 inner product (face midpoint rule)."""
        a = self.grid.cell_area
        return float(np.sum(self.ux * other.ux) * a + np.sum(self.uy * other.uy) * a)

    def l2(self):
        return math.sqrt(self.dot(self))

    def max_abs(self):
        return float(max(np.max(np.abs(self.ux), initial=0.0), np.max(np.abs(self.uy), initial=0.0)))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.ux)) and np.all(np.isfinite(self.uy)))

    def flat(self):
        return np.concatenate([self.ux.ravel(), self.uy.ravel()])

    @classmethod
    def from_flat(cls, vec, grid):
        n = grid.ux_shape[0] * grid.ux_shape[1]
        return cls(vec[:n].reshape(grid.ux_shape).copy(), vec[n:].reshape(grid.uy_shape).copy(), grid)

    @classmethod
    def from_streamfunction(cls, grid, psi):
        """Discrete curl of a node-based stream function ``psi(x, y)``.

        The result is divergence free to rounding on every cell. For no-slip
        grids ``psi`` must vanish on the boundary so wall-normal faces are zero.
        """
        xn = np.arange(grid.Nx + 1) * grid.hx
        yn = np.arange(grid.Ny + 1) * grid.hy
        X, Y = np.meshgrid(xn, yn, indexing="ij")
        P = np.asarray(psi(X, Y), dtype=float)
        ux = (P[:, 1:] - P[:, :-1]) / grid.hy
        uy = -(P[1:, :] - P[:-1, :]) / grid.hx
        if grid.periodic:
            ux = ux[:-1, :]
            uy = uy[:, :-1]
        else:
            ux[0, :] = 0.0
            ux[-1, :] = 0.0
            uy[:, 0] = 0.0
            uy[:, -1] = 0.0
        return cls(ux, uy, grid)


@dataclass
class PressureField:
    p: np.ndarray
    grid: Grid


@dataclass
class MomentFields:
    """Cell-centred velocity moments (per unit area) plus optional face deposits.

    ``face`` holds ``m0`` and the matching momentum component deposited directly on
    each face family with the velocity-interpolation kernel; the coupling force uses
    them when present so that exchange of momentum with particles is adjoint.
    """

    m0: np.ndarray
    m1x: np.ndarray
    m1y: np.ndarray
    m2: np.ndarray
    grid: Grid
    step: Optional[int] = None
    face: Optional[dict] = None

    @classmethod
    def zeros(cls, grid, step=None):
        z = np.zeros(grid.shape)
        return cls(z, z.copy(), z.copy(), z.copy(), grid, step)

    def total_mass(self):
        return float(np.sum(self.m0) * self.grid.cell_area)


@dataclass
class ParticleEnsemble:
    positions: np.ndarray   # (N, 2)
    velocities: np.ndarray  # (N, 2)
    weights: np.ndarray     # (N,)
    # stencils depend on positions only; ensembles are never mutated in place
    _stencils: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = len(self.weights)
        if self.positions.shape[0] != n or self.velocities.shape[0] != n:
            raise ValueError("positions, velocities and weights disagree in length")
        if np.any(self.weights < 0):
            raise ValueError("particle weights must be nonnegative")

    @property
    def count(self):
        return len(self.weights)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def copy(self):
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(), self.weights.copy())

    def total_mass(self):
        return math.fsum(self.weights)

    def stencil(self, grid, where):
        """Memoized :func:`stencil` (or :func:`nearest_stencil` for ``"ngp"``) at the particle positions."""
        key = (grid, where)
        if key not in self._stencils:
            x, y = self.positions[:, 0], self.positions[:, 1]
            if where == "ngp":
                self._stencils[key] = nearest_stencil(grid, x, y)
            else:
                self._stencils[key] = stencil(grid, where, x, y)
        return self._stencils[key]

    def in_domain(self, grid):
        x, y = self.positions[:, 0], self.positions[:, 1]
        return bool(np.all((x >= 0) & (x <= grid.Lx) & (y >= 0) & (y <= grid.Ly)))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities)))


@dataclass
class PhaseGridDensity:
    """Samples of f on cell centres of ``grid`` times a ``nv x nv`` velocity grid.

    The drag field (u - v) compresses velocity space at rate d=2, so along
    characteristics ``f`` grows by exactly ``exp(2 t)``. Only the reduced
    density ``f * exp(-2 t)`` is interpolated by the scheme; storing that keeps
    the growth bound exact in floating point.
    """

    reduced: np.ndarray  # (Nx, Ny, nv, nv)
    grid: Grid
    vmax: float
    time: float = 0.0
    outside: int = 0  # feet that left the velocity box on the last step

    GROWTH_RATE = 2.0

    @classmethod
    def from_values(cls, values, grid, vmax, time=0.0):
        values = np.asarray(values, dtype=float)
        return cls(values / math.exp(cls.GROWTH_RATE * time), grid, vmax, time)

    @property
    def values(self):
        return self.reduced * math.exp(self.GROWTH_RATE * self.time)

    @property
    def nv(self):
        return self.reduced.shape[2]

    @property
    def hv(self):
        return 2.0 * self.vmax / self.nv

    def v_nodes(self):
        return -self.vmax + (np.arange(self.nv) + 0.5) * self.hv

    @property
    def cell_volume(self):
        return self.grid.cell_area * self.hv ** 2

    def total_mass(self):
        return float(np.sum(self.values) * self.cell_volume)

    def copy(self):
        return replace(self, reduced=self.reduced.copy())


@dataclass
class SimConfig:
    dt: float = 1e-3
    t_end: float = 0.1
    mu: float = 1.0
    lam: float = math.inf
    kinetic_backend: str = "particles"
    seed: int = 0
    threads: int = 1
    upwind: float = 0.1
    theta: float = 0.5
    deposition: str = "cic"
    snapshot_every: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ValueError(f"t_end must be nonnegative, got {self.t_end}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.kinetic_backend not in ("particles", "phase-grid"):
            raise ValueError(f"unknown kinetic backend {self.kinetic_backend!r}")
        if self.deposition not in ("cic", "ngp"):
            raise ValueError(f"unknown deposition scheme {self.deposition!r}")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0.5, 1]")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def check_stability(self, grid, umax):
        """Advisory CFL check; warns, never raises."""
        bound = stable_dt(grid, umax)
        if self.dt > bound:
            warnings.warn(f"dt={self.dt:g} exceeds advective stability bound {bound:g}",
                          RuntimeWarning, stacklevel=2)
        return bound


def stable_dt(grid, umax):
    if umax <= 0:
        return math.inf
    return min(grid.hx, grid.hy) / umax


# ---------------------------------------------------------------------------
# interpolation stencils (shared by particle interpolation and deposition)
# ---------------------------------------------------------------------------

def _axis(s, n, mode):
    """Two-node linear weights along one axis.

    ``s`` is the coordinate in node-index units. Modes:
    ``periodic`` nodes 0..n-1 wrap; ``clamp`` nodes 0..n-1, outside points fold
    onto the end node; ``wall`` nodes 0..n-1 plus zero-valued wall nodes at
    s=-1/2 and s=n-1/2 (index -1); ``faces`` nodes 0..n inclusive.
    """
    if mode == "periodic":
        i0 = np.floor(s)
        t = s - i0
        i0 = i0.astype(np.int64) % n
        return i0, (i0 + 1) % n, 1.0 - t, t
    if mode == "clamp":
        i0 = np.floor(s)
        t = s - i0
        i0 = i0.astype(np.int64)
        return np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1), 1.0 - t, t
    if mode == "faces":
        i0 = np.minimum(np.floor(s), n - 1)
        i0 = np.maximum(i0, 0)
        t = s - i0
        i0 = i0.astype(np.int64)
        return i0, i0 + 1, 1.0 - t, t
    if mode == "wall":
        i0 = np.floor(s)
        t = s - i0
        i0 = i0.astype(np.int64)
        i1 = i0 + 1
        lo = s < 0
        hi = s >= n - 1
        t = np.where(lo, 2.0 * s + 1.0, np.where(hi, 2.0 * (s - (n - 1)), t))
        i0 = np.where(lo, -1, np.where(hi, n - 1, i0))
        i1 = np.where(lo, 0, np.where(hi, -1, i1))
        return i0, i1, 1.0 - t, t
    raise ValueError(mode)


def _combine(ax, ay, ny):
    ix0, ix1, wx0, wx1 = ax
    iy0, iy1, wy0, wy1 = ay
    idx = []
    wts = []
    for ix, wx in ((ix0, wx0), (ix1, wx1)):
        for iy, wy in ((iy0, wy0), (iy1, wy1)):
            bad = (ix < 0) | (iy < 0)
            idx.append(np.where(bad, -1, ix * ny + iy))
            wts.append(wx * wy)
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def stencil(grid, where, x, y):
    """Bilinear stencil ``(idx, wts)`` of shape (N, 4) for points ``(x, y)``.

    ``where`` is ``"ux"``, ``"uy"`` or ``"cell"``. ``idx == -1`` marks a
    zero-valued wall node (tangential no-slip). Wall faces of the normal
    component are real array entries that stay zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sx_face, sy_face = x / grid.hx, y / grid.hy
    sx_cell, sy_cell = sx_face - 0.5, sy_face - 0.5
    if grid.periodic:
        if where == "ux":
            ax, ay = _axis(sx_face, grid.Nx, "periodic"), _axis(sy_cell, grid.Ny, "periodic")
        elif where == "uy":
            ax, ay = _axis(sx_cell, grid.Nx, "periodic"), _axis(sy_face, grid.Ny, "periodic")
        else:
            ax, ay = _axis(sx_cell, grid.Nx, "periodic"), _axis(sy_cell, grid.Ny, "periodic")
        ny = grid.Ny
    else:
        if where == "ux":
            ax, ay = _axis(sx_face, grid.Nx, "faces"), _axis(sy_cell, grid.Ny, "wall")
            ny = grid.Ny
        elif where == "uy":
            ax, ay = _axis(sx_cell, grid.Nx, "wall"), _axis(sy_face, grid.Ny, "faces")
            ny = grid.Ny + 1
        else:
            ax, ay = _axis(sx_cell, grid.Nx, "clamp"), _axis(sy_cell, grid.Ny, "clamp")
            ny = grid.Ny
    return _combine(ax, ay, ny)


def nearest_stencil(grid, x, y):
    """Nearest-cell stencil in the same (idx, wts) format as :func:`stencil`."""
    ix = np.clip(np.floor(np.asarray(x) / grid.hx).astype(np.int64), 0, grid.Nx - 1)
    iy = np.clip(np.floor(np.asarray(y) / grid.hy).astype(np.int64), 0, grid.Ny - 1)
    if grid.periodic:
        ix %= grid.Nx
        iy %= grid.Ny
    idx = (ix * grid.Ny + iy)[:, None]
    return idx, np.ones_like(idx, dtype=float)


def gather(field_, idx, wts):
    flat = field_.ravel()
    vals = flat[np.maximum(idx, 0)]
    vals = np.where(idx >= 0, vals, 0.0)
    return np.sum(wts * vals, axis=1)


def scatter(shape, idx, wts, q=None):
    """Accumulate ``wts * q`` onto a zero array of ``shape`` in fixed particle order."""
    contrib = wts if q is None else wts * np.asarray(q)[:, None]
    size = shape[0] * shape[1]
    ok = idx >= 0
    if ok.all():
        out = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=size)
    else:
        out = np.bincount(idx[ok], weights=contrib[ok], minlength=size)
    return out.reshape(shape)


def interpolate_velocity(u: VelocityField, x, y):
    """Bilinear interpolation of both components from their own faces."""
    ix, wx = stencil(u.grid, "ux", x, y)
    iy, wy = stencil(u.grid, "uy", x, y)
    return gather(u.ux, ix, wx), gather(u.uy, iy, wy)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def sample_maxwellian(rho, vbar, theta, n, seed, grid) -> ParticleEnsemble:
    """Uniform-in-space Maxwellian ensemble with total mass ``rho * |Omega|``."""
    if n < 1:
        raise ValueError("particle count must be at least 1")
    if rho < 0:
        raise ValueError("density must be nonnegative")
    if not theta > 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 2)) * np.array([grid.Lx, grid.Ly])
    vel = np.asarray(vbar, dtype=float) + math.sqrt(theta) * rng.standard_normal((n, 2))
    w = np.full(n, rho * grid.area / n)
    return ParticleEnsemble(pos, vel, w)


def maxwellian_phase_grid(grid, rho, vbar, theta, vmax, nv, density=None):
    """Phase-grid samples of ``rho(x) / (2 pi theta) exp(-|v - vbar|^2 / (2 theta))``.

    ``density`` optionally maps cell-centre coordinates to a spatial profile
    multiplying ``rho``.
    """
    X, Y = grid.cell_points()
    prof = np.full(grid.shape, float(rho))
    if density is not None:
        prof = prof * density(X, Y)
    hv = 2.0 * vmax / nv
    v = -vmax + (np.arange(nv) + 0.5) * hv
    VX, VY = np.meshgrid(v - vbar[0], v - vbar[1], indexing="ij")
    g = np.exp(-(VX ** 2 + VY ** 2) / (2.0 * theta)) / (2.0 * math.pi * theta)
    return PhaseGridDensity.from_values(prof[:, :, None, None] * g[None, None], grid, vmax)
