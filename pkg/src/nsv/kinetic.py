"""Vlasov transport with drag: particle pusher, moment deposition, phase-grid backend.

Characteristics of ``f_t + v.grad_x f + div_v((u - v) f) = 0`` with ``u``
frozen over a step solve ``dv/dt = u - v`` exactly:
``v' = u + (v - u) e^{-dt}``, ``x' = x + u dt + (v - u)(1 - e^{-dt})``.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .core import (Grid, MomentFields, ParticleEnsemble, PhaseGridDensity, VelocityField,
                   gather, interpolate_velocity, scatter)

log = logging.getLogger(__name__)

MAX_FOLDS = 8


class ParticleEscape(RuntimeError):
    pass


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = 134217729.0 * a  # 2^27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _dd_dot2(ax, ay, bx, by):
    p1, e1 = _two_prod(ax, bx)
    p2, e2 = _two_prod(ay, by)
    s, e3 = _two_sum(p1, p2)
    return _two_sum(s, e1 + e2 + e3)


def specular_reflect(v, nu):
    """``v - 2 (v . nu) nu`` for velocity rows ``v`` and unit normals ``nu``.

    Evaluated as ``v - 2 (v.nu) nu / |nu|^2`` in double-double arithmetic so the
    map is orthogonal before the final rounding even when ``nu`` is only unit
    to rounding: speed and the involution property then hold to about 1 ulp.
    """
    v = np.asarray(v, dtype=float)
    nu = np.asarray(nu, dtype=float)
    vx, vy = v[..., 0], v[..., 1]
    nx, ny = np.broadcast_to(nu[..., 0], vx.shape), np.broadcast_to(nu[..., 1], vx.shape)
    d_hi, d_lo = _dd_dot2(vx, vy, nx, ny)
    n_hi, n_lo = _dd_dot2(nx, ny, nx, ny)
    # c = 2 d / |nu|^2 as a double-double
    q1 = d_hi / n_hi
    p, pe = _two_prod(q1, n_hi)
    r = ((d_hi - p) - pe + d_lo - q1 * n_lo) / n_hi
    c_hi, c_lo = _two_sum(2.0 * q1, 2.0 * r)
    out = np.empty(np.broadcast_shapes(v.shape, nu.shape))
    for k, (vk, nk) in enumerate(((vx, nx), (vy, ny))):
        m, me = _two_prod(c_hi, nk)
        me = me + c_lo * nk
        s, se = _two_sum(vk, -m)
        out[..., k] = s + (se - me)
    return out


# ---------------------------------------------------------------------------
# truncation chi_lambda
# ---------------------------------------------------------------------------

def truncate_vectors(ux, uy, lam):
    """Zero the vectors whose magnitude exceeds ``lam``; identity for ``lam = inf``."""
    if not lam > 0:
        raise ValueError(f"truncation level must be positive, got {lam}")
    if math.isinf(lam):
        return ux, uy
    keep = np.hypot(ux, uy) <= lam
    return np.where(keep, ux, 0.0), np.where(keep, uy, 0.0)


def face_speeds(u: VelocityField):
    """|u| co-located on x-faces and on y-faces (other component averaged from 4 neighbours)."""
    g = u.grid
    if g.periodic:
        uy_at_x = 0.25 * (u.uy + np.roll(u.uy, -1, 1) + np.roll(u.uy, 1, 0) + np.roll(np.roll(u.uy, 1, 0), -1, 1))
        ux_at_y = 0.25 * (u.ux + np.roll(u.ux, -1, 0) + np.roll(u.ux, 1, 1) + np.roll(np.roll(u.ux, -1, 0), 1, 1))
    else:
        # average of the four y-faces around each x-face; missing neighbours at walls count as 0
        c = 0.5 * (u.uy[:, :-1] + u.uy[:, 1:])  # uy at cell centres
        pad = np.pad(c, ((1, 1), (0, 0)))
        uy_at_x = 0.5 * (pad[:-1] + pad[1:])
        c = 0.5 * (u.ux[:-1, :] + u.ux[1:, :])
        pad = np.pad(c, ((0, 0), (1, 1)))
        ux_at_y = 0.5 * (pad[:, :-1] + pad[:, 1:])
    return np.hypot(u.ux, uy_at_x), np.hypot(ux_at_y, u.uy)


def truncation_masks(u: VelocityField, lam):
    """Boolean keep-masks (|u| <= lam) on x-faces and y-faces."""
    if not lam > 0:
        raise ValueError(f"truncation level must be positive, got {lam}")
    if math.isinf(lam):
        return np.ones(u.ux.shape, bool), np.ones(u.uy.shape, bool)
    sx, sy = face_speeds(u)
    return sx <= lam, sy <= lam


def truncate_velocity(u: VelocityField, lam) -> VelocityField:
    """``chi_lambda(u) = u 1{|u| <= lam}`` evaluated face by face."""
    if not lam > 0:
        raise ValueError(f"truncation level must be positive, got {lam}")
    if math.isinf(lam):
        return u
    kx, ky = truncation_masks(u, lam)
    return VelocityField(np.where(kx, u.ux, 0.0), np.where(ky, u.uy, 0.0), u.grid)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------

def _fold_axis(x, v, L, periodic):
    if periodic:
        x = np.mod(x, L)
        return x, v, np.zeros(x.shape, bool)
    for _ in range(MAX_FOLDS):
        lo = x < 0.0
        hi = x > L
        if not (lo.any() or hi.any()):
            break
        x = np.where(lo, -x, np.where(hi, 2.0 * L - x, x))
        v = np.where(lo | hi, -v, v)
    return x, v, (x < 0.0) | (x > L)


def fold_into_domain(pos, vel, grid: Grid):
    """Specular (or periodic) folding of phase points, x axis first then y."""
    pos = pos.copy()
    vel = vel.copy()
    bad = np.zeros(len(pos), bool)
    for ax, L in ((0, grid.Lx), (1, grid.Ly)):
        pos[:, ax], vel[:, ax], b = _fold_axis(pos[:, ax], vel[:, ax], L, grid.periodic)
        bad |= b
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ParticleEscape(f"particle {i} still outside the domain after {MAX_FOLDS} reflections "
                             f"(position {pos[i].tolist()})")
    return pos, vel


def drag_flow(x, v, u, dt):
    """Exact frozen-``u`` characteristic map over ``dt``."""
    dv = v - u
    return x + u * dt + dv * (-math.expm1(-dt)), u + dv * math.exp(-dt)


def push_particles(ens: ParticleEnsemble, u: VelocityField, dt, lam=math.inf) -> ParticleEnsemble:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if ens.count == 0:
        return ens.copy()
    upx = gather(u.ux, *ens.stencil(u.grid, "ux"))
    upy = gather(u.uy, *ens.stencil(u.grid, "uy"))
    upx, upy = truncate_vectors(upx, upy, lam)
    up = np.stack([upx, upy], axis=1)
    pos, vel = drag_flow(ens.positions, ens.velocities, up, dt)
    pos, vel = fold_into_domain(pos, vel, u.grid)
    return ParticleEnsemble(pos, vel, ens.weights)


def deposit_moments(ens: ParticleEnsemble, grid: Grid, scheme="cic", step=None, faces=True) -> MomentFields:
    """Cell moments m0, m1, m2 per unit area, plus face deposits for the drag force."""
    if ens.count == 0:
        m = MomentFields.zeros(grid, step)
        if faces:
            m.face = {"m0x": np.zeros(grid.ux_shape), "m1x": np.zeros(grid.ux_shape),
                      "m0y": np.zeros(grid.uy_shape), "m1y": np.zeros(grid.uy_shape)}
        return m
    vx, vy = ens.velocities[:, 0], ens.velocities[:, 1]
    w = ens.weights
    inv_a = 1.0 / grid.cell_area
    if scheme not in ("cic", "ngp"):
        raise ValueError(f"unknown deposition scheme {scheme!r}")
    idx, wts = ens.stencil(grid, "cell" if scheme == "cic" else "ngp")
    m = MomentFields(
        m0=scatter(grid.shape, idx, wts, w) * inv_a,
        m1x=scatter(grid.shape, idx, wts, w * vx) * inv_a,
        m1y=scatter(grid.shape, idx, wts, w * vy) * inv_a,
        m2=scatter(grid.shape, idx, wts, w * (vx * vx + vy * vy)) * inv_a,
        grid=grid, step=step)
    if faces:
        ix, wx = ens.stencil(grid, "ux")
        iy, wy = ens.stencil(grid, "uy")
        m.face = {
            "m0x": scatter(grid.ux_shape, ix, wx, w) * inv_a,
            "m1x": scatter(grid.ux_shape, ix, wx, w * vx) * inv_a,
            "m0y": scatter(grid.uy_shape, iy, wy, w) * inv_a,
            "m1y": scatter(grid.uy_shape, iy, wy, w * vy) * inv_a,
        }
    return m


# ---------------------------------------------------------------------------
# phase-grid backend
# ---------------------------------------------------------------------------

VPAD = 2


def _ghosted(f, periodic):
    """Pad one ghost layer in x and y (mirrored with the normal velocity flipped,
    or periodic) and ``VPAD`` zero cells beyond the velocity box."""
    if periodic:
        e = np.concatenate([f[-1:], f, f[:1]], axis=0)
        e = np.concatenate([e[:, -1:], e, e[:, :1]], axis=1)
    else:
        e = np.concatenate([f[:1, :, ::-1, :], f, f[-1:, :, ::-1, :]], axis=0)
        e = np.concatenate([e[:, :1, :, ::-1], e, e[:, -1:, :, ::-1]], axis=1)
    return np.pad(e, ((0, 0), (0, 0), (VPAD, VPAD), (VPAD, VPAD)))


def _lerp(a, b, t):
    # clipped so the combination never leaves [min(a,b), max(a,b)] under rounding
    return np.clip(a + t * (b - a), np.minimum(a, b), np.maximum(a, b))


def _overlap_weights(q, s):
    """Overlap fractions of ``[q - s/2, q + s/2]`` with unit cells ``k0, k0+1, k0+2``.

    ``q`` is in cell-edge units (cell k spans [k, k+1]); requires ``1 <= s < 2``.
    """
    lo = q - 0.5 * s
    hi = q + 0.5 * s
    k0 = np.floor(lo)
    w = [np.maximum(0.0, np.minimum(hi, k0 + m + 1) - np.maximum(lo, k0 + m)) / s for m in range(3)]
    return k0.astype(np.int64), w


def phase_feet(fg: PhaseGridDensity, u: VelocityField, lam, dt):
    """Backward characteristic feet ``(x, y, vx, vy)`` of every phase node, folded into the domain."""
    g = fg.grid
    X, Y = g.cell_points()
    ux, uy = truncate_vectors(*interpolate_velocity(u, X.ravel(), Y.ravel()), lam)
    ux = ux.reshape(g.shape)[:, :, None, None]
    uy = uy.reshape(g.shape)[:, :, None, None]
    v = fg.v_nodes()
    VX = v[None, None, :, None]
    VY = v[None, None, None, :]
    grow = math.exp(dt)
    em1 = math.expm1(dt)
    fvx = ux + (VX - ux) * grow
    fvy = uy + (VY - uy) * grow
    fx = X[:, :, None, None] - ux * dt - (VX - ux) * em1
    fy = Y[:, :, None, None] - uy * dt - (VY - uy) * em1
    shape = np.broadcast_shapes(fx.shape, fy.shape, fvx.shape, fvy.shape)
    fx, fy, fvx, fvy = (np.broadcast_to(a, shape).copy() for a in (fx, fy, fvx, fvy))
    fx, fvx, _ = _fold_axis(fx, fvx, g.Lx, g.periodic)
    fy, fvy, _ = _fold_axis(fy, fvy, g.Ly, g.periodic)
    return fx, fy, fvx, fvy


def remap(e, sx, sy, qx, qy, stretch):
    """Bilinear in space, cell-overlap average in velocity.

    ``sx, sy`` are ghosted spatial index coordinates; ``qx, qy`` velocity
    coordinates in cell-edge units of the unpadded box; ``stretch`` the width of
    a velocity cell's preimage in cell units. Every output is a convex
    combination of input values.
    """
    nvp = e.shape[2]
    i = np.clip(np.floor(sx), 0, e.shape[0] - 2)
    j = np.clip(np.floor(sy), 0, e.shape[1] - 2)
    tx, ty = sx - i, sy - j
    i, j = i.astype(np.int64), j.astype(np.int64)
    kx, wx = _overlap_weights(qx, stretch)
    ky, wy = _overlap_weights(qy, stretch)
    kx = np.clip(kx + VPAD, 0, nvp - 3)
    ky = np.clip(ky + VPAD, 0, nvp - 3)
    corner = {}
    for a in (0, 1):
        for b in (0, 1):
            acc = 0.0
            vmin = vmax = None
            for m in range(3):
                for n in range(3):
                    val = e[i + a, j + b, kx + m, ky + n]
                    acc = acc + (wx[m] * wy[n]) * val
                    vmin = val if vmin is None else np.minimum(vmin, val)
                    vmax = val if vmax is None else np.maximum(vmax, val)
            corner[a, b] = np.clip(acc, vmin, vmax)
    lo = _lerp(corner[0, 0], corner[0, 1], ty)
    hi = _lerp(corner[1, 0], corner[1, 1], ty)
    return _lerp(lo, hi, tx)


def sl_step(fg: PhaseGridDensity, u: VelocityField, lam, dt) -> PhaseGridDensity:
    """One backward semi-Lagrangian step of the truncated Vlasov equation.

    Each node takes the bilinear (in x) average of ``f`` over the preimage of
    its velocity cell, times the Jacobian ``e^{2 dt}``. Feet whose velocity lies
    outside the box contribute zero; their count is kept on ``result.outside``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt >= math.log(2.0):
        raise ValueError("dt must be below ln 2 so a velocity preimage spans at most 3 cells")
    g = fg.grid
    fx, fy, fvx, fvy = phase_feet(fg, u, lam, dt)
    outside = (np.abs(fvx) > fg.vmax) | (np.abs(fvy) > fg.vmax)
    hv = fg.hv
    e = _ghosted(fg.reduced, g.periodic)
    val = remap(e, fx / g.hx + 0.5, fy / g.hy + 0.5,
                (fvx + fg.vmax) / hv, (fvy + fg.vmax) / hv, math.exp(dt))
    val = np.where(outside, 0.0, val)
    n_out = int(outside.sum())
    if n_out:
        log.debug("sl_step: %d characteristic feet left the velocity box", n_out)
    return PhaseGridDensity(val, g, fg.vmax, fg.time + dt, outside=n_out)


def velocity_moment(fg: PhaseGridDensity, k) -> np.ndarray:
    """Cell field ``m_k f = int |v|^k f dv`` by the midpoint rule."""
    v = fg.v_nodes()
    speed = np.hypot(v[:, None], v[None, :])
    w = speed ** k if k else np.ones_like(speed)
    return np.einsum("ijkl,kl->ij", fg.values, w) * fg.hv ** 2


def total_moment(fg: PhaseGridDensity, k) -> float:
    """``M_k f`` over the whole domain."""
    return float(np.sum(velocity_moment(fg, k)) * fg.grid.cell_area)


def moment_grid(fg: PhaseGridDensity, step=None) -> MomentFields:
    f = fg.values
    v = fg.v_nodes()
    dv = fg.hv ** 2
    m0 = f.sum(axis=(2, 3)) * dv
    m1x = np.einsum("ijkl,k->ij", f, v) * dv
    m1y = np.einsum("ijkl,l->ij", f, v) * dv
    return MomentFields(m0, m1x, m1y, velocity_moment(fg, 2), fg.grid, step)


def lp_norm(fg: PhaseGridDensity, p) -> float:
    f = fg.values
    if math.isinf(p):
        return float(np.max(np.abs(f))) if f.size else 0.0
    if p < 1:
        raise ValueError("p must be >= 1")
    return float((np.sum(np.abs(f) ** p) * fg.cell_volume) ** (1.0 / p))
