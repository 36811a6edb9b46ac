"""Explicit APIC material point method for an elastomer pressed by a rigid indenter.

One step is p2g -> grid_update -> g2p. Kernels are sequential numba loops, so
every run is deterministic (fixed reduction order).
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .config import ConfigError, SimConfig
from .constitutive import InversionError, _psi_and_pk1_s, det3, psi_and_pk1
from .indenter import Indenter, sdf_batch, sdf_point_s

log = logging.getLogger(__name__)

MASS_EPS = 1e-12
BOUND = 2  # boundary node layers on each wall


class OutOfDomainError(IndexError):
    def __init__(self, particle):
        super().__init__(f"particle {particle} left the valid grid interior")
        self.particle = particle


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: float
    volume0: float


@dataclass
class FullState:
    """Structure-of-arrays particle state.

    ``rest`` holds the reference (t=0) positions; masses and rest volumes never
    change over a trajectory.
    """
    x: np.ndarray        # (N, 3) m
    v: np.ndarray        # (N, 3) m/s
    F: np.ndarray        # (N, 3, 3)
    C: np.ndarray        # (N, 3, 3) 1/s
    mass: np.ndarray     # (N,) kg
    volume0: np.ndarray  # (N,) m^3
    rest: np.ndarray     # (N, 3) m
    time: float = 0.0
    frame_index: int = 0

    @property
    def n(self) -> int:
        return len(self.x)

    def particle(self, i) -> ParticleState:
        return ParticleState(self.x[i], self.v[i], self.F[i], self.C[i],
                             float(self.mass[i]), float(self.volume0[i]))

    def copy(self) -> "FullState":
        return FullState(self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy(),
                         self.mass, self.volume0, self.rest, self.time, self.frame_index)


@dataclass
class Grid:
    dims: tuple
    dx: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    node_mass: np.ndarray = None
    node_momentum: np.ndarray = None
    node_velocity: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.node_mass is None:
            self.clear()

    def clear(self):
        self.node_mass = np.zeros(self.dims)
        self.node_momentum = np.zeros(self.dims + (3,))
        self.node_velocity = np.zeros(self.dims + (3,))

    def node_positions(self):
        ax = [self.origin[a] + self.dx * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    @classmethod
    def for_config(cls, config: SimConfig) -> "Grid":
        return cls(config.grid_dims, config.dx)


# --- quadratic B-spline kernel -----------------------------------------------

@njit(cache=True)
def _weights(xp, origin, inv_dx, dims, base, w, dw):
    """Per-axis weights w[a, k] and derivatives dw[a, k] (1/m). False if out of domain."""
    for a in range(3):
        fx = (xp[a] - origin[a]) * inv_dx
        b = int(math.floor(fx - 0.5))
        if b < 0 or b + 2 > dims[a] - 1:
            return False
        base[a] = b
        f = fx - b
        w[a, 0] = 0.5 * (1.5 - f) ** 2
        w[a, 1] = 0.75 - (f - 1.0) ** 2
        w[a, 2] = 0.5 * (f - 0.5) ** 2
        dw[a, 0] = (f - 1.5) * inv_dx
        dw[a, 1] = -2.0 * (f - 1.0) * inv_dx
        dw[a, 2] = (f - 0.5) * inv_dx
    return True


def bspline_weights(particle_pos, grid: Grid, index=0):
    """Weights (3,3,3), gradients (3,3,3,3) and base node index for one particle."""
    base = np.zeros(3, dtype=np.int64)
    w = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    ok = _weights(np.asarray(particle_pos, dtype=np.float64), grid.origin, 1.0 / grid.dx,
                  np.asarray(grid.dims, dtype=np.int64), base, w, dw)
    if not ok:
        raise OutOfDomainError(index)
    W = np.einsum("i,j,k->ijk", w[0], w[1], w[2])
    G = np.stack([np.einsum("i,j,k->ijk", dw[0], w[1], w[2]),
                  np.einsum("i,j,k->ijk", w[0], dw[1], w[2]),
                  np.einsum("i,j,k->ijk", w[0], w[1], dw[2])], axis=-1)
    return W, G, base


# --- transfers -----------------------------------------------------------------

@njit(cache=True)
def _p2g(x, v, C, mass, origin, dx, dims, gm, gp):
    inv_dx = 1.0 / dx
    base = np.zeros(3, dtype=np.int64)
    w = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    for p in range(x.shape[0]):
        if not _weights(x[p], origin, inv_dx, dims, base, w, dw):
            return p
        m = mass[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[0, i] * w[1, j] * w[2, k]
                    gi, gj, gk = base[0] + i, base[1] + j, base[2] + k
                    d0 = (origin[0] + gi * dx) - x[p, 0]
                    d1 = (origin[1] + gj * dx) - x[p, 1]
                    d2 = (origin[2] + gk * dx) - x[p, 2]
                    gm[gi, gj, gk] += wt * m
                    for a in range(3):
                        va = v[p, a] + C[p, a, 0] * d0 + C[p, a, 1] * d1 + C[p, a, 2] * d2
                        gp[gi, gj, gk, a] += wt * m * va
    return -1


@njit(cache=True)
def _internal_forces(x, F, volume0, origin, dx, dims, mu, lam, force):
    """force_g = -sum_p V0_p P(F_p) F_p^T grad w_gp."""
    inv_dx = 1.0 / dx
    base = np.zeros(3, dtype=np.int64)
    w = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    P = np.zeros((3, 3))
    S = np.zeros((3, 3))
    R = np.zeros((3, 3))
    T1 = np.zeros((3, 3))
    T2 = np.zeros((3, 3))
    for p in range(x.shape[0]):
        if not _weights(x[p], origin, inv_dx, dims, base, w, dw):
            return p
        if det3(F[p]) <= 0.0:
            return -2 - p
        _psi_and_pk1_s(F[p], mu, lam, P, R, T1, T2)
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += P[a, c] * F[p, b, c]
                S[a, b] = volume0[p] * s
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    g0 = dw[0, i] * w[1, j] * w[2, k]
                    g1 = w[0, i] * dw[1, j] * w[2, k]
                    g2 = w[0, i] * w[1, j] * dw[2, k]
                    gi, gj, gk = base[0] + i, base[1] + j, base[2] + k
                    for a in range(3):
                        force[gi, gj, gk, a] -= S[a, 0] * g0 + S[a, 1] * g1 + S[a, 2] * g2
    return -1


@njit(cache=True)
def _contact_forces(x, volume0, origin, dx, dims, k_c, skin, reach, kind, params, sdfgrid, pos,
                    rot, force):
    """Scatter the penalty force -k_c V0 min(0, phi - skin) grad(phi) to the grid."""
    inv_dx = 1.0 / dx
    base = np.zeros(3, dtype=np.int64)
    w = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    n = np.empty(3)
    scratch = np.empty((5, 3))
    iscratch = np.empty(3, dtype=np.int64)
    reach2 = (reach + skin) ** 2
    for p in range(x.shape[0]):
        r2 = (x[p, 0] - pos[0]) ** 2 + (x[p, 1] - pos[1]) ** 2 + (x[p, 2] - pos[2]) ** 2
        if r2 > reach2:
            continue
        phi = sdf_point_s(x[p], kind, params, sdfgrid, pos, rot, n, scratch, iscratch) - skin
        if phi >= 0.0:
            continue
        if not _weights(x[p], origin, inv_dx, dims, base, w, dw):
            return p
        f = -k_c * volume0[p] * phi
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[0, i] * w[1, j] * w[2, k]
                    for a in range(3):
                        force[base[0] + i, base[1] + j, base[2] + k, a] += wt * f * n[a]
    return -1


@njit(cache=True)
def _grid_velocity(gm, gp, force, gv, dt, gravity, origin, dx, mass_eps,
                   has_indenter, kind, params, sdfgrid, pos, rot, ind_vel, friction, sticky,
                   bc, bound):
    nx, ny, nz = gm.shape
    dims = (nx, ny, nz)
    xg = np.empty(3)
    n = np.empty(3)
    vr = np.empty(3)
    vt = np.empty(3)
    scratch = np.empty((5, 3))
    iscratch = np.empty(3, dtype=np.int64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                m = gm[i, j, k]
                if m <= mass_eps:
                    gv[i, j, k, 0] = 0.0
                    gv[i, j, k, 1] = 0.0
                    gv[i, j, k, 2] = 0.0
                    continue
                for a in range(3):
                    gv[i, j, k, a] = gp[i, j, k, a] / m + dt * (force[i, j, k, a] / m + gravity[a])
                if has_indenter:
                    xg[0] = origin[0] + i * dx
                    xg[1] = origin[1] + j * dx
                    xg[2] = origin[2] + k * dx
                    phi = sdf_point_s(xg, kind, params, sdfgrid, pos, rot, n, scratch, iscratch)
                    if phi <= 0.0:
                        if sticky:
                            for a in range(3):
                                gv[i, j, k, a] = ind_vel[a]
                        else:
                            nn = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
                            if nn > 0:
                                for a in range(3):
                                    n[a] /= nn
                            vn = 0.0
                            for a in range(3):
                                vr[a] = gv[i, j, k, a] - ind_vel[a]
                                vn += vr[a] * n[a]
                            if vn < 0.0:
                                tn = 0.0
                                for a in range(3):
                                    vt[a] = vr[a] - vn * n[a]
                                    tn += vt[a] ** 2
                                tn = math.sqrt(tn)
                                scale = 0.0
                                if tn > 0 and tn + friction * vn > 0:
                                    scale = (tn + friction * vn) / tn
                                for a in range(3):
                                    gv[i, j, k, a] = ind_vel[a] + scale * vt[a]
                idx = (i, j, k)
                for a in range(3):
                    for side in range(2):
                        kind_bc = bc[a, side]
                        if side == 0:
                            hit = idx[a] < bound + 1 if a == 2 else idx[a] < bound
                        else:
                            hit = idx[a] > dims[a] - 1 - bound
                        if not hit or kind_bc == 3:
                            continue
                        if kind_bc == 0:  # sticky
                            gv[i, j, k, 0] = 0.0
                            gv[i, j, k, 1] = 0.0
                            gv[i, j, k, 2] = 0.0
                        elif kind_bc == 2:  # slip
                            gv[i, j, k, a] = 0.0
                        else:  # separate
                            if side == 0 and gv[i, j, k, a] < 0.0:
                                gv[i, j, k, a] = 0.0
                            if side == 1 and gv[i, j, k, a] > 0.0:
                                gv[i, j, k, a] = 0.0


@njit(cache=True)
def _g2p(x, v, F, C, gv, origin, dx, dims, dt):
    inv_dx = 1.0 / dx
    base = np.zeros(3, dtype=np.int64)
    w = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    G = np.zeros((3, 3))
    Fn = np.zeros((3, 3))
    for p in range(x.shape[0]):
        if not _weights(x[p], origin, inv_dx, dims, base, w, dw):
            return p
        for a in range(3):
            v[p, a] = 0.0
            for b in range(3):
                C[p, a, b] = 0.0
                G[a, b] = 0.0
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[0, i] * w[1, j] * w[2, k]
                    g = (dw[0, i] * w[1, j] * w[2, k],
                         w[0, i] * dw[1, j] * w[2, k],
                         w[0, i] * w[1, j] * dw[2, k])
                    gi, gj, gk = base[0] + i, base[1] + j, base[2] + k
                    d = ((origin[0] + gi * dx) - x[p, 0],
                         (origin[1] + gj * dx) - x[p, 1],
                         (origin[2] + gk * dx) - x[p, 2])
                    for a in range(3):
                        vg = gv[gi, gj, gk, a]
                        v[p, a] += wt * vg
                        for b in range(3):
                            C[p, a, b] += 4.0 * inv_dx * inv_dx * wt * vg * d[b]
                            G[a, b] += vg * g[b]
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += ((1.0 if a == c else 0.0) + dt * G[a, c]) * F[p, c, b]
                Fn[a, b] = s
        if det3(Fn) <= 0.0:
            return -2 - p
        for a in range(3):
            for b in range(3):
                F[p, a, b] = Fn[a, b]
            x[p, a] += dt * v[p, a]
    return -1


def interpolation_matrix(points, grid: Grid):
    """Sparse (n_points, n_nodes) matrix of quadratic B-spline weights."""
    pts = np.asarray(points, dtype=np.float64)
    fx = (pts - grid.origin) / grid.dx
    base = np.floor(fx - 0.5).astype(np.int64)
    dims = np.asarray(grid.dims)
    if np.any(base < 0) or np.any(base + 2 > dims - 1):
        bad = np.flatnonzero(np.any((base < 0) | (base + 2 > dims - 1), axis=1))[0]
        raise OutOfDomainError(int(bad))
    f = fx - base
    w = np.stack([0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2], axis=-1)
    off = np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij"),
                   -1).reshape(27, 3)
    nodes = base[:, None, :] + off[None]
    flat = (nodes[..., 0] * dims[1] + nodes[..., 1]) * dims[2] + nodes[..., 2]
    vals = w[:, 0, off[:, 0]] * w[:, 1, off[:, 1]] * w[:, 2, off[:, 2]]
    rows = np.repeat(np.arange(len(pts)), 27)
    return sp.csr_matrix((vals.ravel(), (rows, flat.ravel())),
                         shape=(len(pts), int(np.prod(dims))))


def grid_transfer_matrix(src, dst, grid: Grid):
    """Linear map from values on ``src`` points to values at ``dst`` points through ``grid``.

    Values are splatted with B-spline weights, normalised per node, then
    interpolated at ``dst`` with weights renormalised over nodes that received
    any weight. Rows of the result sum to one.
    """
    Ws = interpolation_matrix(src, grid)
    Wd = interpolation_matrix(dst, grid)
    node_w = np.asarray(Ws.sum(axis=0)).ravel()
    live = node_w > MASS_EPS
    inv = np.where(live, 1.0 / np.where(live, node_w, 1.0), 0.0)
    Wd = Wd @ sp.diags(live.astype(np.float64))
    row = np.asarray(Wd.sum(axis=1)).ravel()
    if np.any(row <= 0):
        raise OutOfDomainError(int(np.flatnonzero(row <= 0)[0]))
    return sp.csr_matrix(sp.diags(1.0 / row) @ Wd @ sp.diags(inv) @ Ws.T)


def _dims_array(grid):
    return np.asarray(grid.dims, dtype=np.int64)


def p2g(state: FullState, grid: Grid) -> Grid:
    grid.node_mass[...] = 0.0
    grid.node_momentum[...] = 0.0
    bad = _p2g(state.x, state.v, state.C, state.mass, grid.origin, grid.dx, _dims_array(grid),
               grid.node_mass, grid.node_momentum)
    if bad >= 0:
        raise OutOfDomainError(int(bad))
    return grid


_BC_CODES = {"sticky": 0, "separate": 1, "slip": 2, "free": 3}


def _bc_table(boundary):
    bc = np.ones((3, 2), dtype=np.int64)
    for a, ax in enumerate("xyz"):
        bc[a, 0] = _BC_CODES[boundary.get(f"{ax}_min", "separate")]
        bc[a, 1] = _BC_CODES[boundary.get(f"{ax}_max", "separate")]
    return bc


def grid_update(grid: Grid, state: FullState, dt: float, indenter: Indenter | None,
                config: SimConfig) -> Grid:
    force = np.zeros(grid.dims + (3,))
    mat = config.material
    bad = _internal_forces(state.x, state.F, state.volume0, grid.origin, grid.dx, _dims_array(grid),
                           mat.lame_mu, mat.lame_lambda, force)
    if bad >= 0:
        raise OutOfDomainError(int(bad))
    if bad <= -2:
        raise InversionError(f"det(F) <= 0 at particle {-2 - bad}", particle=-2 - bad)
    if indenter is not None and config.contact == "penalty":
        bad = _contact_forces(state.x, state.volume0, grid.origin, grid.dx, _dims_array(grid),
                              config.contact_stiffness, contact_skin(config), indenter.reach,
                              *indenter.kernel_args()[:5], force)
        if bad >= 0:
            raise OutOfDomainError(int(bad))
    if indenter is None or config.contact != "grid":
        args = (False, 0, np.zeros(6), np.zeros((1, 1, 1)), np.zeros(3), np.eye(3),
                np.zeros(3), 0.0, True)
    else:
        args = (True,) + indenter.kernel_args()
    _grid_velocity(grid.node_mass, grid.node_momentum, force, grid.node_velocity, dt,
                   np.asarray(config.gravity, dtype=np.float64), grid.origin, grid.dx, MASS_EPS,
                   *args, _bc_table(config.boundary), BOUND)
    return grid


def g2p(grid: Grid, state: FullState, dt: float, step_index: int | None = None) -> FullState:
    bad = _g2p(state.x, state.v, state.F, state.C, grid.node_velocity, grid.origin, grid.dx,
               _dims_array(grid), dt)
    if bad >= 0:
        raise OutOfDomainError(int(bad))
    if bad <= -2:
        p = -2 - bad
        raise InversionError(f"det(F) <= 0 at particle {p} (step {step_index})",
                             particle=p, step=step_index)
    state.time += dt
    return state


def step(state: FullState, config: SimConfig, indenter: Indenter | None = None,
         grid: Grid | None = None, step_index: int | None = None) -> FullState:
    """Advance ``state`` in place by one time step."""
    grid = grid or Grid.for_config(config)
    dt = config.time_step
    p2g(state, grid)
    grid_update(grid, state, dt, indenter, config)
    return g2p(grid, state, dt, step_index)


# --- seeding -------------------------------------------------------------------

def lattice_counts(extents, n):
    """Per-axis particle counts for ``n`` particles in a box.

    Uses an exact factorisation of ``n`` when one exists with spacing
    anisotropy <= 1.5, otherwise the nearest isotropic lattice.
    """
    return _lattice_counts(tuple(float(e) for e in extents), int(n))


@functools.lru_cache(maxsize=64)
def _lattice_counts(extents, n):
    ex = np.asarray(extents, dtype=np.float64)
    best = None
    for nx in range(1, n + 1):
        if n % nx:
            continue
        for ny in range(1, n // nx + 1):
            if (n // nx) % ny:
                continue
            nz = n // (nx * ny)
            h = ex / np.array([nx, ny, nz])
            aniso = h.max() / h.min()
            if best is None or aniso < best[0] - 1e-12:
                best = (aniso, (nx, ny, nz))
    if best is not None and best[0] <= 1.5:
        return best[1]
    h = (np.prod(ex) / n) ** (1.0 / 3.0)
    return tuple(int(max(1, round(e / h))) for e in ex)


def elastomer_box(config: SimConfig):
    """Lower corner and upper corner of the elastomer inside the grid."""
    dims = np.asarray(config.grid_dims)
    ex = np.asarray(config.extents, dtype=np.float64)
    lo = np.empty(3)
    lo[:2] = (dims[:2] - 1) * config.dx / 2.0 - ex[:2] / 2.0
    lo[2] = BOUND * config.dx
    hi = lo + ex
    limit = (dims - 1 - BOUND - 1) * config.dx
    if np.any(lo[:2] < BOUND * config.dx) or np.any(hi > limit):
        raise ConfigError(
            f"elastomer {tuple(ex)} m does not fit grid {tuple(dims)} with dx={config.dx} "
            f"(needs {BOUND + 1} free boundary cells per wall)")
    return lo, hi


def seed_particles(config: SimConfig) -> FullState:
    lo, hi = elastomer_box(config)
    ex = hi - lo
    counts = lattice_counts(ex, config.n_particles)
    h = ex / np.array(counts)
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), -1).reshape(-1, 3)
    rng = np.random.default_rng(config.seed)
    jit = np.zeros((len(idx), 3))
    # in-plane jitter only: the layers stay planar so the top face is well defined
    jit[:, :2] = config.jitter * (rng.random((len(idx), 2)) - 0.5)
    x = lo + (idx + 0.5 + jit) * h
    n = len(x)
    vol = np.prod(ex) / n
    return FullState(
        x=x, v=np.zeros((n, 3)), F=np.tile(np.eye(3), (n, 1, 1)), C=np.zeros((n, 3, 3)),
        mass=np.full(n, config.material.density * vol), volume0=np.full(n, vol),
        rest=x.copy())


def particle_spacing(config: SimConfig):
    lo, hi = elastomer_box(config)
    return (hi - lo) / np.array(lattice_counts(hi - lo, config.n_particles))


def contact_skin(config: SimConfig) -> float:
    """Penalty activation distance: half the through-thickness particle spacing.

    Particles sit half a spacing below the physical top face, so this makes the
    indenter engage the face itself at every resolution.
    """
    if config.contact_skin >= 0:
        return config.contact_skin
    return 0.5 * float(particle_spacing(config)[2])


# --- energy ----------------------------------------------------------------------

def potential_energy(x, F, volume0, mass, material, indenter: Indenter | None = None,
                     contact_stiffness=1e12, gravity=(0.0, 0.0, 0.0), skin=0.0):
    """Elastic + contact-penalty + gravitational energy and its gradients.

    Returns (E, dE/dx (N,3), dE/dF (N,3,3)). The contact term is
    0.5 k_c sum_i V0_i min(0, phi(x_i) - skin)^2.
    """
    psi, P = psi_and_pk1(F, material)
    E = float(np.dot(volume0, psi))
    dF = volume0[:, None, None] * P
    dx = np.zeros_like(x)
    if indenter is not None and contact_stiffness > 0:
        phi, grad = indenter.sdf_and_grad(x)
        pen = np.minimum(phi - skin, 0.0)
        E += 0.5 * contact_stiffness * float(np.dot(volume0, pen * pen))
        dx += (contact_stiffness * volume0 * pen)[:, None] * grad
    g = np.asarray(gravity, dtype=np.float64)
    if np.any(g != 0):
        E -= float(np.sum(mass[:, None] * x * g))
        dx -= mass[:, None] * g
    return E, dx, dF


def elastic_energy(state: FullState, material, indenter: Indenter | None = None,
                   contact_stiffness=1e12, gravity=(0.0, 0.0, 0.0), skin=0.0) -> float:
    return potential_energy(state.x, state.F, state.volume0, state.mass, material, indenter,
                            contact_stiffness, gravity, skin)[0]


def kinetic_energy(state: FullState) -> float:
    return 0.5 * float(np.sum(state.mass[:, None] * state.v ** 2))


# --- press scenario --------------------------------------------------------------

@dataclass
class Trajectory:
    x: np.ndarray       # (T, N, 3)
    v: np.ndarray       # (T, N, 3)
    F: np.ndarray       # (T, N, 3, 3)
    poses: np.ndarray   # (T, 7)
    times: np.ndarray   # (T,)
    dt: float
    dx: float
    grid_dims: tuple
    rest: np.ndarray | None = None
    mass: np.ndarray | None = None
    volume0: np.ndarray | None = None

    @property
    def n_frames(self):
        return len(self.x)

    @property
    def n_particles(self):
        return self.x.shape[1]

    def state(self, k) -> FullState:
        n = self.n_particles
        return FullState(self.x[k].astype(np.float64), self.v[k].astype(np.float64),
                         self.F[k].astype(np.float64), np.zeros((n, 3, 3)),
                         self.mass, self.volume0, self.rest, float(self.times[k]), k)


def indenter_pose(config: SimConfig, t: float, indenter: Indenter):
    """Pose (7,) and linear velocity of the indenter at time t."""
    lo, hi = elastomer_box(config)
    ind = config.indenter
    travel = min(ind.speed * t, ind.depth)
    moving = ind.speed * t < ind.depth
    pos = np.array([
        0.5 * (lo[0] + hi[0]) + ind.center[0],
        0.5 * (lo[1] + hi[1]) + ind.center[1],
        hi[2] + indenter.lowest - travel])
    vel = np.array([0.0, 0.0, -ind.speed if moving else 0.0])
    return np.concatenate([pos, np.asarray(ind.orientation, dtype=np.float64)]), vel


def run_press_scenario(config: SimConfig, frames: int | None = None, callback=None) -> Trajectory:
    """Quasi-static press; frame 0 is the initial state."""
    frames = config.frames if frames is None else frames
    state = seed_particles(config)
    grid = Grid.for_config(config)
    base = Indenter.from_config(config.indenter)
    dt = config.time_step
    spf = config.frame_steps
    n = state.n
    T = frames + 1
    xs = np.empty((T, n, 3), np.float32)
    vs = np.empty((T, n, 3), np.float32)
    Fs = np.empty((T, n, 3, 3), np.float32)
    poses = np.empty((T, 7))
    times = np.empty(T)

    def record(k):
        xs[k] = state.x
        vs[k] = state.v
        Fs[k] = state.F
        poses[k] = indenter_pose(config, state.time, base)[0]
        times[k] = state.time

    record(0)
    it = 0
    for f in range(1, T):
        for _ in range(spf):
            pose, vel = indenter_pose(config, it * dt, base)
            step(state, config, base.with_pose(pose, vel), grid, step_index=it)
            it += 1
        state.time = it * dt
        record(f)
        if callback is not None:
            callback(f, state)
    return Trajectory(xs, vs, Fs, poses, times, dt, config.dx, tuple(config.grid_dims),
                      rest=state.rest, mass=state.mass, volume0=state.volume0)


def top_surface_mask(rest, spacing_z, top_z):
    """Particles whose rest position is within one spacing of the top face."""
    return rest[:, 2] >= top_z - spacing_z * (1 - 1e-9)


def surface_height_field(x, rest, top_mask, lo, hi, cells):
    """Cell-averaged surface height on an in-plane grid (coarse-graining for comparisons)."""
    ij = np.floor((rest[top_mask, :2] - lo[:2]) / (hi[:2] - lo[:2]) * cells).astype(int)
    ij = np.clip(ij, 0, cells - 1)
    flat = ij[:, 0] * cells + ij[:, 1]
    s = np.bincount(flat, weights=x[top_mask, 2], minlength=cells * cells)
    c = np.bincount(flat, minlength=cells * cells)
    with np.errstate(invalid="ignore"):
        return (s / c).reshape(cells, cells)


def sdf_values(indenter: Indenter, pts):
    out = np.empty(len(pts))
    grad = np.empty((len(pts), 3))
    sdf_batch(np.ascontiguousarray(pts, dtype=np.float64), *indenter.kernel_args()[:5], out, grad)
    return out
