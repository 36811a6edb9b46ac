"""Rigid indenters as signed distance functions with a prescribed pose."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

SPHERE, BOX, MESH = 0, 1, 2
_SHAPES = {"sphere": SPHERE, "box": BOX, "mesh": MESH}


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class Indenter:
    """Shape parameters packed for the numba kernels plus the current pose.

    ``pose`` is (px, py, pz, qw, qx, qy, qz); ``velocity`` the linear velocity
    of the rigid body (the press never rotates the indenter).
    """
    kind: int
    params: np.ndarray          # radius | half extents | (origin, spacing)
    sdf_grid: np.ndarray        # 3-D SDF samples for mesh indenters (1x1x1 dummy otherwise)
    pose: np.ndarray
    velocity: np.ndarray
    friction: float = 0.0
    sticky: bool = True
    lowest: float = 0.0         # distance from the pose origin down to the lowest point

    @classmethod
    def from_config(cls, cfg) -> "Indenter":
        kind = _SHAPES[cfg.shape]
        grid = np.zeros((1, 1, 1))
        if kind == SPHERE:
            params = np.array([cfg.radius, 0, 0, 0, 0, 0], dtype=np.float64)
            lowest = cfg.radius
        elif kind == BOX:
            params = np.array([*cfg.half_extents, 0, 0, 0], dtype=np.float64)
            lowest = cfg.half_extents[2]
        else:
            data = np.load(cfg.sdf_path)
            grid = np.ascontiguousarray(data["sdf"], dtype=np.float64)
            origin = np.asarray(data["origin"], dtype=np.float64)
            spacing = float(data["spacing"])
            params = np.array([*origin, spacing, 0, 0], dtype=np.float64)
            lowest = float(data["lowest"]) if "lowest" in data else -origin[2]
        pose = np.array([0, 0, 0, *cfg.orientation], dtype=np.float64)
        return cls(kind, params, grid, pose, np.zeros(3), cfg.friction, cfg.sticky, lowest)

    @property
    def reach(self) -> float:
        """Radius of a ball around the pose origin containing the whole shape."""
        if self.kind == SPHERE:
            return float(self.params[0])
        if self.kind == BOX:
            return float(np.linalg.norm(self.params[:3]))
        o = self.params[:3]
        far = o + self.params[3] * (np.array(self.sdf_grid.shape) - 1)
        return float(np.linalg.norm(np.maximum(np.abs(o), np.abs(far))))

    @property
    def rotation(self):
        return quat_to_matrix(self.pose[3:])

    def with_pose(self, pose, velocity=None) -> "Indenter":
        v = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=np.float64)
        return Indenter(self.kind, self.params, self.sdf_grid, np.asarray(pose, dtype=np.float64),
                        v, self.friction, self.sticky, self.lowest)

    def sdf(self, points):
        """Signed distance (negative inside) for an (n, 3) array of points."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(len(pts))
        grad = np.empty((len(pts), 3))
        sdf_batch(pts, self.kind, self.params, self.sdf_grid, self.pose[:3].copy(),
                  self.rotation, out, grad)
        return out

    def sdf_and_grad(self, points):
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(len(pts))
        grad = np.empty((len(pts), 3))
        sdf_batch(pts, self.kind, self.params, self.sdf_grid, self.pose[:3].copy(),
                  self.rotation, out, grad)
        return out, grad

    def kernel_args(self):
        return (self.kind, self.params, self.sdf_grid, self.pose[:3].copy(), self.rotation,
                self.velocity.copy(), float(self.friction), bool(self.sticky))


@njit(cache=True)
def _local_sdf(p, kind, params, grid, g):
    return _local_sdf_s(p, kind, params, grid, g, np.empty(3), np.empty(3), np.empty(3, dtype=np.int64))


@njit(cache=True)
def _local_sdf_s(p, kind, params, grid, g, q, f, idx):
    """SDF and its gradient in the indenter's local frame."""
    if kind == 0:
        r = np.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
        if r > 0:
            g[0] = p[0] / r
            g[1] = p[1] / r
            g[2] = p[2] / r
        else:
            g[0] = 0.0
            g[1] = 0.0
            g[2] = 1.0
        return r - params[0]
    if kind == 1:
        for a in range(3):
            q[a] = abs(p[a]) - params[a]
        qmax = max(q[0], max(q[1], q[2]))
        if qmax <= 0.0:
            # inside: gradient of the nearest face
            a = 0
            if q[1] > q[a]:
                a = 1
            if q[2] > q[a]:
                a = 2
            g[0] = 0.0
            g[1] = 0.0
            g[2] = 0.0
            g[a] = 1.0 if p[a] >= 0 else -1.0
            return qmax
        n2 = 0.0
        for a in range(3):
            qa = max(q[a], 0.0)
            n2 += qa * qa
        n = np.sqrt(n2)
        for a in range(3):
            qa = max(q[a], 0.0)
            g[a] = (qa / n) * (1.0 if p[a] >= 0 else -1.0)
        return n
    # trilinear interpolation of a sampled SDF
    h = params[3]
    nx, ny, nz = grid.shape
    dims = (nx, ny, nz)
    for a in range(3):
        u = (p[a] - params[a]) / h
        i = int(np.floor(u))
        i = min(max(i, 0), dims[a] - 2)
        idx[a] = i
        f[a] = min(max(u - i, 0.0), 1.0)
    i, j, k = idx[0], idx[1], idx[2]
    val = 0.0
    g[0] = 0.0
    g[1] = 0.0
    g[2] = 0.0
    for di in range(2):
        wx = f[0] if di else 1.0 - f[0]
        dwx = 1.0 if di else -1.0
        for dj in range(2):
            wy = f[1] if dj else 1.0 - f[1]
            dwy = 1.0 if dj else -1.0
            for dk in range(2):
                wz = f[2] if dk else 1.0 - f[2]
                dwz = 1.0 if dk else -1.0
                s = grid[i + di, j + dj, k + dk]
                val += wx * wy * wz * s
                g[0] += dwx * wy * wz * s / h
                g[1] += wx * dwy * wz * s / h
                g[2] += wx * wy * dwz * s / h
    # outside the sampled box: combine the boundary value and the normal
    # offset in quadrature, which keeps the extension 1-Lipschitz
    extra = 0.0
    for a in range(3):
        lo = params[a]
        hi = params[a] + (dims[a] - 1) * h
        if p[a] < lo:
            q[a] = p[a] - lo
        elif p[a] > hi:
            q[a] = p[a] - hi
        else:
            q[a] = 0.0
            continue
        g[a] = 0.0
        extra += q[a] * q[a]
    if extra == 0.0:
        return val
    if val <= 0.0:
        # body reaches the sampling boundary; fall back to the additive bound
        n = np.sqrt(extra)
        for a in range(3):
            g[a] += q[a] / n
        return val + n
    d = np.sqrt(val * val + extra)
    for a in range(3):
        g[a] = (val * g[a] + q[a]) / d
    return d


@njit(cache=True)
def sdf_point(x, kind, params, grid, pos, rot, gw):
    """World-space SDF at x; world-space gradient written to gw."""
    return sdf_point_s(x, kind, params, grid, pos, rot, gw, np.empty((5, 3)),
                       np.empty(3, dtype=np.int64))


@njit(cache=True)
def sdf_point_s(x, kind, params, grid, pos, rot, gw, scratch, iscratch):
    p = scratch[0]
    gl = scratch[1]
    for a in range(3):
        s = 0.0
        for b in range(3):
            s += rot[b, a] * (x[b] - pos[b])
        p[a] = s
    d = _local_sdf_s(p, kind, params, grid, gl, scratch[2], scratch[3], iscratch)
    for a in range(3):
        s = 0.0
        for b in range(3):
            s += rot[a, b] * gl[b]
        gw[a] = s
    return d


@njit(cache=True)
def sdf_batch(pts, kind, params, grid, pos, rot, out, grad):
    for i in range(pts.shape[0]):
        out[i] = sdf_point(pts[i], kind, params, grid, pos, rot, grad[i])


def sphere_sdf_grid(radius, spacing, pad=3):
    """Sampled SDF of a sphere, used to exercise the mesh code path."""
    n = int(np.ceil(2 * radius / spacing)) + 2 * pad + 1
    origin = -spacing * (n - 1) / 2.0
    ax = origin + spacing * np.arange(n)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    sdf = np.sqrt(X ** 2 + Y ** 2 + Z ** 2) - radius
    return {"sdf": sdf, "origin": np.full(3, origin), "spacing": spacing, "lowest": radius}


def lipschitz_ratio(indenter: Indenter, points_a, points_b):
    """max |phi(a) - phi(b)| / |a - b| over paired samples."""
    da = indenter.sdf(points_a)
    db = indenter.sdf(points_b)
    dist = np.linalg.norm(np.asarray(points_a) - np.asarray(points_b), axis=1)
    return float(np.max(np.abs(da - db) / dist))
