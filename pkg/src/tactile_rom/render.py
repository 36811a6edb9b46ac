"""Tactile depth images from surface particles, and the evaluation metrics.

The camera sits below the gel and looks up through it. Each pixel casts a
parallel ray (``view_dir``) that refracts at the gel interface; a surface
point is splatted at the pixel where its ray meets the sensor plane, with
value

    D = <n_s, x> + (z_s - <n_s, x>) / <n_s, d>.

For rays along the plane normal this is the constant z_s, which is why the
default sensor views the gel obliquely.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.spatial import cKDTree


class RenderError(RuntimeError):
    pass


class GrazingRayError(ArithmeticError):
    pass


class TotalInternalReflection(ArithmeticError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    n_s: tuple = (0.0, 0.0, 1.0)
    z_s: float = 0.0
    n_0: tuple = (0.0, 0.0, 1.0)
    eta: float = 1.0 / 1.4
    width: int = 320
    height: int = 240
    pitch: float = 1e-4
    origin: tuple = (0.0, 0.0, 0.0)       # corner of pixel (0, 0) on the sensor plane
    view_dir: tuple = (0.3420201433256687, 0.0, 0.9396926207859084)  # 20 deg from n_s
    splat_radius: float = 0.0             # m; 0 picks 0.75 x the surface point spacing
    max_hole: int = 2                     # px; larger holes stay invalid

    def __post_init__(self):
        for name in ("n_s", "n_0", "view_dir"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a unit 3-vector")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.pitch > 0:
            raise ValueError("pitch must be > 0")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    def axes(self):
        """In-plane unit vectors (e1 along image columns, e2 along rows)."""
        n = np.asarray(self.n_s, dtype=np.float64)
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = a - np.dot(a, n) * n
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(n, e1)

    def ray(self):
        """Refracted ray direction inside the gel."""
        d = refract_direction(np.asarray(self.view_dir, dtype=np.float64),
                              np.asarray(self.n_0, dtype=np.float64), self.eta)
        if d is None:
            raise TotalInternalReflection("view direction is totally internally reflected")
        return d


def sensor_for_box(lo, hi, width=320, height=240, pitch=None, **kw):
    """Sensor on the gel base plane, image centred on the projected top face."""
    base = SensorConfig(width=width, height=height, pitch=pitch or 1e-4, **kw)
    n = np.asarray(base.n_s)
    z_s = float(np.dot(n, lo))
    if pitch is None:
        ext = np.asarray(hi) - np.asarray(lo)
        pitch = 1.05 * max(ext[0] / width, ext[1] / height)
    d = base.ray()
    top_c = 0.5 * (np.asarray(lo) + np.asarray(hi))
    top_c[2] = hi[2]
    h = np.dot(n, top_c)
    p = top_c + (z_s - h) / np.dot(n, d) * d
    e1, e2 = base.axes()
    origin = p - 0.5 * width * pitch * e1 - 0.5 * height * pitch * e2
    return SensorConfig(**{**asdict(base), "z_s": z_s, "pitch": pitch,
                           "origin": tuple(float(c) for c in origin)})


# --- surface -------------------------------------------------------------------------

def top_layer_mask(rest, spacing_z=None):
    """Particles whose rest position lies within one spacing of the top face."""
    z = rest[:, 2]
    top = z.max()
    if spacing_z is None:
        levels = np.unique(np.round(z, 12))
        spacing_z = levels[-1] - levels[-2] if len(levels) > 1 else np.inf
    # particles sit half a spacing below the face
    return z >= top + 0.5 * spacing_z - spacing_z * (1 - 1e-9)


@dataclass
class SurfaceSet:
    indices: np.ndarray
    points: np.ndarray
    normals: np.ndarray


def plane_normals(points, k=12):
    """Unit normals from a least-squares plane over the k nearest neighbours, oriented +z."""
    k = min(k, len(points))
    _, nb = cKDTree(points).query(points, k=k)
    nb = np.asarray(nb).reshape(len(points), k)
    P = points[nb]
    c = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c)
    _, vec = np.linalg.eigh(cov)
    n = vec[:, :, 0]
    n *= np.where(n[:, 2:3] < 0, -1.0, 1.0)
    return n


def extract_surface(x, rest, spacing_z=None, k=12) -> SurfaceSet:
    mask = top_layer_mask(np.asarray(rest), spacing_z)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("empty surface set")
    pts = np.asarray(x, dtype=np.float64)[idx]
    return SurfaceSet(idx, pts, plane_normals(pts, k))


# --- optics ---------------------------------------------------------------------------

def refract_direction(d_in, n0, eta):
    """Snell refraction of unit ``d_in`` at an interface with unit normal ``n0``.

    The normal is flipped to face the incoming ray. Returns None on total
    internal reflection.
    """
    d_in = np.asarray(d_in, dtype=np.float64)
    n0 = np.asarray(n0, dtype=np.float64)
    c1 = -float(np.dot(n0, d_in))
    if c1 < 0:
        n0 = -n0
        c1 = -c1
    k = 1.0 - eta * eta * (1.0 - c1 * c1)
    if k < 0:
        return None
    c2 = math.sqrt(k)
    d = eta * d_in + (eta * c1 - c2) * n0
    return d / np.linalg.norm(d)


def apparent_depth(x_hat, d, sensor: SensorConfig):
    ns = np.asarray(sensor.n_s, dtype=np.float64)
    den = np.dot(np.asarray(d, dtype=np.float64), ns)
    if abs(den) < 1e-9:
        raise GrazingRayError("ray is parallel to the sensor plane")
    h = np.asarray(x_hat, dtype=np.float64) @ ns
    return h + (sensor.z_s - h) / den


# --- rasterisation --------------------------------------------------------------------

@dataclass
class DepthMap:
    values: np.ndarray     # (H, W) m, NaN where invalid
    sensor: SensorConfig

    @property
    def valid(self):
        return np.isfinite(self.values)


@njit(cache=True)
def _splat(u, v, depth, key, radius, out, best):
    H, W = out.shape
    r2 = radius * radius
    for p in range(u.shape[0]):
        i0 = max(0, int(math.floor(v[p] - radius - 0.5)))
        i1 = min(H - 1, int(math.ceil(v[p] + radius - 0.5)))
        j0 = max(0, int(math.floor(u[p] - radius - 0.5)))
        j1 = min(W - 1, int(math.ceil(u[p] + radius - 0.5)))
        for i in range(i0, i1 + 1):
            dv = i + 0.5 - v[p]
            for j in range(j0, j1 + 1):
                du = j + 0.5 - u[p]
                if du * du + dv * dv <= r2:
                    # nearest to the sensor wins; ties broken by value (order independent)
                    if key[p] < best[i, j] or (key[p] == best[i, j] and depth[p] < out[i, j]):
                        best[i, j] = key[p]
                        out[i, j] = depth[p]


def project(points, sensor: SensorConfig):
    """Pixel coordinates (u, v), apparent depth and ray distance for each point."""
    d = sensor.ray()
    ns = np.asarray(sensor.n_s, dtype=np.float64)
    den = float(np.dot(d, ns))
    if abs(den) < 1e-9:
        raise GrazingRayError("ray is parallel to the sensor plane")
    h = points @ ns
    s = (sensor.z_s - h) / den
    hit = points + s[:, None] * d
    e1, e2 = sensor.axes()
    rel = hit - np.asarray(sensor.origin, dtype=np.float64)
    return rel @ e1 / sensor.pitch, rel @ e2 / sensor.pitch, h + s, np.abs(s)


def fill_small_holes(values, max_hole):
    """Median-fill invalid components of at most ``max_hole`` pixels that touch valid pixels."""
    bad = ~np.isfinite(values)
    if not bad.any() or max_hole <= 0:
        return values
    lab, n = ndimage.label(bad)
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    out = values.copy()
    H, W = values.shape
    for i, j in zip(*np.nonzero(bad & (sizes[lab] <= max_hole))):
        win = values[max(0, i - 1):i + 2, max(0, j - 1):j + 2]
        ok = win[np.isfinite(win)]
        if ok.size:
            out[i, j] = np.median(ok)
    return out


def render_depth_map(surface, sensor: SensorConfig) -> DepthMap:
    pts = surface.points if isinstance(surface, SurfaceSet) else np.asarray(surface, dtype=np.float64)
    if len(pts) == 0:
        raise RenderError("no surface points to render")
    u, v, depth, dist = project(pts, sensor)
    radius = sensor.splat_radius
    if radius <= 0:
        span = np.ptp(np.stack([u, v]), axis=1) * sensor.pitch
        radius = 0.75 * math.sqrt(max(span[0] * span[1], sensor.pitch ** 2) / len(pts))
    out = np.full((sensor.height, sensor.width), np.nan)
    best = np.full((sensor.height, sensor.width), np.inf)
    _splat(u, v, depth, dist, radius / sensor.pitch, out, best)
    out = fill_small_holes(out, sensor.max_hole)
    if not np.isfinite(out).any():
        raise RenderError(f"all pixels invalid: {len(pts)} points projected to u in "
                          f"[{u.min():.1f}, {u.max():.1f}], v in [{v.min():.1f}, {v.max():.1f}] "
                          f"for a {sensor.width}x{sensor.height} image")
    return DepthMap(out, sensor)


# --- depth files ------------------------------------------------------------------------

def write_depth(stem, dm: DepthMap):
    """<stem>.depth.f32 + <stem>.json + 16-bit <stem>.png preview."""
    from PIL import Image

    stem = str(stem)
    vals = dm.values
    ok = dm.valid
    lo = float(vals[ok].min()) if ok.any() else 0.0
    hi = float(vals[ok].max()) if ok.any() else 0.0
    np.ascontiguousarray(vals, dtype="<f4").tofile(stem + ".depth.f32")
    meta = {"W": dm.sensor.width, "H": dm.sensor.height, "pitch": dm.sensor.pitch,
            "sensor": asdict(dm.sensor), "min": lo, "max": hi}
    Path(stem + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    scale = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    img = np.where(ok, np.round(np.clip(scale, 0, 1) * 65535), 0).astype(np.uint16)
    Image.fromarray(img).save(stem + ".png")


def read_depth(stem) -> DepthMap:
    stem = str(stem)
    meta = json.loads(Path(stem + ".json").read_text())
    vals = np.fromfile(stem + ".depth.f32", dtype="<f4").astype(np.float64)
    if vals.size != meta["W"] * meta["H"]:
        raise ValueError(f"{stem}.depth.f32 holds {vals.size} values, expected {meta['W']}x{meta['H']}")
    s = meta["sensor"]
    sensor = SensorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
    return DepthMap(vals.reshape(meta["H"], meta["W"]), sensor)


# --- metrics ---------------------------------------------------------------------------

def chamfer_l2(A, B, unit=1e-3):
    """Symmetric sum of mean squared nearest-neighbour distances, in ``unit``^2."""
    A = np.asarray(A, dtype=np.float64) / unit
    B = np.asarray(B, dtype=np.float64) / unit
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance of an empty point set")
    da, _ = cKDTree(B).query(A)
    db, _ = cKDTree(A).query(B)
    return float(np.mean(da * da) + np.mean(db * db))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax * ax / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, mask=None, k1=0.01, k2=0.03, size=11, sigma=1.5, peak=1.0):
    """Mean SSIM over windows lying entirely inside ``mask``."""
    from numpy.lib.stride_tricks import sliding_window_view

    if mask is None:
        mask = np.ones(a.shape, bool)
    w = gaussian_window(size, sigma)
    a = np.where(mask, a, 0.0)
    b = np.where(mask, b, 0.0)
    full = sliding_window_view(mask, (size, size)).all(axis=(-2, -1))
    if not full.any():
        raise ValueError("no SSIM window lies inside the valid region")
    A = sliding_window_view(a, (size, size))[full]
    B = sliding_window_view(b, (size, size))[full]
    mu_a = np.einsum("nij,ij->n", A, w)
    mu_b = np.einsum("nij,ij->n", B, w)
    va = np.einsum("nij,ij->n", A * A, w) - mu_a ** 2
    vb = np.einsum("nij,ij->n", B * B, w) - mu_b ** 2
    cov = np.einsum("nij,ij->n", A * B, w) - mu_a * mu_b
    C1 = (k1 * peak) ** 2
    C2 = (k2 * peak) ** 2
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a ** 2 + mu_b ** 2 + C1) * (va + vb + C2))
    return float(s.mean())


PSNR_CAP = 99.0


def normalized_metrics(a, b, mask):
    """SSIM, MAE and PSNR (peak 1) of two images already in [0, 1]."""
    d = (a - b)[mask]
    mae = float(np.mean(np.abs(d)))
    mse = float(np.mean(d * d))
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    return {"ssim": ssim(a, b, mask), "mae": mae, "psnr": psnr}


def image_metrics(pred, ref):
    """Metrics over the common valid pixels after shared min/max normalisation."""
    p = pred.values if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    r = ref.values if isinstance(ref, DepthMap) else np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"image sizes differ: {p.shape} vs {r.shape}")
    mask = np.isfinite(p) & np.isfinite(r)
    if not mask.any():
        raise ValueError("no common valid pixels")
    lo = min(p[mask].min(), r[mask].min())
    hi = max(p[mask].max(), r[mask].max())
    span = hi - lo
    pn = np.where(mask, (p - lo) / span if span > 0 else 0.0, 0.0)
    rn = np.where(mask, (r - lo) / span if span > 0 else 0.0, 0.0)
    return normalized_metrics(pn, rn, mask)


def write_metrics_csv(path, rows):
    import csv

    cols = list(rows[0].keys()) if rows else ["frame", "ssim", "mae", "psnr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
