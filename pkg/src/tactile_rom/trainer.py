"""Paired fine/coarse press data and autoencoder training."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rom
from .config import IndenterConfig, SimConfig, from_dict, press_pair, to_dict
from .fileio import read_trajectory, write_trajectory
from .latent import frame_offset
from .mpm import Grid, grid_transfer_matrix, lattice_counts, elastomer_box, run_press_scenario, seed_particles

log = logging.getLogger(__name__)


class DivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    velocity: float = 0.4
    deformation: float = 0.6
    reconstruction: float = 1.0
    multiscale: float = 0.5   # extra reconstruction term on a 2x decimated particle subset

    def __post_init__(self):
        if min(self.velocity, self.deformation, self.reconstruction, self.multiscale) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays, **kw):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(arrays, grads, state: AdamState):
    """Bias-corrected Adam, in place. Returns False (and changes nothing) on non-finite grads."""
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        a -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)
    return True


# --- scenarios and configs ----------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    id: int
    depth: float
    center: tuple = (0.0, 0.0)


def desk_configs():
    """Fine/coarse configs for CPU-sized experiments (8k and ~1k particles)."""
    fine = SimConfig(grid_dims=(27, 27, 9), dx=1.5e-3, n_fine=8000, n_coarse=1000,
                     resolution="fine")
    coarse = SimConfig(grid_dims=(19, 19, 8), dx=3e-3, n_fine=8000, n_coarse=1000,
                       resolution="coarse")
    return fine, coarse


def desk_indenter(depth, center=(0.0, 0.0)):
    return IndenterConfig(radius=4e-3, depth=depth, speed=1e-2, center=tuple(center))


def grid_scenarios(depths, offsets=(-3e-3, 0.0, 3e-3), start_id=0):
    """One scenario per xy offset on a square grid, cycling through ``depths``."""
    out = []
    i = 0
    for ox in offsets:
        for oy in offsets:
            out.append(Scenario(start_id + i, float(depths[i % len(depths)]), (ox, oy)))
            i += 1
    return out


def scenario_pair(s: Scenario, fine: SimConfig, coarse: SimConfig, frames: int, indenter=None):
    base = indenter if indenter is not None else fine.indenter
    ind = IndenterConfig(**{**to_dict(base), "depth": s.depth, "center": tuple(s.center),
                            "half_extents": tuple(base.half_extents),
                            "orientation": tuple(base.orientation)})
    return press_pair(fine.with_(frames=frames), coarse.with_(frames=frames), ind)


# --- dataset ---------------------------------------------------------------------------

def generate_dataset(scenarios, fine: SimConfig, coarse: SimConfig, out_dir, frames=10,
                     train_ids=None):
    """Run every scenario at both resolutions and write the paired trajectories.

    Normalisation statistics are computed over the fine frames of the training
    scenarios (all scenarios when ``train_ids`` is None).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = []
    for s in scenarios:
        f_cfg, c_cfg = scenario_pair(s, fine, coarse, frames)
        try:
            ft = run_press_scenario(f_cfg)
            ct = run_press_scenario(c_cfg)
        except (ArithmeticError, IndexError) as exc:
            log.error("scenario %d failed: %s", s.id, exc)
            continue
        d = out / f"scenario_{s.id}"
        d.mkdir(exist_ok=True)
        write_trajectory(d / "fine.traj", ft.x, ft.v, ft.F, ft.poses, ft.dt, ft.dx, ft.grid_dims)
        write_trajectory(d / "coarse.traj", ct.x, ct.v, ct.F, ct.poses, ct.dt, ct.dx, ct.grid_dims)
        meta = {"id": s.id, "depth": s.depth, "center": list(s.center), "frames": frames,
                "frame_dt": f_cfg.frame_dt, "times": ft.times.tolist(),
                "coarse_times": ct.times.tolist(),
                "fine": to_dict(f_cfg), "coarse": to_dict(c_cfg)}
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        done.append(s)
    ids = set(train_ids) if train_ids is not None else {s.id for s in done}
    rest = seed_particles(fine)
    enc = rom.StateEncoding(rest.rest)
    raw = [enc.flatten(*read_trajectory(out / f"scenario_{s.id}" / "fine.traj")[1:4:2])
           for s in done if s.id in ids]
    enc.fit(np.concatenate(raw) if raw else np.zeros((1, enc.dim)))
    stats = {"mean": enc.mean.tolist(), "scale": enc.scale.tolist(), "train_ids": sorted(ids)}
    (out / "norm_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return done


@dataclass
class ScenarioData:
    id: int
    depth: float
    center: tuple
    frame_dt: float
    fine_x: np.ndarray
    fine_v: np.ndarray
    fine_F: np.ndarray
    coarse_x: np.ndarray   # in the fine frame
    coarse_v: np.ndarray
    coarse_F: np.ndarray
    poses: np.ndarray
    times: np.ndarray
    fine_config: SimConfig
    coarse_config: SimConfig


@dataclass
class Dataset:
    scenarios: list
    encoding: rom.StateEncoding
    fine_rest: np.ndarray
    coarse_rest: np.ndarray      # in the fine frame
    transfer: object             # sparse (N_fine, N_coarse)
    train_ids: list
    mass: np.ndarray = None
    volume0: np.ndarray = None

    def by_id(self, i):
        return next(s for s in self.scenarios if s.id == i)

    def split(self, val_ids):
        val_ids = set(val_ids)
        return ([s for s in self.scenarios if s.id not in val_ids],
                [s for s in self.scenarios if s.id in val_ids])

    def upsample_coarse(self, coarse_x):
        """Coarse positions (..., Nc, 3) as displacements interpolated onto fine rest positions."""
        u = np.asarray(coarse_x, dtype=np.float64) - self.coarse_rest
        if u.ndim == 2:
            return self.fine_rest + self.transfer @ u
        return np.stack([self.fine_rest + self.transfer @ uk for uk in u])


def coarse_to_fine(fine: SimConfig, coarse: SimConfig):
    """(fine rest, coarse rest in the fine frame, transfer matrix)."""
    f = seed_particles(fine).rest
    c = seed_particles(coarse).rest
    grid = Grid.for_config(coarse)
    shift = frame_offset(fine, coarse)
    return f, c + shift, grid_transfer_matrix(c, f - shift, grid)


def load_dataset(path) -> Dataset:
    root = Path(path)
    stats = json.loads((root / "norm_stats.json").read_text())
    dirs = sorted(root.glob("scenario_*"), key=lambda p: int(p.name.split("_")[1]))
    scen = []
    cfgs = None
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text())
        fcfg = from_dict(SimConfig, meta["fine"])
        ccfg = from_dict(SimConfig, meta["coarse"])
        if cfgs is None:
            cfgs = (fcfg, ccfg)
        shift = frame_offset(fcfg, ccfg)
        _, fx, fv, fF, poses = read_trajectory(d / "fine.traj")
        _, cx, cv, cF, _ = read_trajectory(d / "coarse.traj")
        scen.append(ScenarioData(meta["id"], meta["depth"], tuple(meta["center"]),
                                 meta["frame_dt"], fx, fv, fF, cx + shift.astype(np.float32),
                                 cv, cF, poses, np.asarray(meta["times"]), fcfg, ccfg))
    if cfgs is None:
        raise FileNotFoundError(f"no scenarios under {root}")
    fine_rest, coarse_rest, T = coarse_to_fine(*cfgs)
    enc = rom.StateEncoding(fine_rest, np.asarray(stats["mean"]), np.asarray(stats["scale"]))
    st = seed_particles(cfgs[0])
    return Dataset(scen, enc, fine_rest, coarse_rest, T, stats["train_ids"], st.mass, st.volume0)


# --- training pairs ----------------------------------------------------------------------

@dataclass
class PairSet:
    """Frames k >= 1 with their predecessors, flattened and normalised (float32)."""
    q: np.ndarray          # (M, D) frame k
    q_prev: np.ndarray     # (M, D) frame k-1
    v_target: np.ndarray   # (M, N*3) coarse velocity at fine particles, normalised
    F_target: np.ndarray   # (M, N*9) coarse F at fine particles, normalised
    scenario: np.ndarray
    frame: np.ndarray
    dt: np.ndarray

    def __len__(self):
        return len(self.q)


def build_pairs(data: Dataset, scenarios) -> PairSet:
    enc = data.encoding
    n = enc.n
    qs, qp, vt, Ft, sid, fr, dts = [], [], [], [], [], [], []
    su, sF = enc.scale[:3], enc.scale[3:]
    mF = enc.mean[3:]
    for s in scenarios:
        T = len(s.fine_x)
        raw = enc.normalize(enc.flatten(s.fine_x, s.fine_F)).astype(np.float32)
        for k in range(1, T):
            v = data.transfer @ s.coarse_v[k].astype(np.float64)
            F = data.transfer @ s.coarse_F[k].reshape(-1, 9).astype(np.float64)
            qs.append(raw[k])
            qp.append(raw[k - 1])
            # velocity compared as a per-frame displacement in normalised units
            vt.append((v * s.frame_dt / su).reshape(-1).astype(np.float32))
            Ft.append(((F - mF) / sF).reshape(-1).astype(np.float32))
            sid.append(s.id)
            fr.append(k)
            dts.append(s.frame_dt)
    if not qs:
        z = np.zeros((0, 12 * n), np.float32)
        return PairSet(z, z, np.zeros((0, 3 * n), np.float32), np.zeros((0, 9 * n), np.float32),
                       np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    return PairSet(np.stack(qs), np.stack(qp), np.stack(vt), np.stack(Ft), np.array(sid),
                   np.array(fr), np.array(dts))


def decimation_mask(rest, spacing):
    """Every other lattice site along each axis: a 2x decimated particle subset."""
    idx = np.floor((rest - rest.min(axis=0)) / spacing + 0.5).astype(int)
    return np.all(idx % 2 == 0, axis=1)


# --- losses --------------------------------------------------------------------------------

def _split(y, n):
    per = y.reshape(len(y), n, 12)
    return per[..., :3], per[..., 3:]


def reconstruction_loss(params, q, subset=None, weight_subset=0.0):
    """Mean squared reconstruction error in normalised coordinates.

    With ``subset`` (particle mask) an extra term of the same form restricted
    to those particles is added with ``weight_subset``.
    Returns (loss, flat parameter gradients).
    """
    y, _, caches = rom.forward(params, q)
    loss, dy = _rec_terms(y, q, subset, weight_subset)
    if not np.isfinite(loss):
        raise DivergedError("reconstruction loss is not finite")
    grads, _ = rom.backward(dy, caches, params, input_grad=False)
    return loss, grads


def _rec_terms(y, q, subset, weight_subset, dy=None):
    """Loss and its gradient (written into ``dy`` when given)."""
    B, D = y.shape
    r = np.subtract(y, q, out=dy)
    flat = r.reshape(-1)
    loss = float(np.dot(flat, flat)) / (B * D)
    extra = None
    if subset is not None and weight_subset > 0:
        rs = r.reshape(B, D // 12, 12)[:, subset]
        cnt = rs.size
        loss += weight_subset * float(np.dot(rs.reshape(-1), rs.reshape(-1))) / cnt
        extra = (2.0 * weight_subset / cnt) * rs
    r *= 2.0 / (B * D)
    if extra is not None:
        r.reshape(B, D // 12, 12)[:, subset] += extra
    return loss, r


def _cons_terms(y, y_prev, v_target, F_target, weights: LossWeights):
    B = len(y)
    n = y.shape[1] // 12
    per = y.reshape(B, n, 12)
    rv = per[..., :3] - y_prev.reshape(B, n, 12)[..., :3] - v_target.reshape(B, n, 3)
    rF = per[..., 3:] - F_target.reshape(B, n, 9)
    cv = float(np.dot(rv.reshape(-1), rv.reshape(-1))) / rv.size
    cF = float(np.dot(rF.reshape(-1), rF.reshape(-1))) / rF.size
    dy = np.empty_like(per)
    dy[..., :3] = (2.0 * weights.velocity / rv.size) * rv
    dy[..., 3:] = (2.0 * weights.deformation / rF.size) * rF
    dy_prev = np.zeros_like(per)
    dy_prev[..., :3] = -dy[..., :3]
    return cv, cF, dy.reshape(B, -1), dy_prev.reshape(B, -1)


def consistency_loss(params, q, q_prev, v_target, F_target, weights: LossWeights):
    """lambda_v |v_hat - v|^2 + lambda_F |F_hat - F|^2 (means, normalised units).

    v_hat is the difference of the decoded displacements of a frame and its
    predecessor. Returns (loss, (cons_v, cons_F), flat parameter gradients).
    """
    B = len(q)
    X = np.concatenate([q, q_prev])
    y, _, caches = rom.forward(params, X)
    cv, cF, dy, dyp = _cons_terms(y[:B], y[B:], v_target, F_target, weights)
    loss = weights.velocity * cv + weights.deformation * cF
    if not np.isfinite(loss):
        raise DivergedError("consistency loss is not finite")
    grads, _ = rom.backward(np.concatenate([dy, dyp]), caches, params, input_grad=False)
    return loss, (cv, cF), grads


def total_loss(params, batch: PairSet, weights: LossWeights, subset=None, physics=True):
    """lambda_rec (reconstruction [+ multi-scale]) + consistency, with gradients.

    Returns (total, parts dict, flat gradients).
    """
    B = len(batch.q)
    X = np.concatenate([batch.q, batch.q_prev]) if physics else batch.q
    y, _, caches = rom.forward(params, X)
    dy = np.zeros_like(y)
    rec, _ = _rec_terms(y[:B], batch.q, subset, weights.multiscale, dy=dy[:B])
    if weights.reconstruction != 1.0:
        dy[:B] *= weights.reconstruction
    parts = {"rec": rec, "cons_v": 0.0, "cons_F": 0.0}
    total = weights.reconstruction * rec
    if physics:
        cv, cF, dyc, dyp = _cons_terms(y[:B], y[B:], batch.v_target, batch.F_target, weights)
        dy[:B] += dyc
        dy[B:] += dyp
        parts["cons_v"], parts["cons_F"] = cv, cF
        total += weights.velocity * cv + weights.deformation * cF
    if not np.isfinite(total):
        raise DivergedError("training loss is not finite")
    grads, _ = rom.backward(dy, caches, params, input_grad=False)
    return total, parts, grads


def batch_of(pairs: PairSet, idx) -> PairSet:
    return PairSet(pairs.q[idx], pairs.q_prev[idx], pairs.v_target[idx], pairs.F_target[idx],
                   pairs.scenario[idx], pairs.frame[idx], pairs.dt[idx])


# --- training loop -------------------------------------------------------------------------

@dataclass
class TrainSettings:
    hidden: tuple = (64, 64, 64)
    latent: int = 64
    epochs: int = 300
    batch: int = 32
    lr: float = 1e-4
    patience: int = 0            # 0 disables early stopping
    physics: bool = True
    multiscale: bool = True
    seed: int = 0


@dataclass
class TrainResult:
    params: rom.AutoencoderParams
    encoding: rom.StateEncoding
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def evaluate_loss(params, pairs: PairSet, weights, subset, physics, chunk=64):
    if len(pairs) == 0:
        return float("nan")
    tot = 0.0
    for i in range(0, len(pairs), chunk):
        b = batch_of(pairs, slice(i, i + chunk))
        B = len(b.q)
        X = np.concatenate([b.q, b.q_prev]) if physics else b.q
        y, _, _ = rom.forward(params, X)
        rec, _ = _rec_terms(y[:B], b.q, subset, weights.multiscale, dy=np.empty_like(y[:B]))
        t = weights.reconstruction * rec
        if physics:
            cv, cF, _, _ = _cons_terms(y[:B], y[B:], b.v_target, b.F_target, weights)
            t += weights.velocity * cv + weights.deformation * cF
        tot += t * B
    return tot / len(pairs)


def train(data: Dataset, val_ids, settings: TrainSettings = TrainSettings(),
          weights: LossWeights = LossWeights(), log_path=None, checkpoint_path=None,
          metadata=None, progress=None, holdout_ids=()) -> TrainResult:
    """Adam on shuffled mini-batches; keeps the parameters with the best validation loss.

    Without validation scenarios the weighted training loss decides. Scenarios in
    ``holdout_ids`` are neither trained on nor validated on.
    """
    train_s, val_s = data.split(val_ids)
    train_s = [s for s in train_s if s.id not in set(holdout_ids)]
    if not train_s:
        raise ValueError("no training scenarios left after holding out validation")
    tr = build_pairs(data, train_s)
    va = build_pairs(data, val_s)
    enc = data.encoding
    fine_cfg = train_s[0].fine_config
    spacing = (elastomer_box(fine_cfg)[1] - elastomer_box(fine_cfg)[0]) / np.array(
        lattice_counts(np.asarray(fine_cfg.extents), fine_cfg.n_particles))
    subset = decimation_mask(data.fine_rest, spacing) if settings.multiscale else None
    if not settings.multiscale:
        weights = LossWeights(weights.velocity, weights.deformation, weights.reconstruction, 0.0)
    params = rom.init_params(enc.dim, enc.dim, settings.hidden, settings.latent, settings.seed)
    arrays = params.flat()
    adam = AdamState.for_params(arrays, lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    result = TrainResult(params.copy(), enc)
    rows = []
    since_best = 0
    physics = settings.physics
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        acc = {"rec": 0.0, "cons_v": 0.0, "cons_F": 0.0}
        for i in range(0, len(order), settings.batch):
            b = batch_of(tr, order[i:i + settings.batch])
            _, parts, grads = total_loss(params, b, weights, subset, physics)
            if not adam_step(arrays, grads, adam):
                raise DivergedError(f"non-finite gradients at epoch {epoch}")
            for k in acc:
                acc[k] += parts[k] * len(b.q)
        for k in acc:
            acc[k] /= len(tr)
        val = evaluate_loss(params, va, weights, subset, physics) if len(va) else float("nan")
        row = {"epoch": epoch, "rec_loss": acc["rec"], "cons_v": acc["cons_v"],
               "cons_F": acc["cons_F"], "val_loss": val,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        train_total = (weights.reconstruction * acc["rec"] + weights.velocity * acc["cons_v"]
                       + weights.deformation * acc["cons_F"])
        score = val if np.isfinite(val) else train_total
        if score < result.best_val:
            result.best_val = score
            result.best_epoch = epoch
            result.params = params.copy()
            since_best = 0
        else:
            since_best += 1
        if progress is not None:
            progress(row)
        if settings.patience and since_best >= settings.patience:
            break
    result.history = rows
    if log_path is not None:
        write_log(log_path, rows)
    if checkpoint_path is not None:
        meta = {"fine_config": to_dict(fine_cfg), "best_epoch": result.best_epoch,
                "settings": to_dict(settings), "weights": to_dict(weights),
                "val_ids": sorted(val_ids), "holdout_ids": sorted(holdout_ids)}
        meta.update(metadata or {})
        rom.save_checkpoint(checkpoint_path, result.params, enc, meta)
    return result


def write_log(path, rows, deterministic=False):
    cols = ["epoch", "rec_loss", "cons_v", "cons_F", "val_loss", "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.9e}" for c in cols[1:-1]]
                       + ["0" if deterministic else f"{r['seconds']:.3f}"])


def window_means(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)
