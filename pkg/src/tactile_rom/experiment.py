"""Desk-scale experiment: paired dataset, model variants, held-out rollouts."""
from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rom
from .latent import LbfgsSettings, rollout
from .render import chamfer_l2, top_layer_mask
from .trainer import (LossWeights, Scenario, TrainSettings, desk_configs, desk_indenter,
                      generate_dataset, grid_scenarios, load_dataset, train, write_log)

TRAIN_FRAMES = 64
TRAIN_DEPTH = 5e-4
HELD_OUT = (Scenario(100, 2.5e-4, (0.0, 0.0)),
            Scenario(101, 3.5e-4, (3e-3, -3e-3)),
            Scenario(102, 4.5e-4, (-3e-3, 0.0)))
# 18 Adam steps per epoch at this size, so the step budget needs the larger rate
DESK_TRAIN = TrainSettings(epochs=150, lr=1e-3)


def desk_scenarios():
    """3x3 offset grid pressed to full depth for training, plus held-out unseen depths."""
    return grid_scenarios([TRAIN_DEPTH]), list(HELD_OUT)


def base_configs():
    fine, coarse = desk_configs()
    ind = desk_indenter(TRAIN_DEPTH)
    return fine.with_(indenter=ind), coarse.with_(indenter=ind)


def ensure_dataset(root, frames=TRAIN_FRAMES, log=print):
    root = Path(root)
    if not (root / "norm_stats.json").exists():
        train_s, val_s = desk_scenarios()
        fine, coarse = base_configs()
        t0 = time.perf_counter()
        generate_dataset(train_s + val_s, fine, coarse, root, frames=frames,
                         train_ids=[s.id for s in train_s])
        log(f"dataset generated in {time.perf_counter() - t0:.0f} s")
    return load_dataset(root)


VARIANTS = {
    "full": {},
    "w/o physics": {"physics": False},
    "w/o multi-scale": {"multiscale": False},
    "latent dim r=16": {"latent": 16},
}


def variant_settings(name, base: TrainSettings = DESK_TRAIN):
    return replace(base, **VARIANTS[name])


def heldout_ids(data):
    return [s.id for s in data.scenarios if s.id not in set(data.train_ids)]


def ensure_model(root, data, name, base: TrainSettings = DESK_TRAIN, log=print,
                 deterministic=False):
    """Train (or reload) one variant; scenarios outside the training split stay unseen."""
    path = Path(root) / (name.replace("/", "").replace(" ", "_").replace("=", "") + ".romw")
    if not path.exists():
        t0 = time.perf_counter()
        # no validation split: parameters are picked on the training loss
        res = train(data, [], variant_settings(name, base), LossWeights(), checkpoint_path=path,
                    metadata={"variant": name}, holdout_ids=heldout_ids(data))
        write_log(path.with_suffix(".csv"), res.history, deterministic)
        log(f"trained {name} in {time.perf_counter() - t0:.0f} s")
    params, enc, meta, _ = rom.load_checkpoint(path)
    return params, enc, meta


@dataclass
class FrameScore:
    scenario: int
    frame: int
    rom: float        # Chamfer (mm^2) of the ROM surface to fine ground truth
    coarse: float     # Chamfer of the upsampled coarse surface to fine ground truth


def evaluate_heldout(data, params, enc, settings: LbfgsSettings = LbfgsSettings(),
                     skip_rest=True, ids=None):
    """Roll out every held-out scenario and score each frame's surface.

    Frames where the ground-truth surface has not yet moved (Chamfer of the
    rest surface below 1e-12 mm^2) carry no signal and are skipped.
    Returns (scores, wall seconds, peak RSS MiB).
    """
    ids = set(heldout_ids(data) if ids is None else ids)
    scores = []
    mask = top_layer_mask(data.fine_rest)
    t0 = time.perf_counter()
    for s in data.scenarios:
        if s.id not in ids:
            continue
        res = rollout(s.fine_config, s.coarse_config, params, enc, len(s.fine_x) - 1, settings)
        for k in range(1, len(s.fine_x)):
            gt = s.fine_x[k][mask].astype(np.float64)
            if skip_rest and chamfer_l2(data.fine_rest[mask], gt) < 1e-12:
                continue
            up = data.upsample_coarse(res.coarse_x[k])[mask]
            scores.append(FrameScore(s.id, k, chamfer_l2(res.x[k][mask], gt),
                                     chamfer_l2(up, gt)))
    wall = time.perf_counter() - t0
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return scores, wall, rss


def summarize(scores):
    r = np.array([s.rom for s in scores])
    c = np.array([s.coarse for s in scores])
    return {"frames": len(scores), "rom_mean": float(r.mean()), "coarse_mean": float(c.mean()),
            "ratio_mean": float(r.mean() / c.mean()),
            "frac_within_0.6": float(np.mean(r <= 0.6 * c))}


def write_scores(path, scores):
    Path(path).write_text(json.dumps([s.__dict__ for s in scores], indent=1))
