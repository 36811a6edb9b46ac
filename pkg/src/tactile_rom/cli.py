"""tactile-rom command line: simulate, gen-data, train, rollout, render, eval."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, SimConfig, from_dict, load_json, locate_key, to_dict

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# --- run configs ------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    id: int = 0
    depth: float = 3e-4
    center: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class GenDataConfig:
    fine: SimConfig = field(default_factory=lambda: SimConfig(resolution="fine"))
    coarse: SimConfig = field(default_factory=SimConfig)
    scenarios: list[ScenarioSpec] = field(default_factory=list)
    frames: int = 10
    train_ids: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class TrainRunConfig:
    dataset: str = ""
    val_ids: list[int] = field(default_factory=list)
    hidden: tuple[int, ...] = (64, 64, 64)
    latent: int = 64
    epochs: int = 300
    batch: int = 32
    lr: float = 1e-4
    patience: int = 0
    physics: bool = True
    multiscale: bool = True
    weight_velocity: float = 0.4
    weight_deformation: float = 0.6
    weight_reconstruction: float = 1.0
    weight_multiscale: float = 0.5


@dataclass(frozen=True)
class LbfgsConfig:
    max_iters: int = 10
    grad_tolerance: float = 1e-5
    history: int = 8


@dataclass(frozen=True)
class RolloutConfig:
    checkpoint: str = ""
    coarse: SimConfig = field(default_factory=SimConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    frames: int = 10
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    warm_start: str = "previous"


@dataclass(frozen=True)
class SensorSpec:
    width: int = 320
    height: int = 240
    pitch: float = 0.0              # 0: fit the elastomer into the image
    eta: float = 1.0 / 1.4
    view_angle_deg: float = 20.0
    splat_radius: float = 0.0
    max_hole: int = 2


@dataclass(frozen=True)
class RenderConfig:
    trajectory: str = ""
    sim: SimConfig = field(default_factory=SimConfig)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    frames: list[int] = field(default_factory=list)   # empty: all frames


@dataclass(frozen=True)
class EvalConfig:
    pred: str = ""
    ref: str = ""
    kind: str = "depth"             # depth | trajectory
    sim: SimConfig = field(default_factory=SimConfig)


@dataclass(frozen=True)
class AblateConfig:
    dataset: str = ""
    epochs: int = 300
    hidden: tuple[int, ...] = (64, 64, 64)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)


def load_config(cls, path):
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return from_dict(cls, data)
    except ConfigError as exc:
        msg = str(exc)
        key = msg.split("'")[1] if "'" in msg else None
        line = locate_key(path, key) if key else None
        raise ConfigError(f"{path}:{line}: {msg}" if line else f"{path}: {msg}") from None


def _with_seed(cfg: SimConfig, seed):
    return cfg if seed is None else cfg.with_(seed=seed)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


# --- subcommands ---------------------------------------------------------------------------

def cmd_simulate(args):
    from .fileio import write_header_only, write_trajectory
    from .mpm import run_press_scenario

    cfg = _with_seed(load_config(SimConfig, args.config), args.seed)
    frames = cfg.frames if args.frames is None else args.frames
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if frames == 0:
        from .mpm import seed_particles
        n = seed_particles(cfg).n
        write_header_only(out / "trajectory.traj", n, cfg.time_step, cfg.dx, cfg.grid_dims)
        summary = {"steps": 0, "particles": n, "max_displacement": 0.0}
    else:
        tr = run_press_scenario(cfg, frames)
        write_trajectory(out / "trajectory.traj", tr.x, tr.v, tr.F, tr.poses, tr.dt, tr.dx,
                         tr.grid_dims)
        disp = np.linalg.norm(tr.x - tr.rest[None].astype(np.float32), axis=-1)
        summary = {"steps": frames * cfg.frame_steps, "particles": tr.n_particles,
                   "max_displacement": float(disp.max())}
    summary["wall_seconds"] = 0.0 if args.deterministic else time.perf_counter() - t0
    _write_json(out / "summary.json", summary)
    print(f"simulate: {summary['particles']} particles, {summary['steps']} steps -> {out}")


def cmd_gen_data(args):
    from .trainer import Scenario, generate_dataset

    cfg = load_config(GenDataConfig, args.config)
    if not cfg.scenarios:
        raise ConfigError(f"{args.config}: no scenarios listed")
    scen = [Scenario(s.id, s.depth, tuple(s.center)) for s in cfg.scenarios]
    fine = _with_seed(cfg.fine, args.seed).with_(resolution="fine")
    coarse = _with_seed(cfg.coarse, args.seed).with_(resolution="coarse")
    frames = cfg.frames if args.frames is None else args.frames
    done = generate_dataset(scen, fine, coarse, args.out, frames,
                            cfg.train_ids or None)
    print(f"gen-data: {len(done)}/{len(scen)} scenarios, {len(done) * frames} pairs -> {args.out}")
    if len(done) < len(scen):
        return EXIT_NUMERIC


def _train_settings(cfg: TrainRunConfig, seed):
    from .trainer import LossWeights, TrainSettings

    s = TrainSettings(tuple(cfg.hidden), cfg.latent, cfg.epochs, cfg.batch, cfg.lr, cfg.patience,
                      cfg.physics, cfg.multiscale, 0 if seed is None else seed)
    w = LossWeights(cfg.weight_velocity, cfg.weight_deformation, cfg.weight_reconstruction,
                    cfg.weight_multiscale)
    return s, w


def cmd_train(args):
    from .trainer import load_dataset, train, write_log

    cfg = load_config(TrainRunConfig, args.config)
    data = load_dataset(cfg.dataset)
    val = cfg.val_ids or [s.id for s in data.scenarios if s.id not in data.train_ids]
    settings, weights = _train_settings(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(data, val, settings, weights, checkpoint_path=out / "model.romw")
    write_log(out / "train_log.csv", res.history, deterministic=args.deterministic)
    print(f"train: best epoch {res.best_epoch}, val loss {res.best_val:.4e} -> {out / 'model.romw'}")


def cmd_rollout(args):
    from . import rom
    from .fileio import write_trajectory
    from .latent import LbfgsSettings, rollout
    from .trainer import Scenario, scenario_pair

    cfg = load_config(RolloutConfig, args.config)
    if cfg.warm_start not in ("previous", "encode"):
        raise ConfigError(f"{args.config}: warm_start must be 'previous' or 'encode'")
    params, enc, meta, _ = rom.load_checkpoint(cfg.checkpoint)
    if "fine_config" not in meta:
        raise ConfigError(f"{cfg.checkpoint}: checkpoint carries no fine_config metadata")
    fine = from_dict(SimConfig, meta["fine_config"])
    coarse = _with_seed(cfg.coarse, args.seed).with_(resolution="coarse")
    frames = cfg.frames if args.frames is None else args.frames
    s = cfg.scenario
    fine, coarse = scenario_pair(Scenario(s.id, s.depth, tuple(s.center)), fine,
                                 coarse.with_(indenter=fine.indenter), frames)
    settings = LbfgsSettings(cfg.lbfgs.max_iters, cfg.lbfgs.grad_tolerance, cfg.lbfgs.history)
    res = rollout(fine, coarse, params, enc, frames, settings, cfg.warm_start,
                  log=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "rollout.traj", res.x, res.v, res.F, res.poses, fine.frame_dt,
                     fine.dx, fine.grid_dims)
    write_trajectory(out / "coarse.traj", res.coarse_x, res.coarse_v, res.coarse_F, res.poses,
                     coarse.frame_dt, coarse.dx, coarse.grid_dims)
    stats = res.frames
    if args.deterministic:
        stats = [{**f, "wall_ms": 0.0} for f in stats]
    _write_json(out / "rollout.json", {"frames": stats, "fine_config": to_dict(fine)})
    print(f"rollout: {frames} frames -> {out}")


def _sensor(spec: SensorSpec, sim: SimConfig):
    from .mpm import elastomer_box
    from .render import sensor_for_box

    a = np.radians(spec.view_angle_deg)
    lo, hi = elastomer_box(sim)
    return sensor_for_box(lo, hi, spec.width, spec.height, spec.pitch or None, eta=spec.eta,
                          view_dir=(float(np.sin(a)), 0.0, float(np.cos(a))),
                          splat_radius=spec.splat_radius, max_hole=spec.max_hole)


def cmd_render(args):
    from .fileio import read_trajectory
    from .mpm import seed_particles
    from .render import extract_surface, render_depth_map, write_depth

    cfg = load_config(RenderConfig, args.config)
    head, x, _, _, _ = read_trajectory(cfg.trajectory)
    rest = seed_particles(cfg.sim).rest
    if len(rest) != head["n"]:
        raise ConfigError(f"{args.config}: sim config seeds {len(rest)} particles but the "
                          f"trajectory holds {head['n']}")
    sensor = _sensor(cfg.sensor, cfg.sim)
    frames = cfg.frames or list(range(head["frames"]))
    if args.frames is not None:
        frames = frames[: args.frames]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in frames:
        if not 0 <= k < head["frames"]:
            raise ConfigError(f"{args.config}: frame {k} out of range")
        surf = extract_surface(x[k].astype(np.float64), rest)
        write_depth(out / f"frame_{k:04d}", render_depth_map(surf, sensor))
    print(f"render: {len(frames)} depth maps -> {out}")


def cmd_eval(args):
    from .render import image_metrics, read_depth, write_metrics_csv

    if args.ablate:
        return cmd_ablate(args)
    cfg = load_config(EvalConfig, args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.kind == "depth":
        pred = sorted(Path(cfg.pred).glob("*.depth.f32"))
        ref = {p.name for p in Path(cfg.ref).glob("*.depth.f32")}
        if not pred:
            raise FileNotFoundError(f"no depth maps in {cfg.pred}")
        for p in pred:
            if p.name not in ref:
                raise FileNotFoundError(f"{cfg.ref} has no {p.name}")
            stem = p.name[: -len(".depth.f32")]
            m = image_metrics(read_depth(p.parent / stem), read_depth(Path(cfg.ref) / stem))
            rows.append({"frame": stem, **m})
        write_metrics_csv(out / "image_metrics.csv", rows)
    elif cfg.kind == "trajectory":
        from .fileio import read_trajectory
        from .mpm import seed_particles
        from .render import chamfer_l2, top_layer_mask

        _, xp, _, _, _ = read_trajectory(cfg.pred)
        _, xr, _, _, _ = read_trajectory(cfg.ref)
        if xp.shape != xr.shape:
            raise ConfigError(f"trajectory shapes differ: {xp.shape} vs {xr.shape}")
        mask = top_layer_mask(seed_particles(cfg.sim).rest)
        for k in range(len(xp)):
            rows.append({"frame": k, "chamfer_mm2": chamfer_l2(xp[k][mask], xr[k][mask])})
        write_metrics_csv(out / "chamfer.csv", rows)
    else:
        raise ConfigError(f"{args.config}: kind must be 'depth' or 'trajectory'")
    print(f"eval: {len(rows)} rows -> {out}")


def cmd_ablate(args):
    from . import experiment as ex
    from .latent import LbfgsSettings
    from .render import write_metrics_csv
    from .trainer import load_dataset

    cfg = load_config(AblateConfig, args.config)
    data = load_dataset(cfg.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = replace(ex.DESK_TRAIN, hidden=tuple(cfg.hidden), epochs=cfg.epochs,
                   seed=0 if args.seed is None else args.seed)
    lb = LbfgsSettings(cfg.lbfgs.max_iters, cfg.lbfgs.grad_tolerance, cfg.lbfgs.history)
    rows = []
    for name in ex.VARIANTS:
        params, enc, _ = ex.ensure_model(out, data, name, base, log=print,
                                         deterministic=args.deterministic)
        scores, wall, rss = ex.evaluate_heldout(data, params, enc, lb)
        s = ex.summarize(scores)
        rows.append({"method": name,
                     "time_s": 0.0 if args.deterministic else wall,
                     "memory_mb": 0.0 if args.deterministic else rss,
                     "chamfer_mm2": s["rom_mean"], "coarse_chamfer_mm2": s["coarse_mean"]})
    write_metrics_csv(out / "ablation.csv", rows)
    for r in rows:
        print(f"{r['method']:>18s}  time {r['time_s']:8.1f} s  mem {r['memory_mb']:7.0f} MiB  "
              f"chamfer {r['chamfer_mm2']:.5f} mm^2")


COMMANDS = {"simulate": cmd_simulate, "gen-data": cmd_gen_data, "train": cmd_train,
            "rollout": cmd_rollout, "render": cmd_render, "eval": cmd_eval}


def build_parser():
    p = argparse.ArgumentParser(prog="tactile-rom", description=__doc__)
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="out")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--ablate", action="store_true", help="eval only: train and score ablations")
    return p


def _limit_threads(args):
    n = os.environ.get("TACTILE_ROM_THREADS")
    limit = 1 if args.deterministic else (int(n) if n else None)
    if limit is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.frames is not None and args.frames < 0:
        print("error: --frames must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    if args.ablate and args.command != "eval":
        print("error: --ablate applies to eval only", file=sys.stderr)
        return EXIT_CONFIG
    from .constitutive import InversionError
    from .fileio import FormatError

    try:
        _limit_threads(args)
        code = COMMANDS[args.command](args)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InversionError, ArithmeticError, IndexError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
