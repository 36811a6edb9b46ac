"""Latent-space time stepping: per frame, minimise inertia + potential energy over z."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import rom
from .config import SimConfig
from .constitutive import InversionError
from .indenter import Indenter
from .mpm import (Grid, contact_skin, elastomer_box, indenter_pose, potential_energy,
                  seed_particles, step)


@dataclass(frozen=True)
class LbfgsSettings:
    max_iters: int = 10
    grad_tolerance: float = 1e-5
    history: int = 8
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    # tolerance measured against the starting gradient norm; the objective's
    # absolute scale is set by an arbitrary energy unit
    relative: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tolerance > 0:
            raise ValueError("grad_tolerance must be > 0")


@dataclass
class LbfgsResult:
    z: np.ndarray
    iterations: int
    grad_norm: float
    value: float
    start_value: float
    stalled: bool = False
    accepted: list = field(default_factory=list)  # objective after each accepted step


def lbfgs_minimize(fun, z0, settings: LbfgsSettings = LbfgsSettings()) -> LbfgsResult:
    """Minimise ``fun(z) -> (J, grad)`` with two-loop L-BFGS and Armijo backtracking.

    ``fun`` may return ``(inf, None)`` for infeasible points; the line search
    then backtracks.
    """
    z = np.array(z0, dtype=np.float64)
    J, g = fun(z)
    if not np.isfinite(J):
        raise FloatingPointError("objective is not finite at the starting point")
    J0 = J
    S, Y = [], []
    accepted = [J]
    gnorm = float(np.linalg.norm(g))
    tol = settings.grad_tolerance * (gnorm if settings.relative else 1.0)
    it = 0
    stalled = False
    while gnorm >= tol and gnorm > 0 and it < settings.max_iters:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            q -= a * y
            alphas.append((rho, a))
        if S:
            q *= np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
        else:
            q *= min(1.0, 1.0 / gnorm)
        for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        d = -q
        slope = float(np.dot(g, d))
        if slope >= 0:
            # not a descent direction: restart from steepest descent
            S.clear()
            Y.clear()
            d = -g * min(1.0, 1.0 / gnorm)
            slope = float(np.dot(g, d))

        t = 1.0
        for _ in range(settings.max_backtracks + 1):
            z_new = z + t * d
            J_new, g_new = fun(z_new)
            if np.isfinite(J_new) and J_new <= J + settings.c1 * t * slope:
                break
            t *= settings.backtrack
        else:
            stalled = True
            break

        s = z_new - z
        y = g_new - g
        if np.dot(s, y) > 1e-12 * np.dot(s, s) ** 0.5 * np.dot(y, y) ** 0.5:
            S.append(s)
            Y.append(y)
            if len(S) > settings.history:
                S.pop(0)
                Y.pop(0)
        z, J, g = z_new, J_new, g_new
        gnorm = float(np.linalg.norm(g))
        accepted.append(J)
        it += 1
    return LbfgsResult(z, it, gnorm, float(J), float(J0), stalled, accepted)


# --- objective --------------------------------------------------------------------

def inertial_target(x_hat, v_hat, F_hat, dt, gravity=(0.0, 0.0, 0.0)):
    """Free-flight predictor: positions advanced by dt v (+ dt^2 g), F carried over."""
    x_hat = np.asarray(x_hat)
    v_hat = np.asarray(v_hat)
    if x_hat.shape != v_hat.shape:
        raise ValueError(f"position/velocity shape mismatch {x_hat.shape} vs {v_hat.shape}")
    g = np.asarray(gravity, dtype=np.float64)
    return x_hat + dt * v_hat + dt * dt * g, np.array(F_hat, copy=True)


@dataclass
class LatentObjectiveContext:
    x_inertial: np.ndarray       # (N, 3)
    mass: np.ndarray             # (N,)
    volume0: np.ndarray          # (N,)
    dt: float
    material: object
    params: rom.AutoencoderParams
    encoding: rom.StateEncoding
    indenter: Indenter | None = None
    contact_stiffness: float = 1e12
    skin: float = 0.0
    gravity: tuple = (0.0, 0.0, 0.0)
    energy_scale: float = 1.0    # J; the objective is reported in units of this

    def __post_init__(self):
        if self.x_inertial.shape != (self.encoding.n, 3):
            raise ValueError("inertial target does not match the decoder's particle count")
        if np.any(self.mass <= 0):
            raise ValueError("all particle masses must be > 0")


def decode_state(z, params, encoding):
    y = rom.decode(z, params)
    return encoding.unflatten(encoding.denormalize(y))


def latent_objective(z, ctx: LatentObjectiveContext, parts=False):
    """J(z) = [1/(2 dt^2) |x(z) - x_in|_M^2 + P(x(z), F(z))] / energy_scale and dJ/dz.

    Returns (inf, None) if the decoded state is inverted.
    """
    y, cache = rom.decode_with_cache(z, ctx.params)
    x, F = ctx.encoding.unflatten(ctx.encoding.denormalize(y))
    try:
        E, dEx, dEF = potential_energy(x, F, ctx.volume0, ctx.mass, ctx.material, ctx.indenter,
                                       ctx.contact_stiffness, ctx.gravity, ctx.skin)
    except InversionError:
        return (np.inf, None) if not parts else (np.inf, None, {})
    r = x - ctx.x_inertial
    w = ctx.mass / (ctx.dt * ctx.dt)
    inertia = 0.5 * float(np.sum(w[:, None] * r * r))
    dx = dEx + w[:, None] * r
    draw = np.concatenate([dx, dEF.reshape(-1, 9)], axis=1).reshape(-1)
    dy = draw * ctx.encoding.channel_scale_vector()
    grad = rom.decode_vjp(ctx.params, cache, dy) / ctx.energy_scale
    J = (inertia + E) / ctx.energy_scale
    if parts:
        return J, grad, {"inertia": inertia, "potential": E}
    return J, grad


# --- rollout -------------------------------------------------------------------------

def frame_offset(fine: SimConfig, coarse: SimConfig):
    """Translation taking coarse-grid world coordinates to fine-grid world coordinates."""
    return elastomer_box(fine)[0] - elastomer_box(coarse)[0]


@dataclass
class RolloutResult:
    z: np.ndarray            # (T, r)
    x: np.ndarray            # (T, N, 3) fine-frame positions
    v: np.ndarray
    F: np.ndarray
    poses: np.ndarray        # (T, 7) indenter pose in the fine frame
    times: np.ndarray
    coarse_x: np.ndarray     # (T, Nc, 3) coarse positions in the fine frame
    coarse_v: np.ndarray
    coarse_F: np.ndarray
    coarse_rest: np.ndarray
    frames: list             # per-frame solver stats

    def sidecar(self):
        return json.dumps({"frames": self.frames}, indent=1, sort_keys=True)


def energy_scale_for(config: SimConfig):
    return config.material.lame_mu * float(np.prod(config.extents))


def rollout(fine: SimConfig, coarse: SimConfig, params, encoding, frames=None,
            settings: LbfgsSettings = LbfgsSettings(), warm_start="previous", log=None):
    """Drive the decoder with the coarse solver's indenter and latent energy minimisation.

    ``fine`` and ``coarse`` must share one frame clock (see ``press_pair``).
    ``warm_start`` is "previous" (last frame's z) or "encode" (re-encode the
    previous reconstruction each frame).
    """
    frames = fine.frames if frames is None else frames
    params = params.astype(np.float64)
    rest = seed_particles(fine)
    if rest.n != encoding.n or np.abs(rest.rest - encoding.rest).max() > 1e-6:
        raise ValueError("fine config does not reproduce the checkpoint's rest positions")
    cstate = seed_particles(coarse)
    grid = Grid.for_config(coarse)
    cind = Indenter.from_config(coarse.indenter)
    find = Indenter.from_config(fine.indenter)
    shift = frame_offset(fine, coarse)
    dt_frame = fine.frame_dt
    skin = contact_skin(fine)
    escale = energy_scale_for(fine)

    T = frames + 1
    N, Nc = rest.n, cstate.n
    out = {k: np.empty((T, N, 3)) for k in ("x", "v")}
    Fs = np.empty((T, N, 3, 3))
    cx, cv, cF = np.empty((T, Nc, 3)), np.empty((T, Nc, 3)), np.empty((T, Nc, 3, 3))
    zs = np.empty((T, params.latent))
    poses = np.empty((T, 7))
    times = np.empty(T)
    stats = []

    z = rom.encode(encoding.normalize(encoding.flatten(rest.x, rest.F)), params)
    x, F = decode_state(z, params, encoding)
    v = np.zeros_like(x)

    def record(k, t):
        zs[k], out["x"][k], out["v"][k], Fs[k] = z, x, v, F
        cx[k], cv[k], cF[k] = cstate.x + shift, cstate.v, cstate.F
        poses[k] = indenter_pose(fine, t, find)[0]
        times[k] = t

    record(0, 0.0)
    stats.append({"frame": 0, "objective": None, "objective_start": None, "grad_norm": None,
                  "iterations": 0, "stalled": False, "wall_ms": 0.0})
    it = 0
    cdt = coarse.time_step
    for k in range(1, T):
        t0 = time.perf_counter()
        for _ in range(coarse.frame_steps):
            pose, vel = indenter_pose(coarse, it * cdt, cind)
            step(cstate, coarse, cind.with_pose(pose, vel), grid, step_index=it)
            it += 1
        t = it * cdt
        cstate.time = t
        # the coarse solver's indenter, expressed in the fine frame
        pose = indenter_pose(coarse, t, cind)[0].copy()
        pose[:3] += shift
        x_in, _ = inertial_target(x, v, F, dt_frame, fine.gravity)
        ctx = LatentObjectiveContext(x_in, rest.mass, rest.volume0, dt_frame, fine.material,
                                     params, encoding, find.with_pose(pose),
                                     fine.contact_stiffness, skin, fine.gravity, escale)
        if warm_start == "encode":
            z = rom.encode(encoding.normalize(encoding.flatten(x, F)), params)
        res = lbfgs_minimize(lambda q: latent_objective(q, ctx), z, settings)
        z = res.z
        x_new, F = decode_state(z, params, encoding)
        v = (x_new - x) / dt_frame
        x = x_new
        record(k, t)
        poses[k] = pose
        s = {"frame": k, "objective": res.value, "objective_start": res.start_value,
             "grad_norm": res.grad_norm, "iterations": res.iterations, "stalled": res.stalled,
             "wall_ms": 1e3 * (time.perf_counter() - t0)}
        stats.append(s)
        if res.stalled and log is not None:
            log(f"frame {k}: line search stalled (|g|={res.grad_norm:.3e})")
    return RolloutResult(zs, out["x"], out["v"], Fs, poses, times, cx, cv, cF,
                         cstate.rest + shift, stats)
