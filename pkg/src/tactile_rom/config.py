"""Configuration dataclasses and strict JSON loading.

Every config block maps one-to-one onto a dataclass; JSON keys must match the
field names exactly and unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class MaterialParams:
    # density and friction are not given for the elastomer; 1070 kg/m^3 is a
    # typical silicone value
    young_modulus: float = 1.19e5
    poisson_ratio: float = 0.43
    density: float = 1070.0

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ConfigError(f"young_modulus must be > 0, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ConfigError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if not self.density > 0:
            raise ConfigError(f"density must be > 0, got {self.density}")

    @property
    def lame_mu(self) -> float:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lame_lambda(self) -> float:
        nu = self.poisson_ratio
        return self.young_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def sound_speed(self) -> float:
        return math.sqrt((self.lame_lambda + 2.0 * self.lame_mu) / self.density)


@dataclass(frozen=True)
class IndenterConfig:
    """Rigid indenter and its quasi-static press trajectory.

    The indenter starts with its lowest point touching the elastomer top face
    above ``center`` (xy offset from the elastomer center), descends at
    ``speed`` until it is ``depth`` below the face, then holds.
    """
    shape: str = "sphere"  # sphere | box | mesh
    radius: float = 4e-3
    half_extents: tuple[float, float, float] = (2e-3, 2e-3, 2e-3)
    sdf_path: str = ""  # .npz with keys sdf, origin, spacing (mesh shape)
    friction: float = 0.0
    sticky: bool = True
    center: tuple[float, float] = (0.0, 0.0)
    depth: float = 3e-4
    speed: float = 1e-3
    hold_time: float = 0.0
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "mesh"):
            raise ConfigError(f"unknown indenter shape {self.shape!r}")
        if self.shape == "mesh" and not self.sdf_path:
            raise ConfigError("mesh indenter requires sdf_path")
        if self.depth < 0:
            raise ConfigError("indenter depth must be >= 0")
        if self.speed <= 0:
            raise ConfigError("indenter speed must be > 0")
        if self.friction < 0:
            raise ConfigError("friction must be >= 0")


DEFAULT_BOUNDARY = {
    "x_min": "separate", "x_max": "separate",
    "y_min": "separate", "y_max": "separate",
    "z_min": "sticky", "z_max": "separate",
}
BOUNDARY_KINDS = ("sticky", "separate", "slip", "free")


@dataclass(frozen=True)
class SimConfig:
    """One press simulation at one particle resolution.

    ``resolution`` selects which of ``n_coarse`` / ``n_fine`` is seeded; the
    grid (``grid_dims``, ``dx``) belongs to that resolution. ``dt = 0``
    means "half the CFL bound".
    """
    grid_dims: tuple[int, int, int] = (100, 100, 21)
    dx: float = 4e-4
    dt: float = 0.0
    n_coarse: int = 10_000
    n_fine: int = 100_000
    resolution: str = "coarse"
    material: MaterialParams = field(default_factory=MaterialParams)
    indenter: IndenterConfig = field(default_factory=IndenterConfig)
    extents: tuple[float, float, float] = (30e-3, 30e-3, 4e-3)
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    boundary: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDARY))
    frames: int = 10
    steps_per_frame: int = 0  # 0: derive from frames and the press duration
    cfl: float = 0.5
    jitter: float = 0.3
    contact: str = "penalty"  # penalty | grid
    contact_stiffness: float = 1e12  # Pa/m^2: energy 0.5 k_c V0 min(0, phi - skin)^2
    contact_skin: float = -1.0  # < 0: half the particle spacing
    seed: int = 0

    def __post_init__(self):
        if self.resolution not in ("coarse", "fine"):
            raise ConfigError(f"resolution must be 'coarse' or 'fine', got {self.resolution!r}")
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 5:
            raise ConfigError(f"grid_dims must be 3 integers >= 5, got {self.grid_dims}")
        if self.dx <= 0:
            raise ConfigError("dx must be > 0")
        if self.frames < 0:
            raise ConfigError("frames must be >= 0")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("jitter must be in [0, 1)")
        for k, v in self.boundary.items():
            if k not in DEFAULT_BOUNDARY:
                raise ConfigError(f"unknown boundary wall {k!r}")
            if v not in BOUNDARY_KINDS:
                raise ConfigError(f"unknown boundary kind {v!r} for {k}")
        if self.contact not in ("penalty", "grid"):
            raise ConfigError(f"contact must be 'penalty' or 'grid', got {self.contact!r}")
        if self.contact_stiffness < 0:
            raise ConfigError("contact_stiffness must be >= 0")
        if self.dt < 0:
            raise ConfigError("dt must be >= 0")
        if self.dt > self.cfl_limit * (1 + 1e-12):
            raise ConfigError(
                f"dt={self.dt:.3e} s violates the CFL bound dt <= c_cfl*dx/c = "
                f"{self.cfl_limit:.3e} s (c_cfl={self.cfl}, sound speed "
                f"{self.material.sound_speed:.3f} m/s)")

    @property
    def n_particles(self) -> int:
        return self.n_coarse if self.resolution == "coarse" else self.n_fine

    @property
    def cfl_limit(self) -> float:
        return self.cfl * self.dx / self.material.sound_speed

    @property
    def time_step(self) -> float:
        return self.dt if self.dt > 0 else 0.5 * self.cfl_limit

    @property
    def press_duration(self) -> float:
        ind = self.indenter
        return ind.depth / ind.speed + ind.hold_time

    @property
    def frame_steps(self) -> int:
        if self.steps_per_frame > 0:
            return self.steps_per_frame
        if self.frames == 0:
            return 1
        return max(1, math.ceil(self.press_duration / (self.frames * self.time_step)))

    @property
    def frame_dt(self) -> float:
        return self.frame_steps * self.time_step

    def with_(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def press_pair(fine: SimConfig, coarse: SimConfig, indenter: IndenterConfig) -> tuple[SimConfig, SimConfig]:
    """Fine/coarse configs sharing one indenter trajectory and frame clock."""
    fine = fine.with_(indenter=indenter, resolution="fine")
    coarse = coarse.with_(indenter=indenter, resolution="coarse")
    frame_dt = fine.frame_dt
    # coarse steps must land on the fine frame clock
    ratio = max(1, math.ceil(frame_dt / (0.5 * coarse.cfl_limit)))
    coarse = coarse.with_(dt=frame_dt / ratio, steps_per_frame=ratio, frames=fine.frames)
    fine = fine.with_(dt=fine.time_step, steps_per_frame=fine.frame_steps)
    return fine, coarse


# --- strict (de)serialization ------------------------------------------------

def _convert(tp, value, path):
    origin = getattr(tp, "__origin__", None)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = tp.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_convert(tp.__args__[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], f"{path}.{f.name}" if path else f.name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def locate_key(path, key: str) -> int | None:
    """1-based line of the first occurrence of ``"key"`` in a JSON file."""
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return None
