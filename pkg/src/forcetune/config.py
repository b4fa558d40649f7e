"""Experiment configuration: JSON schema, validation, seeds and hashing.

Every key carries its unit in the name.  A minimal config is ``{}``; all
fields have defaults.  Example::

    {
      "mode": "single",
      "ref_force_n": [0.2, 0.3, 0.4],
      "window_s": 10, "total_s": 600, "xi": 0.001,
      "seed": 0, "n_runs": 10,
      "initial_gains": [50, 50, 100, 100],
      "plant": {"noise_std_n": 0.005},
      "controller": {"u_ff_mode": "steady_state"}
    }

Relative ``toolpath`` paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .bo import BOSettings, SearchSpace
from .controller import GAIN_LOWER, GAIN_NAMES, GAIN_UPPER, ControllerConfig
from .plant import (
    CornerDipConfig,
    PlantParams,
    ToolpathError,
    parse_toolpath,
    schedule_from_toolpath,
    square_toolpath,
)
from .sim import ProcessSetup
from .transfer import AugmentedSpace


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_gains = {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["single", "tl", "compare"]},
        "plant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "time_constant_s": _pos,
                "gain_coeff": _pos,
                "flow_exponent": _pos,
                "dead_time_s": {"type": "number", "minimum": 0},
                "force_saturation_n": _pos,
                "noise_std_n": {"type": "number", "minimum": 0},
                "sample_period_s": _pos,
            },
        },
        "disturbance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dip_magnitude": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "dip_duration_s": _pos,
                "angle_threshold_deg": {"type": "number", "minimum": 0, "exclusiveMaximum": 180},
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau_fast_s": _pos,
                "tau_slow_s": _pos,
                "u_max_mm_s": _pos,
                "u_ff_mode": {
                    "oneOf": [{"enum": ["steady_state", "zero"]}, {"type": "number", "minimum": 0}]
                },
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lower": _gains, "upper": _gains},
        },
        "ref_force_n": {
            "oneOf": [_pos, {"type": "array", "items": _pos, "minItems": 1}]
        },
        "force_bounds_n": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "window_s": _pos,
        "total_s": _pos,
        "xi": {"type": "number", "minimum": 0},
        "settle_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "log_objective": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "n_runs": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "initial_gains": {"oneOf": [{"type": "null"}, _gains]},
        "gains": _gains,
        "toolpath": {"oneOf": [{"type": "null"}, {"type": "string"}]},
        "workers": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "mode": "single",
    "plant": {},
    "disturbance": {},
    "controller": {},
    "bounds": {"lower": list(GAIN_LOWER), "upper": list(GAIN_UPPER)},
    "ref_force_n": 0.3,
    "force_bounds_n": [0.05, 0.5],
    "window_s": 10.0,
    "total_s": 600.0,
    "xi": 1e-3,
    "settle_fraction": 0.1,
    "log_objective": True,
    "seed": 0,
    "n_runs": 1,
    "initial_gains": None,
    "toolpath": None,
    "workers": 1,
}


def derive_seed(master: int, index: int) -> int:
    """Per-run seed: the first 32-bit word of ``SeedSequence([master, index])``."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # resolved config, defaults filled in
    setup: ProcessSetup
    space: SearchSpace
    task_space: AugmentedSpace
    settings: BOSettings
    ref_forces_n: tuple[float, ...]
    seeds: tuple[int, ...]
    initial_gains: tuple[float, ...] | None
    workers: int

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _field(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def resolve(data: dict, base_dir: Path | None = None, seed: int | None = None) -> ExperimentConfig:
    """Validate a config mapping and build the domain objects it describes."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        raise ConfigError("; ".join(f"{_field(e.absolute_path)}: {e.message}" for e in errors))

    cfg = copy.deepcopy(DEFAULTS)
    for k, v in data.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed: must be >= 0")
        cfg["seed"] = seed
        cfg.pop("seeds", None)

    plant = _build("plant", PlantParams, cfg["plant"])
    dips = _build("disturbance", CornerDipConfig, cfg["disturbance"])
    controller = _build("controller", ControllerConfig, cfg["controller"])
    space = _build(
        "bounds", SearchSpace, dict(lower=cfg["bounds"]["lower"], upper=cfg["bounds"]["upper"], names=GAIN_NAMES)
    )
    if any(lo < glo or hi > ghi for lo, hi, glo, ghi in zip(space.lower, space.upper, GAIN_LOWER, GAIN_UPPER)):
        raise ConfigError(f"bounds: must lie within the controller gain limits {GAIN_LOWER}..{GAIN_UPPER}")
    task_space = _build("force_bounds_n", AugmentedSpace, dict(gains=space, force_bounds_n=tuple(cfg["force_bounds_n"])))
    settings = _build(
        "window_s/total_s",
        BOSettings,
        dict(
            window_s=float(cfg["window_s"]),
            total_s=float(cfg["total_s"]),
            xi=float(cfg["xi"]),
            settle_fraction=float(cfg["settle_fraction"]),
            log_objective=cfg["log_objective"],
        ),
    )

    refs = cfg["ref_force_n"]
    refs = tuple(float(r) for r in (refs if isinstance(refs, list) else [refs]))
    for r in refs:
        if r >= plant.force_saturation_n:
            raise ConfigError(f"ref_force_n: {r} is not below the force saturation {plant.force_saturation_n}")

    for key in ("initial_gains", "gains"):
        g = cfg.get(key)
        if g is not None and not space.contains(g):
            raise ConfigError(f"{key}: {g} outside the search bounds")

    if cfg.get("toolpath"):
        path = Path(cfg["toolpath"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"toolpath: file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            setup = ProcessSetup.from_toolpath_text(text, plant, dips, controller)
        except ToolpathError as exc:
            raise ConfigError(f"toolpath: {path}: {exc}") from None
        # the hash must change when the toolpath content does
        cfg["toolpath_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    else:
        setup = ProcessSetup(plant, schedule_from_toolpath(parse_toolpath(square_toolpath()), dips), controller)

    if "seeds" in cfg:
        seeds = tuple(cfg["seeds"])
    else:
        seeds = tuple(derive_seed(cfg["seed"], i) for i in range(cfg["n_runs"]))

    init = cfg.get("initial_gains")
    return ExperimentConfig(
        raw=cfg,
        setup=setup,
        space=space,
        task_space=task_space,
        settings=settings,
        ref_forces_n=refs,
        seeds=seeds,
        initial_gains=None if init is None else tuple(float(v) for v in init),
        workers=cfg["workers"],
    )


def load(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Read and resolve a config file (``None`` means all defaults)."""
    if path is None:
        return resolve({}, None, seed)
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return resolve(data, path.parent, seed)
