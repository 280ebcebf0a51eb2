"""Run configuration: nested dataclasses <-> JSON, with a generated JSON schema."""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass

import jsonschema

from .cloud import RaysConfig, SelectionConfig
from .gmm import EmConfig
from .sim import FUSION_MODES, GridConfig, SceneConfig, TrialConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = SceneConfig()
    sigma_eta_deg: float = 1.0
    sigma_nu_pt: float = 0.5  # m
    sigma_nu_rpt: float = 0.5  # m
    fusion: str = "aoa"
    n_rays: int = 500
    rays: RaysConfig = RaysConfig()
    selection: SelectionConfig = SelectionConfig()
    gmm: EmConfig = EmConfig()
    grid: GridConfig = GridConfig()
    seed: int = 0
    n_trials: int = 500
    workers: int = 1
    out: str = "out"
    sweep: str | None = None  # "axis=v1,v2,..." with optional "deg" suffix for sigma_eta
    ue_margin: float = 0.1
    truth_max_bounces: int = 2

    def to_trial(self) -> TrialConfig:
        return TrialConfig(
            scene=self.scene,
            sigma_eta=math.radians(self.sigma_eta_deg),
            sigma_nu_pt=self.sigma_nu_pt,
            sigma_nu_rpt=self.sigma_nu_rpt,
            fusion=self.fusion,
            n_rays=self.n_rays,
            rays=self.rays,
            selection=self.selection,
            gmm=self.gmm,
            grid=self.grid,
            seed=self.seed,
            ue_margin=self.ue_margin,
            truth_max_bounces=self.truth_max_bounces,
        )


def _json_type(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        return {"anyOf": [_json_type(a) for a in args]}
    if tp is type(None):
        return {"type": "null"}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if is_dataclass(tp):
        return schema_for(tp)
    raise TypeError(f"unsupported config type {tp!r}")


def schema_for(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {f.name: _json_type(hints[f.name]) for f in fields(cls)},
    }


def config_schema() -> dict:
    s = schema_for(RunConfig)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["properties"]["fusion"]["enum"] = list(FUSION_MODES)
    return s


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        v = data[f.name]
        if is_dataclass(tp):
            v = _build(tp, v)
        elif tp is float and isinstance(v, int):
            v = float(v)
        elif typing.get_origin(tp) in (typing.Union, types.UnionType) and float in typing.get_args(tp) \
                and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    try:
        jsonschema.validate(data, config_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from exc
    try:
        cfg = _build(RunConfig, data)
        cfg.to_trial()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_sweep(spec: str) -> tuple[str, list]:
    """``"sigma_eta=0.25,0.5deg"`` -> ("sigma_eta", [radians...]) plus labels.

    Returns ``(axis, [(label, value), ...])`` where values are in internal
    units (radians for sigma_eta, meters otherwise).
    """
    if "=" not in spec:
        raise ConfigError(f"sweep must look like axis=v1,v2,...; got {spec!r}")
    axis, raw = spec.split("=", 1)
    axis = axis.strip().replace("-", "_")
    raw = raw.strip()
    if axis == "fusion":
        vals = [v.strip() for v in raw.split(",")]
        for v in vals:
            if v not in FUSION_MODES:
                raise ConfigError(f"unknown fusion mode {v!r} in sweep")
        return axis, [(v, v) for v in vals]
    unit = ""
    for suffix in ("deg", "rad", "m"):
        if raw.endswith(suffix):
            unit, raw = suffix, raw[: -len(suffix)]
            break
    try:
        nums = [float(v) for v in raw.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values in {spec!r}") from exc
    if axis == "sigma_eta":
        unit = unit or "deg"
        conv = math.radians if unit == "deg" else (lambda v: v)
        return axis, [(f"{v:g}{unit}", conv(v)) for v in nums]
    if axis in ("sigma_nu_pt", "sigma_nu_rpt"):
        if unit not in ("", "m"):
            raise ConfigError(f"{axis} values are lengths in meters")
        return axis, [(f"{v:g}m", v) for v in nums]
    raise ConfigError(f"unknown sweep axis {axis!r}")
