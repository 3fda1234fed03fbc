"""Experiment configuration files.

Configs are TOML (flat ``key = value`` lines grouped in one level of
sections) or the same structure in JSON. Unknown keys are rejected.

Top level::

    name, policy (asha | rasda | both), backend (sim | toy), num_trials,
    total_workers, base_resources, local_batch_size, seeds, metric_mode

Sections: ``[ladder]`` min_t, max_t, sf, rf; ``[runtime]`` dataset_samples,
per_sample_time, fixed_overhead, comm_coeff; ``[checkpoint]`` every, cost,
relaunch_cost; ``[dynamics]`` b0, growth, bs_ref; ``[curve]`` (see
:class:`rasda.dynamics.CurveFamily`); ``[toy]`` (see
:class:`rasda.toy.ToyProblemConfig`); ``[space]`` one entry per
hyperparameter, e.g. ``lr = { kind = "logfloat", lo = 1e-5, hi = 1.0 }`` or
``optimizer = { kind = "categorical", values = ["sgd", "adam"] }``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from rasda.cluster import CheckpointModel, RuntimeModel
from rasda.core import InvalidLadder, InvalidSearchSpace, ParamKind, ParamSpec, RungLadder, compute_ladder
from rasda.dynamics import CurveFamily, NoiseScaleModel
from rasda.schedulers import MetricMode, Policy
from rasda.toy import ToyProblemConfig

PRESETS = ("cv64", "am128", "cfd128", "toy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    policy: str
    backend: str
    space: Tuple[ParamSpec, ...]
    ladder: RungLadder
    num_trials: int
    total_workers: int
    base_resources: int
    local_batch_size: int
    runtime: RuntimeModel
    checkpoint: CheckpointModel = CheckpointModel()
    noise: NoiseScaleModel = NoiseScaleModel()
    bs_ref: Optional[int] = None
    curve: CurveFamily = CurveFamily()
    toy: ToyProblemConfig = ToyProblemConfig()
    seeds: Tuple[int, ...] = (0,)
    metric_mode: MetricMode = MetricMode.MIN

    @property
    def policies(self) -> List[Policy]:
        if self.policy == "both":
            return [Policy.ASHA, Policy.RASDA]
        return [Policy(self.policy)]

    @property
    def reference_batch(self) -> int:
        return self.bs_ref if self.bs_ref is not None else self.local_batch_size * self.base_resources

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TOP = {
    "name", "policy", "backend", "num_trials", "total_workers", "base_resources",
    "local_batch_size", "seeds", "metric_mode",
    "ladder", "runtime", "checkpoint", "dynamics", "curve", "toy", "space",
}
_REQUIRED = {"policy", "num_trials", "total_workers", "base_resources", "ladder", "runtime", "space"}


def _section(raw: Mapping, name: str, cls, rename: Optional[Dict[str, str]] = None):
    data = raw.get(name, {})
    if not isinstance(data, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    rename = rename or {}
    allowed = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        field_name = rename.get(key, key)
        if field_name not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[field_name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _param(name: str, spec: Any) -> ParamSpec:
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise ConfigError(f"space.{name} needs a table with a 'kind'")
    extra = set(spec) - {"kind", "lo", "hi", "values"}
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in space.{name}")
    try:
        kind = ParamKind(spec["kind"])
        if kind in (ParamKind.LOG_FLOAT, ParamKind.FLOAT):
            return ParamSpec(name, kind, lo=float(spec["lo"]), hi=float(spec["hi"]))
        return ParamSpec(name, kind, values=tuple(spec["values"]))
    except (KeyError, ValueError, InvalidSearchSpace) as exc:
        raise ConfigError(f"space.{name}: {exc}") from exc


def _positive_int(raw: Mapping, key: str, default=None) -> int:
    v = raw.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ConfigError(f"{key} must be a positive integer, got {v!r}")
    return v


def parse_config(raw: Mapping) -> ExperimentConfig:
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown key(s): {sorted(unknown)}")
    missing = _REQUIRED - set(raw)
    if missing:
        raise ConfigError(f"missing key(s): {sorted(missing)}")

    policy = raw["policy"]
    if policy not in ("asha", "rasda", "both"):
        raise ConfigError(f"policy must be asha, rasda or both, got {policy!r}")
    backend = raw.get("backend", "sim")
    if backend not in ("sim", "toy"):
        raise ConfigError(f"backend must be sim or toy, got {backend!r}")
    try:
        metric_mode = MetricMode(raw.get("metric_mode", "min"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    lad = raw["ladder"]
    if not isinstance(lad, Mapping):
        raise ConfigError("[ladder] must be a table")
    extra = set(lad) - {"min_t", "max_t", "sf", "rf"}
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in [ladder]")
    try:
        ladder = compute_ladder(lad["min_t"], lad["max_t"], lad.get("sf", 2), lad.get("rf", 2))
    except (KeyError, InvalidLadder) as exc:
        raise ConfigError(f"[ladder]: {exc}") from exc

    if not isinstance(raw["space"], Mapping) or not raw["space"]:
        raise ConfigError("[space] must declare at least one hyperparameter")
    space = tuple(_param(name, spec) for name, spec in raw["space"].items())

    dyn = raw.get("dynamics", {})
    if not isinstance(dyn, Mapping):
        raise ConfigError("[dynamics] must be a table")
    extra = set(dyn) - {"b0", "growth", "bs_ref"}
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in [dynamics]")
    try:
        noise = NoiseScaleModel(b0=float(dyn.get("b0", 256.0)), growth=float(dyn.get("growth", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"[dynamics]: {exc}") from exc
    bs_ref = dyn.get("bs_ref")
    if bs_ref is not None:
        bs_ref = _positive_int(dyn, "bs_ref")

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds
    ):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")

    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        policy=policy,
        backend=backend,
        space=space,
        ladder=ladder,
        num_trials=_positive_int(raw, "num_trials"),
        total_workers=_positive_int(raw, "total_workers"),
        base_resources=_positive_int(raw, "base_resources"),
        local_batch_size=_positive_int(raw, "local_batch_size", 1),
        runtime=_section(raw, "runtime", RuntimeModel),
        checkpoint=_section(raw, "checkpoint", CheckpointModel),
        noise=noise,
        bs_ref=bs_ref,
        curve=_section(raw, "curve", CurveFamily),
        toy=_section(raw, "toy", ToyProblemConfig),
        seeds=tuple(seeds),
        metric_mode=metric_mode,
    )
    if cfg.base_resources > cfg.total_workers:
        raise ConfigError(
            f"base_resources={cfg.base_resources} exceeds total_workers={cfg.total_workers}"
        )
    if cfg.reference_batch > cfg.local_batch_size * cfg.base_resources:
        raise ConfigError("dynamics.bs_ref cannot exceed the starting global batch size")
    if backend == "toy":
        names = {p.name for p in space}
        if "lr" not in names:
            raise ConfigError("the toy backend needs an 'lr' hyperparameter")
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a TOML or JSON config file, or a shipped preset by name."""
    path_str = str(path)
    if path_str in PRESETS and not os.path.exists(path_str):
        return load_preset(path_str)
    p = Path(path_str)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return loads_config(text, json_format=p.suffix.lower() == ".json")


def loads_config(text: str, json_format: bool = False) -> ExperimentConfig:
    try:
        raw = json.loads(text) if json_format else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a table/object at top level")
    return parse_config(raw)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("rasda.harness").joinpath("presets", f"{name}.toml").read_text("utf-8")


def load_preset(name: str) -> ExperimentConfig:
    return loads_config(preset_text(name))
