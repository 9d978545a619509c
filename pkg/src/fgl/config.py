"""Strict JSON experiment configuration.

Minimal config::

    {"preset": "main", "dataset": "gmm-default"}

Every other block is optional and overrides the preset defaults. Unknown keys
are rejected, and validation errors name the offending key path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .datasets import PartitionSpec
from .fedcore import CENTRALIZED_ROUNDS, PRESETS, FLConfig
from .netsim import CostModel, MessageSizeModel
from .synth import DiffusionConfig, GanConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "gmm"
    n_train: int = 6000
    n_test: int = 2000
    classes: int = 10
    radius: float = 5.0
    variance: float = 0.25
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None

    @property
    def tag(self) -> str:
        if self.kind == "gmm":
            default = (self.classes, self.radius, self.variance) == (10, 5.0, 0.25)
            return "gmm-default" if default else f"gmm-c{self.classes}-v{self.variance:g}"
        if self.kind == "idx":
            return f"idx:{Path(self.train_images).name}"
        return f"csv:{Path(self.train_csv).name}"


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "iid"
    alpha: float = 0.5
    min_samples: int = 1


@dataclass(frozen=True)
class NetConfig:
    kind: str = "auto"
    hidden: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "class"
    clusters_per_class: int = 3


@dataclass(frozen=True)
class SynthConfig:
    backend: str = "direct"
    n_samples: int = 10000
    diffusion: DiffusionConfig = DiffusionConfig()
    gan: GanConfig = GanConfig()


@dataclass(frozen=True)
class LandscapeConfig:
    grid: int = 11
    radius: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    dataset: DatasetConfig
    partition: PartitionConfig
    fl: FLConfig
    centralized_rounds: int
    net: NetConfig
    prompts: PromptConfig
    synth: SynthConfig
    message_size: MessageSizeModel
    cost: CostModel
    landscape: LandscapeConfig
    out_dir: Optional[str]
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fl"].pop("seed")
        return d


_TOP_KEYS = {"preset", "dataset", "partition", "fl", "net", "prompts", "synth", "netsim",
             "landscape", "out_dir", "seed"}


def _strict(cls, raw: Any, path: str, exclude=(), **fixed):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls) if f.init} - set(exclude) - set(fixed)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    return raw


def _make(cls, raw: dict, path: str, base=None, **fixed):
    try:
        if base is not None:
            return replace(base, **raw, **fixed)
        return cls(**raw, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _dataset(raw, path: str) -> DatasetConfig:
    if raw == "gmm-default":
        return DatasetConfig()
    _strict(DatasetConfig, raw, path)
    ds = _make(DatasetConfig, raw, path)
    if ds.kind not in ("gmm", "idx", "csv"):
        raise ConfigError(f"{path}.kind: must be one of gmm, idx, csv")
    if ds.kind == "gmm":
        if ds.n_train < 1 or ds.n_test < 1:
            raise ConfigError(f"{path}.n_train: sample counts must be positive")
        if ds.variance <= 0:
            raise ConfigError(f"{path}.variance: must be positive")
    needed = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
              "csv": ("train_csv", "test_csv")}.get(ds.kind, ())
    for key in needed:
        value = getattr(ds, key)
        if value is None:
            raise ConfigError(f"{path}.{key}: required for kind {ds.kind!r}")
        if not Path(value).exists():
            raise ConfigError(f"{path}.{key}: file {value!r} does not exist")
    return ds


def build_config(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a parsed JSON object; ``overrides`` come from CLI flags."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{key}: unknown key")
    preset = raw.get("preset", "main")
    if preset not in PRESETS:
        raise ConfigError(f"preset: must be one of {sorted(PRESETS)}, got {preset!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")

    dataset = _dataset(raw.get("dataset", "gmm-default"), "dataset")

    part_raw = _strict(PartitionConfig, raw.get("partition", {}), "partition")
    part = _make(PartitionConfig, part_raw, "partition")
    try:
        PartitionSpec(part.mode, part.alpha, part.min_samples)
    except ValueError as exc:
        raise ConfigError(f"partition: {exc}") from None

    fl_raw = dict(raw.get("fl", {}))
    if not isinstance(fl_raw, dict):
        raise ConfigError("fl: expected an object")
    centralized_rounds = fl_raw.pop("centralized_rounds", CENTRALIZED_ROUNDS[preset])
    _strict(FLConfig, fl_raw, "fl", exclude=("seed",))
    for key in ("participation",):
        if key in fl_raw and not (isinstance(fl_raw[key], (int, float)) and 0 < fl_raw[key] <= 1):
            raise ConfigError(f"fl.{key}: must lie in (0, 1], got {fl_raw[key]!r}")
    fl = _make(FLConfig, fl_raw, "fl", base=PRESETS[preset], seed=seed)
    if not isinstance(centralized_rounds, int) or centralized_rounds < 1:
        raise ConfigError("fl.centralized_rounds: must be a positive integer")

    net_raw = _strict(NetConfig, raw.get("net", {}), "net")
    net = _make(NetConfig, {**net_raw, **({"hidden": tuple(net_raw["hidden"])} if "hidden" in net_raw else {})},
                "net")
    if net.kind not in ("auto", "mlp", "cnn"):
        raise ConfigError("net.kind: must be one of auto, mlp, cnn")

    pr = _make(PromptConfig, _strict(PromptConfig, raw.get("prompts", {}), "prompts"), "prompts")
    if pr.mode not in ("class", "entity"):
        raise ConfigError("prompts.mode: must be 'class' or 'entity'")
    if pr.clusters_per_class < 1:
        raise ConfigError("prompts.clusters_per_class: must be >= 1")

    syn_raw = dict(_strict(SynthConfig, raw.get("synth", {}), "synth"))
    if "diffusion" in syn_raw:
        d = _strict(DiffusionConfig, syn_raw["diffusion"], "synth.diffusion")
        if "schedule" in d:
            d = {**d, "schedule": tuple(d["schedule"])}
        syn_raw["diffusion"] = _make(DiffusionConfig, d, "synth.diffusion")
    if "gan" in syn_raw:
        syn_raw["gan"] = _make(GanConfig, _strict(GanConfig, syn_raw["gan"], "synth.gan"), "synth.gan")
    synth = _make(SynthConfig, syn_raw, "synth")
    if synth.backend not in ("direct", "diffusion", "gan"):
        raise ConfigError("synth.backend: must be one of direct, diffusion, gan")
    if synth.n_samples < fl.batch_size:
        raise ConfigError("synth.n_samples: must be at least fl.batch_size")

    ns_raw = raw.get("netsim", {})
    if not isinstance(ns_raw, dict):
        raise ConfigError("netsim: expected an object")
    size_keys = {f.name for f in fields(MessageSizeModel)}
    cost_keys = {f.name for f in fields(CostModel)}
    for key in ns_raw:
        if key not in size_keys | cost_keys:
            raise ConfigError(f"netsim.{key}: unknown key")
    size = _make(MessageSizeModel, {k: v for k, v in ns_raw.items() if k in size_keys}, "netsim")
    cost = _make(CostModel, {k: v for k, v in ns_raw.items() if k in cost_keys}, "netsim")

    land = _make(LandscapeConfig, _strict(LandscapeConfig, raw.get("landscape", {}), "landscape"),
                 "landscape")
    if land.grid < 1 or land.grid % 2 == 0:
        raise ConfigError("landscape.grid: must be a positive odd integer")
    if land.radius <= 0:
        raise ConfigError("landscape.radius: must be positive")

    return ExperimentConfig(preset, dataset, part, fl, centralized_rounds, net, pr, synth, size,
                            cost, land, raw.get("out_dir"), seed)


def parse_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return build_config(raw, overrides)
