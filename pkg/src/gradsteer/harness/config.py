"""Experiment configuration: dataclasses plus strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import mixgen, reweight
from ..model import ModelConfig

DEFAULT_QUANTILES = (1, 5, 10, 25, 50, 75, 90, 95, 99)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_slots: int = 2
    segment_len: int = 2048
    snr_range: tuple[float, float] = (-30.0, 30.0)
    pairing: dict = field(default_factory=lambda: {"kind": "distinct"})
    sample_rate: int = 8000
    classes: list | None = None  # None -> default synthetic bank


@dataclass
class ModelSection:
    enc_kernel: int = 17
    enc_stride: int = 8
    n_bases: int = 64
    n_blocks: int = 2
    hidden: int = 64
    n_sources: int = 2
    block_kernel: int = 3
    dtype: str = "float32"


@dataclass
class OptimConfig:
    lr: float = 1e-3
    clip_norm: float = 5.0


@dataclass
class RunConfig:
    epochs: int = 30
    batches_per_epoch: int = 100
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 1
    out_dir: str = "runs/default"
    final_avg_epochs: int = 5


@dataclass
class EvalConfig:
    n_val: int = 256
    n_test: int = 512
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    reweight: dict = field(default_factory=lambda: {"mode": "uniform"})
    run: RunConfig = field(default_factory=RunConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.run.batch_size < 2:
            raise ConfigError("batch_size must be >= 2; reweighting a single example is vacuous")
        if self.run.epochs < 0 or self.run.batches_per_epoch < 1 or self.run.eval_every < 1:
            raise ConfigError("epochs >= 0, batches_per_epoch >= 1 and eval_every >= 1 required")
        if self.run.final_avg_epochs < 1:
            raise ConfigError("final_avg_epochs must be >= 1")
        if not all(0 < q < 100 for q in self.eval.quantiles):
            raise ConfigError("quantiles must lie strictly inside (0, 100)")
        if self.eval.n_val < 1 or self.eval.n_test < 1:
            raise ConfigError("n_val and n_test must be positive")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.model.dtype!r}")
        try:
            self.weighting_mode()
            self.model_config()
            self.mix_spec()
        except (ValueError, TypeError, KeyError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err

    # --- builders ---------------------------------------------------------

    def mix_spec(self) -> mixgen.MixSpec:
        d = self.data
        return mixgen.MixSpec(d.n_slots, d.segment_len, tuple(d.snr_range), parse_pairing(d.pairing), d.sample_rate)

    def class_bank(self) -> mixgen.ClassBank:
        if self.data.classes is None:
            return mixgen.default_bank(self.data.sample_rate)
        return mixgen.ClassBank([parse_class(c, self.data.sample_rate) for c in self.data.classes],
                                self.data.sample_rate)

    def model_config(self) -> ModelConfig:
        fields = dataclasses.asdict(self.model)
        fields.pop("dtype")
        return ModelConfig(**fields)

    def weighting_mode(self) -> reweight.WeightingMode:
        return parse_mode(self.reweight)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with selected fields overridden, e.g. ``replace(run={"seed": 3})``."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and key not in ("reweight",):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return from_dict(d)


def parse_pairing(spec: dict) -> mixgen.Pairing:
    kind = spec.get("kind")
    if kind == "distinct":
        _only(spec, {"kind"}, "pairing")
        return mixgen.DistinctClasses()
    if kind == "any":
        _only(spec, {"kind"}, "pairing")
        return mixgen.AnyClasses()
    if kind == "fixed":
        _only(spec, {"kind", "first", "second"}, "pairing")
        return mixgen.FixedPair(int(spec["first"]), int(spec["second"]))
    raise ConfigError(f"unknown pairing kind {kind!r}")


_GENERATORS = {
    "tonal": (mixgen.Tonal, {"n_harmonics", "f0_range", "vibrato"}),
    "noiseband": (mixgen.NoiseBand, {"low", "high"}),
    "chirp": (mixgen.Chirp, {"f0_range", "f1_range"}),
    "ammod": (mixgen.AmMod, {"carrier_range", "mod_rate_range", "depth"}),
}


def parse_class(spec: dict, sample_rate: int) -> mixgen.SourceClass:
    kind = spec.get("kind")
    if kind == "wavpool":
        _only(spec, {"kind", "id", "name", "directory"}, "class")
        return mixgen.load_wav_pool(spec["directory"], sample_rate, int(spec["id"]), spec.get("name"))
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown class kind {kind!r}")
    cls, allowed = _GENERATORS[kind]
    _only(spec, allowed | {"kind", "id", "name"}, "class")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in spec.items() if k in allowed}
    return mixgen.SourceClass(int(spec["id"]), spec.get("name", kind), cls(**kwargs))


def parse_mode(spec: dict) -> reweight.WeightingMode:
    mode = spec.get("mode")
    if mode == "uniform":
        _only(spec, {"mode"}, "reweight")
        return reweight.Uniform()
    if mode == "robust":
        _only(spec, {"mode", "alpha"}, "reweight")
        return reweight.Robust(float(spec.get("alpha", 0.0)))
    if mode == "curriculum":
        _only(spec, {"mode", "a", "b", "per_step"}, "reweight")
        return reweight.Curriculum(float(spec.get("a", 10.0)), float(spec.get("b", 0.5)),
                                   bool(spec.get("per_step", False)))
    if mode == "class_bias":
        _only(spec, {"mode", "gamma", "granularity"}, "reweight")
        return reweight.ClassBias(spec.get("gamma", {}), spec.get("granularity", reweight.PER_SOURCE))
    raise ConfigError(f"unknown reweight mode {mode!r}")


def _only(spec: dict, allowed: set, where: str) -> None:
    extra = set(spec) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


_SECTIONS = {
    "data": DataConfig,
    "model": ModelSection,
    "optim": OptimConfig,
    "run": RunConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values: Any, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    _only(values, known, name)
    values = {k: tuple(v) if isinstance(v, list) and k in ("snr_range", "quantiles") else v
              for k, v in values.items()}
    return cls(**values)


def from_dict(d: dict) -> ExperimentConfig:
    _only(d, set(_SECTIONS) | {"reweight"}, "config")
    sections = {name: _build_section(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()}
    rw = d.get("reweight", {"mode": "uniform"})
    if not isinstance(rw, dict):
        raise ConfigError("section 'reweight' must be a table")
    return ExperimentConfig(reweight=dict(rw), **sections)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return from_dict(raw)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
