"""Experiment configuration (INI text) and deterministic seed derivation.

Every random stream in a run is derived from one master seed::

    derive_seed(master, *tags) = first 8 bytes (little-endian) of
        sha256("master|tag1|tag2|...") with the top bit cleared

Tags name the consumer, e.g. ``(shape_id, "scan")`` or
``("train", "epoch3")``, so adding a shape never shifts another
shape's randomness.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .model import ModelConfig, variant_config


def derive_seed(master: int, *tags) -> int:
    text = "|".join(str(t) for t in (master, *tags))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_at: float = 0.75  # fraction of epochs after which lr is multiplied by lr_decay
    batch_size: int = 64
    queries_per_shape: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        return self.lr * (self.lr_decay if epoch >= int(round(self.lr_decay_at * self.epochs)) else 1.0)


@dataclass(frozen=True)
class DatasetConfig:
    dataset_dir: str = "data"
    mesh_dir: str = ""  # empty: generate procedural solids
    num_shapes: int = 10
    shape_kinds: tuple = ("sphere", "box", "torus", "union")
    mesh_resolution: int = 48
    variants: tuple = ("var-noise",)
    image_width: int = 176
    image_height: int = 144


@dataclass(frozen=True)
class GridConfig:
    resolution: int = 128
    bound: float = 0.7  # unit cube plus room for 4 sigma of the strongest scan noise
    epsilon_cells: float = 3.0
    confidence: int = 13
    max_iterations: int = 1000
    dense: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    model_variant: str = "e_vanilla"
    train_variants: tuple = ("var-noise",)
    ablation_variants: tuple = ("e_vanilla", "k_large", "e_no_QSTN")
    ablation_datasets: tuple = ("max-noise",)
    eval_samples: int = 10000
    master_seed: int = 0
    output_dir: str = "runs"
    workers: int = 1

    def effective_model(self) -> ModelConfig:
        return variant_config(self.model_variant, self.model)


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig, "grid": GridConfig}


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw.strip()


def _section_values(obj) -> dict:
    return {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    run = {f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg) if f.name not in _SECTIONS}
    cp["run"] = run
    for name in _SECTIONS:
        cp[name] = _section_values(getattr(cfg, name))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _build(cls, values: dict, where: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kw = {k: _parse(v, getattr(defaults, k)) for k, v in values.items()}
    return replace(defaults, **kw)


def from_ini(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    unknown = set(cp.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(sorted(unknown))}")
    parts = {name: _build(cls, dict(cp[name]), name) for name, cls in _SECTIONS.items() if cp.has_section(name)}
    run = {}
    if cp.has_section("run"):
        top = {f.name: f for f in fields(ExperimentConfig) if f.name not in _SECTIONS}
        base = ExperimentConfig()
        for k, v in cp["run"].items():
            if k not in top:
                raise ValueError(f"[run] unknown key: {k}")
            run[k] = _parse(v, getattr(base, k))
    cfg = replace(ExperimentConfig(), **parts, **run)
    variant_config(cfg.model_variant, cfg.model)  # validates the name
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read())
