"""Experiment configuration files.

An experiment file is a JSON object with a required ``model`` section
(:class:`ffebm.model.ModelConfig`) and optional ``train``, ``data``,
``probe`` and ``splits`` sections.  Unknown top-level keys are rejected so
that typos surface as configuration errors.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from .data import DatasetSpec
from .errors import ConfigError
from .model import ModelConfig

ENGINE_ALIASES = {"ep": "ep_implicit", "ep-explicit": "ep_explicit", "id": "id",
                  "ep_implicit": "ep_implicit", "ep_explicit": "ep_explicit"}


@dataclass
class TrainRunConfig:
    epochs: int = 10
    batch_size: int = 128
    engine: str = "ep_implicit"
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 3e-4
    seed: int = 0
    checkpoint_every: int = 0  # in epochs; 0 writes only the final checkpoint
    eval_batch: int = 500
    log_wall_clock: bool = False  # True puts timings in the metrics log itself
    require_convergence: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.engine not in ENGINE_ALIASES:
            raise ConfigError(f"unknown engine {self.engine!r}")
        self.engine = ENGINE_ALIASES[self.engine]
        if self.lr <= 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be positive")


@dataclass
class ProbeConfig:
    """Inputs for gradient checks and GDU traces: a seeded random batch."""

    batch: int = 4
    seed: int = 0
    input_scale: float = 1.0
    fd_eps: float = 1e-4
    T: int = 20  # nudged-phase length of the GDU traces
    entries_per_tensor: int = 5


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    data_train: Optional[DatasetSpec] = None
    data_val: Optional[DatasetSpec] = None
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    splits: List[List[int]] = field(default_factory=list)
    split_seeds: List[int] = field(default_factory=lambda: [0])
    split_engines: List[str] = field(default_factory=lambda: ["ep_implicit"])

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("$schema", None)
        d.pop("description", None)
        known = {"model", "train", "data", "probe", "splits"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        if "model" not in d:
            raise ConfigError("config needs a 'model' section")
        model = ModelConfig.from_dict(d["model"])
        train = _build(TrainRunConfig, d.get("train", {}), "train")
        probe = _build(ProbeConfig, d.get("probe", {}), "probe")
        data = d.get("data", {})
        extra = set(data) - {"train", "val"}
        if extra:
            raise ConfigError(f"unknown data sections: {sorted(extra)}")
        dtr = DatasetSpec.from_dict(data["train"]) if "train" in data else None
        dva = DatasetSpec.from_dict(data["val"]) if "val" in data else None
        sp = d.get("splits", {})
        if isinstance(sp, list):
            sp = {"partitions": sp}
        engines = [ENGINE_ALIASES.get(e) for e in sp.get("engines", ["ep"])]
        if None in engines:
            raise ConfigError(f"unknown engine in splits.engines: {sp.get('engines')}")
        return cls(model, train, dtr, dva, probe, [list(map(int, p)) for p in sp.get("partitions", [])],
                   [int(s) for s in sp.get("seeds", [0])], engines)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self):
        out = {"model": self.model.to_dict(), "train": asdict(self.train),
               "probe": asdict(self.probe)}
        data = {}
        for key, spec in (("train", self.data_train), ("val", self.data_val)):
            if spec is not None:
                data[key] = asdict(spec)
        if data:
            out["data"] = data
        if self.splits:
            out["splits"] = {"partitions": self.splits, "seeds": self.split_seeds,
                             "engines": self.split_engines}
        return out


def _build(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from None
