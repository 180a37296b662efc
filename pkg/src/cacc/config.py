"""Experiment configuration: one JSON document drives every CLI stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapt import ABLATIONS, TrainConfig
from .dataset import BackgroundStyle, SynthConfig, source_config, target_config
from .density import DensityConfig
from .pcs import AnchorConfig, PCSTrainConfig


@dataclass
class Paths:
    source: str | None = None  # dataset dirs; default under the output dir
    target: str | None = None
    out: str = "runs"


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    source: SynthConfig = field(default_factory=source_config)
    target: SynthConfig = field(default_factory=target_config)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    pcs: PCSTrainConfig = field(default_factory=PCSTrainConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.source.domain != "source" or self.target.domain != "target":
            raise ValueError("the source and target generator configs must carry matching domain labels")

    def out_dir(self) -> Path:
        return Path(self.paths.out)

    def data_dir(self, domain) -> Path:
        given = getattr(self.paths, domain)
        return Path(given) if given else self.out_dir() / "data" / domain

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data):
    """Instantiate a (possibly nested) config dataclass from JSON data.

    Unknown keys are rejected; lists become tuples where the default is a tuple.
    """
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value)
        elif isinstance(current, tuple):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"source": source_config, "target": target_config}


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ValueError("experiment config must be a JSON object")
    data = dict(data)
    kwargs = {}
    for key, factory in _SECTIONS.items():
        # generator sections start from the domain preset, not the bare defaults
        if key in data:
            base = dataclasses.asdict(factory())
            override = data.pop(key)
            if not isinstance(override, dict):
                raise ValueError(f"{key}: expected an object")
            if "background" in override:
                base["background"] = {**base["background"], **override.pop("background")}
            base.update(override)
            kwargs[key] = _build(SynthConfig, base)
    partial = _build(ExperimentConfig, data)
    return dataclasses.replace(partial, **kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


__all__ = ["BackgroundStyle", "ExperimentConfig", "Paths", "from_dict", "load_config"]
