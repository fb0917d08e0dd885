"""Run configuration for ``refinerec train``: a JSON file with these keys.

``data``      path to a prepared ``dataset.json`` (or the directory holding it)
``run_dir``   output directory
``model``     ModelConfig fields
``train``     TrainConfig fields
``eval_ns``   cut-offs reported on the test split
``eval_mode`` ``"full"`` or ``"sampled:k"`` for the final test report
``export``    ``{"enabled", "user", "layer", "head", "last"}`` attention export after training

Relative paths are resolved against the config file's directory. Unknown
keys at any level are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .backbone import ModelConfig
from .errors import ConfigError
from .evaluation import parse_mode
from .export import DEFAULT_LAST
from .train import TrainConfig


@dataclass(frozen=True)
class ExportOptions:
    enabled: bool = False
    user: Optional[str] = None
    layer: int = 0
    head: int = 0
    last: int = DEFAULT_LAST


@dataclass(frozen=True)
class RunConfig:
    data: str = "data/dataset.json"
    run_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_ns: tuple = (1, 5, 10, 20)
    eval_mode: str = "full"
    export: ExportOptions = field(default_factory=ExportOptions)

    def __post_init__(self):
        if not self.eval_ns or any(int(N) < 1 for N in self.eval_ns):
            raise ConfigError(f"eval_ns must be positive integers, got {list(self.eval_ns)}")
        parse_mode(self.eval_mode)

    def to_dict(self) -> dict:
        out = {"data": self.data, "run_dir": self.run_dir, "model": self.model.to_dict(),
               "train": asdict(self.train), "eval_ns": list(self.eval_ns),
               "eval_mode": self.eval_mode, "export": asdict(self.export)}
        return out

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown(raw, {f.name for f in fields(cls)}, "run config")
        export = raw.get("export", {})
        if not isinstance(export, dict):
            raise ConfigError("'export' must be an object")
        _reject_unknown(export, {f.name for f in fields(ExportOptions)}, "export")
        kwargs = dict(raw)
        kwargs["model"] = ModelConfig.from_dict(raw.get("model", {}))
        kwargs["train"] = TrainConfig.from_dict(raw.get("train", {}))
        kwargs["export"] = ExportOptions(**export)
        if "eval_ns" in raw:
            kwargs["eval_ns"] = tuple(int(N) for N in raw["eval_ns"])
        if base_dir is not None:
            for key in ("data", "run_dir"):
                if key in raw:
                    kwargs[key] = str(Path(base_dir) / raw[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base_dir=path.parent)


def _reject_unknown(raw: dict, allowed: set, where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
