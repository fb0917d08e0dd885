"""Checkpoint files.

A checkpoint is an uncompressed ``.npz`` archive:

* ``__format__``: the string ``refinerec-checkpoint-v1``
* ``__meta__``: JSON string with ``{"config": ModelConfig fields, "num_items": int, ...}``
* ``param/<name>``: one float64 array per model parameter

Arrays are stored as raw float64, so a save/load round trip is bit-exact.
Training-state files written by :func:`refinerec.train.fit` use the same
container with extra ``best/``, ``adam_m/`` and ``adam_v/`` groups.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import ModelConfig, SeqRecModel
from .errors import ContractError

FORMAT = "refinerec-checkpoint-v1"


def write_archive(path, meta: dict, groups: dict[str, dict[str, np.ndarray]]) -> None:
    """Atomically write ``meta`` plus named array groups to ``path``."""
    path = Path(path)
    arrays = {"__format__": np.array(FORMAT), "__meta__": np.array(json.dumps(meta))}
    for group, named in groups.items():
        for name, arr in named.items():
            arrays[f"{group}/{name}"] = np.asarray(arr, dtype=np.float64)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_archive(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format__" not in z.files or str(z["__format__"]) != FORMAT:
            raise ContractError(f"{path} is not a {FORMAT} file")
        meta = json.loads(str(z["__meta__"]))
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key in z.files:
            if "/" in key:
                group, name = key.split("/", 1)
                groups.setdefault(group, {})[name] = z[key]
    return meta, groups


def save_checkpoint(path, model: SeqRecModel, extra: Optional[dict] = None) -> None:
    meta = {"config": model.config.to_dict(), "num_items": model.num_items}
    if extra:
        meta.update(extra)
    write_archive(path, meta, {"param": model.state_dict()})


def load_checkpoint(path) -> tuple[SeqRecModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    meta, groups = read_archive(path)
    model = SeqRecModel(ModelConfig.from_dict(meta["config"]), int(meta["num_items"]))
    model.load_state_dict(groups.get("param", {}))
    return model, meta
