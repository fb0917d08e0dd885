"""Attention-matrix export: CSV matrices plus 8-bit grayscale images.

For one user the model encodes the user's most recent ``last`` items (the
history used for test prediction) and writes, for the requested layer/head,
the bottom-right ``last x last`` block of

* ``A.csv`` / ``A.png``: first-level scores, disallowed entries set to 0
* ``B.csv`` / ``B.png``: refined scores (only when a mechanism is active)
* ``weights.csv`` / ``weights.png``: final row-stochastic attention weights

Images map each matrix linearly onto 0..255 by its own min and max (a
constant matrix maps to 0); one pixel per entry, so images are ``last x last``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .backbone import SeqRecModel
from .data import SplitDataset, left_pad
from .errors import ConfigError

DEFAULT_LAST = 15


def to_grayscale(M: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(M)), float(np.max(M))
    if hi <= lo:
        return np.zeros(M.shape, dtype=np.uint8)
    return np.round((M - lo) / (hi - lo) * 255.0).astype(np.uint8)


def attention_matrices(model: SeqRecModel, history: list[int], layer: int = 0, head: int = 0,
                       last: int = DEFAULT_LAST) -> dict[str, np.ndarray]:
    c = model.config
    if not 0 <= layer < c.layers or not 0 <= head < c.heads:
        raise ConfigError(f"layer/head ({layer}, {head}) out of range for {c.layers} layers, {c.heads} heads")
    if not 1 <= last <= c.n:
        raise ConfigError(f"last must lie in [1, n={c.n}], got {last}")
    inputs = left_pad(history[-last:], c.n)[None]
    enc = model.encode(inputs, record=True)
    rec = next(r for r in enc.records if r.layer == layer and r.head == head)
    window = slice(c.n - last, c.n)
    out = {"A": rec.A[0, window, window], "weights": rec.weights[0, window, window]}
    if rec.B is not None:
        out["B"] = rec.B[0, window, window]
    return out


def export_attention(model: SeqRecModel, split: SplitDataset, user_id: str, out_dir,
                     layer: int = 0, head: int = 0, last: int = DEFAULT_LAST,
                     target: str = "test") -> dict[str, Path]:
    """Write CSVs and PNGs for one user; returns the written paths by name."""
    history = split.history(split.row_of_user(user_id), target)
    mats = attention_matrices(model, history, layer, head, last)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for name, M in mats.items():
        csv_path, png_path = out_dir / f"{name}.csv", out_dir / f"{name}.png"
        np.savetxt(csv_path, M, delimiter=",", fmt="%.17g")
        Image.fromarray(to_grayscale(M)).save(png_path)
        written[f"{name}.csv"], written[f"{name}.png"] = csv_path, png_path
    return written


def read_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def default_user(split: SplitDataset, last: int) -> Optional[str]:
    """First user whose test-time history fills the whole window."""
    for row, u in enumerate(split.users):
        if len(split.history(row, "test")) >= last:
            return split.user_ids[u]
    return split.user_ids[split.users[0]] if split.users else None
