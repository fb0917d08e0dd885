"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# relative error = |tape - fd| / max(|tape|, |fd|, REL_FLOOR); the floor keeps
# O(1e-10) difference noise on vanishing gradients from reading as large errors
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    names: list[str]
    rel_errors: np.ndarray
    tape: np.ndarray
    numeric: np.ndarray

    @property
    def worst(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    def fraction_within(self, tol: float) -> float:
        return float(np.mean(self.rel_errors <= tol)) if self.rel_errors.size else 1.0


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences; ``t.data`` is restored afterwards."""
    base = t.data
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * h
                t.data = bumped.reshape(base.shape)
                out.reshape(-1)[i] += sign * fn().item()
    t.data = base
    return out / (2.0 * h)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    names: Sequence[str] = ()) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` w.r.t. ``tensors`` with finite differences."""
    for t in tensors:
        t.zero_grad()
    fn().backward()
    tape, numeric, labels = [], [], []
    for k, t in enumerate(tensors):
        g = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        tape.append(g.reshape(-1))
        numeric.append(numeric_grad(fn, t, h).reshape(-1))
        label = names[k] if k < len(names) else getattr(t, "name", f"t{k}")
        labels.extend(f"{label}[{i}]" for i in range(t.data.size))
    tape_arr = np.concatenate(tape) if tape else np.zeros(0)
    num_arr = np.concatenate(numeric) if numeric else np.zeros(0)
    return GradCheckResult(labels, relative_error(tape_arr, num_arr), tape_arr, num_arr)
