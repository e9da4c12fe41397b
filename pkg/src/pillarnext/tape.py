"""Reverse-mode differentiation tape.

Differentiable values are plain numpy arrays; the tape identifies them by
object identity and keeps a reference to each, so an array's ``id`` stays
unique for the tape's lifetime. Parameters are leaves like any other array.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


@dataclass
class TapeEntry:
    name: str
    inputs: tuple[np.ndarray | None, ...]
    output: np.ndarray
    backward: Callable[["TapeEntry", np.ndarray], Sequence[np.ndarray | None]]
    ctx: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of differentiable operations.

    ``branch_digest`` fingerprints every non-smooth decision taken during the
    forward pass (relu masks, pooling argmax rows, |x| signs). Two forwards
    with equal digests ran through the same smooth piece of the function,
    which is what the finite-difference checker needs to know.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, np.ndarray] = {}
        self._branch = hashlib.blake2b(digest_size=16)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, name, inputs, output, backward, **ctx) -> TapeEntry:
        entry = TapeEntry(name, tuple(inputs), output, backward, ctx)
        self.entries.append(entry)
        for arr in (*inputs, output):
            if arr is not None:
                self._keep[id(arr)] = arr
        return entry

    def note_branch(self, decision: np.ndarray) -> None:
        self._branch.update(np.ascontiguousarray(decision).tobytes())

    @property
    def branch_digest(self) -> bytes:
        return self._branch.digest()

    def backward(self, output: np.ndarray, grad: np.ndarray | float = 1.0) -> None:
        """Propagate ``grad`` (d loss / d output) to every recorded input."""
        self._grads = {id(output): np.broadcast_to(np.asarray(grad, dtype=output.dtype),
                                                   output.shape).copy()}
        for entry in reversed(self.entries):
            g_out = self._grads.get(id(entry.output))
            if g_out is None:
                continue
            grads = entry.backward(entry, g_out)
            for arr, g in zip(entry.inputs, grads):
                if arr is None or g is None:
                    continue
                key = id(arr)
                if key in self._grads:
                    self._grads[key] = self._grads[key] + g
                else:
                    self._grads[key] = g

    def grad(self, arr: np.ndarray) -> np.ndarray:
        """Accumulated gradient of ``arr`` (zeros if it did not influence the output)."""
        g = self._grads.get(id(arr))
        return np.zeros_like(arr) if g is None else g
