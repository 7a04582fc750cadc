"""Named-parameter model state.

A :class:`ModelState` is an immutable, name-ordered collection of float32
numpy arrays plus a small string metadata map. Every protocol step
(masking, quantization, training, aggregation) consumes states and returns
fresh ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import ShapeMismatch

DTYPE = np.float32


@dataclass(frozen=True)
class ModelState:
    params: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.params):
            arr = np.array(self.params[name], dtype=DTYPE, copy=True)
            if arr.ndim == 0 or 0 in arr.shape:
                raise ShapeMismatch(f"parameter {name!r} must have positive extents, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            arr.setflags(write=False)
            ordered[name] = arr
        object.__setattr__(self, "params", ordered)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})

    @classmethod
    def _trusted(cls, params: dict[str, np.ndarray], meta: Mapping[str, str]) -> "ModelState":
        # Skips the copy/validation pass for arrays produced internally.
        obj = object.__new__(cls)
        ordered = {}
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=DTYPE)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            arr.setflags(write=False)
            ordered[name] = arr
        object.__setattr__(obj, "params", ordered)
        object.__setattr__(obj, "meta", dict(meta))
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def replace(self, params: Mapping[str, np.ndarray] | None = None, **meta: str) -> "ModelState":
        """Copy with some tensors and/or metadata entries swapped out."""
        new_params = dict(self.params)
        if params:
            new_params.update(params)
        new_meta = dict(self.meta)
        new_meta.update(meta)
        return ModelState(new_params, new_meta)

    def equals(self, other: "ModelState") -> bool:
        """Bit-exact equality of names, shapes and values (metadata ignored)."""
        if not compatible(self, other):
            return False
        return all(
            np.array_equal(self.params[k].view(np.uint32), other.params[k].view(np.uint32))
            for k in self.params
        )


def compatible(a: ModelState, b: ModelState) -> bool:
    return a.shapes() == b.shapes()


def check_compatible(a: ModelState, b: ModelState) -> None:
    if a.names() != b.names():
        raise ShapeMismatch(f"parameter names differ: {a.names()} vs {b.names()}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeMismatch(f"shape of {name!r} differs: {a[name].shape} vs {b[name].shape}")


def flatten(state: ModelState) -> np.ndarray:
    if not state.params:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate([v.ravel() for v in state.params.values()])


def unflatten(vector: np.ndarray, like: ModelState) -> ModelState:
    """Inverse of :func:`flatten` against the structure of ``like``."""
    vector = np.asarray(vector)
    if vector.size != like.num_params:
        raise ShapeMismatch(f"vector of length {vector.size} cannot fill {like.num_params} parameters")
    out, pos = {}, 0
    for name, arr in like.params.items():
        out[name] = vector[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return ModelState._trusted(out, like.meta)


def axpy(state_a: ModelState, alpha: float, state_b: ModelState) -> ModelState:
    """Return ``a + alpha * b`` tensor by tensor (float64 arithmetic, float32 result)."""
    check_compatible(state_a, state_b)
    alpha = float(alpha)
    out = {
        k: state_a[k].astype(np.float64) + alpha * state_b[k].astype(np.float64)
        for k in state_a
    }
    return ModelState._trusted(out, state_a.meta)


def scale(state: ModelState, alpha: float) -> ModelState:
    return ModelState._trusted(
        {k: v.astype(np.float64) * float(alpha) for k, v in state.params.items()}, state.meta
    )


def clone_structure(state: ModelState, fill: float) -> ModelState:
    return ModelState._trusted(
        {k: np.full(v.shape, fill, dtype=DTYPE) for k, v in state.params.items()}, state.meta
    )
