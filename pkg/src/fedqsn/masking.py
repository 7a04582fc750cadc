"""Column-wise random masking with inverse-keep-probability rescaling.

Each eligible tensor has its last axis (the output columns of a
``(fan_in, fan_out)`` weight) split into kept and dropped columns. Dropped
columns become exactly zero; kept ones are amplified by ``1 / (1 - p)`` so
the masked tensor is unbiased for the original.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .seeding import derive_seed
from .tensor import ModelState

Eligibility = Callable[[str, np.ndarray], bool]

#: Default search grid for mask ratios.
MASK_RATIO_GRID = (0.05, 0.1, 0.15, 0.2)


def weights_only(name: str, tensor: np.ndarray) -> bool:
    """Default eligibility: mask 2-D weights, leave biases alone."""
    return tensor.ndim == 2


def everything(name: str, tensor: np.ndarray) -> bool:
    return True


@dataclass(frozen=True)
class MaskSpec:
    p: float
    seed: int
    scope: str = "server"
    client_id: Optional[int] = None
    round: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.p < 1.0):
            raise InvalidConfig(f"mask ratio must lie in [0, 1), got {self.p}")
        if self.scope not in ("server", "client", "composed"):
            raise InvalidConfig(f"unknown mask scope {self.scope!r}")
        if self.scope == "client" and (self.client_id is None or self.round is None):
            raise InvalidConfig("client masks need client_id and round")

    @classmethod
    def server(cls, p: float, seed: int) -> "MaskSpec":
        return cls(p=p, seed=seed, scope="server")

    @classmethod
    def client(cls, p: float, seed: int, client_id: int, round: int) -> "MaskSpec":
        return cls(p=p, seed=seed, scope="client", client_id=client_id, round=round)


@dataclass(frozen=True)
class MaskRecord:
    """Per-tensor keep bitmaps over the last axis.

    ``amplification`` is the factor applied to kept columns: ``1/(1-p)`` for a
    single draw, the product of both factors after :func:`compose_masks`.
    """

    keep: dict[str, np.ndarray]
    amplification: float
    specs: tuple[MaskSpec, ...] = field(default=())

    def __post_init__(self):
        keep = {}
        for name in sorted(self.keep):
            bits = np.array(self.keep[name], dtype=bool).ravel()
            bits.setflags(write=False)
            keep[name] = bits
        object.__setattr__(self, "keep", keep)

    @property
    def ratio(self) -> float:
        """Nominal drop ratio ``1 - 1/amplification``."""
        return 1.0 - 1.0 / self.amplification

    def dropped(self, name: str) -> np.ndarray:
        return ~self.keep[name]

    def drop_fraction(self) -> float:
        """Realized fraction of dropped columns over all masked tensors."""
        total = sum(b.size for b in self.keep.values())
        if total == 0:
            return 0.0
        return float(sum(int((~b).sum()) for b in self.keep.values()) / total)

    def equals(self, other: "MaskRecord") -> bool:
        return (
            self.amplification == other.amplification
            and self.keep.keys() == other.keep.keys()
            and all(np.array_equal(self.keep[k], other.keep[k]) for k in self.keep)
        )


def _column_uniforms(seed: int, name: str, n_cols: int) -> np.ndarray:
    # Column j only ever consumes the j-th variate of this tensor's own stream,
    # so decisions are fixed by (seed, name, j).
    gen = np.random.default_rng(derive_seed(seed, "mask", name))
    return gen.random(n_cols)


def draw_mask(
    state: ModelState,
    spec: MaskSpec,
    eligibility: Eligibility = weights_only,
) -> MaskRecord:
    keep = {}
    for name, tensor in state.params.items():
        if not eligibility(name, tensor):
            continue
        n_cols = tensor.shape[-1]
        if spec.p == 0.0:
            keep[name] = np.ones(n_cols, dtype=bool)
        else:
            keep[name] = _column_uniforms(spec.seed, name, n_cols) >= spec.p
    return MaskRecord(keep=keep, amplification=1.0 / (1.0 - spec.p), specs=(spec,))


def _check_record(state: ModelState, record: MaskRecord) -> None:
    for name, bits in record.keep.items():
        if name not in state.params:
            raise ShapeMismatch(f"mask covers unknown tensor {name!r}")
        if state[name].shape[-1] != bits.size:
            raise ShapeMismatch(
                f"mask for {name!r} has {bits.size} columns, tensor has {state[name].shape[-1]}"
            )


def apply_mask(state: ModelState, record: MaskRecord) -> ModelState:
    _check_record(state, record)
    if record.amplification == 1.0 and all(b.all() for b in record.keep.values()):
        return state
    out = dict(state.params)
    factor = np.float64(record.amplification)
    for name, bits in record.keep.items():
        w = state[name].astype(np.float64) * factor
        w[..., ~bits] = 0.0
        out[name] = w
    return ModelState._trusted(out, state.meta)


def compose_masks(server: MaskRecord, client: MaskRecord) -> MaskRecord:
    """Drop a column iff either record drops it; amplifications multiply."""
    if server.keep.keys() != client.keep.keys():
        raise ShapeMismatch("mask records cover different tensors")
    keep = {}
    for name in server.keep:
        a, b = server.keep[name], client.keep[name]
        if a.size != b.size:
            raise ShapeMismatch(f"mask widths differ for {name!r}: {a.size} vs {b.size}")
        keep[name] = a & b
    return MaskRecord(
        keep=keep,
        amplification=server.amplification * client.amplification,
        specs=server.specs + client.specs,
    )


def empty_mask(state: ModelState, eligibility: Eligibility = weights_only) -> MaskRecord:
    """A record that keeps every column; the identity for :func:`compose_masks`."""
    return draw_mask(state, MaskSpec.server(0.0, 0), eligibility)
