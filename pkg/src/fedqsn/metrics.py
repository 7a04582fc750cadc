"""Utility and privacy measurements for global and proxy models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ZeroVector
from .models import ModelSpec, _loss_and_output_grad, _check_batch, Batch, forward
from .tensor import ModelState, check_compatible, flatten

EVAL_CHUNK = 4096


def evaluate(state: ModelState, dataset, spec: ModelSpec) -> float:
    """Mean loss over every row of ``dataset``."""
    return evaluate_full(state, dataset, spec)[0]


def evaluate_full(state: ModelState, dataset, spec: ModelSpec) -> tuple[float, float | None]:
    """``(mean loss, accuracy)``; accuracy is None for regression models."""
    n = len(dataset.inputs)
    total_loss, hits = 0.0, 0
    for start in range(0, n, EVAL_CHUNK):
        batch = Batch(dataset.inputs[start : start + EVAL_CHUNK], dataset.targets[start : start + EVAL_CHUNK])
        _check_batch(batch, spec)
        out = forward(state, batch.inputs, spec)
        loss, _ = _loss_and_output_grad(out, batch.targets, spec)
        total_loss += loss * len(batch)
        if spec.is_classifier:
            hits += int((out.argmax(axis=1) == batch.targets).sum())
    accuracy = hits / n if spec.is_classifier else None
    return total_loss / n, accuracy


def cosine_similarity(a: ModelState, b: ModelState) -> float:
    check_compatible(a, b)
    x = flatten(a).astype(np.float64)
    y = flatten(b).astype(np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ZeroVector("cosine similarity is undefined for an all-zero model")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def gap_report(best_global: float, best_proxy: float, metric_kind: str = "loss") -> float:
    """Signed gap, positive when the global model is the better one."""
    if not (np.isfinite(best_global) and np.isfinite(best_proxy)):
        raise ValueError("gap needs finite metric values")
    if metric_kind == "loss":
        return float(best_proxy - best_global)
    if metric_kind == "accuracy":
        return float(best_global - best_proxy)
    raise ValueError(f"metric_kind must be 'loss' or 'accuracy', got {metric_kind!r}")


def best(values, metric_kind: str = "loss") -> float:
    values = [v for v in values if v is not None]
    return float(min(values) if metric_kind == "loss" else max(values))


@dataclass
class ClientEval:
    client_id: int
    loss: float
    accuracy: float | None
    cosine: float | None
    mask_fraction: float


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    global_loss: float
    global_accuracy: float | None
    proxies: list[ClientEval] = field(default_factory=list)
    server_mask_fraction: float = 0.0
    wall_time: float = 0.0

    @property
    def best_proxy_loss(self) -> float:
        return min(p.loss for p in self.proxies)

    @property
    def mean_cosine(self) -> float | None:
        vals = [p.cosine for p in self.proxies if p.cosine is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def gap(self) -> float:
        return gap_report(self.global_loss, self.best_proxy_loss, "loss")

    def csv_rows(self) -> list[dict]:
        """One row for the global model, then one per issued proxy."""
        rows = [{
            "round": self.round,
            "client_id": "global",
            "eval_loss": self.global_loss,
            "eval_acc": self.global_accuracy,
            "cosine_sim": 1.0,
            "realized_mask_frac": self.server_mask_fraction,
        }]
        for p in self.proxies:
            rows.append({
                "round": self.round,
                "client_id": p.client_id,
                "eval_loss": p.loss,
                "eval_acc": p.accuracy,
                "cosine_sim": p.cosine,
                "realized_mask_frac": p.mask_fraction,
            })
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        d = dict(d)
        d["proxies"] = [ClientEval(**p) for p in d.get("proxies", [])]
        return cls(**d)


ROUND_CSV_FIELDS = ("round", "client_id", "eval_loss", "eval_acc", "cosine_sim", "realized_mask_frac")
