"""Experiment orchestration: data, pre-training, rounds, artifacts."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import read_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, gen_synthetic, load_csv, partition
from .errors import InvalidAxis, ValidationError
from .metrics import ROUND_CSV_FIELDS, RoundReport, best, evaluate_full, gap_report
from .models import init_model, local_train
from .protocol import reconstruct_final, run_round, server_init
from .quantization import QuantConfig
from .seeding import derive_seed
from .tensor import ModelState

log = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"
ROUNDS_FILE = "rounds.csv"
FAILURE_FILE = "failure.json"
CHECKPOINT_DIR = "checkpoints"

SWEEP_AXES = {
    "bit_width": "bit_width",
    "omega": "bit_width",
    "p1": "p1",
    "p2": "p2",
    "local_epochs": "local_epochs",
    "E": "local_epochs",
    "learning_rate": "learning_rate",
    "eta": "learning_rate",
    "clients_per_round": "clients_per_round",
    "C": "clients_per_round",
}


@dataclass
class Workload:
    train: Dataset
    test: Dataset
    pretrain: Optional[Dataset]
    clients: list


@dataclass
class RunSummary:
    config_hash: str
    rounds: int
    best_global: float
    best_proxy: float
    gap: float
    final_cosine: Optional[float]
    global_loss: list[float]
    best_proxy_loss: list[float]
    mean_cosine: list[Optional[float]]
    round_gap: list[float]
    reconstructed_loss: float
    reconstructed_loss_unscaled: float
    global_accuracy: list[Optional[float]] = field(default_factory=list)
    best_proxy_accuracy: list[Optional[float]] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_seconds")
        return d

    def to_json(self) -> str:
        """Deterministic JSON without runtime fields."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunSummary":
        path = Path(path)
        summary = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        timing = path.with_name(TIMING_FILE)
        if timing.exists():
            summary.runtime_seconds = json.loads(timing.read_text())["runtime_seconds"]
        return summary


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def build_workload(cfg: RunConfig) -> Workload:
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        def draw(n, tag):
            return gen_synthetic(d.kind, n, m.input_dim, m.output_dim, d.noise_std,
                                 seed=derive_seed(d.seed, tag), task_seed=d.seed)
        train, test = draw(d.n_train, "train"), draw(d.n_test, "test")
        pretrain = draw(d.n_pretrain, "pretrain") if d.n_pretrain > 0 else None
    else:
        full = load_csv(d.path, d.input_columns, d.target_columns, d.classification)
        if d.test_path:
            test = load_csv(d.test_path, d.input_columns, d.target_columns, d.classification)
            rest = full
        else:
            n_test = max(1, int(round(full.size * d.test_fraction)))
            test, rest = full.split([n_test, full.size - n_test], seed=d.seed)
        n_pre = min(d.n_pretrain, rest.size - cfg.fed.clients_total)
        if n_pre > 0:
            pretrain, train = rest.split([n_pre, rest.size - n_pre], seed=derive_seed(d.seed, "pretrain"))
        else:
            pretrain, train = None, rest
    if train.size < cfg.fed.clients_total:
        raise ValidationError(f"{train.size} training rows cannot cover {cfg.fed.clients_total} clients")
    return Workload(train, test, pretrain, partition(train, cfg.partition))


def initial_model(cfg: RunConfig, work: Workload) -> ModelState:
    """Fresh model, optionally pre-trained on the server's held-out split."""
    model = init_model(cfg.model)
    if work.pretrain is not None and cfg.pretrain.epochs > 0:
        model = local_train(
            model, work.pretrain, cfg.model, cfg.pretrain.epochs, cfg.fed.batch_size,
            cfg.pretrain.learning_rate, derive_seed(cfg.fed.master_seed, "pretrain"),
        )
    return model


def summarize(cfg: RunConfig, history: Sequence[RoundReport], final_server, test: Dataset, runtime: float) -> RunSummary:
    global_loss = [r.global_loss for r in history]
    proxy_loss = [r.best_proxy_loss for r in history]
    best_global = best(global_loss, "loss")
    best_proxy = best(proxy_loss, "loss")
    classifier = cfg.model.is_classifier
    rec, _ = evaluate_full(reconstruct_final(final_server, True), test, cfg.model)
    rec_raw, _ = evaluate_full(reconstruct_final(final_server, False), test, cfg.model)
    return RunSummary(
        config_hash=cfg.config_hash(),
        rounds=len(history),
        best_global=best_global,
        best_proxy=best_proxy,
        gap=gap_report(best_global, best_proxy, "loss"),
        final_cosine=history[-1].mean_cosine if history else None,
        global_loss=global_loss,
        best_proxy_loss=proxy_loss,
        mean_cosine=[r.mean_cosine for r in history],
        round_gap=[r.gap for r in history],
        reconstructed_loss=rec,
        reconstructed_loss_unscaled=rec_raw,
        global_accuracy=[r.global_accuracy for r in history] if classifier else [],
        best_proxy_accuracy=[max(p.accuracy for p in r.proxies) for r in history] if classifier else [],
        runtime_seconds=runtime,
    )


def _write_round_csv(path: Path, history: Sequence[RoundReport]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUND_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for report in history:
            for row in report.csv_rows():
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def checkpoint_path(output_dir: Path, round: int) -> Path:
    return output_dir / CHECKPOINT_DIR / f"round_{round:03d}.ckpt"


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------

def run_experiment(cfg: RunConfig, resume_from=None, write: bool = True) -> RunSummary:
    """Run (or resume) one experiment and write its artifacts.

    Artifacts land in ``cfg.output_dir``: ``summary.json`` (deterministic),
    ``timing.json`` (runtime only), ``rounds.csv`` and per-round checkpoints,
    as selected by ``cfg.emit``. On failure a ``failure.json`` record is
    written before the exception propagates.
    """
    out = Path(cfg.output_dir) if (write and cfg.output_dir is not None) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        return _run(cfg, out, resume_from)
    except Exception as exc:
        if out is not None:
            record = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
            (out / FAILURE_FILE).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        raise


def _run(cfg: RunConfig, out: Optional[Path], resume_from) -> RunSummary:
    started = time.perf_counter()
    work = build_workload(cfg)
    config_hash = cfg.config_hash()

    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        if ckpt.config_hash != config_hash:
            raise ValidationError(f"checkpoint belongs to config {ckpt.config_hash[:12]}, not {config_hash[:12]}")
        server = ckpt.state
        history = [RoundReport.from_dict(r) for r in ckpt.extras.get("history", [])]
        log.info("resuming from round %d", server.round)
    else:
        server = server_init(initial_model(cfg, work), cfg.fed)
        history = []
        if out is not None and "checkpoints" in cfg.emit:
            (out / CHECKPOINT_DIR).mkdir(exist_ok=True)
            save_checkpoint(server, checkpoint_path(out, 0), config_hash, {"history": []})

    while server.round < cfg.fed.rounds:
        server, report = run_round(server, work.clients, cfg.fed, cfg.model, eval_set=work.test)
        history.append(report)
        log.info("round %d: global %.5g, best proxy %.5g", report.round, report.global_loss, report.best_proxy_loss)
        if out is not None and "checkpoints" in cfg.emit:
            (out / CHECKPOINT_DIR).mkdir(exist_ok=True)
            extras = {"history": [r.to_dict() for r in history]}
            save_checkpoint(server, checkpoint_path(out, server.round), config_hash, extras)

    summary = summarize(cfg, history, server, work.test, time.perf_counter() - started)
    if out is not None:
        if "summary_json" in cfg.emit:
            (out / SUMMARY_FILE).write_text(summary.to_json(), encoding="utf-8")
            (out / TIMING_FILE).write_text(json.dumps({"runtime_seconds": summary.runtime_seconds}) + "\n")
        if "round_csv" in cfg.emit:
            _write_round_csv(out / ROUNDS_FILE, history)
    return summary


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Same experiment under a different seed: data, init, partition and protocol."""
    return replace(
        cfg,
        model=replace(cfg.model, init_seed=seed),
        data=replace(cfg.data, seed=seed),
        partition=replace(cfg.partition, seed=seed),
        fed=replace(cfg.fed, master_seed=seed),
    )


def with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise InvalidAxis(f"cannot sweep {axis!r}; choose from {sorted(set(SWEEP_AXES))}")
    target = SWEEP_AXES[axis]
    fed = cfg.fed
    if target == "bit_width":
        block = fed.quant.block_size if fed.quant is not None else QuantConfig().block_size
        fed = replace(fed, quant=QuantConfig(int(value), block))
    elif target in ("local_epochs", "clients_per_round"):
        fed = replace(fed, **{target: int(value)})
    else:
        fed = replace(fed, **{target: float(value)})
    return replace(cfg, fed=fed)


SWEEP_CSV_FIELDS = ("axis", "value", "best_global", "best_proxy", "gap", "final_cosine",
                    "reconstructed_loss", "reconstructed_loss_unscaled")


def sweep(cfg: RunConfig, axis: str, values: Sequence, write: bool = True) -> list[RunSummary]:
    """One run per value of ``axis`` with every seed held fixed.

    Each run writes into ``<output_dir>/<axis>=<value>/``; a combined
    ``sweep_<axis>.csv`` goes in ``output_dir``.
    """
    if axis not in SWEEP_AXES:
        raise InvalidAxis(f"cannot sweep {axis!r}; choose from {sorted(set(SWEEP_AXES))}")
    if not values:
        return []
    points = [with_axis(cfg, axis, v) for v in values]
    summaries = []
    for value, point in zip(values, points):
        if write and cfg.output_dir is not None:
            point = point.with_output_dir(Path(cfg.output_dir) / f"{axis}={value}")
        summaries.append(run_experiment(point, write=write))
    if write and cfg.output_dir is not None:
        path = Path(cfg.output_dir) / f"sweep_{axis}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_CSV_FIELDS)
            for value, s in zip(values, summaries):
                writer.writerow([axis, value, repr(s.best_global), repr(s.best_proxy), repr(s.gap),
                                 "" if s.final_cosine is None else repr(s.final_cosine),
                                 repr(s.reconstructed_loss), repr(s.reconstructed_loss_unscaled)])
    return summaries


COMPARE_FIELDS = ("best_global", "best_proxy", "gap", "final_cosine", "reconstructed_loss", "reconstructed_loss_unscaled")


def compare(a: RunSummary, b: RunSummary) -> dict[str, dict]:
    """Field-by-field comparison of two summaries' headline metrics."""
    rows = {}
    for name in COMPARE_FIELDS:
        va, vb = getattr(a, name), getattr(b, name)
        diff = None if va is None or vb is None else vb - va
        rows[name] = {"a": va, "b": vb, "diff": diff}
    rows["same_config"] = {"a": a.config_hash, "b": b.config_hash, "diff": a.config_hash == b.config_hash}
    return rows
