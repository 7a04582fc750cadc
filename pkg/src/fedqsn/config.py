"""Experiment configuration: a strict, sectioned INI file.

Every key has a type and a default except ``model.input_dim``,
``model.output_dim`` and ``data.source``. Unknown sections or keys are
rejected so a typo can never silently leave a privacy knob at its default.

Example::

    [model]
    input_dim = 32
    output_dim = 8

    [data]
    source = synthetic

    [fed]
    p1 = 0.1
    p2 = 0.1
    bit_width = 2
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .data import SCHEMES, SYNTHETIC_KINDS, PartitionSpec
from .errors import FedQSNError, ParseError, ValidationError
from .models import ModelSpec
from .protocol import FedConfig
from .quantization import QuantConfig

SEED_ENV_VAR = "FEDQSN_MASTER_SEED"
EMIT_CHOICES = ("round_csv", "summary_json", "checkpoints")
REQUIRED = object()


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(item(part.strip()) for part in text.split(",") if part.strip())
    return parse


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "model": {
        "kind": (_str, "linear"),
        "input_dim": (int, REQUIRED),
        "output_dim": (int, REQUIRED),
        "hidden_dims": (_list(int), ()),
        "activation": (_str, "relu"),
        "loss": (_str, "mse"),
        "init_seed": (int, 0),
    },
    "data": {
        "source": (_str, REQUIRED),
        "kind": (_str, ""),  # empty: chosen from the model's loss
        "n_train": (int, 2000),
        "n_test": (int, 1000),
        "n_pretrain": (int, 200),
        "noise_std": (float, 0.1),
        "seed": (int, 0),
        "path": (_str, ""),
        "test_path": (_str, ""),
        "input_columns": (_list(_str), ()),
        "target_columns": (_list(_str), ()),
        "classification": (_bool, False),
        "test_fraction": (float, 0.2),
    },
    "partition": {
        "scheme": (_str, "iid"),
        "alpha": (float, 0.5),
        "weights": (_list(float), ()),
        "seed": (int, 0),
    },
    "pretrain": {
        "epochs": (int, 2),
        "learning_rate": (float, 0.3),
    },
    "fed": {
        "rounds": (int, 10),
        "clients_total": (int, 5),
        "clients_per_round": (int, 0),  # 0: all clients
        "p1": (float, 0.1),
        "p2": (float, 0.1),
        "quantize": (_bool, True),
        "bit_width": (int, 2),
        "block_size": (int, 256),
        "local_epochs": (int, 3),
        "learning_rate": (float, 0.3),
        "batch_size": (int, 16),
        "master_seed": (int, 0),
        "aggregation_mode": (_str, "full"),
        "secure_agg": (_bool, False),
        "reselect_each_round": (_bool, True),
    },
    "output": {
        "dir": (_str, ""),
        "emit": (_list(_str), EMIT_CHOICES),
    },
}


@dataclass(frozen=True)
class DataConfig:
    source: str
    kind: str = ""
    n_train: int = 2000
    n_test: int = 1000
    n_pretrain: int = 200
    noise_std: float = 0.1
    seed: int = 0
    path: str = ""
    test_path: str = ""
    input_columns: tuple[str, ...] = ()
    target_columns: tuple[str, ...] = ()
    classification: bool = False
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 2
    learning_rate: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    data: DataConfig
    partition: PartitionSpec
    fed: FedConfig
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    output_dir: Optional[Path] = None
    emit: frozenset = frozenset(EMIT_CHOICES)

    def to_dict(self) -> dict:
        """Canonical, JSON-ready view. ``output_dir`` is left out."""
        fed = asdict(self.fed)
        return {
            "model": asdict(self.model),
            "data": asdict(self.data),
            "partition": asdict(self.partition),
            "pretrain": asdict(self.pretrain),
            "fed": fed,
            "emit": sorted(self.emit),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_output_dir(self, path) -> "RunConfig":
        return replace(self, output_dir=Path(path))


def _read_sections(text: str, source: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc}") from None
    if parser.defaults():
        raise ParseError(f"{source}: keys outside any section: {sorted(parser.defaults())}", "DEFAULT")
    return {name: dict(parser.items(name)) for name in parser.sections()}


def _typed(sections: dict[str, dict[str, Any]], parse_text: bool = True) -> dict[str, dict[str, Any]]:
    out = {}
    for section in sections:
        if section not in SCHEMA:
            raise ParseError(f"unknown section [{section}]", section)
    for section, keys in SCHEMA.items():
        given = sections.get(section, {})
        for key in given:
            if key not in keys:
                raise ParseError(f"unknown key {section}.{key}", f"{section}.{key}")
        values = {}
        for key, (parse, default) in keys.items():
            if key in given and not parse_text:
                values[key] = given[key]
            elif key in given:
                try:
                    values[key] = parse(given[key])
                except ValueError as exc:
                    raise ParseError(f"{section}.{key}: {exc}", f"{section}.{key}") from None
            elif default is REQUIRED:
                raise ParseError(f"missing required key {section}.{key}", f"{section}.{key}")
            else:
                values[key] = default
        out[section] = values
    return out


def build_config(values: dict[str, dict[str, Any]], base_dir: Optional[Path] = None) -> RunConfig:
    """Validate typed section values into a RunConfig."""
    m, d, p, pre, f, o = (values[s] for s in ("model", "data", "partition", "pretrain", "fed", "output"))
    try:
        model = ModelSpec(**m)
        if d["source"] not in ("synthetic", "csv"):
            raise ValidationError(f"data.source must be 'synthetic' or 'csv', got {d['source']!r}")
        data = DataConfig(**d)
        if data.source == "synthetic":
            kind = data.kind or ("gaussian_clusters" if model.is_classifier else "linear_regression")
            if kind not in SYNTHETIC_KINDS:
                raise ValidationError(f"data.kind must be one of {SYNTHETIC_KINDS}")
            if (kind == "gaussian_clusters") != model.is_classifier:
                raise ValidationError(f"data.kind {kind!r} does not fit model.loss {model.loss!r}")
            data = replace(data, kind=kind)
            if data.n_train < f["clients_total"] or data.n_test < 1 or data.n_pretrain < 0:
                raise ValidationError("data sizes must cover every client and leave a test set")
        else:
            if not data.path or not data.input_columns or not data.target_columns:
                raise ValidationError("csv data needs path, input_columns and target_columns")
            if base_dir is not None:
                data = replace(data, path=str((base_dir / data.path).resolve()))
                if data.test_path:
                    data = replace(data, test_path=str((base_dir / data.test_path).resolve()))
            if not 0.0 < data.test_fraction < 1.0:
                raise ValidationError("data.test_fraction must be in (0, 1)")
        if p["scheme"] not in SCHEMES:
            raise ValidationError(f"partition.scheme must be one of {SCHEMES}")
        partition = PartitionSpec(num_clients=f["clients_total"], **p)
        pretrain = PretrainConfig(**pre)
        if pretrain.epochs < 0 or not pretrain.learning_rate > 0:
            raise ValidationError("pretrain.epochs must be >= 0 and pretrain.learning_rate > 0")

        fed_args = dict(f)
        quant = QuantConfig(fed_args.pop("bit_width"), fed_args.pop("block_size"))
        fed_args["quant"] = quant if fed_args.pop("quantize") else None
        if fed_args["clients_per_round"] == 0:
            fed_args["clients_per_round"] = fed_args["clients_total"]
        override = os.environ.get(SEED_ENV_VAR)
        if override:
            try:
                fed_args["master_seed"] = int(override)
            except ValueError:
                raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {override!r}") from None
        fed = FedConfig(**fed_args)

        emit = frozenset(o["emit"])
        bad = emit - set(EMIT_CHOICES)
        if bad:
            raise ValidationError(f"output.emit has unknown entries {sorted(bad)}")
    except ValidationError:
        raise
    except FedQSNError as exc:
        raise ValidationError(str(exc)) from None

    out_dir = Path(o["dir"]) if o["dir"] else None
    if out_dir is not None and base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return RunConfig(model, data, partition, fed, pretrain, out_dir, emit)


def parse_config_text(text: str, base_dir: Optional[Path] = None, source: str = "<config>") -> RunConfig:
    return build_config(_typed(_read_sections(text, source)), base_dir)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config_text(text, base_dir=path.parent, source=str(path))
    if cfg.output_dir is None:
        cfg = cfg.with_output_dir(path.parent / f"{path.stem}_out")
    return cfg


def config_from_dict(values: dict[str, dict[str, Any]]) -> RunConfig:
    """Build a RunConfig from already-typed values, filling schema defaults."""
    return build_config(_typed(values, parse_text=False))


def default_config(**overrides) -> RunConfig:
    """The default synthetic regression task (32 -> 8 linear model, 5 clients)."""
    values: dict[str, dict[str, Any]] = {"model": {"input_dim": 32, "output_dim": 8}, "data": {"source": "synthetic"}}
    for dotted, value in overrides.items():
        section, key = dotted.split("__", 1)
        values.setdefault(section, {})[key] = value
    return config_from_dict(values)
