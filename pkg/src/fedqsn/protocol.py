"""Masked, quantized federated training with proxy models.

One run looks like this:

1. ``server_init`` keeps the original model and hides a random subset of
   columns from every client (the server mask, ratio ``p1``).
2. Each round, ``select_clients`` picks ``C`` of ``N`` clients and
   ``make_proxy`` gives each of them its own proxy: a fresh client mask
   (ratio ``p2``) over the server model, snapped to a blockwise quantization
   grid.
3. Clients run local SGD on their proxy; ``aggregate`` (or
   ``secure_aggregate``) forms the next server model from the results,
   weighted by dataset size.
4. ``reconstruct_final`` copies the original values back into the
   server-masked columns.

With ``p1 = p2 = 0`` and no quantization this is plain FedAvg.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyUpdateSet, InvalidConfig, ShapeMismatch, ZeroVector
from .masking import Eligibility, MaskRecord, MaskSpec, apply_mask, compose_masks, draw_mask, weights_only
from .metrics import ClientEval, RoundReport, cosine_similarity, evaluate_full
from .models import DEFAULT_BATCH_SIZE, ModelSpec, local_train
from .quantization import QuantConfig, fake_quantize
from .seeding import derive_seed
from .tensor import ModelState, axpy, check_compatible, flatten

FULL_MODEL_AVERAGE = "full"
DELTA_AVERAGE = "delta"
AGGREGATION_MODES = (FULL_MODEL_AVERAGE, DELTA_AVERAGE)

DEFAULT_ROUNDS = 10
BIT_WIDTH_GRID = (1, 2, 3, 4)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = DEFAULT_ROUNDS
    clients_total: int = 5
    clients_per_round: int = 5
    p1: float = 0.1
    p2: float = 0.1
    quant: Optional[QuantConfig] = field(default_factory=QuantConfig)
    local_epochs: int = 3
    learning_rate: float = 0.3
    batch_size: int = DEFAULT_BATCH_SIZE
    master_seed: int = 0
    aggregation_mode: str = FULL_MODEL_AVERAGE
    secure_agg: bool = False
    reselect_each_round: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidConfig("rounds must be >= 1")
        if not 1 <= self.clients_per_round <= self.clients_total:
            raise InvalidConfig(
                f"need 1 <= clients_per_round <= clients_total, got {self.clients_per_round} of {self.clients_total}"
            )
        for name in ("p1", "p2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1), got {value}")
        if self.quant is not None and not isinstance(self.quant, QuantConfig):
            raise InvalidConfig("quant must be a QuantConfig or None")
        if self.local_epochs < 1:
            raise InvalidConfig("local_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise InvalidConfig(f"aggregation_mode must be one of {AGGREGATION_MODES}")


@dataclass(frozen=True)
class ServerState:
    global_model: ModelState
    original_model: ModelState
    server_mask: MaskRecord
    round: int = 0

    def equals(self, other: "ServerState") -> bool:
        return (
            self.round == other.round
            and self.global_model.equals(other.global_model)
            and self.original_model.equals(other.original_model)
            and self.server_mask.equals(other.server_mask)
        )


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    model: ModelState  # trained model, or trained minus proxy for delta mode
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


# --------------------------------------------------------------------------
# seeds
# --------------------------------------------------------------------------

def server_mask_seed(master_seed: int) -> int:
    return derive_seed(master_seed, "server-mask")


def client_mask_seed(master_seed: int, round: int, client_id: int) -> int:
    return derive_seed(master_seed, "client-mask", round, client_id)


def local_shuffle_seed(master_seed: int, round: int, client_id: int) -> int:
    return derive_seed(master_seed, "local-train", round, client_id)


# --------------------------------------------------------------------------
# protocol steps
# --------------------------------------------------------------------------

def server_init(model: ModelState, cfg: FedConfig, eligibility: Eligibility = weights_only) -> ServerState:
    if not isinstance(cfg, FedConfig):
        raise InvalidConfig("server_init needs a FedConfig")
    mask = draw_mask(model, MaskSpec.server(cfg.p1, server_mask_seed(cfg.master_seed)), eligibility)
    return ServerState(global_model=apply_mask(model, mask), original_model=model, server_mask=mask, round=0)


def select_clients(cfg: FedConfig, round: int) -> list[int]:
    """Client ids taking part in ``round``, ascending."""
    if cfg.clients_per_round == cfg.clients_total:
        return list(range(cfg.clients_total))
    key = round if cfg.reselect_each_round else 0
    gen = np.random.default_rng(derive_seed(cfg.master_seed, "select", key))
    picked = gen.choice(cfg.clients_total, size=cfg.clients_per_round, replace=False)
    return sorted(int(c) for c in picked)


def make_proxy(server: ServerState, client_id: int, round: int, cfg: FedConfig) -> tuple[ModelState, MaskRecord]:
    # Client masks cover exactly the tensors the server mask covers.
    spec = MaskSpec.client(cfg.p2, client_mask_seed(cfg.master_seed, round, client_id), client_id, round)
    eligible = set(server.server_mask.keep)
    client_mask = draw_mask(server.global_model, spec, lambda name, _t: name in eligible)
    proxy = apply_mask(server.global_model, client_mask)
    if cfg.quant is not None:
        proxy = fake_quantize(proxy, cfg.quant)
    return proxy, client_mask


def _canonical(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered[1:]:
        check_compatible(ordered[0].model, u.model)
    return ordered


def aggregation_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    sizes = np.array([u.sample_count for u in updates], dtype=np.float64)
    return sizes / sizes.sum()


def _finish(acc: dict[str, np.ndarray], previous: Optional[ModelState], mode: str, like: ModelState) -> ModelState:
    if mode == FULL_MODEL_AVERAGE:
        return ModelState._trusted(acc, like.meta)
    if mode == DELTA_AVERAGE:
        if previous is None:
            raise ValueError("delta aggregation needs the previous global model")
        check_compatible(previous, like)
        return ModelState._trusted({k: previous[k].astype(np.float64) + acc[k] for k in acc}, previous.meta)
    raise InvalidConfig(f"unknown aggregation mode {mode!r}")


def aggregate(
    updates: Sequence[ClientUpdate],
    previous: Optional[ModelState] = None,
    mode: str = FULL_MODEL_AVERAGE,
) -> ModelState:
    """Dataset-size weighted average of client models (or of deltas added to ``previous``)."""
    ordered = _canonical(updates)
    weights = aggregation_weights(ordered)
    first = ordered[0].model
    acc = {k: np.zeros(v.shape, dtype=np.float64) for k, v in first.params.items()}
    for w, u in zip(weights, ordered):
        for k in acc:
            acc[k] += w * u.model[k].astype(np.float64)
    return _finish(acc, previous, mode, first)


def pair_seed_matrix(master_seed: int, round: int, client_ids: Sequence[int]) -> np.ndarray:
    """Shared pairwise seeds; entry ``[i, j]`` (i < j) is the seed clients i and j agree on."""
    ids = sorted(client_ids)
    seeds = np.zeros((len(ids), len(ids)), dtype=np.uint64)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            seeds[a, b] = seeds[b, a] = derive_seed(master_seed, "secagg", round, ids[a], ids[b])
    return seeds


def _prg(seed, size: int, mask_scale: float) -> np.ndarray:
    return np.random.default_rng(int(seed)).uniform(-mask_scale, mask_scale, size=size)


def masked_contributions(
    updates: Sequence[ClientUpdate],
    pair_seeds: np.ndarray,
    mask_scale: float = 10.0,
) -> list[np.ndarray]:
    """What each client would actually send: its weighted flat model plus pairwise masks.

    Client ``i`` adds ``PRG(s_ij)`` for every ``j > i`` and subtracts
    ``PRG(s_ji)`` for every ``j < i``, so the masks cancel in the sum.
    ``pair_seeds`` is indexed by position in the client-id-sorted update list.
    """
    ordered = _canonical(updates)
    k = len(ordered)
    if pair_seeds.shape != (k, k):
        raise ShapeMismatch(f"pair seed matrix must be {k}x{k}, got {pair_seeds.shape}")
    weights = aggregation_weights(ordered)
    size = ordered[0].model.num_params
    out = []
    for i, (w, u) in enumerate(zip(weights, ordered)):
        masked = w * flatten(u.model).astype(np.float64)
        for j in range(k):
            if j > i:
                masked += _prg(pair_seeds[i, j], size, mask_scale)
            elif j < i:
                masked -= _prg(pair_seeds[j, i], size, mask_scale)
        out.append(masked)
    return out


def secure_aggregate(
    updates: Sequence[ClientUpdate],
    pair_seeds: np.ndarray,
    previous: Optional[ModelState] = None,
    mode: str = FULL_MODEL_AVERAGE,
    mask_scale: float = 10.0,
) -> ModelState:
    """Same result as :func:`aggregate`, but the server only ever sees masked vectors."""
    ordered = _canonical(updates)
    if len(ordered) < 2:
        raise EmptyUpdateSet("secure aggregation needs at least two clients")
    total = np.sum(masked_contributions(ordered, pair_seeds, mask_scale), axis=0)
    like = ordered[0].model
    acc, pos = {}, 0
    for name, arr in like.params.items():
        acc[name] = total[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return _finish(acc, previous, mode, like)


def client_step(
    server: ServerState,
    client_id: int,
    dataset,
    round: int,
    cfg: FedConfig,
    spec: ModelSpec,
) -> tuple[ClientUpdate, ModelState, MaskRecord]:
    """Build the proxy for one client and train it. Returns (update, proxy, client mask)."""
    proxy, client_mask = make_proxy(server, client_id, round, cfg)
    trained = local_train(
        proxy,
        dataset,
        spec,
        epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.learning_rate,
        shuffle_seed=local_shuffle_seed(cfg.master_seed, round, client_id),
    )
    if cfg.aggregation_mode == DELTA_AVERAGE:
        trained = axpy(trained, -1.0, proxy)
    return ClientUpdate(client_id, trained, len(dataset.inputs)), proxy, client_mask


def run_round(
    server: ServerState,
    datasets: Sequence,
    cfg: FedConfig,
    spec: ModelSpec,
    round: Optional[int] = None,
    eval_set=None,
) -> tuple[ServerState, RoundReport]:
    """Advance the server by one round.

    ``datasets[c]`` is client ``c``'s local data; ``round`` defaults to
    ``server.round + 1``. Metrics need ``eval_set``; without it the report
    carries NaN losses.
    """
    started = time.perf_counter()
    if len(datasets) != cfg.clients_total:
        raise InvalidConfig(f"expected {cfg.clients_total} client datasets, got {len(datasets)}")
    t = server.round + 1 if round is None else round
    selected = select_clients(cfg, t)

    updates, issued = [], []
    for c in selected:
        update, proxy, client_mask = client_step(server, c, datasets[c], t, cfg, spec)
        updates.append(update)
        issued.append((c, proxy, client_mask))

    previous = server.global_model
    if cfg.secure_agg and len(updates) >= 2:
        new_global = secure_aggregate(updates, pair_seed_matrix(cfg.master_seed, t, selected), previous, cfg.aggregation_mode)
    else:
        new_global = aggregate(updates, previous, cfg.aggregation_mode)
    new_server = replace(server, global_model=new_global, round=t)

    proxies = []
    g_loss, g_acc = (float("nan"), None) if eval_set is None else evaluate_full(new_global, eval_set, spec)
    for c, proxy, client_mask in issued:
        loss, acc = (float("nan"), None) if eval_set is None else evaluate_full(proxy, eval_set, spec)
        try:
            cos = cosine_similarity(previous, proxy)
        except ZeroVector:
            cos = None
        frac = compose_masks(server.server_mask, client_mask).drop_fraction()
        proxies.append(ClientEval(c, loss, acc, cos, frac))
    report = RoundReport(
        round=t,
        selected=list(selected),
        global_loss=g_loss,
        global_accuracy=g_acc,
        proxies=proxies,
        server_mask_fraction=server.server_mask.drop_fraction(),
        wall_time=time.perf_counter() - started,
    )
    return new_server, report


def reconstruct_final(server: ServerState, rescale: bool = True) -> ModelState:
    """Merge the trained model with the retained original.

    Server-masked columns take the original values; every other position
    keeps the trained value, multiplied by ``1 - p1`` when ``rescale`` is set
    to undo the mask amplification.
    """
    mask = server.server_mask
    factor = np.float64(mask.amplification)
    out = {}
    for name, trained in server.global_model.params.items():
        values = trained.astype(np.float64)
        if name in mask.keep:
            if rescale:
                values = values / factor
            dropped = ~mask.keep[name]
            values[..., dropped] = server.original_model[name][..., dropped]
        out[name] = values
    return ModelState._trusted(out, server.original_model.meta)


def never_visible_fraction(server: ServerState, cfg: FedConfig, rounds: int) -> float:
    """Share of server-kept columns that no client mask exposed in rounds ``1..rounds``."""
    seen = {name: np.zeros(bits.size, dtype=bool) for name, bits in server.server_mask.keep.items()}
    eligible = set(seen)
    for t in range(1, rounds + 1):
        for c in select_clients(cfg, t):
            spec = MaskSpec.client(cfg.p2, client_mask_seed(cfg.master_seed, t, c), c, t)
            record = draw_mask(server.global_model, spec, lambda name, _t: name in eligible)
            for name in seen:
                seen[name] |= record.keep[name]
    kept = sum(int(b.sum()) for b in server.server_mask.keep.values())
    if kept == 0:
        return 0.0
    hidden = sum(int((server.server_mask.keep[n] & ~seen[n]).sum()) for n in seen)
    return hidden / kept


# --------------------------------------------------------------------------
# baseline
# --------------------------------------------------------------------------

def fedavg(
    model: ModelState,
    datasets: Sequence,
    cfg: FedConfig,
    spec: ModelSpec,
) -> list[ModelState]:
    """Plain FedAvg with the same client selection and shuffle seeds.

    Returns the trajectory ``[W_0, ..., W_R]``. Masking, quantization and
    secure aggregation settings in ``cfg`` are ignored.
    """
    trajectory = [model]
    current = model
    for t in range(1, cfg.rounds + 1):
        updates = []
        for c in select_clients(cfg, t):
            trained = local_train(
                current, datasets[c], spec, cfg.local_epochs, cfg.batch_size, cfg.learning_rate,
                local_shuffle_seed(cfg.master_seed, t, c),
            )
            if cfg.aggregation_mode == DELTA_AVERAGE:
                trained = axpy(trained, -1.0, current)
            updates.append(ClientUpdate(c, trained, len(datasets[c].inputs)))
        current = aggregate(updates, current, cfg.aggregation_mode)
        trajectory.append(current)
    return trajectory
