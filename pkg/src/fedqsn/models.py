"""Small trainable models with hand-written backprop.

Parameters are named ``weight``/``bias`` for a linear model and
``fc{i}.weight``/``fc{i}.bias`` for an MLP, with weights shaped
``(fan_in, fan_out)`` so a forward pass is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyDataset, InvalidSpec, ShapeMismatch
from .seeding import derive_seed
from .tensor import ModelState, axpy, check_compatible

KINDS = ("linear", "mlp")
ACTIVATIONS = ("relu", "tanh")
LOSSES = ("mse", "cross_entropy")

DEFAULT_BATCH_SIZE = 16
LOCAL_EPOCH_GRID = (1, 3, 5)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    output_dim: int
    kind: str = "linear"
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"
    loss: str = "mse"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise InvalidSpec(f"unknown loss {self.loss!r}")
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(int(d) < 1 for d in dims):
            raise InvalidSpec(f"all dimensions must be positive, got {dims}")
        if self.kind == "linear" and self.hidden_dims:
            raise InvalidSpec("linear models take no hidden_dims")
        if self.kind == "mlp" and not self.hidden_dims:
            raise InvalidSpec("mlp models need at least one hidden layer")
        if self.loss == "cross_entropy" and self.output_dim < 2:
            raise InvalidSpec("cross_entropy needs output_dim >= 2")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def layer_names(self) -> list[tuple[str, str]]:
        if self.kind == "linear":
            return [("weight", "bias")]
        return [(f"fc{i}.weight", f"fc{i}.bias") for i in range(len(self.layer_dims) - 1)]

    @property
    def is_classifier(self) -> bool:
        return self.loss == "cross_entropy"


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeMismatch(f"inputs must be a non-empty matrix, got shape {self.inputs.shape}")
        if len(self.targets) != self.inputs.shape[0]:
            raise ShapeMismatch("inputs and targets disagree on batch size")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_model(spec: ModelSpec) -> ModelState:
    rng = np.random.default_rng(derive_seed(spec.init_seed, "init"))
    params = {}
    dims = spec.layer_dims
    for (w_name, b_name), fan_in, fan_out in zip(spec.layer_names(), dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[w_name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[b_name] = np.zeros(fan_out)
    return ModelState(params, {"arch": _arch_tag(spec), "init_seed": str(spec.init_seed)})


def _arch_tag(spec: ModelSpec) -> str:
    dims = "x".join(str(d) for d in spec.layer_dims)
    return f"{spec.kind}:{dims}:{spec.activation}:{spec.loss}"


def _as_arrays(params) -> dict[str, np.ndarray]:
    if isinstance(params, ModelState):
        return {k: v.astype(np.float64) for k, v in params.params.items()}
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _check_batch(batch: Batch, spec: ModelSpec) -> None:
    if batch.inputs.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"batch has {batch.inputs.shape[1]} features, model expects {spec.input_dim}")
    if spec.is_classifier:
        labels = np.asarray(batch.targets)
        if labels.ndim != 1 or labels.min() < 0 or labels.max() >= spec.output_dim:
            raise ShapeMismatch("cross_entropy targets must be class indices in [0, output_dim)")
    else:
        targets = np.asarray(batch.targets)
        if targets.ndim != 2 or targets.shape[1] != spec.output_dim:
            raise ShapeMismatch(f"mse targets must have shape (batch, {spec.output_dim})")


def forward(params, inputs: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Model outputs (logits for classifiers) in float64."""
    arrays = _as_arrays(params)
    h = np.asarray(inputs, dtype=np.float64)
    names = spec.layer_names()
    for i, (w, b) in enumerate(names):
        h = h @ arrays[w] + arrays[b]
        if i < len(names) - 1:
            h = _activate(h, spec.activation)
    return h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_output_grad(out: np.ndarray, targets: np.ndarray, spec: ModelSpec):
    n = out.shape[0]
    if spec.is_classifier:
        labels = np.asarray(targets, dtype=np.int64)
        logp = _log_softmax(out)
        loss = -logp[np.arange(n), labels].mean()
        d_out = np.exp(logp)
        d_out[np.arange(n), labels] -= 1.0
        return float(loss), d_out / n
    diff = out - np.asarray(targets, dtype=np.float64)
    loss = np.mean(diff * diff)
    return float(loss), 2.0 * diff / diff.size


def batch_loss(params, batch: Batch, spec: ModelSpec) -> float:
    _check_batch(batch, spec)
    loss, _ = _loss_and_output_grad(forward(params, batch.inputs, spec), batch.targets, spec)
    return loss


def loss_and_grad(params, batch: Batch, spec: ModelSpec):
    """Mean batch loss and its exact gradient.

    ``params`` may be a :class:`ModelState` (the gradient comes back as a
    ModelState) or a plain name-to-array mapping, in which case everything
    stays in float64, which is what finite-difference checks want.
    """
    _check_batch(batch, spec)
    arrays = _as_arrays(params)
    names = spec.layer_names()
    expected = {n for pair in names for n in pair}
    if set(arrays) != expected:
        raise ShapeMismatch(f"parameters {sorted(arrays)} do not match model {sorted(expected)}")

    acts = [np.asarray(batch.inputs, dtype=np.float64)]
    pre = []
    for i, (w, b) in enumerate(names):
        z = acts[-1] @ arrays[w] + arrays[b]
        pre.append(z)
        acts.append(_activate(z, spec.activation) if i < len(names) - 1 else z)

    loss, delta = _loss_and_output_grad(acts[-1], batch.targets, spec)
    grads = {}
    for i in range(len(names) - 1, -1, -1):
        w, b = names[i]
        grads[w] = acts[i].T @ delta
        grads[b] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ arrays[w].T) * _activate_grad(pre[i - 1], acts[i], spec.activation)

    if isinstance(params, ModelState):
        return loss, ModelState._trusted(grads, params.meta)
    return loss, grads


def sgd_step(state: ModelState, grad: ModelState, lr: float) -> ModelState:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    check_compatible(state, grad)
    return axpy(state, -lr, grad)


def iter_batches(inputs: np.ndarray, targets: np.ndarray, batch_size: int, order: Sequence[int] | None = None):
    n = inputs.shape[0]
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        sel = idx[start : start + batch_size]
        yield Batch(inputs[sel], targets[sel])


def local_train(
    state: ModelState,
    dataset,
    spec: ModelSpec,
    epochs: int,
    batch_size: int,
    lr: float,
    shuffle_seed: int,
) -> ModelState:
    """Run ``epochs`` passes of shuffled mini-batch SGD over ``dataset``.

    ``dataset`` is anything with ``inputs`` and ``targets`` arrays. The
    shuffle order for every epoch comes from one generator seeded by
    ``shuffle_seed``, so the result is a pure function of the arguments.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    n = len(dataset.inputs)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    gen = np.random.default_rng(derive_seed(shuffle_seed, "shuffle"))
    for _ in range(epochs):
        order = gen.permutation(n)
        for batch in iter_batches(dataset.inputs, dataset.targets, batch_size, order):
            _, grad = loss_and_grad(state, batch, spec)
            state = sgd_step(state, grad, lr)
    return state
