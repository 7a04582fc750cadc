import itertools
import math

import numpy as np
import pytest

from fedqsn.data import Dataset, gen_synthetic
from fedqsn.errors import EmptyDataset, InvalidSpec, ShapeMismatch
from fedqsn.metrics import evaluate
from fedqsn.models import Batch, ModelSpec, batch_loss, forward, init_model, local_train, loss_and_grad, sgd_step
from fedqsn.tensor import ModelState, clone_structure, flatten

from oracles import central_differences

COMBOS = [
    (kind, act, loss)
    for kind, act, loss in itertools.product(("linear", "mlp"), ("relu", "tanh"), ("mse", "cross_entropy"))
    if not (kind == "linear" and act == "tanh")  # activation is unused by linear models
]


def make_spec(kind, act, loss, seed=0, d_in=4, d_out=3):
    hidden = (5, 4) if kind == "mlp" else ()
    return ModelSpec(d_in, d_out, kind=kind, hidden_dims=hidden, activation=act, loss=loss, init_seed=seed)


def make_batch(spec, rng, n=6):
    x = rng.normal(size=(n, spec.input_dim))
    if spec.is_classifier:
        return Batch(x, rng.integers(0, spec.output_dim, size=n))
    return Batch(x, rng.normal(size=(n, spec.output_dim)))


def preactivations(params, batch, spec):
    h, out = batch.inputs, []
    names = spec.layer_names()
    for i, (w, b) in enumerate(names[:-1]):
        z = h @ params[w] + params[b]
        out.append(z)
        h = np.maximum(z, 0) if spec.activation == "relu" else np.tanh(z)
    return out


def relative_error(analytic, numeric):
    """Tensor-wise ||a - n|| / max(||a||, ||n||)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def entrywise_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        ModelSpec(3, 1, loss="cross_entropy")
    with pytest.raises(InvalidSpec):
        ModelSpec(0, 2)
    with pytest.raises(InvalidSpec):
        ModelSpec(3, 2, kind="mlp")
    with pytest.raises(InvalidSpec):
        ModelSpec(3, 2, kind="linear", hidden_dims=(4,))


def test_init_contract():
    spec = ModelSpec(3, 2, init_seed=7)
    a, b = init_model(spec), init_model(spec)
    assert a.equals(b)
    assert a.shapes() == {"bias": (2,), "weight": (3, 2)}
    assert np.all(a["bias"] == 0)
    square = init_model(ModelSpec(3, 3, init_seed=1))
    assert np.abs(square["weight"]).max() <= 1.0


def test_mlp_names_and_shapes():
    state = init_model(ModelSpec(4, 3, kind="mlp", hidden_dims=(5,)))
    assert state.shapes() == {"fc0.bias": (5,), "fc0.weight": (4, 5), "fc1.bias": (3,), "fc1.weight": (5, 3)}


def test_zero_model_zero_targets():
    spec = ModelSpec(3, 2)
    zero = clone_structure(init_model(spec), 0.0)
    loss, grad = loss_and_grad(zero, Batch(np.ones((4, 3)), np.zeros((4, 2))), spec)
    assert loss == 0.0 and np.all(flatten(grad) == 0)


def test_doubling_targets_quadruples_mse(rng):
    spec = ModelSpec(3, 2)
    zero = clone_structure(init_model(spec), 0.0)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    assert batch_loss(zero, Batch(x, 2 * y), spec) == pytest.approx(4 * batch_loss(zero, Batch(x, y), spec))


def test_uniform_predictor_cross_entropy(rng):
    spec = ModelSpec(4, 5, loss="cross_entropy")
    zero = clone_structure(init_model(spec), 0.0)
    batch = Batch(rng.normal(size=(9, 4)), rng.integers(0, 5, size=9))
    assert batch_loss(zero, batch, spec) == pytest.approx(math.log(5), abs=1e-6)


def test_shape_mismatch(rng):
    spec = ModelSpec(3, 2)
    with pytest.raises(ShapeMismatch):
        loss_and_grad(init_model(spec), Batch(rng.normal(size=(2, 4)), np.zeros((2, 2))), spec)
    with pytest.raises(ShapeMismatch):
        loss_and_grad(init_model(spec), Batch(rng.normal(size=(2, 3)), np.zeros((2, 3))), spec)


@pytest.mark.parametrize("kind,act,loss", COMBOS)
def test_gradients_match_finite_differences(kind, act, loss):
    rng = np.random.default_rng(hash((kind, act, loss)) % 2**32)
    checked = 0
    while checked < 10:
        spec = make_spec(kind, act, loss, seed=int(rng.integers(1 << 30)))
        params = {k: v.astype(np.float64) + rng.normal(scale=0.1, size=v.shape) for k, v in init_model(spec).params.items()}
        batch = make_batch(spec, rng)
        if act == "relu" and any(np.abs(z).min() < 0.05 for z in preactivations(params, batch, spec)):
            continue
        _, grads = loss_and_grad(params, batch, spec)
        numeric = central_differences(lambda p: batch_loss(p, batch, spec), params)
        for name in grads:
            assert relative_error(grads[name], numeric[name]) < 1e-4, name
        checked += 1


@pytest.mark.parametrize("kind,act,loss", COMBOS)
def test_gradients_entrywise_with_fine_step(kind, act, loss):
    # h = 1e-3 truncation error swamps near-zero entries; at 1e-5 every entry agrees
    rng = np.random.default_rng(7)
    spec = make_spec(kind, "tanh" if kind == "mlp" else act, loss, seed=3)
    params = {k: v.astype(np.float64) + rng.normal(scale=0.1, size=v.shape) for k, v in init_model(spec).params.items()}
    batch = make_batch(spec, rng)
    _, grads = loss_and_grad(params, batch, spec)
    numeric = central_differences(lambda p: batch_loss(p, batch, spec), params, h=1e-5)
    for name in grads:
        assert entrywise_error(grads[name], numeric[name]) < 1e-4, name


def test_sgd_step_examples():
    w = ModelState({"w": [[1.0]]})
    assert sgd_step(w, ModelState({"w": [[2.0]]}), 0.5)["w"].tolist() == [[0.0]]
    assert sgd_step(w, clone_structure(w, 0.0), 0.1).equals(w)
    with pytest.raises(ValueError):
        sgd_step(w, w, 0.0)


def test_recomputed_gradients_are_not_additive(rng):
    # two steps with fresh gradients differ from one step on the first gradient doubled
    spec = ModelSpec(3, 2)
    state = init_model(spec)
    batch = make_batch(spec, rng)
    _, g0 = loss_and_grad(state, batch, spec)
    two = sgd_step(sgd_step(state, g0, 0.1), loss_and_grad(sgd_step(state, g0, 0.1), batch, spec)[1], 0.1)
    one = sgd_step(state, g0, 0.2)
    assert not two.equals(one)


def test_local_train_single_batch_equals_sgd_steps(rng):
    spec = ModelSpec(3, 2)
    data = Dataset(rng.normal(size=(8, 3)).astype(np.float32), rng.normal(size=(8, 2)).astype(np.float32))
    state = init_model(spec)
    trained = local_train(state, data, spec, epochs=3, batch_size=8, lr=0.1, shuffle_seed=5)
    manual = state
    for _ in range(3):
        # a full-batch epoch sees every row; order only changes float summation
        order = np.arange(8)
        manual = sgd_step(manual, loss_and_grad(manual, Batch(data.inputs[order], data.targets[order]), spec)[1], 0.1)
    np.testing.assert_allclose(flatten(trained), flatten(manual), rtol=1e-6, atol=1e-7)


def test_local_train_deterministic_and_improves():
    spec = ModelSpec(6, 2, init_seed=3)
    data = gen_synthetic("linear_regression", 400, 6, 2, noise_std=0.0, seed=1)
    state = init_model(spec)
    a = local_train(state, data, spec, 1, 16, 0.1, shuffle_seed=9)
    b = local_train(state, data, spec, 1, 16, 0.1, shuffle_seed=9)
    assert a.equals(b)
    five = local_train(state, data, spec, 5, 16, 0.1, shuffle_seed=9)
    assert evaluate(five, data, spec) <= evaluate(a, data, spec)


def test_local_train_empty():
    spec = ModelSpec(2, 1)
    with pytest.raises(EmptyDataset):
        local_train(init_model(spec), Dataset(np.zeros((0, 2)), np.zeros((0, 1))), spec, 1, 4, 0.1, 0)


def test_forward_matches_matmul(rng):
    spec = ModelSpec(3, 2)
    state = init_model(spec)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(forward(state, x, spec), x @ state["weight"] + state["bias"], rtol=1e-6)
