import numpy as np
import pytest

from fedqsn.errors import InvalidConfig, ShapeMismatch
from fedqsn.masking import (
    MaskRecord,
    MaskSpec,
    apply_mask,
    compose_masks,
    draw_mask,
    empty_mask,
    everything,
)
from fedqsn.tensor import ModelState


def test_p_must_be_below_one():
    with pytest.raises(InvalidConfig):
        MaskSpec.server(1.0, 0)
    with pytest.raises(InvalidConfig):
        MaskSpec.server(-0.1, 0)


@pytest.mark.parametrize("seed", [0, 1, 2**63 + 5])
def test_zero_ratio_keeps_everything(small_state, seed):
    record = draw_mask(small_state, MaskSpec.server(0.0, seed))
    assert all(bits.all() for bits in record.keep.values())
    assert apply_mask(small_state, record).equals(small_state)


def test_only_matrices_are_masked_by_default(small_state):
    record = draw_mask(small_state, MaskSpec.server(0.5, 3))
    assert set(record.keep) == {"fc0.weight", "fc1.weight"}
    assert record.keep["fc0.weight"].size == 5  # one bit per column
    masked = apply_mask(small_state, record)
    np.testing.assert_array_equal(masked["fc0.bias"], small_state["fc0.bias"])


def test_one_d_tensors_masked_elementwise_when_eligible(small_state):
    record = draw_mask(small_state, MaskSpec.server(0.5, 3), everything)
    assert record.keep["fc1.bias"].size == 3


def test_draw_is_deterministic(small_state):
    a = draw_mask(small_state, MaskSpec.server(0.3, 42))
    b = draw_mask(small_state, MaskSpec.server(0.3, 42))
    assert a.equals(b)


def test_decisions_keyed_by_tensor_name(small_state):
    full = draw_mask(small_state, MaskSpec.server(0.4, 9))
    only = ModelState({"fc1.weight": small_state["fc1.weight"]})
    partial = draw_mask(only, MaskSpec.server(0.4, 9))
    np.testing.assert_array_equal(full.keep["fc1.weight"], partial.keep["fc1.weight"])


def test_hand_example():
    state = ModelState({"w": [[1.0, 3.0], [2.0, 4.0]]})
    record = MaskRecord(keep={"w": [False, True]}, amplification=1 / (1 - 0.5))
    assert apply_mask(state, record)["w"].tolist() == [[0.0, 6.0], [0.0, 8.0]]


def test_dropped_columns_are_exact_zeros(small_state):
    record = draw_mask(small_state, MaskSpec.server(0.5, 11))
    masked = apply_mask(small_state, record)
    for name, bits in record.keep.items():
        assert np.all(masked[name][:, ~bits] == 0.0)
        # drop set recoverable from the masked tensor alone
        recovered = np.all(masked[name] == 0.0, axis=0)
        np.testing.assert_array_equal(recovered, ~bits)


def test_realized_fraction_near_p():
    # 10,000 columns; 3 sigma of Binomial(10000, 0.1)/10000 is 0.009
    state = ModelState({"w": np.ones((1, 10_000))})
    for seed in range(5):
        frac = draw_mask(state, MaskSpec.server(0.1, seed)).drop_fraction()
        assert abs(frac - 0.1) <= 0.01


def test_mismatched_record_rejected(small_state):
    record = MaskRecord(keep={"fc0.weight": np.ones(4, bool)}, amplification=1.0)
    with pytest.raises(ShapeMismatch):
        apply_mask(small_state, record)
    with pytest.raises(ShapeMismatch):
        apply_mask(small_state, MaskRecord(keep={"nope": np.ones(2, bool)}, amplification=1.0))


def test_compose_identity_and_commutativity(small_state):
    a = draw_mask(small_state, MaskSpec.server(0.3, 1))
    b = draw_mask(small_state, MaskSpec.client(0.2, 2, client_id=0, round=1))
    ident = compose_masks(a, empty_mask(small_state))
    assert ident.equals(a)
    ab, ba = compose_masks(a, b), compose_masks(b, a)
    for name in ab.keep:
        np.testing.assert_array_equal(ab.keep[name], ba.keep[name])
        np.testing.assert_array_equal(ab.keep[name], a.keep[name] & b.keep[name])
    assert ab.amplification == pytest.approx(1 / (0.7 * 0.8))


def test_compose_doubly_kept_fraction():
    # each column survives both draws with probability 0.81
    state = ModelState({"w": np.ones((1, 10_000))})
    fracs = []
    for seed in range(20):
        server = draw_mask(state, MaskSpec.server(0.1, seed))
        client = draw_mask(state, MaskSpec.client(0.1, 10_000 + seed, client_id=0, round=1))
        fracs.append(1 - compose_masks(server, client).drop_fraction())
    sigma = np.sqrt(0.81 * 0.19 / 10_000)
    assert abs(np.mean(fracs) - 0.81) < 3 * sigma / np.sqrt(len(fracs))


def test_compose_rejects_mismatch(small_state):
    a = draw_mask(small_state, MaskSpec.server(0.3, 1))
    other = draw_mask(ModelState({"x": np.ones((2, 2))}), MaskSpec.server(0.3, 1))
    with pytest.raises(ShapeMismatch):
        compose_masks(a, other)


def test_unbiased_small():
    w = ModelState({"w": np.arange(1.0, 7.0).reshape(2, 3)})
    p, n = 0.2, 4000
    total = np.zeros((2, 3))
    for seed in range(n):
        total += apply_mask(w, draw_mask(w, MaskSpec.server(p, seed)))["w"]
    sigma = np.abs(w["w"]) * np.sqrt(p / (1 - p))
    assert np.all(np.abs(total / n - w["w"]) < 4 * sigma / np.sqrt(n))
