import numpy as np
import pytest

from fedqsn.errors import EmptyUpdateSet, InvalidConfig, ShapeMismatch
from fedqsn.protocol import (
    DELTA_AVERAGE,
    ClientUpdate,
    FedConfig,
    aggregate,
    fedavg,
    make_proxy,
    masked_contributions,
    never_visible_fraction,
    pair_seed_matrix,
    reconstruct_final,
    run_round,
    secure_aggregate,
    select_clients,
    server_init,
)
from fedqsn.quantization import QuantConfig, block_error_bounds
from fedqsn.tensor import ModelState, flatten

from helpers import standalone_fedavg, toy_setup
from oracles import weighted_average_loop


def plain_cfg(**kw):
    base = dict(p1=0.0, p2=0.0, quant=None, rounds=3, local_epochs=1, learning_rate=0.1)
    base.update(kw)
    return FedConfig(**base)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        FedConfig(p1=1.0)
    with pytest.raises(InvalidConfig):
        FedConfig(clients_total=5, clients_per_round=6)
    with pytest.raises(InvalidConfig):
        FedConfig(rounds=0)
    with pytest.raises(InvalidConfig):
        FedConfig(aggregation_mode="median")


def test_defaults():
    cfg = FedConfig()
    assert cfg.rounds == 10 and cfg.batch_size == 16 and cfg.quant.block_size == 256


def test_server_init_identity_when_p1_zero():
    _, model, _, _ = toy_setup()
    server = server_init(model, plain_cfg())
    assert server.global_model.equals(model) and server.original_model.equals(model)


def test_server_init_drop_count():
    model = ModelState({"w": np.ones((2, 1000))})
    server = server_init(model, FedConfig(p1=0.1, master_seed=3))
    zero_cols = int(np.all(server.global_model["w"] == 0, axis=0).sum())
    assert abs(zero_cols - 100) <= 3 * np.sqrt(1000 * 0.1 * 0.9)
    again = server_init(model, FedConfig(p1=0.1, master_seed=3))
    assert again.equals(server)


def test_select_clients():
    assert select_clients(FedConfig(clients_total=5, clients_per_round=5), 3) == [0, 1, 2, 3, 4]
    cfg = FedConfig(clients_total=25, clients_per_round=5, master_seed=1)
    picked = select_clients(cfg, 2)
    assert len(set(picked)) == 5 and all(0 <= c < 25 for c in picked)
    assert select_clients(cfg, 2) == picked
    rounds = {tuple(select_clients(cfg, t)) for t in range(1, 11)}
    assert len(rounds) > 1
    fixed = FedConfig(clients_total=25, clients_per_round=5, master_seed=1, reselect_each_round=False)
    assert len({tuple(select_clients(fixed, t)) for t in range(1, 11)}) == 1


def test_proxy_identity_when_disabled():
    _, model, _, _ = toy_setup()
    server = server_init(model, plain_cfg())
    proxy, _ = make_proxy(server, 0, 1, plain_cfg())
    assert proxy.equals(server.global_model)


def test_proxy_hides_server_columns_and_respects_quant_bound():
    _, model, _, _ = toy_setup(d_in=20, d_out=40)
    cfg = FedConfig(p1=0.2, p2=0.2, quant=QuantConfig(3, 64), master_seed=4)
    server = server_init(model, cfg)
    from fedqsn.masking import apply_mask
    for c in range(5):
        proxy, cmask = make_proxy(server, c, 1, cfg)
        hidden = ~server.server_mask.keep["weight"]
        assert np.all(proxy["weight"][:, hidden] == 0.0)
        masked = apply_mask(server.global_model, cmask)
        for name in proxy:
            err = np.abs(proxy[name].astype(np.float64) - masked[name])
            assert np.all(err <= block_error_bounds(masked[name], cfg.quant) + 1e-6)
    assert server.global_model.equals(server_init(model, cfg).global_model)


def test_client_masks_differ_by_client_and_round():
    _, model, _, _ = toy_setup(d_out=64)
    cfg = FedConfig(p1=0.0, p2=0.3, quant=None)
    server = server_init(model, cfg)
    m01 = make_proxy(server, 0, 1, cfg)[1]
    m11 = make_proxy(server, 1, 1, cfg)[1]
    m02 = make_proxy(server, 0, 2, cfg)[1]
    assert not m01.equals(m11) and not m01.equals(m02)


def test_aggregate_examples():
    a = ModelState({"w": [[2.0]]})
    b = ModelState({"w": [[4.0]]})
    assert aggregate([ClientUpdate(0, a, 7)])["w"].tolist() == [[2.0]]
    assert aggregate([ClientUpdate(0, a, 3), ClientUpdate(1, b, 3)])["w"].tolist() == [[3.0]]
    zero = ModelState({"w": [[0.0]]})
    assert aggregate([ClientUpdate(0, zero, 1), ClientUpdate(1, b, 3)])["w"].tolist() == [[3.0]]


def test_aggregate_errors():
    with pytest.raises(EmptyUpdateSet):
        aggregate([])
    with pytest.raises(ShapeMismatch):
        aggregate([ClientUpdate(0, ModelState({"w": [1.0]}), 1), ClientUpdate(1, ModelState({"w": [1.0, 2.0]}), 1)])


def test_aggregate_order_independent(rng):
    ups = [ClientUpdate(i, ModelState({"w": rng.normal(size=(3, 3))}), int(rng.integers(1, 50))) for i in range(4)]
    assert aggregate(ups).equals(aggregate(list(reversed(ups))))


def test_delta_average(rng):
    prev = ModelState({"w": rng.normal(size=(2, 2))})
    deltas = [ClientUpdate(i, ModelState({"w": rng.normal(size=(2, 2))}), n) for i, n in enumerate((1, 3))]
    got = aggregate(deltas, prev, DELTA_AVERAGE)
    expected = prev["w"] + 0.25 * deltas[0].model["w"] + 0.75 * deltas[1].model["w"]
    np.testing.assert_allclose(got["w"], expected, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_aggregate_matches_loop_oracle(rng, k):
    models = [ModelState({"a": rng.normal(size=(10, 10)), "b": rng.normal(size=7)}) for _ in range(k)]
    counts = [int(c) for c in rng.integers(1, 1000, size=k)]
    got = flatten(aggregate([ClientUpdate(i, m, n) for i, (m, n) in enumerate(zip(models, counts))]))
    expected = weighted_average_loop([flatten(m).tolist() for m in models], counts)
    np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-7)


def test_secure_two_clients_cancel(rng):
    ups = [ClientUpdate(i, ModelState({"w": rng.normal(size=50)}), 10) for i in range(2)]
    seeds = pair_seed_matrix(0, 1, [0, 1])
    masked = masked_contributions(ups, seeds)
    plain = [0.5 * flatten(u.model).astype(np.float64) for u in ups]
    r = masked[0] - plain[0]
    np.testing.assert_allclose(masked[1] - plain[1], -r, atol=1e-12)
    assert np.all(np.abs(masked[0] - plain[0]) > 0)  # the server never sees a raw contribution


@pytest.mark.parametrize("k", [2, 5, 10])
def test_secure_equals_plain(rng, k):
    ups = [ClientUpdate(i, ModelState({"w": rng.normal(size=(8, 9))}), int(rng.integers(1, 100))) for i in range(k)]
    seeds = pair_seed_matrix(3, 2, list(range(k)))
    np.testing.assert_allclose(flatten(secure_aggregate(ups, seeds)), flatten(aggregate(ups)), atol=1e-5, rtol=0)


def test_secure_needs_two():
    with pytest.raises(EmptyUpdateSet):
        secure_aggregate([ClientUpdate(0, ModelState({"w": [1.0]}), 1)], np.zeros((1, 1), np.uint64))


def test_degenerate_round_is_fedavg():
    spec, model, clients, test = toy_setup()
    cfg = plain_cfg(rounds=3)
    server = server_init(model, cfg)
    reference = standalone_fedavg(model, clients, spec, 3, cfg.local_epochs, cfg.batch_size, cfg.learning_rate, cfg.master_seed)
    for t in range(1, 4):
        server, report = run_round(server, clients, cfg, spec, eval_set=test)
        assert server.global_model.equals(reference[t])
    library = fedavg(model, clients, cfg, spec)
    assert all(a.equals(b) for a, b in zip(library, reference))


def test_round_is_pure():
    spec, model, clients, test = toy_setup()
    cfg = FedConfig(rounds=2, master_seed=5, local_epochs=1, learning_rate=0.1)
    server = server_init(model, cfg)
    a, ra = run_round(server, clients, cfg, spec, eval_set=test)
    b, rb = run_round(server, clients, cfg, spec, eval_set=test)
    assert a.equals(b) and ra.to_dict() == rb.to_dict()
    assert a.round == 1


def test_secure_round_close_to_plain_round():
    spec, model, clients, test = toy_setup()
    cfg = FedConfig(rounds=1, master_seed=5, local_epochs=1, learning_rate=0.1)
    server = server_init(model, cfg)
    plain, _ = run_round(server, clients, cfg, spec)
    secure, _ = run_round(server, clients, FedConfig(rounds=1, master_seed=5, local_epochs=1, learning_rate=0.1, secure_agg=True), spec)
    np.testing.assert_allclose(flatten(secure.global_model), flatten(plain.global_model), atol=1e-5)


def test_server_masked_columns_get_trained():
    # clients see zeros in hidden columns, but their gradients still reach them
    spec, model, clients, _ = toy_setup(d_out=16)
    cfg = FedConfig(p1=0.3, p2=0.0, quant=None, master_seed=2, local_epochs=1, learning_rate=0.1)
    server = server_init(model, cfg)
    hidden = ~server.server_mask.keep["weight"]
    assert hidden.any()
    after, _ = run_round(server, clients, cfg, spec)
    assert np.any(after.global_model["weight"][:, hidden] != 0.0)


def test_reconstruct_final():
    spec, model, clients, _ = toy_setup(d_out=16)
    cfg = FedConfig(p1=0.25, p2=0.1, master_seed=1, local_epochs=1, learning_rate=0.1)
    server = server_init(model, cfg)
    fresh = reconstruct_final(server, rescale=True)
    np.testing.assert_allclose(flatten(fresh), flatten(model), atol=1e-6, rtol=0)
    for _ in range(2):
        server, _ = run_round(server, clients, cfg, spec)
    hidden = ~server.server_mask.keep["weight"]
    for rescale in (True, False):
        out = reconstruct_final(server, rescale)
        np.testing.assert_array_equal(out["weight"][:, hidden], model["weight"][:, hidden])
    raw = reconstruct_final(server, rescale=False)
    np.testing.assert_array_equal(raw["weight"][:, ~hidden], server.global_model["weight"][:, ~hidden])
    np.testing.assert_array_equal(raw["bias"], server.global_model["bias"])


def test_reconstruct_identity_without_server_mask():
    spec, model, clients, _ = toy_setup()
    cfg = FedConfig(p1=0.0, p2=0.1, master_seed=1, local_epochs=1, learning_rate=0.1)
    server, _ = run_round(server_init(model, cfg), clients, cfg, spec)
    assert reconstruct_final(server, rescale=False).equals(server.global_model)


def test_column_coverage_default_config():
    _, model, _, _ = toy_setup(d_out=512)
    cfg = FedConfig(p2=0.1, clients_per_round=5, master_seed=0)
    assert never_visible_fraction(server_init(model, cfg), cfg, cfg.rounds) < 1e-6
    # with one client and one round, roughly p2 of the columns stay hidden
    single = FedConfig(p2=0.1, clients_total=5, clients_per_round=1, master_seed=0)
    frac = never_visible_fraction(server_init(model, single), single, 1)
    assert 0.05 < frac < 0.15


def test_cross_device_round():
    spec, model, clients, test = toy_setup(n_clients=25, n=1000)
    cfg = FedConfig(clients_total=25, clients_per_round=5, master_seed=3, local_epochs=1, learning_rate=0.1)
    server, report = run_round(server_init(model, cfg), clients, cfg, spec, eval_set=test)
    assert len(report.selected) == 5 and len(report.proxies) == 5


def test_run_round_requires_all_client_datasets():
    spec, model, clients, _ = toy_setup()
    with pytest.raises(InvalidConfig):
        run_round(server_init(model, FedConfig()), clients[:3], FedConfig(), spec)
