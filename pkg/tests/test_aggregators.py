import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedskew._rng import derive_rng
from fedskew.aggregators import (ClientUpdate, Kind, LocalConfig, aggregate, aggregation_weights,
                                 init_aggregator, local_steps, local_train)
from fedskew.nn import dense, init_model, mlp, segment


def layers(d=4, k=3):
    return mlp(d, [5], k)


def blobs(n, d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, k, n)
    return rng.normal(size=(n, d)) + y[:, None], y


def update(state, device, values, n):
    return ClientUpdate(device, state.global_params.with_values(np.asarray(values, dtype=float)), n, 1, 0.0)


def train_round(state, data, seed=0):
    return [local_train(state, d, x, y, derive_rng(seed, "local", d)) for d, (x, y) in data.items()]


def test_parse_kind():
    assert Kind.parse("fedprox") is Kind.FEDPROX
    assert Kind.parse(Kind.SCAFFOLD) is Kind.SCAFFOLD
    with pytest.raises(ValueError):
        Kind.parse("fedsgd")


def test_local_config_validation():
    with pytest.raises(ValueError):
        LocalConfig(lr=0)
    with pytest.raises(ValueError):
        LocalConfig(epochs=0)
    with pytest.raises(ValueError):
        LocalConfig(mu=-1)


def test_init_states():
    cfg = LocalConfig()
    s = init_aggregator("SCAFFOLD", layers(), 4, 0, cfg)
    assert not s.server_control.values.any()
    assert set(s.client_controls) == set(range(4))
    p = init_aggregator("FedPer", layers(), 3, 0, cfg)
    assert all(np.array_equal(h, segment(p.global_params, "head").ravel()) for h in p.client_heads.values())
    a = init_aggregator("FedAvg", layers(), 3, 0, cfg)
    assert np.array_equal(a.global_params.values, init_model(layers(), 0).values)
    with pytest.raises(ValueError):
        init_aggregator("FedPer", layers(), 3, 0, LocalConfig(personal_tags=("nope",)))


def test_weighted_mean_example():
    state = init_aggregator("FedAvg", [dense(1, 1)], 2, 0, LocalConfig())
    # two parameters (weight and bias); devices hold 0 and 4 with 1 and 3 samples
    new = aggregate(state, [update(state, 0, [0, 0], 1), update(state, 1, [4, 4], 3)])
    assert np.allclose(new.global_params.values, 3.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=8), st.integers(0, 2**31))
def test_aggregation_is_convex_and_order_free(sizes, seed):
    state = init_aggregator("FedAvg", layers(), len(sizes), 0, LocalConfig())
    rng = np.random.default_rng(seed)
    ups = [update(state, d, rng.normal(size=len(state.global_params)), n) for d, n in enumerate(sizes)]
    w = aggregation_weights(ups)
    assert w.sum() == pytest.approx(1.0, abs=1e-12) and (w > 0).all()
    stacked = np.stack([u.params_after.values for u in ups])
    out = aggregate(state, ups).global_params.values
    assert (out <= stacked.max(axis=0) + 1e-12).all() and (out >= stacked.min(axis=0) - 1e-12).all()
    shuffled = aggregate(state, [ups[i] for i in rng.permutation(len(ups))]).global_params.values
    assert np.array_equal(out, shuffled)


def test_aggregate_rejects_bad_input():
    state = init_aggregator("FedAvg", layers(), 2, 0, LocalConfig())
    u = update(state, 0, state.global_params.values, 3)
    with pytest.raises(ValueError):
        aggregate(state, [])
    with pytest.raises(ValueError):
        aggregate(state, [u, u])


def test_aggregate_is_pure():
    state = init_aggregator("SCAFFOLD", layers(), 2, 0, LocalConfig())
    before = state.global_params.values.copy()
    x, y = blobs(20)
    aggregate(state, train_round(state, {0: (x, y)}))
    assert np.array_equal(state.global_params.values, before)
    assert not state.server_control.values.any()


def test_fedprox_zero_mu_is_fedavg():
    data = {d: blobs(23, seed=d) for d in range(3)}
    cfg = LocalConfig(epochs=2, batch_size=5, mu=0.0)
    avg = init_aggregator("FedAvg", layers(), 3, 1, cfg)
    prox = init_aggregator("FedProx", layers(), 3, 1, cfg)
    for r in range(3):
        avg = aggregate(avg, train_round(avg, data, r))
        prox = aggregate(prox, train_round(prox, data, r))
    assert np.array_equal(avg.global_params.values, prox.global_params.values)


def test_fedprox_pulls_towards_global():
    x, y = blobs(40)
    cfg = dict(epochs=5, batch_size=4, lr=0.1)
    free = init_aggregator("FedProx", layers(), 1, 0, LocalConfig(mu=0.0, **cfg))
    tied = init_aggregator("FedProx", layers(), 1, 0, LocalConfig(mu=5.0, **cfg))
    g = free.global_params.values
    far = local_train(free, 0, x, y, derive_rng(0)).params_after.values
    near = local_train(tied, 0, x, y, derive_rng(0)).params_after.values
    assert np.linalg.norm(near - g) < np.linalg.norm(far - g)


def test_scaffold_single_full_batch_step_matches_fedavg():
    data = {d: blobs(12, seed=d) for d in range(4)}  # equal sizes so both means agree
    cfg = LocalConfig(epochs=1, batch_size=12, lr=0.05)
    avg = init_aggregator("FedAvg", layers(), 4, 2, cfg)
    sc = init_aggregator("SCAFFOLD", layers(), 4, 2, cfg)
    ups = train_round(sc, data)
    new_avg = aggregate(avg, train_round(avg, data))
    new_sc = aggregate(sc, ups)
    assert np.max(np.abs(new_avg.global_params.values - new_sc.global_params.values)) <= 1e-12
    for u in ups:
        expected = (sc.global_params.values - u.params_after.values) / cfg.lr
        assert np.allclose(new_sc.client_controls[u.device_id].values, expected, atol=1e-12)


def test_scaffold_control_bookkeeping():
    data = {d: blobs(15, seed=d) for d in range(2)}
    cfg = LocalConfig(epochs=1, batch_size=5, lr=0.05)
    state = init_aggregator("SCAFFOLD", layers(), 5, 0, cfg)
    ups = train_round(state, data)
    new = aggregate(state, ups)
    assert all(u.local_steps == local_steps(15, cfg) == 3 for u in ups)
    mean_delta = np.mean([u.control_delta.values for u in ups], axis=0)
    assert np.allclose(new.server_control.values, (2 / 5) * mean_delta)
    for d in (2, 3, 4):
        assert not new.client_controls[d].values.any()
    for u in ups:
        assert new.client_controls[u.device_id] is u.control_after


def test_scaffold_global_lr_scales_drift():
    x, y = blobs(10)
    base = dict(epochs=1, batch_size=10, lr=0.05)
    one = init_aggregator("SCAFFOLD", layers(), 1, 0, LocalConfig(**base))
    half = init_aggregator("SCAFFOLD", layers(), 1, 0, LocalConfig(global_lr=0.5, **base))
    g = one.global_params.values
    d1 = aggregate(one, train_round(one, {0: (x, y)})).global_params.values - g
    d2 = aggregate(half, train_round(half, {0: (x, y)})).global_params.values - g
    assert np.allclose(d2, d1 / 2, atol=1e-15)


def test_fedper_keeps_heads_private():
    data = {d: blobs(20, seed=d) for d in range(3)}
    state = init_aggregator("FedPer", layers(), 4, 0, LocalConfig(batch_size=5, lr=0.1))
    mask = state.personal_mask()
    ups = train_round(state, {0: data[0], 1: data[1]})
    new = aggregate(state, ups)
    assert np.array_equal(new.global_params.values[mask], state.global_params.values[mask])
    for u in ups:
        assert np.array_equal(new.client_heads[u.device_id], u.params_after.values[mask])
        assert not np.array_equal(new.client_heads[u.device_id], state.client_heads[u.device_id])
    for d in (2, 3):
        assert np.array_equal(new.client_heads[d], state.client_heads[d])
    # the shared part is the ordinary weighted mean
    shared = np.mean([u.params_after.values for u in ups], axis=0)
    assert np.allclose(new.global_params.values[~mask], shared[~mask])
    assert np.array_equal(new.device_params(0).values[mask], new.client_heads[0])


def test_local_train_deterministic_and_rejects_empty():
    state = init_aggregator("FedAvg", layers(), 1, 0, LocalConfig(batch_size=3))
    x, y = blobs(10)
    a = local_train(state, 0, x, y, derive_rng(5))
    b = local_train(state, 0, x, y, derive_rng(5))
    assert np.array_equal(a.params_after.values, b.params_after.values)
    assert a.local_steps == 4
    with pytest.raises(ValueError):
        local_train(state, 0, x[:0], y[:0], derive_rng(0))
