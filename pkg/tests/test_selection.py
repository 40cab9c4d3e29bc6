import numpy as np
import pytest

from expertswitch.nn import Dense, Network, Sgd, SgdConfig, Sigmoid, conv_expert, mlp
from expertswitch.selection import (PruneConfig, Selector, predict, prune_experts, prune_l1, retrain_pruned,
                                    sparsity, surviving_count, train_selector)


def single_dense(weights):
    w = np.asarray(weights, dtype=np.float32).reshape(1, -1)
    net = Network([Dense(w.shape[1], 1), Sigmoid()], (w.shape[1],))
    net.layers[0].weight[...] = w
    return net


def test_prune_half_by_magnitude():
    net = prune_l1(single_dense([1, -2, 3, -4]), 0.5)
    np.testing.assert_array_equal(net.layers[0].weight[0], [0, 0, 3, -4])


def test_prune_rate_zero_is_identity():
    net = single_dense([1, -2, 3, -4])
    out = prune_l1(net, 0.0)
    np.testing.assert_array_equal(out.layers[0].weight, net.layers[0].weight)
    assert not out.masks


def test_prune_does_not_touch_source():
    net = single_dense([1, -2, 3, -4])
    prune_l1(net, 0.5)
    np.testing.assert_array_equal(net.layers[0].weight[0], [1, -2, 3, -4])


@pytest.mark.parametrize("n,rate,keep", [(100, 0.98, 2), (4, 0.5, 2), (144, 0.98, 3), (3, 0.98, 1),
                                         (10, 0.0, 10), (85_000, 0.98, 1700)])
def test_surviving_count(n, rate, keep):
    assert surviving_count(n, rate) == keep


def test_dense_10x10_keeps_two():
    rng = np.random.default_rng(0)
    net = mlp(10, [10], 2).init_params(rng)
    out = prune_l1(net, 0.98)
    w = out.layers[0].weight
    assert np.count_nonzero(w) == 2
    kept = np.sort(np.abs(w[w != 0]))
    assert np.all(kept >= np.sort(np.abs(net.layers[0].weight).ravel())[-2])


@pytest.mark.parametrize("rate", [0.3, 0.5, 0.9, 0.98])
def test_per_layer_counts_on_conv_expert(rate):
    net = conv_expert((1, 28, 28), 2).init_params(np.random.default_rng(1))
    out = prune_l1(net, rate)
    for (i, layer), (_, orig) in zip(out.weighted_layers(), net.weighted_layers()):
        assert np.count_nonzero(layer.weight) == surviving_count(orig.weight.size, rate)
        np.testing.assert_array_equal(layer.bias, orig.bias)
    assert out.param_count(surviving_only=True) < net.param_count()


def test_masked_weights_stay_zero_after_retraining():
    rng = np.random.default_rng(0)
    net = prune_l1(mlp(6, [16], 3).init_params(rng), 0.9)
    zero_before = {i: m.copy() for i, m in net.masks.items()}
    samples = [(rng.normal(size=6).astype(np.float32), int(rng.integers(0, 3))) for _ in range(200)]
    cfg = PruneConfig(retrain_epochs=5, retrain_sgd=SgdConfig(momentum=0.9, weight_decay=1e-4))
    retrain_pruned(net, samples, cfg, rng)
    for i, mask in zero_before.items():
        assert np.all(net.layers[i].weight[~mask] == 0)
    s = sparsity(net)
    for i in net.masks:
        n = net.layers[i].weight.size
        assert s[i] == pytest.approx(1 - surviving_count(n, 0.9) / n)


def test_retrain_with_empty_buffer_skips(caplog):
    net = prune_l1(mlp(3, [4], 2).init_params(np.random.default_rng(0)), 0.5)
    before = [p.copy() for p in net.params()]
    retrain_pruned(net, [], PruneConfig(), np.random.default_rng(0))
    for p, q in zip(before, net.params()):
        np.testing.assert_array_equal(p, q)
    assert "empty" in caplog.text


def test_selector_needs_samples_and_valid_ids():
    factory = lambda k: mlp(2, [4], k)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        train_selector([], 2, factory, SgdConfig(), 1, rng)
    with pytest.raises(ValueError):
        train_selector([(np.zeros(2, np.float32), 3)], 2, factory, SgdConfig(), 1, rng)


def test_single_expert_selector_always_routes_to_zero():
    rng = np.random.default_rng(0)
    samples = [(rng.normal(size=4).astype(np.float32), 0) for _ in range(30)]
    sel = train_selector(samples, 1, lambda k: mlp(4, [8], k), SgdConfig(), 3, rng)
    assert np.all(sel.route(rng.normal(size=(100, 4)).astype(np.float32)) == 0)


def two_gaussians(n, rng, sep=6.0, dim=10):
    ids = rng.integers(0, 2, n)
    x = rng.normal(size=(n, dim)).astype(np.float32)
    x[:, 0] += np.where(ids == 1, sep / 2, -sep / 2)
    return x, ids


def test_selector_separates_two_gaussian_tasks():
    rng = np.random.default_rng(0)
    x, ids = two_gaussians(500, rng)
    samples = list(zip(x, ids))
    sel = train_selector(samples, 2, lambda k: mlp(10, [64], k), SgdConfig(), 10, rng)
    xt, it = two_gaussians(5000, rng)
    assert np.mean(sel.route(xt) == it) >= 0.99


def test_predict_maps_local_heads_to_global_classes():
    # expert e answers local class e for every input; selector sends by sign of x0
    def constant_expert(k):
        net = Network([Dense(1, 2), Sigmoid()], (1,))
        net.layers[0].bias[...] = [5.0, -5.0] if k == 0 else [-5.0, 5.0]
        return net

    router = Network([Dense(1, 2), Sigmoid()], (1,))
    router.layers[0].weight[...] = [[-10.0], [10.0]]
    sel = Selector(router, 2)
    x = np.array([[-1.0], [2.0], [-3.0]], np.float32)
    routes, preds = predict(sel, [constant_expert(0), constant_expert(1)], x, {0: (4, 5), 1: (6, 7)})
    np.testing.assert_array_equal(routes, [0, 1, 0])
    np.testing.assert_array_equal(preds, [4, 7, 4])
    _, forced = predict(sel, [constant_expert(0), constant_expert(1)], x, {0: (4, 5), 1: (6, 7)},
                        routes=np.array([1, 1, 1]))
    np.testing.assert_array_equal(forced, [7, 7, 7])


def test_prune_experts_retrains_each_on_its_own_buffer():
    rng = np.random.default_rng(0)
    from expertswitch.buffers import ReservoirBuffer

    nets, bufs = [], {}
    for eid in range(2):
        net = mlp(10, [32], 2).init_params(rng)
        x, y = two_gaussians(400, rng)
        if eid == 1:
            y = 1 - y
        opt = Sgd(net, SgdConfig())
        for _ in range(20):
            opt.train_batch(x, y)
        bufs[eid] = ReservoirBuffer(200, seed=eid)
        for xi, yi in zip(x, y):
            bufs[eid].offer((xi, int(yi)))
        nets.append(net)
    pruned = prune_experts(nets, bufs, PruneConfig(expert_rate=0.9, retrain_epochs=5), rng)
    xt, yt = two_gaussians(2000, rng)
    acc0 = np.mean(pruned[0].forward(xt).argmax(1) == yt)
    acc1 = np.mean(pruned[1].forward(xt).argmax(1) == 1 - yt)
    assert acc0 >= 0.97 and acc1 >= 0.97
