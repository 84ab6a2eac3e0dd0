import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from icon_vil.errors import BadConfig, ShapeMismatch, StaleCache
from icon_vil.model import (AdapterSet, EmaAdapters, ModelConfig, Network,
                            default_adapter_layers, ema_update, ensemble_class_logits)


def reference_logits(net, x, adapters=None):
    """Single-sample forward written out layer by layer."""
    adapters = adapters or net.adapters
    h = np.asarray(x, dtype=np.float64)
    for layer, (w, b) in enumerate(zip(net.backbone.weights, net.backbone.biases)):
        z = w @ h + b
        if layer in adapters.layers:
            z = z + adapters.scale[layer] * (adapters.up[layer] @ np.maximum(adapters.down[layer] @ h, 0))
        h = np.maximum(z, 0)
    if net.config.final_norm:
        mu = sum(h) / len(h)
        var = sum((v - mu) ** 2 for v in h) / len(h)
        h = (h - mu) / math.sqrt(var + 1e-6)
    return net.head.weight @ h + net.head.bias


def tiny_net(seed, d0=5, h=6, layers=2, rank=2, nodes=3):
    net = Network(ModelConfig(input_dim=d0, hidden_dim=h, backbone_layers=layers,
                              adapter_layers=tuple(range(layers)), adapter_rank=rank, seed=seed))
    rng = np.random.default_rng(seed)
    net.adapters.set_flat(rng.normal(0, 0.5, net.adapters.size))
    net.head.append_rows(nodes)
    net.head.set_flat(rng.normal(0, 0.5, net.head.size))
    return net, rng


def test_adapter_size_and_default_placement():
    cfg = ModelConfig(input_dim=16, hidden_dim=16, backbone_layers=3, adapter_layers=(0, 1, 2))
    assert cfg.adapter_size == 3 * (5 * 16 + 16 * 5 + 1) == 483
    assert default_adapter_layers(12) == (0, 1, 2, 3, 4)
    assert default_adapter_layers(3) == (0, 1)
    with pytest.raises(BadConfig):
        ModelConfig(input_dim=4, backbone_layers=2, adapter_layers=(2,))


def test_forward_matches_layerwise_reference():
    net, rng = tiny_net(0)
    X = rng.normal(size=(4, 5))
    logits = net.logits(X)
    for i in range(4):
        assert np.allclose(logits[i], reference_logits(net, X[i]), atol=1e-12)


def test_fresh_adapters_and_zero_scale_leave_backbone_output():
    net, rng = tiny_net(1)
    X = rng.normal(size=(3, 5))
    bare = AdapterSet(net.config, init=False)
    expected = np.array([reference_logits(net, x, bare) for x in X])
    fresh = Network(net.config)
    fresh.head = net.head
    assert np.allclose(fresh.logits(X), expected, atol=1e-12)    # up-projections start at zero
    for layer in net.adapters.layers:
        net.adapters.scale[layer] = 0.0
    assert np.allclose(net.logits(X), expected, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8), st.integers(1, 2),
       st.integers(1, 3), st.booleans())
def test_backward_matches_finite_differences(seed, d0, h, rank, layers, final_norm):
    cfg = ModelConfig(input_dim=d0, hidden_dim=h, backbone_layers=layers,
                      adapter_layers=tuple(range(layers)), adapter_rank=rank,
                      final_norm=final_norm, seed=seed)
    net = Network(cfg)
    rng = np.random.default_rng(seed)
    net.adapters.set_flat(rng.normal(0, 0.5, net.adapters.size))
    net.head.append_rows(3)
    net.head.set_flat(rng.normal(0, 0.5, net.head.size))
    X = rng.normal(size=(3, d0))
    G = rng.normal(size=(3, 3))
    logits, cache = net.forward(X)
    g_adapt, g_head = net.backward(cache, G)

    def loss_adapt(theta):
        net.adapters.set_flat(theta)
        return float(np.sum(G * net.logits(X)))

    a0 = net.adapters.flat()
    num = oracles.central_difference(loss_adapt, a0)
    net.adapters.set_flat(a0)
    rel, ab = oracles.gradient_error(g_adapt, num)
    assert rel < 1e-4 and ab < 1e-7 or np.allclose(g_adapt, num, atol=1e-7)

    def loss_head(theta):
        net.head.set_flat(theta)
        return float(np.sum(G * net.logits(X)))

    num = oracles.central_difference(loss_head, net.head.flat())
    assert np.allclose(g_head, num, atol=1e-7)


def test_zero_upstream_gradient_gives_zero_gradients():
    net, rng = tiny_net(2)
    _, cache = net.forward(rng.normal(size=(2, 5)))
    g_a, g_h = net.backward(cache, np.zeros((2, 3)))
    assert not g_a.any() and not g_h.any()


def test_stale_cache_is_rejected():
    net, rng = tiny_net(3)
    _, cache = net.forward(rng.normal(size=(2, 5)))
    net.adapters.set_flat(net.adapters.flat())
    with pytest.raises(StaleCache):
        net.backward(cache, np.ones((2, 3)))


def test_backbone_is_read_only_and_seeded():
    net, _ = tiny_net(4)
    with pytest.raises(ValueError):
        net.backbone.weights[0][0, 0] = 1.0
    assert np.array_equal(net.backbone.flat(), Network(net.config).backbone.flat())


def test_ema_update_rules():
    cfg = ModelConfig(input_dim=2, hidden_dim=2, backbone_layers=1, adapter_rank=1)
    live = AdapterSet(cfg, init=False)
    ema = EmaAdapters(live, 0.5)
    live.set_flat(np.full(live.size, 2.0))
    ema_update(ema, live)
    assert np.array_equal(ema.flat(), np.ones(live.size))
    frozen = EmaAdapters(AdapterSet(cfg, init=False), 1.0)
    ema_update(frozen, live)
    assert not frozen.flat().any()
    copy = EmaAdapters(AdapterSet(cfg, init=False), 0.0)
    ema_update(copy, live)
    assert np.array_equal(copy.flat(), live.flat())


def test_ensemble_is_elementwise_max():
    assert ensemble_class_logits([1, 5], [3, 2]).tolist() == [3, 5]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = ensemble_class_logits(a, b)
    assert (out >= a).all() and (out >= b).all()


def test_checkpoint_round_trip_is_exact():
    net, rng = tiny_net(5)
    net.ema.adapters.set_flat(rng.normal(size=net.adapters.size))
    doc = json.loads(json.dumps(net.to_dict()))
    back = Network.from_dict(doc)
    X = rng.normal(size=(3, 5))
    assert np.array_equal(back.adapters.flat(), net.adapters.flat())
    assert np.array_equal(back.ema.flat(), net.ema.flat())
    assert np.array_equal(back.head.flat(), net.head.flat())
    assert np.array_equal(back.logits(X, use_ema=True), net.logits(X, use_ema=True))
    doc["backbone"][0] += 1.0
    with pytest.raises(ShapeMismatch):
        Network.from_dict(doc)


def test_zeroed_adapters_reproduce_bare_backbone_bit_for_bit():
    net, rng = tiny_net(6)
    bare_cfg = ModelConfig(input_dim=5, hidden_dim=6, backbone_layers=2, adapter_layers=(),
                           adapter_rank=2, seed=6)
    bare = Network(bare_cfg)
    bare.head = net.head
    X = rng.normal(size=(4, 5))
    net.adapters.set_flat(np.zeros(net.adapters.size))
    assert np.array_equal(net.logits(X), bare.logits(X))


@given(st.floats(0.0, 0.99), st.integers(1, 30))
def test_ema_converges_geometrically(decay, n):
    cfg = ModelConfig(input_dim=3, hidden_dim=2, backbone_layers=1, adapter_rank=1)
    live = AdapterSet(cfg)
    live.set_flat(np.linspace(-1, 1, live.size))
    ema = EmaAdapters(AdapterSet(cfg, init=False), decay)
    gap0 = np.linalg.norm(ema.flat() - live.flat())
    for _ in range(n):
        ema_update(ema, live)
    assert np.linalg.norm(ema.flat() - live.flat()) == pytest.approx(decay ** n * gap0, abs=1e-12)
