import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbnet.engines import backprop_memory_efficient
from pbnet.layers import CertificateError, GradientLayer, QuadraticProxLayer, SmoothProxLayer
from pbnet.network import (
    LayerError,
    Network,
    StoragePolicy,
    certify_invertible,
    expected_stored,
    forward,
)
from pbnet.numerics import CircularConvolution, Diagonal, Identity, random_tensor


def scalar_layer(alpha=0.5):
    return GradientLayer(alpha, [Identity((1,))], [np.zeros(1)])


def test_single_gradient_layer_store_all():
    rec = forward(Network([scalar_layer()], StoragePolicy.store_all()), np.array([2.0]))
    assert rec.output[0] == 1.0
    assert sorted(rec.stored_states) == [0, 1]
    assert rec.stored_states[0][0] == 2.0 and rec.stored_states[1][0] == 1.0
    assert rec.counters.peak_stored_states == 2


def test_store_none_keeps_endpoints():
    net = Network([QuadraticProxLayer(0.0)] * 10, StoragePolicy.store_none())
    rec = forward(net, np.ones(3))
    assert sorted(rec.stored_states) == [0, 10]
    assert rec.counters.peak_stored_states == 2


def test_checkpoint_every_four():
    net = Network([QuadraticProxLayer(0.0)] * 10, StoragePolicy.checkpoint_every(4))
    assert sorted(forward(net, np.ones(3)).stored_states) == [0, 4, 8, 10]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.data())
def test_policy_indices_property(n, data):
    k = data.draw(st.integers(1, n))
    assert StoragePolicy.store_all().indices(n) == list(range(n + 1))
    assert StoragePolicy.store_none().indices(n) == [0, n]
    idx = StoragePolicy.checkpoint_every(k).indices(n)
    assert idx == sorted(set(range(0, n + 1, k)) | {n})
    assert expected_stored(n, StoragePolicy.checkpoint_every(k)) == len(idx) == math.ceil(n / k) + 1


@pytest.mark.parametrize("n", [1, 3, 10, 25])
def test_peak_counts_and_bit_identical_outputs(n):
    rng = np.random.default_rng(n)
    layers = [GradientLayer(0.4, [Diagonal(rng.uniform(0.5, 1.5, 5))], [random_tensor(rng, (5,))]) if k % 2 == 0
              else QuadraticProxLayer(0.1) for k in range(n)]
    x0 = random_tensor(rng, (5,))
    outs = {}
    for policy in (StoragePolicy.store_all(), StoragePolicy.store_none(), StoragePolicy.checkpoint_every(3)):
        rec = forward(Network(layers, policy), x0)
        outs[policy.label()] = rec.output
        assert rec.counters.peak_stored_states >= len(rec.stored_states)
        assert rec.counters.peak_stored_states == expected_stored(n, policy)
    assert outs["store-all"].tobytes() == outs["store-none"].tobytes() == outs["checkpoint-every-3"].tobytes()
    peak = forward(Network(layers, StoragePolicy.store_all()), x0).counters.peak_stored_states
    assert peak == n + 1
    assert forward(Network(layers, StoragePolicy.store_none()), x0).counters.peak_stored_states <= 4


def test_layer_error_carries_index():
    net = Network([QuadraticProxLayer(0.0), SmoothProxLayer(10.0, CircularConvolution((4,), [1.0, -1.0]))])
    with pytest.raises(LayerError) as info:
        forward(net, np.ones(4))
    assert info.value.index == 1
    assert "layer 1" in str(info.value)


def test_shapes_must_chain():
    with pytest.raises(ValueError):
        Network([GradientLayer(0.5, [Identity((2,))], [np.zeros(2)]), GradientLayer(0.5, [Identity((3,))], [np.zeros(3)])])


def test_certificate_margin():
    layer = GradientLayer(0.2, [Diagonal([1.0, 2.0])], [np.zeros(2)])
    report = certify_invertible(Network([layer]))
    assert report.accepted
    assert report.min_margin() == pytest.approx(0.2, rel=1e-9)


def test_certificate_rejected_and_engine_refuses():
    layer = GradientLayer(0.3, [Diagonal([1.0, 2.0])], [np.zeros(2)])
    net = Network([layer, QuadraticProxLayer(0.1)], StoragePolicy.store_none())
    report = certify_invertible(net)
    assert not report.accepted and report.failures() == [0]
    assert report.layers[0].verdict.bound == pytest.approx(1.2, rel=1e-9)
    rec = forward(net, np.ones(2))
    with pytest.raises(CertificateError):
        backprop_memory_efficient(net, rec.output, np.ones(2))


def test_all_prox_network_certified_unconditionally():
    net = Network([QuadraticProxLayer(0.5), SmoothProxLayer(0.1, CircularConvolution((4,), [1.0, -1.0]))])
    report = certify_invertible(net)
    assert report.accepted
    assert report.layers[0].unconditional
    d = report.as_dict()
    assert d["accepted"] is True and len(d["layers"]) == 2
