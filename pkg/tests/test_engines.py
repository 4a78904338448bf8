import numpy as np
import pytest

from pbnet.diagnostics import rel_err
from pbnet.engines import (
    backprop,
    backprop_hybrid,
    backprop_memory_efficient,
    backprop_standard,
    policy_for,
)
from pbnet.fixed_point import FixedPointConfig
from pbnet.layers import GradientLayer, InvertibleResidualLayer, QuadraticProxLayer, SmoothProxLayer, constrain_lipschitz
from pbnet.network import Network, StoragePolicy, forward
from pbnet.numerics import DFT, CircularConvolution, Composition, Identity, Mask, random_tensor


def scalar_layer(alpha=0.5):
    return GradientLayer(alpha, [Identity((1,))], [np.zeros(1)], keys={"alpha": "alpha"})


def test_single_layer_chain_rule():
    net = Network([scalar_layer()])
    rec = forward(net, np.array([2.0]))
    rep = backprop_standard(net, rec, np.array([1.0]))
    assert rep.input_grad[0] == pytest.approx(0.5)
    assert rep.param_grads["alpha"] == pytest.approx(-2.0)


def test_two_layer_shared_step_matches_scalar_chain_rule():
    # x2 = x0 (1 - a)^2, so d x2/d a = -2 x0 (1 - a) and d x2/d x0 = (1 - a)^2
    a, x0 = 0.5, 2.0
    net = Network([scalar_layer(a), scalar_layer(a)])
    rep = backprop_standard(net, forward(net, np.array([x0])), np.array([1.0]))
    assert rep.input_grad[0] == pytest.approx((1 - a) ** 2)
    assert rep.param_grads["alpha"] == pytest.approx(-2 * x0 * (1 - a))
    # the per-layer contributions: layer 1 sees x1 = 1 and q = 1; layer 0 sees x0 = 2 and q = 0.5
    assert rep.layer_grads[1]["alpha"] == pytest.approx(-1.0)
    assert rep.layer_grads[0]["alpha"] == pytest.approx(-2.0 * 0.5)


def test_zero_cotangent_gives_zero_gradients():
    rng = np.random.default_rng(0)
    net, x0, _ = mixed_network(rng, 0.5, n=8, depth=4)
    rep = backprop_standard(net, forward(net, x0), np.zeros_like(x0))
    assert not np.any(rep.input_grad)
    assert all(not np.any(g) for g in rep.param_grads.values())


def test_memory_efficient_single_layer():
    net = Network([scalar_layer()], StoragePolicy.store_none())
    rec = forward(net, np.array([2.0]))
    rep = backprop_memory_efficient(net, rec.output, np.array([1.0]), FixedPointConfig(30))
    assert abs(rep.param_grads["alpha"] - (-2.0)) <= 1e-8


def test_identity_network_exact():
    net = Network([QuadraticProxLayer(0.0, keys={"lam": f"l{k}"}) for k in range(6)])
    x0 = random_tensor(np.random.default_rng(1), (4, 4))
    q = random_tensor(np.random.default_rng(2), (4, 4))
    std = backprop_standard(net, forward(net, x0), q)
    me = backprop_memory_efficient(net.with_policy(StoragePolicy.store_none()), x0, q, FixedPointConfig(30))
    assert np.array_equal(std.input_grad, me.input_grad)
    for k, g in std.param_grads.items():
        assert g == me.param_grads[k]
    assert me.counters.fixed_point_inner_iterations == 0


def mixed_network(rng, rho, n=16, depth=10):
    """Alternating gradient / smooth-prox layers with contraction factor ``rho``."""
    A = Composition([Mask((n, n), rng.choice(n * n, n * n // 2, replace=False)), DFT((n, n))])
    y = random_tensor(rng, A.out_shape)
    conv = CircularConvolution((n, n), rng.standard_normal((3, 3)), centered=True)
    s = float(np.max(np.abs(conv.transfer)) ** 2)
    layers = []
    for k in range(depth // 2):
        layers.append(GradientLayer(rho, [A], [y], keys={"alpha": f"alpha{k}"}, sigma_max=1.0))
        layers.append(SmoothProxLayer(rho / s, conv, keys={"lam": f"lam{k}"}))
    return Network(layers), random_tensor(rng, (n, n)), random_tensor(rng, (n, n))


def _engine_errors(net, x0, gt, T=30, k=3):
    rec = forward(net, x0)
    q = rec.output - gt
    std = backprop_standard(net, rec, q)
    out = {}
    for engine in ("memory-efficient", "hybrid"):
        n = net.with_policy(policy_for(engine, k))
        r = forward(n, x0)
        rep = backprop(engine, n, r, q, FixedPointConfig(T))
        out[engine] = max(rel_err(rep.param_grads[key], g) for key, g in std.param_grads.items())
    return out


@pytest.mark.parametrize("rho", [0.5, 0.8])
def test_engine_equivalence_mixed_network(rho):
    worst = {"memory-efficient": 0.0, "hybrid": 0.0}
    for seed in range(3):
        errs = _engine_errors(*mixed_network(np.random.default_rng(seed), rho))
        worst = {k: max(worst[k], errs[k]) for k in worst}
    assert worst["memory-efficient"] <= 1e-6
    assert worst["hybrid"] <= 1e-6


def test_engine_equivalence_with_residual_prior():
    rng = np.random.default_rng(3)
    n = 16
    A = Composition([Mask((n, n), rng.choice(n * n, 100, replace=False)), DFT((n, n))])
    y = random_tensor(rng, A.out_shape)
    res = constrain_lipschitz(InvertibleResidualLayer(rng.standard_normal((4, 2, 3, 3)), rng.standard_normal((2, 4, 3, 3)),
                                                      (n, n), keys={"W1": "W1", "W2": "W2"}))
    layers = []
    for _ in range(10):
        layers += [GradientLayer(0.5, [A], [y], sigma_max=1.0), res]
    errs = _engine_errors(Network(layers), random_tensor(rng, (n, n)), random_tensor(rng, (n, n)), k=4)
    assert max(errs.values()) <= 1e-6


def test_memory_efficient_peak_constant_in_depth():
    peaks = set()
    for depth in (2, 6, 20):
        net, x0, gt = mixed_network(np.random.default_rng(0), 0.5, n=8, depth=depth)
        net = net.with_policy(StoragePolicy.store_none())
        rec = forward(net, x0)
        rep = backprop("memory-efficient", net, rec, rec.output - gt, FixedPointConfig(10))
        peaks.add(max(rec.counters.peak_stored_states, rep.counters.peak_stored_states))
    assert len(peaks) == 1 and peaks.pop() <= 4


def test_hybrid_degenerate_cases_bit_identical():
    net, x0, gt = mixed_network(np.random.default_rng(4), 0.5, n=8, depth=8)
    rec = forward(net, x0)
    q = rec.output - gt
    std = backprop_standard(net, rec, q)
    h1 = backprop_hybrid(net.with_policy(policy_for("hybrid", 1)), forward(net.with_policy(policy_for("hybrid", 1)), x0), q)
    n8 = net.with_policy(policy_for("hybrid", 8))
    h8 = backprop_hybrid(n8, forward(n8, x0), q, FixedPointConfig(30))
    me_net = net.with_policy(policy_for("memory-efficient"))
    me_rec = forward(me_net, x0)
    me = backprop_memory_efficient(me_net, me_rec.output, q, FixedPointConfig(30), x0=me_rec.stored_states[0])
    for key in std.param_grads:
        assert np.asarray(h1.param_grads[key]).tobytes() == np.asarray(std.param_grads[key]).tobytes()
        assert np.asarray(h8.param_grads[key]).tobytes() == np.asarray(me.param_grads[key]).tobytes()
    assert h1.input_grad.tobytes() == std.input_grad.tobytes()
    assert h8.input_grad.tobytes() == me.input_grad.tobytes()


def test_checkpoint_residuals_reset_to_zero():
    net, x0, gt = mixed_network(np.random.default_rng(5), 0.6, n=8, depth=20)
    shadow = forward(net, x0)
    q = shadow.output - gt
    maxima = {}
    for k in (5, 20):
        n = net.with_policy(policy_for("hybrid", k))
        rec = forward(n, x0)
        rep = backprop_hybrid(n, rec, q, FixedPointConfig(6), shadow=shadow)
        for idx in rec.stored_states:
            if idx < net.depth:
                assert rep.post_residuals[idx] == 0.0
        maxima[k] = max(rep.post_residuals.values())
    assert maxima[5] < maxima[20]


def test_gradients_are_summed_over_shared_layers():
    net, x0, gt = mixed_network(np.random.default_rng(6), 0.5, n=8, depth=2)
    grad, prox = net.layers
    shared = Network([grad, prox, grad, prox])
    rec = forward(shared, x0)
    rep = backprop_standard(shared, rec, rec.output - gt)
    # accumulated in reverse layer order
    assert rep.param_grads["alpha0"] == rep.layer_grads[2]["alpha0"] + rep.layer_grads[0]["alpha0"]
    assert rep.param_grads["lam0"] == rep.layer_grads[3]["lam0"] + rep.layer_grads[1]["lam0"]
