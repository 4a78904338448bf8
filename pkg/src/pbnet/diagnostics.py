"""Gradient checks and memory/time benchmarks.

Both are used by the command-line tool and the test-suite.  Gradient checks
compare analytic gradients against central finite differences (per layer and
for the whole measurement + reconstruction pipeline) and the memory-efficient
and hybrid engines against standard backpropagation.  Benchmarks report the
instrumentation counters of each engine at several network depths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .engines import backprop, policy_for
from .fixed_point import FixedPointConfig
from .instrumentation import InstrumentationCounters
from .layers import GradientLayer, Layer
from .network import Network, StoragePolicy, expected_stored, forward
from .training import example_gradient, loss_mse, pipeline_loss

FD_STEP = 1e-6
THRESHOLDS = {
    "layer-vjp-vs-fd": 1e-5,
    "standard-vs-fd": 1e-5,
    "memory-efficient-vs-standard": 1e-6,
    "hybrid-vs-standard": 1e-6,
}
BENCH_DEPTHS = (5, 10, 20, 40)


@dataclass(frozen=True)
class CheckRow:
    check: str
    target: str
    rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err <= self.threshold)

    def as_tuple(self):
        return (self.check, self.target, self.rel_err, self.threshold, "pass" if self.passed else "fail")


GRADCHECK_HEADER = ("check", "target", "max_rel_err", "threshold", "status")


def rel_err(a, b) -> float:
    """Normwise ``||a - b|| / ||b||``; zero when both vanish."""
    a = np.asarray(a)
    b = np.asarray(b)
    d = float(np.linalg.norm(a - b))
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return d
    return d / nb


def _flat(value) -> np.ndarray:
    if isinstance(value, tuple):
        return np.concatenate([np.ravel(v) for v in value]) if value else np.zeros(0)
    return np.ravel(np.asarray(value))


def fd_gradient(fn, value, step: float = FD_STEP):
    """Central-difference gradient of real ``fn`` at ``value``.

    ``value`` may be a float, a real or complex array, or a tuple of arrays.
    For complex entries the result follows ``dL = Re<grad, d value>``, so the
    derivative along the real part lands in the real part of the gradient
    and the derivative along the imaginary part in the imaginary part.
    """
    if isinstance(value, tuple):
        parts = [np.asarray(v) for v in value]
        sizes = [p.size for p in parts]
        offsets = np.cumsum([0] + sizes)

        def unpack(flat):
            return tuple(flat[offsets[i]:offsets[i + 1]].reshape(parts[i].shape) for i in range(len(parts)))

        flat0 = np.concatenate([p.ravel() for p in parts]).astype(complex)
        g = fd_gradient(lambda f: fn(unpack(f)), flat0, step)
        return unpack(g)
    scalar = np.ndim(value) == 0 and not isinstance(value, np.ndarray)
    arr = np.array(value, dtype=complex if np.iscomplexobj(value) else np.float64, ndmin=1)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)

    def call(v):
        return fn(float(v[0]) if scalar else v.reshape(np.shape(value)))

    directions = (1.0, 1j) if np.iscomplexobj(arr) else (1.0,)
    for i in range(flat.size):
        for d in directions:
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += step * d
            minus[i] -= step * d
            slope = (call(plus) - call(minus)) / (2 * step)
            gflat[i] += slope * d
    return float(grad[0]) if scalar else grad.reshape(np.shape(value))


def _local_layer(layer: Layer) -> Layer:
    """Copy of ``layer`` whose gradients are keyed by local parameter name."""
    names = list(layer.local_params())
    if isinstance(layer, GradientLayer):
        names.append("measurements")
    return replace(layer, keys={n: n for n in names})


def check_layer_vjp(layer: Layer, x, q, step: float = FD_STEP) -> dict:
    """Relative error of each VJP output of one layer against finite differences.

    The probe is ``phi = Re<q, layer(x)>``; keys are ``"input"`` and the
    layer's local parameter names.
    """
    local = _local_layer(layer)
    q_in, grads = local.vjp(x, q, local.forward(x))

    def probe(l, xx):
        return float(np.real(np.vdot(q, l.forward(xx))))

    out = {"input": rel_err(q_in, fd_gradient(lambda xx: probe(local, xx), x, step))}
    for name, value in local.local_params().items():
        if name not in grads:
            continue
        fd = fd_gradient(lambda v: probe(local._with_local({name: v}), x), value, step)
        out[name] = rel_err(_flat(grads[name]), _flat(fd))
    if isinstance(local, GradientLayer) and "measurements" in grads:
        fd = fd_gradient(lambda ys: probe(local.with_measurements(ys), x), local.measurements, step)
        out["measurements"] = rel_err(_flat(grads["measurements"]), _flat(fd))
    return out


def layer_rows(net: Network, x0, rng: np.random.Generator, step: float = FD_STEP) -> list:
    """Per-layer VJP checks at the true layer inputs with random cotangents."""
    states = forward(net.with_policy(StoragePolicy.store_all()), x0).stored_states
    rows = []
    for k, layer in enumerate(net.layers):
        x = states[k]
        q = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
        for name, err in check_layer_vjp(layer, x, q, step).items():
            rows.append(CheckRow("layer-vjp-vs-fd", f"layer {k} ({layer.kind}): {name}",
                                 err, THRESHOLDS["layer-vjp-vs-fd"]))
    return rows


def _engine_rows(grads_by_engine: dict) -> list:
    rows = []
    ref = grads_by_engine["standard"]
    for engine in ("memory-efficient", "hybrid"):
        check = f"{engine}-vs-standard"
        for key, g in ref.items():
            rows.append(CheckRow(check, key, rel_err(_flat(grads_by_engine[engine][key]), _flat(g)),
                                 THRESHOLDS[check]))
    return rows


def gradcheck_network(net: Network, x0, x_gt, inv_cfg: FixedPointConfig, checkpoint_every: int = 1,
                      seed: int = 0, step: float = FD_STEP, per_layer: bool = True) -> list:
    """All checks for a bare network under the 1/2-MSE loss against ``x_gt``.

    Parameter keys are the network's global keys plus ``"input"`` for the
    gradient with respect to ``x0``.  ``per_layer=False`` skips the local VJP
    rows, e.g. for layers sitting on a parameter boundary where central
    differences would leave the valid range.
    """
    params = net.params()

    def loss(p, x):
        out = forward(net.with_params(p).with_policy(StoragePolicy.store_none()), x).output
        return loss_mse(out, x_gt)[0]

    grads = {}
    for engine in ("standard", "memory-efficient", "hybrid"):
        n = net.with_policy(policy_for(engine, checkpoint_every))
        record = forward(n, x0)
        _, q = loss_mse(record.output, x_gt)
        report = backprop(engine, n, record, q, inv_cfg)
        grads[engine] = dict(report.param_grads, input=report.input_grad)

    rows = layer_rows(net, x0, np.random.default_rng(seed), step) if per_layer else []
    ref = grads["standard"]
    for key, value in params.items():
        fd = fd_gradient(lambda v: loss(dict(params, **{key: v}), x0), value, step)
        rows.append(CheckRow("standard-vs-fd", key, rel_err(_flat(ref[key]), _flat(fd)), THRESHOLDS["standard-vs-fd"]))
    fd = fd_gradient(lambda x: loss(params, x), np.asarray(x0, dtype=complex), step)
    rows.append(CheckRow("standard-vs-fd", "input", rel_err(ref["input"], fd), THRESHOLDS["standard-vs-fd"]))
    rows.extend(_engine_rows(grads))
    return rows


def gradcheck_app(cfg: ExperimentConfig, step: float = FD_STEP) -> list:
    """All checks for an application pipeline (measurement formation included)."""
    from .apps import build_app

    app = build_app(cfg)
    params = dict(app.params0)
    ex = app.train_set[0]
    net = app.network(params, ex)
    rows = layer_rows(net, app.initial_state(params, ex, net), np.random.default_rng(cfg.seed), step)

    grads = {}
    for engine in ("standard", "memory-efficient", "hybrid"):
        grads[engine] = example_gradient(app, params, ex, replace(cfg, engine=engine))[1]
    for key, g in grads["standard"].items():
        fd = fd_gradient(lambda v: pipeline_loss(app, dict(params, **{key: v}), ex), params[key], step)
        rows.append(CheckRow("standard-vs-fd", key, rel_err(_flat(g), _flat(fd)), THRESHOLDS["standard-vs-fd"]))
    rows.extend(_engine_rows(grads))
    return rows


def summarize(rows: list) -> list:
    """Collapse rows to the maximum error per (check, target)."""
    best: dict = {}
    for r in rows:
        key = (r.check, r.target)
        if key not in best or r.rel_err > best[key].rel_err:
            best[key] = r
    return list(best.values())


def failures(rows: list) -> list:
    return [r for r in rows if not r.passed]


# ---------------------------------------------------------------------------
# benchmark

BENCH_HEADER = (
    "n_layers", "engine", "checkpoint_every", "peak_stored_states", "expected_peak",
    "forward_ops", "backward_ops", "total_ops", "inner_iterations",
    "memory_ratio_vs_standard", "ops_ratio_vs_standard",
)


@dataclass(frozen=True)
class BenchRow:
    n_layers: int
    engine: str
    checkpoint_every: int
    peak_stored_states: int
    expected_peak: int
    forward_ops: int
    backward_ops: int
    total_ops: int
    inner_iterations: int
    memory_ratio_vs_standard: float
    ops_ratio_vs_standard: float

    def as_tuple(self):
        return tuple(getattr(self, name) for name in BENCH_HEADER)


def expected_peak(engine: str, n: int, k: int) -> int:
    """Peak stored states predicted by the storage policy of ``engine``."""
    return expected_stored(n, policy_for(engine, k))


def bench_network(net: Network, x0, x_gt, inv_cfg: FixedPointConfig, checkpoint_every: int) -> list:
    """Counters for one network under each engine."""
    raw = {}
    for engine in ("standard", "memory-efficient", "hybrid"):
        n = net.with_policy(policy_for(engine, checkpoint_every))
        record = forward(n, x0)
        _, q = loss_mse(record.output, x_gt)
        report = backprop(engine, n, record, q, inv_cfg)
        total = record.counters.merged(report.counters)
        raw[engine] = (total, record.counters, report.counters)
    std_total, _, _ = raw["standard"]
    rows = []
    for engine, (total, fwd, bwd) in raw.items():
        rows.append(BenchRow(
            n_layers=net.depth,
            engine=engine,
            checkpoint_every=checkpoint_every if engine == "hybrid" else 0,
            peak_stored_states=total.peak_stored_states,
            expected_peak=expected_peak(engine, net.depth, checkpoint_every),
            forward_ops=fwd.operator_applications,
            backward_ops=bwd.operator_applications,
            total_ops=total.operator_applications,
            inner_iterations=total.fixed_point_inner_iterations,
            memory_ratio_vs_standard=total.peak_stored_states / std_total.peak_stored_states,
            ops_ratio_vs_standard=total.operator_applications / std_total.operator_applications,
        ))
    return rows


def bench_app(cfg: ExperimentConfig, depths=BENCH_DEPTHS) -> list:
    """Benchmark the configured application at each depth (in layers).

    The network is built with enough unrolls and truncated to the requested
    number of layers, so odd depths are allowed.
    """
    from .apps import build_app

    rows = []
    inv_cfg = FixedPointConfig(cfg.fp_iters, cfg.fp_tol)
    for n in depths:
        app = build_app(replace(cfg, n_unrolls=math.ceil(n / 2)))
        params = dict(app.params0)
        ex = app.train_set[0]
        full = app.network(params, ex)
        net = Network(full.layers[:n], full.policy)
        x0 = app.initial_state(params, ex, full)
        rows.extend(bench_network(net, x0, ex.ground_truth, inv_cfg, cfg.checkpoint_every))
    return rows


def count_forward_per_layer(net: Network, x0) -> list:
    """Operator applications of each layer's plain forward pass."""
    out = []
    x = x0
    for layer in net.layers:
        c = InstrumentationCounters()
        x = layer.forward(x, c)
        out.append(c.operator_applications)
    return out
