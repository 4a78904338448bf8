"""Loss, optimizer, measurement simulation and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .config import ExperimentConfig
from .engines import backprop, policy_for
from .fixed_point import FixedPointConfig
from .instrumentation import InstrumentationCounters
from .layers import CertificateError
from .network import certify_invertible, forward
from .numerics import LinearOperator, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingExample:
    ground_truth: np.ndarray
    noise: tuple = ()


def simulate_measurements(A: LinearOperator, x_gt, noise_std: float, seed) -> np.ndarray:
    """``y = A x + n`` with complex Gaussian ``n`` of per-component std ``noise_std``."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    y = A.forward(x_gt)
    if noise_std == 0:
        return y
    return y + complex_noise(np.random.default_rng(seed), y.shape, noise_std)


def complex_noise(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def loss_mse(x_n, x_gt) -> tuple[float, np.ndarray]:
    """``1/2 ||x_N - x_gt||^2`` and its gradient ``x_N - x_gt``."""
    x_n, x_gt = as_tensor(x_n), as_tensor(x_gt)
    if x_n.shape != x_gt.shape:
        raise ValueError("shape mismatch between output and ground truth")
    r = x_n - x_gt
    return 0.5 * float(np.vdot(r, r).real), r


def metric_nrmse(a, b) -> float:
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("nrmse: zero reference")
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / nb)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    method: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, object],
    grads: Mapping[str, object],
    project: Callable[[dict], dict] | None = None,
) -> dict:
    """One SGD or Adam update of every parameter that has a gradient.

    ``project`` restores feasibility afterwards (certificate maintenance).
    ``state`` is updated in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    new = dict(params)
    for name in params:
        if name not in grads:
            continue
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if state.method == "sgd":
            p_new = p - state.lr * g
        else:
            m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1 - state.beta1) * g
            v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            p_new = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new[name] = float(p_new) if np.ndim(params[name]) == 0 else p_new
    return project(new) if project is not None else new


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_loss: float
    peak_stored_states: int
    operator_applications: int
    grad_norm: float

    def as_tuple(self):
        return (self.epoch, self.train_loss, self.test_loss, self.peak_stored_states,
                self.operator_applications, self.grad_norm)


CSV_HEADER = ("epoch", "train_loss", "test_loss", "peak_stored_states", "operator_applications", "grad_norm")


@dataclass
class TrainingLog:
    config: ExperimentConfig
    rows: list
    params: dict
    certificate: dict
    residual_trace: list = field(default_factory=list)

    @property
    def final_test_loss(self) -> float:
        return self.rows[-1].test_loss

    @property
    def final_train_loss(self) -> float:
        return self.rows[-1].train_loss


def grad_norm(grads: Mapping[str, object]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(np.asarray(g)))) for g in grads.values())))


def example_gradient(app, params, example, cfg: ExperimentConfig, shadow: bool = False):
    """Loss, chained parameter gradients and counters for one example."""
    inv_cfg = FixedPointConfig(cfg.fp_iters, cfg.fp_tol)
    net = app.network(params, example).with_policy(policy_for(cfg.engine, cfg.checkpoint_every))
    x0 = app.initial_state(params, example, net)
    record = forward(net, x0)
    value, q = loss_mse(record.output, example.ground_truth)
    shadow_record = forward(net.with_policy(policy_for("standard")), x0) if shadow else None
    report = backprop(cfg.engine, net, record, q, inv_cfg, shadow=shadow_record)
    grads = app.chain(params, example, report)
    counters = record.counters.merged(report.counters)
    return value, grads, counters, report


def pipeline_loss(app, params, example) -> float:
    """Loss of the full measurement + reconstruction pipeline (forward only)."""
    net = app.network(params, example).with_policy(policy_for("memory-efficient"))
    out = forward(net, app.initial_state(params, example, net)).output
    return loss_mse(out, example.ground_truth)[0]


def evaluate(app, params, examples) -> float:
    return float(np.mean([pipeline_loss(app, params, ex) for ex in examples]))


def train(cfg: ExperimentConfig, shadow: bool = False, app=None) -> TrainingLog:
    """Epoch loop: forward, loss, selected engine, optimizer step, projection.

    Epoch 0 is the evaluation before any update.  Losses are means of the
    1/2-MSE over the training and test sets after each epoch.
    """
    from .apps import build_app

    app = app if app is not None else build_app(cfg)
    params = dict(app.params0)
    state = OptimizerState(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    rows = [EpochRow(0, evaluate(app, params, app.train_set), evaluate(app, params, app.test_set), 0, 0, 0.0)]
    traces = []
    cert = certify_invertible(app.network(params, app.train_set[0]))
    if cfg.engine != "standard" and not cert.accepted:
        raise CertificateError(f"network is not certified invertible (layers {cert.failures()})")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(app.train_set))
        peak, ops, norms = 0, 0, []
        for start in range(0, len(order), cfg.batch_size):
            batch = [app.train_set[i] for i in order[start:start + cfg.batch_size]]
            total: dict = {}
            for ex in batch:
                _, grads, counters, report = example_gradient(app, params, ex, cfg, shadow)
                for k, g in grads.items():
                    total[k] = total[k] + g if k in total else g
                peak = max(peak, counters.peak_stored_states)
                ops += counters.operator_applications
                if shadow:
                    traces.append({"epoch": epoch, "residuals": dict(report.residuals)})
            total = {k: g / len(batch) for k, g in total.items()}
            norms.append(grad_norm(total))
            params = optimizer_step(state, params, total, app.project)
        rows.append(EpochRow(
            epoch,
            evaluate(app, params, app.train_set),
            evaluate(app, params, app.test_set),
            peak,
            ops,
            float(np.mean(norms)),
        ))
        logger.info("epoch %d train %.6g test %.6g", epoch, rows[-1].train_loss, rows[-1].test_loss)
    cert = certify_invertible(app.network(params, app.train_set[0]))
    return TrainingLog(cfg, rows, params, cert.as_dict(), traces)
