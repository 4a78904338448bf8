"""Invertible layers of an unrolled proximal-gradient network.

Four kinds are provided:

* :class:`GradientLayer` -- data-consistency step ``z = x - alpha grad D(x)`` with
  ``D(x) = 1/2 sum_i c_i ||A_i x - y_i||^2``.  Inverted by fixed-point iteration.
* :class:`QuadraticProxLayer` -- ``prox`` of ``(lam/2)||v||^2``, i.e. ``z / (1 + lam)``.
* :class:`SmoothProxLayer` -- ``prox`` of ``(lam/2)||C v||^2``.  The forward map is
  implicit and solved by fixed-point iteration; the inverse is explicit.
* :class:`InvertibleResidualLayer` -- ``x + g(x)`` with a Lipschitz-bounded
  two-layer convolutional ``g``.  Inverted by fixed-point iteration.

Each layer exposes ``forward``, ``inverse`` and ``vjp``.  Learnable
parameters are addressed through ``keys``, a mapping from the layer's local
parameter name to a global key; layers that share a global key share the
parameter.  Gradients are reported per global key, with the convention
``dL = Re<grad, d theta>``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.special import expit

from .fixed_point import (
    ContractionVerdict,
    FixedPointConfig,
    check_contraction,
    fixed_point_solve,
)
from .instrumentation import NULL, InstrumentationCounters
from .numerics import (
    CircularConvolution,
    Composition,
    LinearOperator,
    ShapeError,
    WeightedSum,
    as_tensor,
    power_iteration,
)

SIGMA_ITERS = 100
DEFAULT_INNER = FixedPointConfig(max_iters=1000, tolerance=1e-13)


class CertificateError(ValueError):
    """Inversion was requested for a layer that is not certified invertible."""


@dataclass(frozen=True)
class LayerCertificate:
    kind: str
    verdict: ContractionVerdict
    unconditional: bool = False

    @property
    def accepted(self) -> bool:
        return self.verdict.accepted


def _rdot(a, b) -> float:
    return float(np.real(np.vdot(a, b)))


def _check_input(layer, x):
    shape = layer.shape
    if shape is not None and tuple(x.shape) != tuple(shape):
        raise ShapeError(f"{layer.kind}: input has shape {tuple(x.shape)}, expected {tuple(shape)}")


class Layer:
    """Common parameter plumbing.  Subclasses are frozen dataclasses."""

    kind = "abstract"
    keys: Mapping[str, str]

    @property
    def shape(self) -> tuple[int, ...] | None:
        return None

    def local_params(self) -> dict:
        raise NotImplementedError

    def params(self) -> dict:
        """Learnable values keyed by global key."""
        local = self.local_params()
        return {g: local[name] for name, g in self.keys.items() if name in local}

    def with_params(self, values: Mapping[str, object]) -> "Layer":
        update = {name: values[g] for name, g in self.keys.items() if g in values}
        return self._with_local(update) if update else self

    def _with_local(self, update: dict) -> "Layer":
        return replace(self, **update)

    def _globalize(self, local_grads: dict) -> dict:
        return {g: local_grads[name] for name, g in self.keys.items() if name in local_grads}

    def certificate(self) -> LayerCertificate:
        return LayerCertificate(self.kind, check_contraction(0.0), unconditional=True)

    def forward(self, x, counters: InstrumentationCounters = NULL):
        raise NotImplementedError

    def inverse(self, x_next, cfg: FixedPointConfig = FixedPointConfig(), counters: InstrumentationCounters = NULL):
        raise NotImplementedError

    def vjp(self, x_in, q_out, x_out=None, counters: InstrumentationCounters = NULL):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# gradient layer


def _design_split(op: LinearOperator):
    """Return (weighted_sum, rest) if ``op`` is ``W`` or ``W o rest`` with ``W`` a weighted sum."""
    if isinstance(op, WeightedSum):
        return op, None
    if isinstance(op, Composition) and isinstance(op.operators[0], WeightedSum):
        rest = op.operators[1:]
        return op.operators[0], (rest[0] if len(rest) == 1 else Composition(rest))
    return None, None


def _with_design_row(op: LinearOperator, row) -> LinearOperator:
    ws, _ = _design_split(op)
    if ws is None:
        raise ValueError("operator has no leading weighted sum to carry design coefficients")
    new_ws = ws.with_coefficients(row)
    if isinstance(op, WeightedSum):
        return new_ws
    return Composition((new_ws,) + tuple(op.operators[1:]))


def _apply_with_parts(op: LinearOperator, x):
    """``op(x)`` plus the unweighted operand images when ``op`` carries a design."""
    ws, rest = _design_split(op)
    if ws is None:
        return op.forward(x), None
    u = x if rest is None else rest._forward(x)
    parts = ws.parts(u)
    return ws.combine(parts), parts


@dataclass(frozen=True, eq=False)
class GradientLayer(Layer):
    """``z = x - alpha * sum_i c_i A_i^H (A_i x - y_i)``.

    Local parameter names: ``alpha``, ``weights`` (the ``c_i``), ``design``
    (rows are the coefficients of each operator's leading weighted sum) and
    ``measurements`` (gradient only; the ``y_i`` are data, but their
    cotangent is needed to differentiate through measurement formation).
    ``sigma_max`` may be supplied to skip the power iteration.
    """

    alpha: float
    operators: tuple
    measurements: tuple
    weights: np.ndarray | None = None
    keys: Mapping[str, str] = field(default_factory=dict)
    sigma_max: float | None = None

    kind = "gradient"

    def __post_init__(self):
        ops = tuple(self.operators)
        ys = tuple(as_tensor(y) for y in self.measurements)
        if not ops or len(ops) != len(ys):
            raise ValueError("gradient layer needs one measurement per operator")
        for op, y in zip(ops, ys):
            if op.in_shape != ops[0].in_shape:
                raise ShapeError("gradient layer operators must share an input shape")
            if tuple(y.shape) != op.out_shape:
                raise ShapeError(f"measurement shape {y.shape} does not match operator output {op.out_shape}")
        w = np.ones(len(ops)) if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if len(w) != len(ops):
            raise ValueError("one weight per fidelity term")
        if not self.alpha > 0:
            raise ValueError("step size must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "operators", ops)
        object.__setattr__(self, "measurements", ys)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def shape(self):
        return self.operators[0].in_shape

    @property
    def design(self) -> np.ndarray | None:
        rows = []
        for op in self.operators:
            ws, _ = _design_split(op)
            if ws is None:
                return None
            rows.append(ws.coefficients)
        if len({len(r) for r in rows}) != 1:
            return None
        return np.stack(rows)

    def local_params(self):
        out = {"alpha": self.alpha, "weights": self.weights}
        d = self.design
        if d is not None:
            out["design"] = d
        return out

    def _with_local(self, update):
        update = dict(update)
        design = update.pop("design", None)
        if "measurements" in update:
            update.pop("measurements")
        if design is not None:
            design = np.asarray(design, dtype=np.float64)
            update["operators"] = tuple(_with_design_row(op, row) for op, row in zip(self.operators, design))
        if "operators" in update or "weights" in update:
            update.setdefault("sigma_max", None)
        return replace(self, **update)

    def with_measurements(self, measurements) -> "GradientLayer":
        return replace(self, measurements=tuple(measurements))

    @functools.cached_property
    def fidelity_sigma_max(self) -> float:
        """Largest eigenvalue of ``sum_i c_i A_i^H A_i``."""
        if self.sigma_max is not None:
            return float(self.sigma_max)
        return fidelity_sigma_max(self.operators, self.weights)

    def lipschitz_bound(self) -> float:
        return self.alpha * self.fidelity_sigma_max

    def certificate(self) -> LayerCertificate:
        return LayerCertificate(self.kind, check_contraction(self.lipschitz_bound()))

    def data_gradient(self, x, counters: InstrumentationCounters = NULL):
        grad = None
        for c, op, y in zip(self.weights, self.operators, self.measurements):
            term = c * op._adjoint(op._forward(x) - y)
            grad = term if grad is None else grad + term
        counters.ops(2 * len(self.operators))
        return grad

    def forward(self, x, counters: InstrumentationCounters = NULL):
        x = as_tensor(x)
        _check_input(self, x)
        return x - self.alpha * self.data_gradient(x, counters)

    def inverse(self, x_next, cfg: FixedPointConfig = FixedPointConfig(), counters: InstrumentationCounters = NULL):
        z = as_tensor(x_next)
        _check_input(self, z)
        cert = self.certificate()
        if not cert.accepted:
            raise CertificateError(
                f"gradient layer not invertible: alpha*sigma_max = {cert.verdict.bound:.4g} >= 1"
            )
        alpha = self.alpha
        res = fixed_point_solve(lambda x: z + alpha * self.data_gradient(x, counters), z, cfg)
        counters.inner(res.iterations_used)
        return res.solution

    def vjp(self, x_in, q_out, x_out=None, counters: InstrumentationCounters = NULL):
        x = as_tensor(x_in)
        q = as_tensor(q_out)
        _check_input(self, x)
        alpha = self.alpha
        normal_q = None
        g_alpha = 0.0
        g_weights = np.zeros(len(self.operators))
        g_design = []
        g_meas = []
        for i, (c, op, y) in enumerate(zip(self.weights, self.operators, self.measurements)):
            ax, parts_x = _apply_with_parts(op, x)
            aq, parts_q = _apply_with_parts(op, q)
            r = ax - y
            term = c * op._adjoint(aq)
            normal_q = term if normal_q is None else normal_q + term
            rq = _rdot(r, aq)
            g_alpha -= c * rq
            g_weights[i] = -alpha * rq
            if parts_x is not None:
                g_design.append(
                    [-alpha * c * (_rdot(r, pq) + _rdot(px, aq)) for px, pq in zip(parts_x, parts_q)]
                )
            g_meas.append(alpha * c * aq)
        counters.ops(3 * len(self.operators))
        grads = {"alpha": g_alpha, "weights": g_weights, "measurements": tuple(g_meas)}
        if g_design and len(g_design) == len(self.operators):
            grads["design"] = np.asarray(g_design)
        return q - alpha * normal_q, self._globalize(grads)


def fidelity_sigma_max(operators: Sequence[LinearOperator], weights=None, iters: int = SIGMA_ITERS, seed: int = 0) -> float:
    """Power-iteration estimate of the top eigenvalue of ``sum_i c_i A_i^H A_i``."""
    operators = tuple(operators)
    w = np.ones(len(operators)) if weights is None else np.asarray(weights, dtype=np.float64)

    def normal(v):
        out = None
        for c, op in zip(w, operators):
            t = c * op._normal(v)
            out = t if out is None else out + t
        return out

    return power_iteration(normal, operators[0].in_shape, iters, seed).value


# ---------------------------------------------------------------------------
# proximal layers


@dataclass(frozen=True, eq=False)
class QuadraticProxLayer(Layer):
    """``prox`` of ``(lam/2)||v||^2``: ``z -> z / (1 + lam)``.  Local name ``lam``."""

    lam: float
    keys: Mapping[str, str] = field(default_factory=dict)

    kind = "quadratic-prox"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("prox strength must be nonnegative")
        object.__setattr__(self, "lam", float(self.lam))

    def local_params(self):
        return {"lam": self.lam}

    def forward(self, x, counters=NULL):
        return as_tensor(x) / (1.0 + self.lam)

    def inverse(self, x_next, cfg=FixedPointConfig(), counters=NULL):
        return (1.0 + self.lam) * as_tensor(x_next)

    def vjp(self, x_in, q_out, x_out=None, counters=NULL):
        q = as_tensor(q_out)
        scale = 1.0 + self.lam
        if x_out is None:
            x_out = as_tensor(x_in) / scale
        grads = {"lam": -_rdot(x_out, q) / scale}
        return q / scale, self._globalize(grads)


@dataclass(frozen=True, eq=False)
class SmoothProxLayer(Layer):
    """``prox`` of ``(lam/2)||C v||^2``.

    Forward solves ``v = z - lam C^H C v`` by fixed-point iteration from
    ``v = z`` (requires ``lam * sigma_max(C^H C) < 1``); the inverse is the
    explicit ``z = x + lam C^H C x``.  Local name ``lam``.
    """

    lam: float
    filter: LinearOperator
    inner_cfg: FixedPointConfig = DEFAULT_INNER
    keys: Mapping[str, str] = field(default_factory=dict)

    kind = "smooth-prox"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("prox strength must be nonnegative")
        if self.filter.in_shape != self.filter.out_shape:
            raise ShapeError("smooth prox filter must be square")
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def shape(self):
        return self.filter.in_shape

    @functools.cached_property
    def filter_sigma_max(self) -> float:
        if isinstance(self.filter, CircularConvolution):
            return float(np.max(np.abs(self.filter.transfer)) ** 2)
        return power_iteration(self.filter.normal, self.filter.in_shape, SIGMA_ITERS, 0).value

    def contraction(self) -> float:
        return self.lam * self.filter_sigma_max

    def local_params(self):
        return {"lam": self.lam}

    def _gram(self, v, counters):
        counters.ops(2)
        return self.filter._normal(v)

    def _solve(self, rhs, counters):
        verdict = check_contraction(self.contraction())
        if not verdict.accepted:
            raise CertificateError(
                f"smooth prox implicit solve is not contractive: lam*sigma_max = {verdict.bound:.4g}"
            )
        lam = self.lam
        res = fixed_point_solve(lambda v: rhs - lam * self._gram(v, counters), rhs, self.inner_cfg)
        counters.inner(res.iterations_used)
        return res.solution

    def forward(self, x, counters=NULL):
        z = as_tensor(x)
        _check_input(self, z)
        return self._solve(z, counters)

    def inverse(self, x_next, cfg=FixedPointConfig(), counters=NULL):
        x = as_tensor(x_next)
        _check_input(self, x)
        return x + self.lam * self._gram(x, counters)

    def vjp(self, x_in, q_out, x_out=None, counters=NULL):
        q = as_tensor(q_out)
        v = self.forward(x_in, counters) if x_out is None else as_tensor(x_out)
        u = self._solve(q, counters)
        grads = {"lam": -_rdot(self._gram(v, counters), u)}
        return u, self._globalize(grads)


# ---------------------------------------------------------------------------
# invertible residual layer


def softplus0(u):
    """Softplus shifted to pass through the origin; derivative in (0, 1)."""
    return np.logaddexp(0.0, u) - np.log(2.0)


def _offsets(k: int) -> np.ndarray:
    return np.arange(k) - k // 2


@dataclass(frozen=True, eq=False)
class ConvBank:
    """Real multi-channel circular convolution with centered ``k x k`` kernels.

    ``kernels`` has shape ``(out_channels, in_channels, k, k)``.
    """

    kernels: np.ndarray
    image_shape: tuple

    def __post_init__(self):
        w = np.array(self.kernels, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError("kernels must have shape (out, in, k, k)")
        w.setflags(write=False)
        object.__setattr__(self, "kernels", w)
        object.__setattr__(self, "image_shape", tuple(int(n) for n in self.image_shape))

    @functools.cached_property
    def _rows(self):
        h, w = self.image_shape
        o = _offsets(self.kernels.shape[2])
        return np.mod(o, h)[:, None], np.mod(o, w)[None, :]

    @functools.cached_property
    def transfer(self) -> np.ndarray:
        full = np.zeros(self.kernels.shape[:2] + self.image_shape)
        ri, ci = self._rows
        full[:, :, ri, ci] = self.kernels
        return sfft.fft2(full)

    def apply(self, x):
        return sfft.ifft2(np.einsum("oihw,ihw->ohw", self.transfer, sfft.fft2(x))).real

    def adjoint(self, y):
        return sfft.ifft2(np.einsum("oihw,ohw->ihw", np.conj(self.transfer), sfft.fft2(y))).real

    def kernel_gradient(self, y_cot, x):
        """Gradient of ``<y_cot, apply(x)>`` with respect to the kernels."""
        corr = sfft.ifft2(sfft.fft2(y_cot)[:, None] * np.conj(sfft.fft2(x))[None]).real
        ri, ci = self._rows
        return corr[:, :, ri, ci]

    def spectral_norm(self) -> float:
        """Exact operator 2-norm: the largest per-frequency singular value."""
        mats = np.moveaxis(self.transfer, (0, 1), (-2, -1))
        return float(np.max(np.linalg.norm(mats, ord=2, axis=(-2, -1))))

    def scaled(self, s: float) -> "ConvBank":
        return ConvBank(self.kernels * s, self.image_shape)


def _to_channels(x):
    return np.stack([x.real, x.imag])


def _from_channels(c):
    return c[0] + 1j * c[1]


@dataclass(frozen=True, eq=False)
class InvertibleResidualLayer(Layer):
    """``v = x + g(x)``, ``g(x) = W2 * softplus0(W1 * x)`` on real/imag channels.

    ``W1`` has shape ``(hidden, 2, k, k)`` and ``W2`` shape ``(2, hidden, k, k)``.
    The inverse iterates ``x <- v - g(x)``, which contracts when
    ``||W1|| ||W2|| < 1``.  Local names ``W1`` and ``W2``.
    """

    W1: np.ndarray
    W2: np.ndarray
    image_shape: tuple
    lipschitz_budget: float = 0.5
    inner_cfg: FixedPointConfig = FixedPointConfig(max_iters=6)
    keys: Mapping[str, str] = field(default_factory=dict)

    kind = "invertible-residual"

    def __post_init__(self):
        if not 0.0 < self.lipschitz_budget < 1.0:
            raise ValueError("lipschitz budget must lie in (0, 1)")
        shape = tuple(int(n) for n in self.image_shape)
        b1, b2 = ConvBank(self.W1, shape), ConvBank(self.W2, shape)
        if b1.kernels.shape[1] != 2 or b2.kernels.shape[0] != 2 or b1.kernels.shape[0] != b2.kernels.shape[1]:
            raise ValueError("W1 must map 2 -> hidden channels and W2 hidden -> 2")
        object.__setattr__(self, "image_shape", shape)
        object.__setattr__(self, "W1", b1.kernels)
        object.__setattr__(self, "W2", b2.kernels)
        object.__setattr__(self, "bank1", b1)
        object.__setattr__(self, "bank2", b2)

    @property
    def shape(self):
        return self.image_shape

    def local_params(self):
        return {"W1": self.W1, "W2": self.W2}

    def lipschitz_bound(self) -> float:
        return self.bank1.spectral_norm() * self.bank2.spectral_norm()

    def certificate(self) -> LayerCertificate:
        return LayerCertificate(self.kind, check_contraction(self.lipschitz_bound()))

    def residual(self, x, counters=NULL):
        counters.ops(2)
        return _from_channels(self.bank2.apply(softplus0(self.bank1.apply(_to_channels(x)))))

    def forward(self, x, counters=NULL):
        x = as_tensor(x)
        _check_input(self, x)
        return x + self.residual(x, counters)

    def inverse(self, x_next, cfg: FixedPointConfig | None = None, counters=NULL):
        v = as_tensor(x_next)
        _check_input(self, v)
        cert = self.certificate()
        if not cert.accepted:
            raise CertificateError(
                f"residual layer not invertible: Lipschitz bound {cert.verdict.bound:.4g} >= 1"
            )
        res = fixed_point_solve(lambda x: v - self.residual(x, counters), v, cfg or self.inner_cfg)
        counters.inner(res.iterations_used)
        return res.solution

    def vjp(self, x_in, q_out, x_out=None, counters=NULL):
        x = as_tensor(x_in)
        q = as_tensor(q_out)
        _check_input(self, x)
        xc = _to_channels(x)
        p = _to_channels(q)
        u = self.bank1.apply(xc)
        h = softplus0(u)
        b = expit(u) * self.bank2.adjoint(p)
        jt = self.bank1.adjoint(b)
        counters.ops(3)
        grads = {
            "W1": self.bank1.kernel_gradient(b, xc),
            "W2": self.bank2.kernel_gradient(p, h),
        }
        return q + _from_channels(jt), self._globalize(grads)


def lipschitz_scale(layer: InvertibleResidualLayer) -> float:
    """Per-bank factor that brings ``||W1|| ||W2||`` within the budget (1 if already within)."""
    bound = layer.lipschitz_bound()
    if bound <= layer.lipschitz_budget * (1.0 + 1e-12):
        return 1.0
    return float(np.sqrt(layer.lipschitz_budget / bound))


def constrain_lipschitz(layer: InvertibleResidualLayer) -> InvertibleResidualLayer:
    """Jointly rescale both kernel banks so the product of spectral norms is at most the budget."""
    s = lipschitz_scale(layer)
    if s == 1.0:
        return layer
    return replace(layer, W1=layer.W1 * s, W2=layer.W2 * s)


# ---------------------------------------------------------------------------
# dispatch


def layer_forward(layer: Layer, x, counters=NULL):
    return layer.forward(x, counters)


def layer_inverse(layer: Layer, x_next, cfg: FixedPointConfig = FixedPointConfig(), counters=NULL):
    return layer.inverse(x_next, cfg, counters)


def layer_vjp(layer: Layer, x_in, q_out, x_out=None, counters=NULL):
    return layer.vjp(x_in, q_out, x_out, counters)
