"""Reverse-mode differentiation of a network, three ways.

All engines walk the layers from last to first, applying each layer's VJP
at its input state.  They differ only in where that input comes from:

* ``standard``: every state was stored by the forward pass.
* ``memory-efficient``: states are recalculated from the output with the
  layer inverses; only ``x^(N)`` (and optionally ``x^(0)``) is held.
* ``hybrid``: as memory-efficient, but a stored checkpoint replaces the
  recalculated state wherever one exists, resetting accumulated error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .fixed_point import FixedPointConfig
from .instrumentation import InstrumentationCounters
from .layers import CertificateError
from .network import ForwardRecord, LayerError, Network, StoragePolicy
from .numerics import as_tensor

ENGINES = ("standard", "memory-efficient", "hybrid")


def add_grads(a, b):
    """Sum two gradient values (floats, arrays, or tuples of arrays)."""
    if a is None:
        return b
    if isinstance(a, tuple):
        return tuple(x + y for x, y in zip(a, b))
    return a + b


def accumulate(total: dict, grads: Mapping) -> dict:
    for k, v in grads.items():
        total[k] = add_grads(total.get(k), v)
    return total


@dataclass
class GradientReport:
    param_grads: dict
    input_grad: np.ndarray
    layer_grads: list
    counters: InstrumentationCounters
    residuals: dict = field(default_factory=dict)
    post_residuals: dict = field(default_factory=dict)

    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


def _rel(a, b) -> float:
    nb = np.linalg.norm(b)
    d = np.linalg.norm(a - b)
    return float(d / nb) if nb > 0 else float(d)


def _reverse(
    net: Network,
    anchors: Mapping[int, np.ndarray],
    q_n,
    inv_cfg: FixedPointConfig,
    shadow: ForwardRecord | None,
) -> GradientReport:
    n = net.depth
    if n not in anchors:
        raise ValueError("the network output must be available")
    needs_inverse = [k for k in range(n) if k not in anchors]
    refused = [k for k in needs_inverse if not net.layers[k].certificate().accepted]
    if refused:
        cert = net.layers[refused[0]].certificate()
        raise CertificateError(
            f"layers {refused} are not certified invertible "
            f"(layer {refused[0]}: bound {cert.verdict.bound:.4g})"
        )
    if shadow is not None and len(shadow.stored_states) != n + 1:
        raise ValueError("shadow diagnostics need a store-all forward record")

    counters = InstrumentationCounters()
    counters.hold(len(anchors))
    q = as_tensor(q_n)
    x = anchors[n]
    total: dict = {}
    per_layer = [None] * n
    residuals, post = {}, {}
    for k in range(n, 0, -1):
        layer = net.layers[k - 1]
        stored = anchors.get(k - 1)
        try:
            recalc = None
            # With shadow diagnostics the inverse also runs at checkpoints so the
            # pre-replacement error can be reported.
            if stored is None or (shadow is not None and layer.certificate().accepted):
                recalc = layer.inverse(x, inv_cfg, counters)
            if stored is not None:
                x_prev = stored
                counters.release()  # the current buffer is dropped
            else:
                x_prev = recalc  # recalculated in place of the current buffer
            q, grads = layer.vjp(x_prev, q, x, counters)
        except CertificateError:
            raise
        except Exception as exc:
            raise LayerError(k - 1, layer.kind, exc) from exc
        if shadow is not None:
            truth = shadow.stored_states[k - 1]
            if recalc is not None:
                residuals[k - 1] = _rel(recalc, truth)
            post[k - 1] = _rel(x_prev, truth)
        if not np.all(np.isfinite(q)):
            raise LayerError(k - 1, layer.kind, FloatingPointError("non-finite adjoint"))
        per_layer[k - 1] = grads
        accumulate(total, grads)
        x = x_prev
    return GradientReport(total, q, per_layer, counters, residuals, post)


def backprop_standard(net: Network, record: ForwardRecord, q_n) -> GradientReport:
    """Reference reverse pass over the states of a store-all forward record."""
    missing = [k for k in range(net.depth + 1) if k not in record.stored_states]
    if missing:
        raise ValueError(f"standard backprop needs every state; missing {missing[:5]}")
    return _reverse(net, record.stored_states, q_n, FixedPointConfig(), None)


def backprop_memory_efficient(
    net: Network,
    x_n,
    q_n,
    inv_cfg: FixedPointConfig = FixedPointConfig(),
    *,
    x0=None,
    shadow: ForwardRecord | None = None,
) -> GradientReport:
    """Reverse recalculation from the output alone.

    If ``x0`` (the network input, kept by the ``store-none`` policy) is
    given, it is used for the first layer instead of the recalculated input.
    """
    anchors = {net.depth: as_tensor(x_n)}
    if x0 is not None:
        anchors[0] = as_tensor(x0)
    return _reverse(net, anchors, q_n, inv_cfg, shadow)


def backprop_hybrid(
    net: Network,
    record: ForwardRecord,
    q_n,
    inv_cfg: FixedPointConfig = FixedPointConfig(),
    *,
    shadow: ForwardRecord | None = None,
) -> GradientReport:
    """Reverse recalculation that resets to stored checkpoints where available."""
    return _reverse(net, record.stored_states, q_n, inv_cfg, shadow)


def policy_for(engine: str, checkpoint_every: int = 1) -> StoragePolicy:
    if engine == "standard":
        return StoragePolicy.store_all()
    if engine == "memory-efficient":
        return StoragePolicy.store_none()
    if engine == "hybrid":
        return StoragePolicy.checkpoint_every(checkpoint_every)
    raise ValueError(f"unknown engine {engine!r}")


def backprop(
    engine: str,
    net: Network,
    record: ForwardRecord,
    q_n,
    inv_cfg: FixedPointConfig = FixedPointConfig(),
    shadow: ForwardRecord | None = None,
) -> GradientReport:
    """Dispatch on engine name, using whatever ``record`` stored."""
    if engine == "standard":
        return backprop_standard(net, record, q_n)
    if engine == "memory-efficient":
        return backprop_memory_efficient(
            net, record.output, q_n, inv_cfg, x0=record.stored_states.get(0), shadow=shadow
        )
    if engine == "hybrid":
        return backprop_hybrid(net, record, q_n, inv_cfg, shadow=shadow)
    raise ValueError(f"unknown engine {engine!r}")
