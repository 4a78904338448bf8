"""Sequential physics-based network: forward pass, storage policy, certification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .instrumentation import InstrumentationCounters
from .layers import Layer, LayerCertificate
from .numerics import ShapeError, as_tensor


@dataclass(frozen=True)
class StoragePolicy:
    """``store-all``, ``store-none`` or ``checkpoint`` (every ``every`` layers)."""

    mode: str = "store-all"
    every: int = 1

    def __post_init__(self):
        if self.mode not in ("store-all", "store-none", "checkpoint"):
            raise ValueError(f"unknown storage policy {self.mode!r}")
        if int(self.every) < 1:
            raise ValueError("checkpoint spacing must be >= 1")

    @classmethod
    def store_all(cls):
        return cls("store-all")

    @classmethod
    def store_none(cls):
        return cls("store-none")

    @classmethod
    def checkpoint_every(cls, k: int):
        return cls("checkpoint", int(k))

    def indices(self, n: int) -> list[int]:
        """State indices kept for a network of ``n`` layers.

        Checkpoints are anchored at the input: ``{0, K, 2K, ...} | {n}``.
        """
        if self.mode == "store-all":
            return list(range(n + 1))
        if self.mode == "store-none":
            return [0, n]
        return sorted(set(range(0, n + 1, self.every)) | {n})

    def label(self) -> str:
        return f"checkpoint-every-{self.every}" if self.mode == "checkpoint" else self.mode


def expected_stored(n: int, policy: StoragePolicy) -> int:
    if policy.mode == "store-all":
        return n + 1
    if policy.mode == "store-none":
        return 2
    return math.ceil(n / policy.every) + 1


class LayerError(RuntimeError):
    """An exception raised inside a layer, tagged with the layer index."""

    def __init__(self, index: int, layer_kind: str, cause: BaseException):
        self.index = index
        self.layer_kind = layer_kind
        self.cause = cause
        super().__init__(f"layer {index} ({layer_kind}): {cause}")


@dataclass(frozen=True)
class ForwardRecord:
    output: np.ndarray
    stored_states: Mapping[int, np.ndarray]
    counters: InstrumentationCounters
    policy: StoragePolicy


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    policy: StoragePolicy = field(default_factory=StoragePolicy)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        shapes = [l.shape for l in layers if l.shape is not None]
        if any(s != shapes[0] for s in shapes):
            raise ShapeError("layer shapes do not chain")
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def with_policy(self, policy: StoragePolicy) -> "Network":
        return Network(self.layers, policy)

    def params(self) -> dict:
        """Learnable parameters by global key (first occurrence wins for shared keys)."""
        out = {}
        for layer in self.layers:
            for k, v in layer.params().items():
                out.setdefault(k, v)
        return out

    def with_params(self, values: Mapping[str, object]) -> "Network":
        return Network(tuple(l.with_params(values) for l in self.layers), self.policy)


def forward(net: Network, x0, counters: InstrumentationCounters | None = None) -> ForwardRecord:
    """Run all layers, keeping the states selected by the network's policy."""
    counters = counters if counters is not None else InstrumentationCounters()
    n = net.depth
    keep = set(net.policy.indices(n))
    x = as_tensor(x0).copy()
    stored = {0: x}
    counters.hold()
    for k, layer in enumerate(net.layers):
        try:
            x_next = layer.forward(x, counters)
        except Exception as exc:
            raise LayerError(k, layer.kind, exc) from exc
        if (k + 1) in keep:
            stored[k + 1] = x_next
        # A new buffer is needed only when leaving a stored state; an unstored
        # working buffer is overwritten in place (or becomes the next stored state).
        if k in keep:
            counters.hold()
        x = x_next
    return ForwardRecord(x, dict(sorted(stored.items())), counters, net.policy)


@dataclass(frozen=True)
class CertificateReport:
    layers: tuple
    accepted: bool

    def failures(self) -> list[int]:
        return [i for i, c in enumerate(self.layers) if not c.accepted]

    def min_margin(self) -> float:
        return min(c.verdict.margin for c in self.layers)

    def as_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "layers": [
                {
                    "index": i,
                    "kind": c.kind,
                    "bound": c.verdict.bound,
                    "margin": c.verdict.margin,
                    "accepted": c.accepted,
                    "unconditional": c.unconditional,
                }
                for i, c in enumerate(self.layers)
            ],
        }


def certify_invertible(net: Network) -> CertificateReport:
    certs = tuple(layer.certificate() for layer in net.layers)
    return CertificateReport(certs, all(c.accepted for c in certs))
