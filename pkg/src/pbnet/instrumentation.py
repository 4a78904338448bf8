"""Counters standing in for memory and time measurements.

``operator_applications`` counts term-level applications of a forward model
or its adjoint (a weighted-sum term evaluated together with its operand
images counts once).  ``peak_stored_states`` counts state tensors
``x^(k)`` held at once; the adjoint ``q`` is the same single buffer in every
engine and is not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class InstrumentationCounters:
    peak_stored_states: int = 0
    operator_applications: int = 0
    fixed_point_inner_iterations: int = 0
    live_states: int = field(default=0, repr=False)

    def ops(self, n: int = 1) -> None:
        self.operator_applications += n

    def inner(self, n: int) -> None:
        self.fixed_point_inner_iterations += n

    def hold(self, n: int = 1) -> None:
        self.live_states += n
        self.peak_stored_states = max(self.peak_stored_states, self.live_states)

    def release(self, n: int = 1) -> None:
        self.live_states -= n
        if self.live_states < 0:
            raise RuntimeError("released more states than held")

    def as_dict(self) -> dict:
        return {
            "peak_stored_states": self.peak_stored_states,
            "operator_applications": self.operator_applications,
            "fixed_point_inner_iterations": self.fixed_point_inner_iterations,
        }

    def merged(self, other: "InstrumentationCounters") -> "InstrumentationCounters":
        """Totals for two sequential phases (peaks combine by max)."""
        return InstrumentationCounters(
            max(self.peak_stored_states, other.peak_stored_states),
            self.operator_applications + other.operator_applications,
            self.fixed_point_inner_iterations + other.fixed_point_inner_iterations,
        )


class _NullCounters(InstrumentationCounters):
    def ops(self, n=1):
        pass

    def inner(self, n):
        pass

    def hold(self, n=1):
        pass

    def release(self, n=1):
        pass


NULL = _NullCounters()
