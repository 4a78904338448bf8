"""Complex tensor helpers and a closed family of matrix-free linear operators.

Tensors are plain ``numpy.ndarray`` objects of dtype ``complex128``.  Every
operator carries an input and output shape, a forward map and its adjoint.
Composition lists are ordered outermost first, so ``Composition([M, F])``
applies ``F`` and then ``M``.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape an operator expects."""


class OperatorError(ValueError):
    """Raised for malformed operator descriptions or failed self-checks."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous complex128 array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=np.complex128)


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Inner product conjugate-linear in the first argument."""
    return complex(np.vdot(a, b))


def norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(a)))


def random_tensor(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Standard complex Gaussian tensor."""
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _check_shape(x: np.ndarray, expected: Shape, what: str, op: "LinearOperator") -> None:
    if tuple(x.shape) != tuple(expected):
        raise ShapeError(
            f"{op.kind}: {what} has shape {tuple(x.shape)}, expected {tuple(expected)}"
        )


class LinearOperator:
    """Base class.  Subclasses implement ``_forward`` and ``_adjoint``."""

    kind = "abstract"

    def __init__(self, in_shape: Sequence[int], out_shape: Sequence[int]):
        self.in_shape: Shape = tuple(int(n) for n in in_shape)
        self.out_shape: Shape = tuple(int(n) for n in out_shape)
        if any(n <= 0 for n in self.in_shape + self.out_shape):
            raise OperatorError(f"{self.kind}: extents must be positive")

    def forward(self, x) -> np.ndarray:
        x = as_tensor(x)
        _check_shape(x, self.in_shape, "input", self)
        return self._forward(x)

    def adjoint(self, y) -> np.ndarray:
        y = as_tensor(y)
        _check_shape(y, self.out_shape, "adjoint input", self)
        return self._adjoint(y)

    def normal(self, x) -> np.ndarray:
        """Apply ``A^H A``."""
        x = as_tensor(x)
        _check_shape(x, self.in_shape, "input", self)
        return self._normal(x)

    def _normal(self, x: np.ndarray) -> np.ndarray:
        return self._adjoint(self._forward(x))

    __call__ = forward

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, shape: Sequence[int]):
        super().__init__(shape, shape)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class Diagonal(LinearOperator):
    """Elementwise multiplication by a fixed weight tensor."""

    kind = "diagonal"

    def __init__(self, weights):
        self.weights = as_tensor(weights)
        self.weights.setflags(write=False)
        super().__init__(self.weights.shape, self.weights.shape)

    def _forward(self, x):
        return self.weights * x

    def _adjoint(self, y):
        return np.conj(self.weights) * y


class DFT(LinearOperator):
    """Unitary discrete Fourier transform over ``axes`` (all axes by default)."""

    kind = "dft"

    def __init__(self, shape: Sequence[int], axes: Sequence[int] | None = None):
        super().__init__(shape, shape)
        ndim = len(self.in_shape)
        if axes is None:
            axes = range(ndim)
        self.axes = tuple(sorted(int(a) % ndim for a in axes))

    def _forward(self, x):
        return sfft.fftn(x, axes=self.axes, norm="ortho")

    def _adjoint(self, y):
        return sfft.ifftn(y, axes=self.axes, norm="ortho")


class Mask(LinearOperator):
    """Gather the entries at ``indices`` (flat, row-major) into a 1-D vector.

    The adjoint zero-fills.  Index order is preserved, so two masks with
    equally many entries share a common output coordinate system.
    """

    kind = "mask"

    def __init__(self, in_shape: Sequence[int], indices):
        indices = np.asarray(indices, dtype=np.int64).ravel()
        super().__init__(in_shape, (max(len(indices), 1),))
        size = int(np.prod(self.in_shape))
        if len(indices) == 0:
            raise OperatorError("mask: index set is empty")
        if indices.min() < 0 or indices.max() >= size:
            raise OperatorError("mask: index out of range")
        if len(np.unique(indices)) != len(indices):
            raise OperatorError("mask: duplicate indices")
        self.indices = indices
        self.indices.setflags(write=False)
        self.size = size

    @classmethod
    def from_boolean(cls, selection) -> "Mask":
        selection = np.asarray(selection, dtype=bool)
        return cls(selection.shape, np.flatnonzero(selection))

    def _forward(self, x):
        return x.reshape(-1)[self.indices]

    def _adjoint(self, y):
        out = np.zeros(self.size, dtype=np.complex128)
        out[self.indices] = y
        return out.reshape(self.in_shape)


class CircularConvolution(LinearOperator):
    """Periodic convolution with a kernel anchored at index 0.

    The kernel may be smaller than the signal; it is zero-padded.  With
    ``centered=True`` the kernel's middle element is moved to the origin.
    """

    kind = "circular-convolution"

    def __init__(self, shape: Sequence[int], kernel, centered: bool = False):
        super().__init__(shape, shape)
        kernel = as_tensor(kernel)
        if kernel.ndim != len(self.in_shape):
            raise OperatorError("circular-convolution: kernel rank must match signal rank")
        if any(k > n for k, n in zip(kernel.shape, self.in_shape)):
            raise OperatorError("circular-convolution: kernel larger than signal")
        padded = np.zeros(self.in_shape, dtype=np.complex128)
        padded[tuple(slice(0, k) for k in kernel.shape)] = kernel
        if centered:
            padded = np.roll(padded, [-(k // 2) for k in kernel.shape], axis=range(kernel.ndim))
        self.kernel = kernel
        self.transfer = sfft.fftn(padded)
        self.transfer.setflags(write=False)

    def _forward(self, x):
        return sfft.ifftn(self.transfer * sfft.fftn(x))

    def _adjoint(self, y):
        return sfft.ifftn(np.conj(self.transfer) * sfft.fftn(y))

    @functools.cached_property
    def _gram_transfer(self):
        return np.abs(self.transfer) ** 2

    def _normal(self, x):
        return sfft.ifftn(self._gram_transfer * sfft.fftn(x))


class CoilStack(LinearOperator):
    """Multiply an image by each sensitivity map and stack along a new axis 0."""

    kind = "coil-stack"

    def __init__(self, sensitivities):
        maps = np.stack([as_tensor(s) for s in sensitivities])
        if maps.shape[0] < 1:
            raise OperatorError("coil-stack: need at least one sensitivity map")
        super().__init__(maps.shape[1:], maps.shape)
        self.sensitivities = maps
        self.sensitivities.setflags(write=False)

    def _forward(self, x):
        return self.sensitivities * x[None]

    def _adjoint(self, y):
        return np.sum(np.conj(self.sensitivities) * y, axis=0)


class Composition(LinearOperator):
    """Product of operators, listed outermost first."""

    kind = "composition"

    def __init__(self, operators: Sequence[LinearOperator]):
        operators = tuple(operators)
        if not operators:
            raise OperatorError("composition: empty operator list")
        for outer, inner_op in zip(operators[:-1], operators[1:]):
            if inner_op.out_shape != outer.in_shape:
                raise OperatorError(
                    f"composition: shape chain break, {inner_op.kind} produces "
                    f"{inner_op.out_shape} but {outer.kind} expects {outer.in_shape}"
                )
        super().__init__(operators[-1].in_shape, operators[0].out_shape)
        self.operators = operators

    def _forward(self, x):
        for op in reversed(self.operators):
            x = op._forward(x)
        return x

    def _adjoint(self, y):
        for op in self.operators:
            y = op._adjoint(y)
        return y


class WeightedSum(LinearOperator):
    """``sum_i c_i A_i`` with real coefficients, summed left to right."""

    kind = "weighted-sum"

    def __init__(self, coefficients, operands: Sequence[LinearOperator]):
        coefficients = np.asarray(coefficients, dtype=np.float64).ravel()
        operands = tuple(operands)
        if len(operands) == 0 or len(coefficients) != len(operands):
            raise OperatorError("weighted-sum: need one coefficient per operand")
        first = operands[0]
        for op in operands[1:]:
            if op.in_shape != first.in_shape or op.out_shape != first.out_shape:
                raise OperatorError("weighted-sum: operand shapes differ")
        super().__init__(first.in_shape, first.out_shape)
        self.coefficients = coefficients
        self.coefficients.setflags(write=False)
        self.operands = operands

    def with_coefficients(self, coefficients) -> "WeightedSum":
        return WeightedSum(coefficients, self.operands)

    def parts(self, x: np.ndarray) -> list[np.ndarray]:
        """Operand images ``A_i x`` (unweighted)."""
        return [op._forward(x) for op in self.operands]

    def combine(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        out = self.coefficients[0] * parts[0]
        for c, p in zip(self.coefficients[1:], parts[1:]):
            out = out + c * p
        return out

    def _forward(self, x):
        return self.combine(self.parts(x))

    def _adjoint(self, y):
        if all(isinstance(op, Mask) for op in self.operands):
            # scatter-add; same left-to-right sums as the generic path
            flat = np.zeros(self.operands[0].size, dtype=np.complex128)
            for c, op in zip(self.coefficients, self.operands):
                flat[op.indices] += c * y
            return flat.reshape(self.in_shape)
        out = self.coefficients[0] * self.operands[0]._adjoint(y)
        for c, op in zip(self.coefficients[1:], self.operands[1:]):
            out = out + c * op._adjoint(y)
        return out


def apply_forward(op: LinearOperator, x) -> np.ndarray:
    return op.forward(x)


def apply_adjoint(op: LinearOperator, y) -> np.ndarray:
    return op.adjoint(y)


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    vector: np.ndarray | None
    iterations: int
    degenerate: bool = False


def power_iteration(
    normal: Callable[[np.ndarray], np.ndarray],
    shape: Sequence[int],
    iters: int,
    seed: int,
) -> SpectralEstimate:
    """Largest eigenvalue of a Hermitian positive semidefinite map.

    Starts from a seeded uniform random complex vector and returns the best
    Rayleigh quotient seen, which makes the estimate nondecreasing in
    ``iters`` and never above the true value (up to rounding).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1.0, 1.0, shape) + 1j * rng.uniform(-1.0, 1.0, shape)
    v /= norm(v)
    best = 0.0
    for t in range(iters):
        w = normal(v)
        best = max(best, float(np.real(np.vdot(v, w))))
        wn = norm(w)
        if wn == 0.0:
            logger.warning("power iteration: operator annihilated the iterate (degenerate spectrum)")
            return SpectralEstimate(0.0, None, t + 1, degenerate=True)
        v = w / wn
    return SpectralEstimate(best, v, iters)


def estimate_sigma_max(op: LinearOperator, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``A^H A``.

    A zero operator gives 0.0; call :func:`power_iteration` directly to get
    the degenerate-spectrum flag.
    """
    return power_iteration(op.normal, op.in_shape, iters, seed).value


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator) -> float:
    """Relative adjoint defect ``|<Au, v> - <u, A^H v>| / (|Au| |v|)`` for random u, v."""
    u = random_tensor(rng, op.in_shape)
    v = random_tensor(rng, op.out_shape)
    au = op.forward(u)
    lhs = inner(au, v)
    rhs = inner(u, op.adjoint(v))
    scale = norm(au) * norm(v)
    return abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs)


def check_adjoint(op: LinearOperator, trials: int = 3, seed: int = 0, tol: float = 1e-10) -> None:
    rng = np.random.default_rng(seed)
    worst = max(adjoint_mismatch(op, rng) for _ in range(trials))
    if worst > tol:
        raise OperatorError(f"{op.kind}: adjoint self-check failed (defect {worst:.3e})")


def build_operator(spec: dict, validate: bool = False) -> LinearOperator:
    """Construct an operator from a nested description.

    Examples of descriptions::

        {"kind": "identity", "shape": [4]}
        {"kind": "diagonal", "weights": [2, 3]}
        {"kind": "dft", "shape": [8, 8], "axes": [0, 1]}
        {"kind": "mask", "shape": [2], "indices": [0]}
        {"kind": "circular-convolution", "shape": [4], "kernel": [1, 1]}
        {"kind": "coil-stack", "sensitivities": [map0, map1]}
        {"kind": "composition", "operators": [outer, ..., inner]}
        {"kind": "weighted-sum", "coefficients": [1, 1], "operators": [a, b]}

    Complex entries may be given as ``[re, im]`` pairs inside ``weights``,
    ``kernel`` or ``sensitivities`` when ``"complex": true`` is set.
    """
    op = _build(spec)
    if validate:
        check_adjoint(op)
    return op


def _values(spec: dict, key: str) -> np.ndarray:
    arr = np.asarray(spec[key], dtype=np.float64)
    if spec.get("complex", False):
        return arr[..., 0] + 1j * arr[..., 1]
    return arr.astype(np.complex128)


def _build(spec: dict) -> LinearOperator:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise OperatorError("operator description must be a mapping with a 'kind'")
    kind = spec["kind"]
    try:
        if kind == "identity":
            return Identity(spec["shape"])
        if kind == "diagonal":
            return Diagonal(_values(spec, "weights"))
        if kind == "dft":
            return DFT(spec["shape"], spec.get("axes"))
        if kind == "mask":
            if "selection" in spec:
                return Mask.from_boolean(spec["selection"])
            return Mask(spec["shape"], spec["indices"])
        if kind == "circular-convolution":
            return CircularConvolution(spec["shape"], _values(spec, "kernel"), spec.get("centered", False))
        if kind == "coil-stack":
            return CoilStack(list(_values(spec, "sensitivities")))
        if kind == "composition":
            return Composition([_build(s) for s in spec["operators"]])
        if kind == "weighted-sum":
            return WeightedSum(spec["coefficients"], [_build(s) for s in spec["operators"]])
    except KeyError as exc:
        raise OperatorError(f"{kind}: missing field {exc}") from None
    raise OperatorError(f"unknown operator kind {kind!r}")
