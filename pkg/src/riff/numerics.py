"""Numeric substrate: stable log-space primitives, the finite-difference
checker, and the flat parameter buffer every model is built on.

Everything is float64 and pure. Probability arithmetic stays in log space;
callers exponentiate only when assembling final coefficients.
"""

from __future__ import annotations

import math

import numpy as np

LogProb = float


def logsumexp(xs) -> float:
    """log(sum(exp(xs))), shifted by the max for stability. Exact on singletons."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = float(np.max(arr))
    if m == -math.inf:
        return -math.inf
    if not math.isfinite(m):
        raise ValueError("non-finite input to logsumexp")
    return m + math.log(float(np.sum(np.exp(arr - m))))


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    x = arr / temperature
    return x - logsumexp(x)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def gelu(x: float) -> float:
    """Gaussian-CDF form: x * Phi(x)."""
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gelu_grad(x: float) -> float:
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) + x * pdf


def gelu_vec(xs) -> np.ndarray:
    return np.array([gelu(float(v)) for v in np.asarray(xs).ravel()])


def gelu_grad_vec(xs) -> np.ndarray:
    return np.array([gelu_grad(float(v)) for v in np.asarray(xs).ravel()])


def finite_diff_grad(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(t + h e_i) - f(t - h e_i)) / 2h per coordinate.

    `f` must be deterministic; a non-finite value raises naming the
    perturbed coordinate so the caller can localize the blowup.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    base = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(base)
    work = base.copy()
    for i in range(base.size):
        orig = work[i]
        work[i] = orig + h
        up = float(f(work))
        work[i] = orig - h
        down = float(f(work))
        work[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ValueError(f"objective non-finite while perturbing coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """Componentwise |a-b| / max(|a|,|b|), skipping entries below `floor`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    keep = scale >= floor
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(a[keep] - b[keep]) / scale[keep]))


class ParamVector:
    """Flat float64 buffer carved into named, non-overlapping segment views.

    Segment views share memory with the flat buffer, so in-place updates on
    either side stay consistent. Segment order fixes serialization order.
    """

    def __init__(self, segments, values=None):
        layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in segments:
            if name in layout:
                raise ValueError(f"duplicate segment {name!r}")
            shape = tuple(int(s) for s in shape)
            layout[name] = (offset, shape)
            offset += math.prod(shape)
        self._layout = layout
        self._order = tuple(name for name, _ in segments)
        self.size = offset
        if values is None:
            self.values = np.zeros(offset, dtype=np.float64)
        else:
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != (offset,):
                raise ValueError(
                    f"expected a flat vector of {offset} values, got shape {arr.shape}"
                )
            self.values = arr

    @property
    def segment_names(self) -> tuple[str, ...]:
        return self._order

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, self._layout[name][1]) for name in self._order]

    def segment_slice(self, name: str) -> slice:
        offset, shape = self._layout[name]
        return slice(offset, offset + math.prod(shape))

    def view(self, name: str) -> np.ndarray:
        offset, shape = self._layout[name]
        return self.values[offset : offset + math.prod(shape)].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments(), self.values.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments())

    def freeze(self) -> "ParamVector":
        self.values.setflags(write=False)
        return self

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")
