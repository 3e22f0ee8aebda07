"""Mid-tread quantization grids and scalar quantizers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

_BUFFER = 256


@dataclass(frozen=True)
class Alphabet:
    """Grid ``{k * step_delta}``; finite when ``levels`` is set (``|k| <= levels``)."""

    step_delta: float
    levels: Optional[int] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.step_delta) and self.step_delta > 0):
            raise ValueError(f"step_delta must be positive and finite, got {self.step_delta!r}")
        if self.levels is not None and self.levels < 1:
            raise ValueError(f"levels must be a positive integer, got {self.levels!r}")

    @property
    def finite(self) -> bool:
        return self.levels is not None

    @property
    def bound(self) -> float:
        """Largest representable magnitude (``inf`` for the infinite grid)."""
        return math.inf if self.levels is None else self.levels * self.step_delta

    def contains(self, value: float, rtol: float = 1e-12) -> bool:
        k = round(value / self.step_delta)
        if self.levels is not None and abs(k) > self.levels:
            return False
        return abs(value - k * self.step_delta) <= rtol * max(1.0, abs(value))

    def grid(self) -> np.ndarray:
        if self.levels is None:
            raise ValueError("infinite alphabet has no finite grid")
        return np.arange(-self.levels, self.levels + 1) * self.step_delta


class QuantDraw(NamedTuple):
    value: float
    clamped: bool


class RandomStream:
    """Single-owner uniform stream on a counter-based (Philox) generator.

    Streams are keyed by ``(seed, *key)`` so per-neuron streams are independent of the
    order in which neurons are processed.  Draws are buffered; the sequence seen through
    :meth:`uniform` and :meth:`uniforms` is the same however the calls are interleaved.
    """

    def __init__(self, seed: int, *key: int) -> None:
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))
        self._buf = np.empty(0)
        self._pos = 0
        self.consumed = 0

    @classmethod
    def for_neuron(cls, seed: int, layer: int, neuron: int) -> "RandomStream":
        return cls(seed, layer, neuron)

    def uniform(self) -> float:
        if self._pos >= self._buf.size:
            self._buf = self._gen.random(_BUFFER)
            self._pos = 0
        u = float(self._buf[self._pos])
        self._pos += 1
        self.consumed += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n)
        have = min(n, self._buf.size - self._pos)
        out[:have] = self._buf[self._pos:self._pos + have]
        self._pos += have
        if n > have:
            out[have:] = self._gen.random(n - have)
        self.consumed += n
        return out


def _check_finite(z) -> None:
    if not np.all(np.isfinite(z)):
        raise ValueError("quantizer input must be finite")


def stoc_round(z: np.ndarray, alphabet: Alphabet, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised stochastic rounding of ``z`` given one uniform per entry.

    Rounds up to ``(floor(z/delta) + 1) * delta`` when ``u < z/delta - floor(z/delta)``,
    otherwise down, so the expectation equals ``z``.  Returns ``(values, clamped)``.
    """
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    delta = alphabet.step_delta
    scaled = z / delta
    low = np.floor(scaled)
    up = np.asarray(u) < (scaled - low)
    values = (low + up) * delta
    if alphabet.levels is None:
        return values, np.zeros(z.shape, dtype=bool)
    kd = alphabet.levels * delta
    clamped = np.abs(z) > kd
    values = np.where(z > kd, kd, np.where(z < -kd, -kd, values))
    # floating point at |z| == K*delta must not step off the grid
    values = np.clip(values, -kd, kd)
    return values, clamped


def stoc_quantize(z: float, a: Alphabet, rng: RandomStream) -> QuantDraw:
    """Unbiased stochastic rounding of ``z`` onto ``a``.

    Always consumes exactly one uniform from ``rng``, including on grid points and
    for clamped inputs, so streams stay aligned across alphabet variants.
    """
    if not math.isfinite(z):
        raise ValueError(f"quantizer input must be finite, got {z!r}")
    u = rng.uniform()
    values, clamped = stoc_round(np.array([z]), a, np.array([u]))
    return QuantDraw(float(values[0]), bool(clamped[0]))


def det_round(z: np.ndarray, alphabet: Alphabet) -> np.ndarray:
    """Nearest grid point; midpoints go to the point of larger magnitude."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    scaled = z / alphabet.step_delta
    # round-half-away-from-zero
    k = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    if alphabet.levels is not None:
        k = np.clip(k, -alphabet.levels, alphabet.levels)
    return k * alphabet.step_delta


def det_quantize(z: float, a: Alphabet) -> float:
    """Deterministic nearest-point quantizer (ties toward larger magnitude)."""
    if not math.isfinite(z):
        raise ValueError(f"quantizer input must be finite, got {z!r}")
    return float(det_round(np.array([z]), a)[0])


def step_from_weights(W: np.ndarray, bits: int, C: float) -> tuple[int, float]:
    """Levels and step size for a ``bits``-bit alphabet scaled to the layer weights.

    ``K = 2**(bits-1)`` and ``delta = C / (K * N) * sum_j max|W[:, j]|`` over the
    ``N`` columns (neurons) of ``W``.
    """
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    if not C > 0:
        raise ValueError(f"step constant must be positive, got {C}")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("W must be a 2-D matrix")
    K = 2 ** (bits - 1)
    col_sup = np.max(np.abs(W), axis=0)
    total = float(np.sum(col_sup))
    if total == 0.0:
        raise ValueError("all-zero weight matrix gives a zero step size")
    return K, C * total / (K * W.shape[1])
