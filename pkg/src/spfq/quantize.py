"""Phase II quantization, fused path following, the deterministic baseline, and
per-layer orchestration.

All kernels run over the columns of a weight block ``W`` (``N x k``) at once.  Each
column owns one uniform per step, taken from its own keyed stream, so a column's
result never depends on which other columns share the batch.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .align import RankDeficientError, SimplexError, align_columns, solve_min_inf
from .alphabet import Alphabet, RandomStream, det_round, step_from_weights, stoc_round
from .linalg import has_full_row_rank

logger = logging.getLogger(__name__)

MODES = ("fused", "perfect", "order_r")


@dataclass
class NeuronQuantResult:
    q: np.ndarray
    final_error: np.ndarray
    overflow_count: int
    rng_label: Optional[tuple[int, int]]
    max_abs_arg: float = 0.0
    zero_columns: int = 0


@dataclass
class QuantConfig:
    """Alphabet and alignment settings for a quantization run.

    ``bits=None`` selects the infinite alphabet, which needs ``explicit_delta``.
    ``levels`` overrides ``K`` (e.g. a value sized from the activations).
    """

    bits: Optional[int] = 4
    step_constant: float = 1.0
    explicit_delta: Optional[float] = None
    mode: str = "fused"
    order: int = 1
    prob_exponent: int = 2
    seed: int = 0
    levels: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.prob_exponent < 2:
            raise ValueError(f"prob_exponent must be >= 2, got {self.prob_exponent}")
        if self.bits is not None and self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if not self.step_constant > 0:
            raise ValueError(f"step_constant must be positive, got {self.step_constant}")
        if self.explicit_delta is not None and not self.explicit_delta > 0:
            raise ValueError(f"explicit_delta must be positive, got {self.explicit_delta}")
        if self.bits is None and self.explicit_delta is None:
            raise ValueError("the infinite alphabet needs an explicit step size")

    def alphabet_for(self, W) -> Alphabet:
        """The alphabet used for weight matrix ``W``."""
        if self.explicit_delta is not None:
            levels = self.levels
            if levels is None and self.bits is not None:
                levels = 2 ** (self.bits - 1)
            return Alphabet(float(self.explicit_delta), levels)
        K, delta = step_from_weights(W, self.bits, self.step_constant)
        return Alphabet(delta, self.levels if self.levels is not None else K)


@dataclass
class LayerReport:
    layer: int
    mode: str
    delta: float
    levels: Optional[int]
    column_errors: list[float]
    max_col_error: float
    max_abs_arg: float
    overflow_count: int
    zero_column_count: int
    wall_time_ms: float
    bound: Optional[float] = None
    confidence: Optional[float] = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batched kernels; ``uni`` is N x k with one stream per column


def _prep(Xt):
    norms = np.einsum("ij,ij->j", Xt, Xt)
    return norms, norms == 0.0


def _fused(X, Xt, W, a: Alphabet, uni):
    m, N = X.shape
    norms, dead = _prep(Xt)
    gram = np.einsum("ij,ij->j", Xt, X)
    U = np.zeros((m, W.shape[1]))
    Q = np.zeros_like(W)
    over = np.zeros(W.shape[1], dtype=np.int64)
    amax = np.zeros(W.shape[1])
    for t in range(N):
        x, xt, w = X[:, t], Xt[:, t], W[t]
        if dead[t]:
            h = w
        else:
            h = (xt @ U + gram[t] * w) / norms[t]
        q, clamped = stoc_round(h, a, uni[t])
        Q[t] = q
        over += clamped
        np.maximum(amax, np.abs(h), out=amax)
        U += np.multiply.outer(x, w) - np.multiply.outer(xt, q)
    return Q, U, over, amax, int(dead.sum())


def _phase2(Xt, Wt, a: Alphabet, uni):
    m, N = Xt.shape
    norms, dead = _prep(Xt)
    U = np.zeros((m, Wt.shape[1]))
    Q = np.zeros_like(Wt)
    over = np.zeros(Wt.shape[1], dtype=np.int64)
    amax = np.zeros(Wt.shape[1])
    for t in range(N):
        xt, w = Xt[:, t], Wt[t]
        h = w if dead[t] else w + (xt @ U) / norms[t]
        q, clamped = stoc_round(h, a, uni[t])
        Q[t] = q
        over += clamped
        np.maximum(amax, np.abs(h), out=amax)
        U += np.multiply.outer(xt, w - q)
    return Q, U, over, amax, int(dead.sum())


def _gpfq(X, Xt, W, a: Alphabet):
    m, N = X.shape
    norms, dead = _prep(Xt)
    gram = np.einsum("ij,ij->j", Xt, X)
    U = np.zeros((m, W.shape[1]))
    Q = np.zeros_like(W)
    over = np.zeros(W.shape[1], dtype=np.int64)
    amax = np.zeros(W.shape[1])
    for t in range(N):
        x, xt, w = X[:, t], Xt[:, t], W[t]
        h = w if dead[t] else (xt @ U + gram[t] * w) / norms[t]
        q = det_round(h, a)
        Q[t] = q
        over += np.abs(h) > a.bound
        np.maximum(amax, np.abs(h), out=amax)
        U += np.multiply.outer(x, w) - np.multiply.outer(xt, q)
    return Q, U, over, amax, int(dead.sum())


def _as_inputs(X, Xt, w):
    X = np.asarray(X, dtype=np.float64)
    Xt = np.asarray(Xt, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if X.ndim != 2 or X.shape != Xt.shape:
        raise ValueError(f"X and Xt must be matrices of equal shape, got {X.shape} and {Xt.shape}")
    if w.shape != (X.shape[1],):
        raise ValueError(f"weights have shape {w.shape}, expected ({X.shape[1]},)")
    return X, Xt, w


def _label(rng: RandomStream):
    return tuple(rng.key[:2]) if len(rng.key) >= 2 else None


def quantize_neuron_fused(X, Xt, w, a: Alphabet, rng: RandomStream) -> NeuronQuantResult:
    """Single-pass path following with stochastic rounding.

    ``q_t = Q(<Xt_t, u_{t-1} + w_t X_t> / ||Xt_t||^2)`` and
    ``u_t = u_{t-1} + w_t X_t - q_t Xt_t``; the returned error is ``u_N = Xw - Xt q``.
    """
    X, Xt, w = _as_inputs(X, Xt, w)
    uni = rng.uniforms(w.size)[:, None]
    Q, U, over, amax, dead = _fused(X, Xt, w[:, None], a, uni)
    return NeuronQuantResult(Q[:, 0], U[:, 0], int(over[0]), _label(rng), float(amax[0]), dead)


def quantize_neuron_phase2(Xt, w_tilde, a: Alphabet, rng: RandomStream) -> NeuronQuantResult:
    """Quantize aligned weights against ``Xt`` alone; error is ``Xt (w_tilde - q)``."""
    Xt, _, w = _as_inputs(Xt, Xt, w_tilde)
    uni = rng.uniforms(w.size)[:, None]
    Q, U, over, amax, dead = _phase2(Xt, w[:, None], a, uni)
    return NeuronQuantResult(Q[:, 0], U[:, 0], int(over[0]), _label(rng), float(amax[0]), dead)


def quantize_neuron_gpfq(X, Xt, w, a: Alphabet) -> NeuronQuantResult:
    """Greedy path following with nearest-point rounding (deterministic)."""
    X, Xt, w = _as_inputs(X, Xt, w)
    Q, U, over, amax, dead = _gpfq(X, Xt, w[:, None], a)
    return NeuronQuantResult(Q[:, 0], U[:, 0], int(over[0]), None, float(amax[0]), dead)


# ---------------------------------------------------------------------------
# layer orchestration


def thread_count() -> int:
    """Worker cap from ``SPFQ_THREADS`` (unset or 0 = one per CPU)."""
    raw = os.environ.get("SPFQ_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SPFQ_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"SPFQ_THREADS must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


def _uniforms(seed: int, layer: int, cols, N: int) -> np.ndarray:
    return np.column_stack([RandomStream.for_neuron(seed, layer, int(j)).uniforms(N) for j in cols])


def _quantize_block(X, Xt, W, cols, a, cfg: QuantConfig, layer: int):
    uni = _uniforms(cfg.seed, layer, cols, X.shape[1])
    Wb = W[:, cols]
    if cfg.mode == "fused":
        Q, U, over, amax, dead = _fused(X, Xt, Wb, a, uni)
        return Q, U, over, amax, dead
    if cfg.mode == "order_r":
        Wt, Uhat, dead = align_columns(X, Xt, Wb, cfg.order)
    else:
        target = X @ Wb
        Wt = np.empty_like(Wb)
        for i, j in enumerate(cols):
            try:
                Wt[:, i] = solve_min_inf(Xt, target[:, i]).w_tilde
            except SimplexError as exc:
                raise RuntimeError(f"layer {layer}, column {j}: {exc}") from exc
        Uhat = target - Xt @ Wt
        dead = int(np.sum(np.einsum("ij,ij->j", Xt, Xt) == 0.0))
    Q, Utl, over, amax, dead2 = _phase2(Xt, Wt, a, uni)
    return Q, Uhat + Utl, over, amax, max(dead, dead2)


def quantize_layer(X, Xt, W, cfg: QuantConfig, layer: int = 1,
                   workers: Optional[int] = None) -> tuple[np.ndarray, LayerReport]:
    """Quantize every column of ``W`` against activations ``X`` (true) and ``Xt`` (quantized path).

    Column ``j`` draws from the stream keyed ``(cfg.seed, layer, j)``, so splitting the
    columns across workers never changes the output.

    Raises
    ------
    RankDeficientError
        In perfect mode when ``Xt`` has rank below ``m``.
    """
    X = np.asarray(X, dtype=np.float64)
    Xt = np.asarray(Xt, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.shape != Xt.shape:
        raise ValueError(f"layer {layer}: X and Xt differ in shape: {X.shape} vs {Xt.shape}")
    if W.ndim != 2 or W.shape[0] != X.shape[1]:
        raise ValueError(f"layer {layer}: weights {W.shape} do not match inputs {X.shape}")
    start = time.perf_counter()
    k = W.shape[1]
    if not np.any(W):
        a = cfg.alphabet_for(W) if cfg.explicit_delta is not None else None
        Q = np.zeros_like(W)
        dead = int(np.sum(np.einsum("ij,ij->j", Xt, Xt) == 0.0))
        report = LayerReport(layer, cfg.mode, a.step_delta if a else 0.0, a.levels if a else None,
                             [0.0] * k, 0.0, 0.0, 0, dead, 0.0)
        report.wall_time_ms = (time.perf_counter() - start) * 1e3
        return Q, report
    a = cfg.alphabet_for(W)
    if cfg.mode == "perfect":
        if not has_full_row_rank(Xt):
            raise RankDeficientError(f"layer {layer}: alignment infeasible / rank-deficient")

    nw = min(workers if workers is not None else thread_count(), k)
    blocks = [b for b in np.array_split(np.arange(k), max(nw, 1)) if b.size]
    if len(blocks) > 1:
        with ThreadPoolExecutor(len(blocks)) as pool:
            parts = list(pool.map(lambda b: _quantize_block(X, Xt, W, b, a, cfg, layer), blocks))
    else:
        parts = [_quantize_block(X, Xt, W, blocks[0], a, cfg, layer)]
    Q = np.concatenate([p[0] for p in parts], axis=1)
    over = np.concatenate([p[2] for p in parts])
    amax = np.concatenate([p[3] for p in parts])
    dead = max(p[4] for p in parts)
    if dead:
        logger.warning("layer %d: %d zero column(s) in quantized-path activations", layer, dead)
    # per-column residuals so the report does not depend on how columns were blocked
    errs = np.array([np.linalg.norm(X @ W[:, j] - Xt @ Q[:, j]) for j in range(k)])
    report = LayerReport(
        layer=layer, mode=cfg.mode, delta=a.step_delta, levels=a.levels,
        column_errors=[float(e) for e in errs], max_col_error=float(errs.max()),
        max_abs_arg=float(amax.max()), overflow_count=int(over.sum()),
        zero_column_count=dead, wall_time_ms=(time.perf_counter() - start) * 1e3,
    )
    return Q, report
