"""Multilayer perceptrons with ReLU, layer-by-layer quantization, and file I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import ProjectionProduct, projection_product_norm
from .quantize import LayerReport, QuantConfig, quantize_layer

logger = logging.getLogger(__name__)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class MlpNetwork:
    """Weight matrices ``W[i]`` of shape ``N_{i-1} x N_i``, each followed by ReLU.

    ``bias[i]`` marks a layer whose last weight row is a folded bias; its input gets
    a column of ones appended before the product.
    """

    layers: list[np.ndarray]
    bias: list[bool] = field(default_factory=list)
    activation: Callable[[np.ndarray], np.ndarray] = relu

    def __post_init__(self) -> None:
        self.layers = [np.asarray(W, dtype=np.float64) for W in self.layers]
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if not self.bias:
            self.bias = [False] * len(self.layers)
        if len(self.bias) != len(self.layers):
            raise ValueError("bias flags must match the number of layers")
        for i, W in enumerate(self.layers):
            if W.ndim != 2 or 0 in W.shape:
                raise ValueError(f"layer {i + 1}: weights must be a nonempty matrix")
            if not np.all(np.isfinite(W)):
                raise ValueError(f"layer {i + 1}: weights must be finite")
        for i in range(1, len(self.layers)):
            if self.in_width(i) != self.layers[i - 1].shape[1]:
                raise ValueError(
                    f"layer {i + 1} expects {self.in_width(i)} inputs, layer {i} gives "
                    f"{self.layers[i - 1].shape[1]}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def in_width(self, i: int) -> int:
        """Input width of layer ``i`` (0-based) before any bias column."""
        return self.layers[i].shape[0] - int(self.bias[i])

    def layer_input(self, i: int, A: np.ndarray) -> np.ndarray:
        """Activations fed to layer ``i``, with the ones column when it carries a bias."""
        if self.bias[i]:
            return np.hstack([A, np.ones((A.shape[0], 1))])
        return A

    def copy(self) -> "MlpNetwork":
        return MlpNetwork([W.copy() for W in self.layers], list(self.bias), self.activation)


def forward(net: MlpNetwork, X, upto: Optional[int] = None) -> np.ndarray:
    """Output of the first ``upto`` layers (``upto=0`` returns ``X``)."""
    A = np.asarray(X, dtype=np.float64)
    upto = net.depth if upto is None else upto
    if not 0 <= upto <= net.depth:
        raise ValueError(f"upto must lie in [0, {net.depth}], got {upto}")
    if A.ndim != 2 or A.shape[1] != net.in_width(0):
        raise ValueError(f"data has shape {A.shape}, network expects {net.in_width(0)} columns")
    for i in range(upto):
        A = net.activation(net.layer_input(i, A) @ net.layers[i])
    return A


@dataclass
class RunReport:
    per_layer: list[LayerReport]
    frobenius_error: float
    relative_error: float
    seed: int
    column_errors: list[float] = field(default_factory=list)

    _LAYER_KEYS = ("layer", "mode", "delta", "levels", "max_col_error", "bound", "confidence",
                   "overflow_count", "zero_column_count", "max_abs_arg", "wall_time_ms",
                   "column_errors")

    def to_dict(self) -> dict:
        return {
            "per_layer": [{("K" if k == "levels" else k): getattr(r, k) for k in self._LAYER_KEYS}
                          for r in self.per_layer],
            "network_level": {"frobenius_error": self.frobenius_error,
                              "relative_error": self.relative_error, "seed": self.seed,
                              "column_errors": list(self.column_errors)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        layers = []
        for d in data["per_layer"]:
            d = dict(d)
            d.setdefault("levels", d.pop("K", None))
            layers.append(LayerReport(**{k: d.get(k) for k in cls._LAYER_KEYS}))
        net = data["network_level"]
        return cls(layers, net["frobenius_error"], net["relative_error"], net["seed"],
                   list(net.get("column_errors", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


def layer_bound(delta: float, p: int, m: int, Xt_cols_max: float, N: int, mode: str, order: int,
                W_max: float, P_norm: float, prev_error: float) -> float:
    """Per-layer error bound carried over from the previous layer's error.

    ``delta sqrt(2 pi p m log N) max_j ||X_j||`` plus the propagated term: the same
    factor for perfect alignment, ``N ||W||_max ||P||^(r-1) + factor`` otherwise.
    """
    factor = delta * math.sqrt(2 * math.pi * p * m * math.log(N))
    if mode == "perfect":
        carry = factor
    else:
        r = 1 if mode == "fused" else order
        carry = N * W_max * P_norm ** (r - 1) + factor
    return factor * Xt_cols_max + carry * prev_error


def quantize_network(net: MlpNetwork, X, cfg: QuantConfig, timing: bool = False,
                     workers: Optional[int] = None) -> tuple[MlpNetwork, RunReport]:
    """Quantize every layer in order against the true and quantized-path activations.

    Layer ``i`` sees ``X^(i-1)`` from the original network and ``Xt^(i-1)`` from the
    network with layers ``1..i-1`` already replaced.  Timing is recorded only when
    ``timing`` is set so reports stay reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    qnet = net.copy()
    A = Atil = X
    reports = []
    prev = 0.0
    m = X.shape[0]
    for i, W in enumerate(net.layers):
        Xi, Xti = net.layer_input(i, A), net.layer_input(i, Atil)
        Q, rep = quantize_layer(Xi, Xti, W, cfg, layer=i + 1, workers=workers)
        qnet.layers[i] = Q
        N = W.shape[0]
        if N >= 2 and rep.delta > 0:
            true_cols = float(np.max(np.linalg.norm(Xi, axis=0)))
            P_norm = 0.0
            if cfg.mode == "order_r" and cfg.order > 1 and i > 0:
                live = Xti[:, np.einsum("ij,ij->j", Xti, Xti) > 0]
                P_norm = projection_product_norm(ProjectionProduct(live)) if live.size else 1.0
            rep.bound = layer_bound(rep.delta, cfg.prob_exponent, m, true_cols, N, cfg.mode,
                                    cfg.order, float(np.max(np.abs(W))), P_norm, prev)
            rep.confidence = float(min(1.0, max(0.0, 1 - math.sqrt(2) * m * W.shape[1]
                                                / N ** cfg.prob_exponent)))
        if not timing:
            rep.wall_time_ms = None
        prev = rep.max_col_error
        reports.append(rep)
        A = net.activation(Xi @ W)
        Atil = net.activation(Xti @ Q)
    diff = A - Atil
    fro = float(np.linalg.norm(diff))
    ref = float(np.linalg.norm(A))
    rel = fro / ref if ref > 0 else (0.0 if fro == 0 else math.inf)
    report = RunReport(reports, fro, rel, cfg.seed, [float(v) for v in np.linalg.norm(diff, axis=0)])
    return qnet, report


# ---------------------------------------------------------------------------
# file formats


class FormatError(ValueError):
    """Malformed network or data file; the message names the offending field."""


def network_to_dict(net: MlpNetwork) -> dict:
    layers = []
    for W, b in zip(net.layers, net.bias):
        core = W[:-1] if b else W
        entry = {"rows": core.shape[0], "cols": core.shape[1],
                 "weights": [float(v) for v in core.ravel()]}
        if b:
            entry["bias"] = [float(v) for v in W[-1]]
        layers.append(entry)
    return {"layers": layers}


def network_from_dict(data) -> MlpNetwork:
    if not isinstance(data, dict) or not isinstance(data.get("layers"), list):
        raise FormatError("network: expected an object with a 'layers' list")
    mats, flags = [], []
    for i, entry in enumerate(data["layers"]):
        where = f"layers[{i}]"
        if not isinstance(entry, dict):
            raise FormatError(f"{where}: expected an object")
        for key in ("rows", "cols"):
            v = entry.get(key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise FormatError(f"{where}.{key}: expected a positive integer")
        R, C = entry["rows"], entry["cols"]
        w = entry.get("weights")
        if not isinstance(w, list) or len(w) != R * C:
            raise FormatError(f"{where}.weights: expected {R * C} numbers")
        try:
            W = np.array(w, dtype=np.float64).reshape(R, C)
        except (TypeError, ValueError):
            raise FormatError(f"{where}.weights: entries must be numbers") from None
        if not np.all(np.isfinite(W)):
            raise FormatError(f"{where}.weights: entries must be finite")
        b = entry.get("bias")
        if b is not None:
            if not isinstance(b, list) or len(b) != C:
                raise FormatError(f"{where}.bias: expected {C} numbers")
            try:
                brow = np.array(b, dtype=np.float64)
            except (TypeError, ValueError):
                raise FormatError(f"{where}.bias: entries must be numbers") from None
            W = np.vstack([W, brow])
        mats.append(W)
        flags.append(b is not None)
    try:
        return MlpNetwork(mats, flags)
    except ValueError as exc:
        raise FormatError(f"network: {exc}") from None


def save_network(net: MlpNetwork, path) -> None:
    # json writes floats with repr, the shortest string that round-trips
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(net), fh)
        fh.write("\n")


def load_network(path) -> MlpNetwork:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"network: invalid JSON ({exc})") from None
    return network_from_dict(data)


def load_data(path) -> np.ndarray:
    """Read an ``m x N0`` CSV of floats (no header)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError("data: file is empty")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"data: row {i + 1} has {len(r)} columns, expected {width}")
        try:
            out[i] = [float(c) for c in r]
        except ValueError:
            raise FormatError(f"data: row {i + 1} has a non-numeric entry") from None
    if not np.all(np.isfinite(out)):
        raise FormatError("data: entries must be finite")
    return out


def save_data(X, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(X, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])
