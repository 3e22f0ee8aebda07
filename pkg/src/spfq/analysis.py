"""Error-bound evaluators, Monte Carlo validators, adversarial instances, and
alphabet sizing.

Monte Carlo routines key every trial's generator by ``(seed, tag, trial)`` so results
do not depend on evaluation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .align import solve_min_inf
from .alphabet import Alphabet, RandomStream
from .linalg import ProjectionProduct, hadamard, projection_product_norm, singular_extremes
from .network import MlpNetwork, quantize_network
from .quantize import QuantConfig, _fused, _phase2, quantize_layer

RETRIES = 100


def trial_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def binomial_allowance(trials: int, prob: float) -> float:
    """Violation budget ``T p + 3 sqrt(T p)`` for a failure probability ``p``."""
    prob = min(max(prob, 0.0), 1.0)
    return trials * prob + 3.0 * math.sqrt(trials * prob)


def clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def random_orthogonal(m: int, rng: np.random.Generator) -> np.ndarray:
    """QR of a Gaussian matrix with the sign of ``R``'s diagonal folded into ``Q``."""
    Q, R = np.linalg.qr(rng.standard_normal((m, m)))
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


# ---------------------------------------------------------------------------
# quantization error bound


@dataclass
class BoundEvaluation:
    bound_value: float
    confidence: float
    inputs_digest: dict = field(default_factory=dict)


def quantization_bound(delta: float, p: int, m: int, Xt) -> BoundEvaluation:
    """``delta sqrt(2 pi p m log N) max_j ||Xt_j||`` with confidence ``1 - sqrt(2) m / N^p``."""
    Xt = np.asarray(Xt, dtype=np.float64)
    N = Xt.shape[1]
    if N < 2:
        raise ValueError(f"need at least two columns (log N > 0), got N={N}")
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    col_max = float(np.max(np.linalg.norm(Xt, axis=0)))
    value = delta * math.sqrt(2 * math.pi * p * m * math.log(N)) * col_max
    conf = clip01(1.0 - math.sqrt(2) * m / float(N) ** p)
    return BoundEvaluation(value, conf, {"delta": delta, "p": p, "m": m, "N": N, "max_col_norm": col_max})


def bound_violations(m: int = 16, N: int = 256, p: int = 2, delta: float = 0.1, trials: int = 1000,
                     seed: int = 0) -> tuple[int, float]:
    """Count runs whose phase-two error exceeds :func:`quantization_bound`.

    Each trial draws a fresh Gaussian ``Xt`` and Gaussian aligned weights and runs
    phase two with an infinite alphabet.  Returns ``(violations, rate)``.
    """
    a = Alphabet(delta)
    bad = 0
    for k in range(trials):
        g = trial_rng(seed, 1, k)
        Xt = g.standard_normal((m, N))
        w = g.standard_normal(N)
        uni = RandomStream(seed, 1, k).uniforms(N)[:, None]
        _, U, _, _, _ = _phase2(Xt, w[:, None], a, uni)
        if np.linalg.norm(U[:, 0]) > quantization_bound(delta, p, m, Xt).bound_value:
            bad += 1
    return bad, bad / trials


# ---------------------------------------------------------------------------
# tails, covariance recursion, projection decay


def tail_statistics(samples, sigma: float, gamma: float) -> tuple[float, float]:
    """Fraction of samples with ``||x||_inf > alpha`` and the fraction allowed.

    ``alpha = 2 sigma sqrt(log(sqrt(2) n / gamma))``; the allowance is
    ``gamma + 3 sqrt(gamma (1 - gamma) / T)`` for ``T`` samples.
    """
    S = np.asarray(samples, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0:
        raise ValueError("samples must be a nonempty list of equal-length vectors")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    T, n = S.shape
    alpha = 2 * sigma * math.sqrt(max(math.log(math.sqrt(2) * n / gamma), 0.0))
    frac = float(np.mean(np.max(np.abs(S), axis=1) > alpha))
    return frac, gamma + 3 * math.sqrt(gamma * (1 - gamma) / T)


def tail_check(samples, sigma: float, gamma: float) -> bool:
    frac, allowed = tail_statistics(samples, sigma, gamma)
    return frac <= allowed


def covariance_recursion_check(columns, alpha: float) -> bool:
    """Build ``M_t = P_t M_{t-1} P_t + alpha z_t z_t^T`` and test ``lambda_max(M_t) <= alpha max ||z_j||^2``."""
    Z = [np.asarray(z, dtype=np.float64) for z in columns]
    if not Z:
        raise ValueError("need at least one column")
    m = Z[0].size
    M = np.zeros((m, m))
    beta = 0.0
    for z in Z:
        nz = float(z @ z)
        if nz == 0.0:
            raise ValueError("covariance recursion needs nonzero columns")
        P = np.eye(m) - np.outer(z, z) / nz
        M = P @ M @ P + alpha * np.outer(z, z)
        beta = max(beta, alpha * nz)
        if np.linalg.eigvalsh((M + M.T) / 2)[-1] > beta + 1e-8:
            return False
    return True


@dataclass
class DecayRow:
    N: int
    mean_log_norm_sq: float
    std_log_norm_sq: float
    max_norm: float


@dataclass
class DecayTable:
    m: int
    rows: list[DecayRow]
    slope: Optional[float]


def fit_slope(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    if len(x) < 2:
        return None
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def projection_decay_experiment(m: int, Ns: Iterable[int], trials: int, seed: int) -> DecayTable:
    """Mean ``log ||P||_2^2`` for products of ``N`` Gaussian column projections.

    The slope is fitted against ``N`` (not ``log N``); exponential decay makes it linear.
    """
    rows = []
    for N in Ns:
        if N < 10:
            raise ValueError(f"each N must be >= 10, got {N}")
        logs, top = [], 0.0
        for k in range(trials):
            Z = trial_rng(seed, 2, m, N, k).standard_normal((m, N))
            nrm = projection_product_norm(ProjectionProduct(Z))
            top = max(top, nrm)
            logs.append(2 * math.log(max(nrm, np.finfo(float).tiny)))
        rows.append(DecayRow(N, float(np.mean(logs)), float(np.std(logs)), top))
    return DecayTable(m, rows, fit_slope([r.N for r in rows], [r.mean_log_norm_sq for r in rows]))


# ---------------------------------------------------------------------------
# adversarial construction and stability


@dataclass
class AdversarialInstance:
    X: np.ndarray
    Xt: np.ndarray
    w: np.ndarray
    gamma: float
    epsilon: float
    expected_ratio: float


def adversarial_instance(m: int, N: int, gamma: float, epsilon: float, seed: int) -> AdversarialInstance:
    """Small perturbation of ``X`` that multiplies the min sup-norm solution by ``1/gamma``.

    ``X = U S V^T`` with ``V`` the first ``m`` Hadamard columns and ``S = diag(1, ..., 1, eps)``;
    the rank-one ``E = eps (gamma - 1) U_m V_m^T`` shrinks the last singular value to ``eps gamma``.
    """
    if not (0 < gamma < 1 and 0 < epsilon < 1):
        raise ValueError("gamma and epsilon must lie in (0, 1)")
    if N < m:
        raise ValueError(f"need N >= m, got N={N}, m={m}")
    V = hadamard(N)[:, :m]
    U = random_orthogonal(m, trial_rng(seed, 3, m, N))
    s = np.ones(m)
    s[-1] = epsilon
    X = (U * s) @ V.T
    E = epsilon * (gamma - 1) * np.outer(U[:, -1], V[:, -1])
    Xt = X + E
    w = epsilon * (V @ (np.eye(m)[:, -1] / s))
    e_norm = singular_extremes(E)[0]
    x_norm = singular_extremes(X)[0]
    if abs(e_norm - epsilon * (1 - gamma) * x_norm) > 1e-9 * max(1.0, x_norm):
        raise AssertionError("perturbation norm does not match its construction")
    return AdversarialInstance(X, Xt, w, gamma, epsilon, 1.0 / gamma)


def stability_threshold(s_max: float, s_min: float, epsilon: float, p: int, N: int) -> float:
    return s_max / (s_min - epsilon * s_max) * math.sqrt(2 * p * math.log(N))


def stability_bound_check(m: int, N: int, p: int, epsilon: float, trials: int,
                          seed: int) -> tuple[int, float]:
    """Count trials where the min sup-norm realignment of Gaussian weights is too large.

    Returns ``(violations, allowed)`` with ``allowed`` the binomial budget for failure
    probability ``2 / N^(p-1)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    bad = 0
    for k in range(trials):
        g = trial_rng(seed, 4, k)
        for _ in range(RETRIES):
            X = g.standard_normal((m, N))
            s1, sm = singular_extremes(X)
            if epsilon * s1 < sm:
                break
        else:
            raise ValueError("hypothesis eps*sigma_1 < sigma_m unsatisfiable at this (m, N, eps)")
        E = g.standard_normal((m, N))
        if epsilon > 0:
            E *= epsilon * s1 / singular_extremes(E)[0]
        else:
            E[:] = 0.0
        w = g.standard_normal(N)
        sol = solve_min_inf(X + E, X @ w)
        if sol.objective > stability_threshold(s1, sm, epsilon, p, N):
            bad += 1
    return bad, binomial_allowance(trials, 2.0 / N ** (p - 1))


# ---------------------------------------------------------------------------
# finite alphabets


@dataclass
class AlphabetSize:
    levels: int
    bits: int
    eta: float


def finite_alphabet_size(Xt, delta: float, p: int, epsilon_prev: float,
                         sv: tuple[float, float]) -> AlphabetSize:
    """Smallest ``K`` with ``K delta >= 2 eta sqrt(2 p log N)``, ``eta = s1 / (sm - eps s1)``.

    ``sv`` holds the extreme singular values of the true-path activations.  The bit
    count is ``ceil(log2 K) + 1``.
    """
    s1, sm = sv
    if not sm - epsilon_prev * s1 > 0:
        raise ValueError("need sigma_m - eps * sigma_1 > 0")
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    N = np.asarray(Xt).shape[1]
    eta = s1 / (sm - epsilon_prev * s1)
    K = max(1, math.ceil(2 * eta * math.sqrt(2 * p * math.log(N)) / delta))
    return AlphabetSize(K, math.ceil(math.log2(K)) + 1, eta)


def coupling_run(m: int, N: int, k: int, delta: float, p: int, perturb: float, seed: int,
                 layer_seed: int) -> dict:
    """Quantize one random layer with a sized finite alphabet and with the infinite one.

    ``Xt`` is ``X`` plus a Gaussian perturbation scaled to ``perturb * sigma_1``.  The
    returned dict holds both ``Q`` matrices and the finite run's overflow count.
    """
    g = trial_rng(seed, 5, layer_seed)
    X = g.standard_normal((m, N))
    s1, sm = singular_extremes(X)
    E = g.standard_normal((m, N))
    E *= perturb * s1 / singular_extremes(E)[0]
    Xt = X + E
    W = g.standard_normal((N, k))
    size = finite_alphabet_size(Xt, delta, p, perturb, (s1, sm))
    base = dict(bits=None, explicit_delta=delta, mode="perfect", prob_exponent=p, seed=layer_seed)
    Qf, rf = quantize_layer(X, Xt, W, QuantConfig(levels=size.levels, **base), workers=1)
    Qi, _ = quantize_layer(X, Xt, W, QuantConfig(**base), workers=1)
    return {"Q_finite": Qf, "Q_infinite": Qi, "overflows": rf.overflow_count, "levels": size.levels}


def bit_sizing_experiment(m: int, Ns: Iterable[int], delta: float, p: int, epsilon: float,
                          seed: int) -> list[dict]:
    """Bits needed per :func:`finite_alphabet_size` for Gaussian activations of growing width."""
    out = []
    for N in Ns:
        X = trial_rng(seed, 6, m, N).standard_normal((m, N))
        s1, sm = singular_extremes(X)
        size = finite_alphabet_size(X, delta, p, epsilon, (s1, sm))
        out.append({"N": N, "levels": size.levels, "bits": size.bits, "eta": size.eta})
    return out


# ---------------------------------------------------------------------------
# ReLU expectation


def relu_expectation_stats(Sigma_spec: str, n: int, trials: int, seed: int) -> tuple[float, float]:
    """Sample mean of ``||relu(x)||_2`` for ``x ~ N(0, Sigma)`` and the threshold it must clear.

    The threshold is ``sqrt(tr Sigma / 2 pi)`` less three standard errors.  ``random_psd``
    draws ``Sigma = G G^T / n`` with ``G`` Gaussian.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if trials < 2:
        raise ValueError(f"trials must be >= 2, got {trials}")
    g = trial_rng(seed, 7, n)
    if Sigma_spec == "identity":
        L = np.eye(n)
    elif Sigma_spec == "random_psd":
        L = g.standard_normal((n, n)) / math.sqrt(n)
    else:
        raise ValueError(f"unknown covariance {Sigma_spec!r}")
    x = g.standard_normal((trials, n)) @ L.T
    r = np.linalg.norm(np.maximum(x, 0.0), axis=1)
    lower = math.sqrt(float(np.sum(L * L)) / (2 * math.pi))
    return float(r.mean()), lower - 3 * float(r.std(ddof=1)) / math.sqrt(trials)


def relu_expectation_check(Sigma_spec: str, n: int, trials: int, seed: int) -> bool:
    mean, threshold = relu_expectation_stats(Sigma_spec, n, trials, seed)
    return mean >= threshold


# ---------------------------------------------------------------------------
# relative error


@dataclass
class SweepRow:
    N: int
    mean: float
    std: float
    budget: Optional[float] = None


@dataclass
class SweepTable:
    m: int
    L: int
    rows: list[SweepRow]
    slope: Optional[float]


def relative_error_budget(m: int, widths: Sequence[int], p: int, delta: float) -> float:
    """High-probability budget for ``||Phi(X) - Phi~(X)||_F^2`` over the expected output energy.

    ``widths = (N_0, ..., N_L)``; evaluates
    ``L (2 pi)^L prod_k log N_k sum_i (2 pi p m delta^2)^(L-i) (4p)^i / prod_{k=i}^{L-1} N_k``.
    """
    L = len(widths) - 1
    if L < 1:
        raise ValueError("need at least one layer")
    logs = math.prod(math.log(n) for n in widths)
    total = 0.0
    for i in range(L):
        total += (2 * math.pi * p * m * delta ** 2) ** (L - i) * (4 * p) ** i / math.prod(widths[i:L])
    return L * (2 * math.pi) ** L * logs * total


def relative_error_sweep(m: int, Ns: Iterable[int], L: int, p: int, trials: int, seed: int,
                         delta: float = 1.0) -> SweepTable:
    """Mean relative squared error of fused quantization for Gaussian data and weights.

    ``L = 1`` quantizes a single neuron and records ``||Xw - Xq||^2 / ||Xw||^2``; deeper
    sweeps quantize an ``L``-layer network of width ``N`` and record the Frobenius ratio.
    The slope is fitted in log-log coordinates.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    a = Alphabet(delta)
    rows = []
    for N in Ns:
        if N < 2 * m:
            raise ValueError(f"each N must be >= 2m, got N={N}, m={m}")
        vals = []
        for k in range(trials):
            g = trial_rng(seed, 8, m, N, L, k)
            X = g.standard_normal((m, N))
            if L == 1:
                w = g.standard_normal((N, 1))
                uni = RandomStream(seed, 8, N, k).uniforms(N)[:, None]
                _, U, _, _, _ = _fused(X, X, w, a, uni)
                vals.append(float(U[:, 0] @ U[:, 0]) / float(np.sum((X @ w) ** 2)))
            else:
                net = MlpNetwork([g.standard_normal((N, N)) for _ in range(L)])
                cfg = QuantConfig(bits=None, explicit_delta=delta, seed=seed * 1000003 + k)
                _, rep = quantize_network(net, X, cfg, workers=1)
                vals.append(rep.relative_error ** 2)
        rows.append(SweepRow(N, float(np.mean(vals)), float(np.std(vals)),
                             relative_error_budget(m, [N] * (L + 1), p, delta)))
    slope = fit_slope([math.log(r.N) for r in rows], [math.log(r.mean) for r in rows])
    return SweepTable(m, L, rows, slope)


# ---------------------------------------------------------------------------
# CSV output


def write_csv(path, rows: list[dict], columns: Optional[Sequence[str]] = None) -> None:
    """Comma-separated, header row, LF endings; ``None`` becomes an empty field."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])
