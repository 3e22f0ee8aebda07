"""Data alignment: sequential projection (any order), its closed form, and the
minimum sup-norm solution of an underdetermined system."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import has_full_row_rank

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-10


class RankDeficientError(ValueError):
    """Raised when the quantized-path activations lose row rank."""


class SimplexError(RuntimeError):
    pass


@dataclass
class AlignResult:
    w_tilde: np.ndarray
    residual: np.ndarray
    order_used: int
    zero_columns: int = 0


@dataclass
class MinInfSolution:
    w_tilde: np.ndarray
    objective: float
    feasibility_residual: float


def _check_shapes(X, Xt, W):
    X = np.asarray(X, dtype=np.float64)
    Xt = np.asarray(Xt, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.shape != Xt.shape:
        raise ValueError(f"X and Xt differ in shape: {X.shape} vs {Xt.shape}")
    if W.shape[0] != X.shape[1]:
        raise ValueError(f"weights have length {W.shape[0]}, expected {X.shape[1]}")
    return X, Xt, W


def align_columns(X, Xt, W, r: int = 1) -> tuple[np.ndarray, np.ndarray, int]:
    """Order-``r`` alignment for every column of ``W`` (``N x k``) at once.

    Returns ``(W_tilde, residuals, zero_columns)`` with residuals ``m x k``.  A zero
    column of ``Xt`` keeps ``w_tilde_t = w_t``; it contributes nothing to ``Xt @ w_tilde``.
    """
    if r < 1:
        raise ValueError(f"order must be >= 1, got {r}")
    X, Xt, W = _check_shapes(X, Xt, W)
    m, N = X.shape
    k = W.shape[1]
    norms = np.einsum("ij,ij->j", Xt, Xt)
    dead = norms == 0.0
    Wt = W.copy()
    U = np.zeros((m, k))
    for sweep in range(r):
        for t in range(N):
            x, xt = X[:, t], Xt[:, t]
            if dead[t]:
                if not sweep:
                    U += np.multiply.outer(x, W[t])
                continue
            if sweep:
                # retract the previous fit of coordinate t
                U += np.multiply.outer(xt, Wt[t]) - np.multiply.outer(x, W[t])
            H = U + np.multiply.outer(x, W[t])
            Wt[t] = (xt @ H) / norms[t]
            U = H - np.multiply.outer(xt, Wt[t])
    return Wt, U, int(dead.sum())


def align_order_r(X, Xt, w, r: int) -> AlignResult:
    """Order-``r`` sequential alignment of one neuron.

    The first sweep fits ``w_tilde_t`` to ``u_{t-1} + w_t X_t``; each later sweep
    retracts coordinate ``t`` and refits it, so the residual after ``r`` sweeps is
    the residual of the first sweep pushed ``r - 1`` times through the projection
    product of the ``Xt`` columns.
    """
    w = np.asarray(w, dtype=np.float64)
    Wt, U, dead = align_columns(X, Xt, w[:, None], r)
    if dead:
        logger.warning("alignment skipped %d zero column(s)", dead)
    return AlignResult(Wt[:, 0], U[:, 0], r, dead)


def align_first_pass(X, Xt, w) -> AlignResult:
    return align_order_r(X, Xt, w, 1)


def align_closed_form(X, Xt, w) -> np.ndarray:
    """First-sweep residual as ``sum_j w_j P_N ... P_j X_j`` (``P_t`` = complement of Xt_t).

    Sweeps ``j = N..1`` keeping the running product ``P_N ... P_j`` as an ``m x m``
    matrix, so it shares no arithmetic with the recursion in :func:`align_columns`.
    """
    w = np.asarray(w, dtype=np.float64)
    X, Xt, w = _check_shapes(X, Xt, w)
    m, N = X.shape
    Q = np.eye(m)
    total = np.zeros(m)
    for j in range(N - 1, -1, -1):
        z = Xt[:, j]
        nz = float(z @ z)
        if nz > 0.0:
            Q = Q - np.outer(Q @ z, z) / nz
        total += w[j] * (Q @ X[:, j])
    return total


# ---------------------------------------------------------------------------
# minimum sup-norm solution by dense two-phase simplex


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, T[row])


def _simplex(T: np.ndarray, basis: list[int], ncols: int, cap: int) -> int:
    """Primal simplex on tableau ``T`` (last row = reduced costs, last col = rhs).

    Enters the most negative reduced cost; after a run of degenerate pivots it
    switches for good to Bland's smallest-index rule, which cannot cycle.  Only the
    first ``ncols`` columns may enter.  Returns the iteration count.
    """
    nrows = T.shape[0] - 1
    bland = False
    stalled = 0
    for it in range(cap):
        cost = T[-1, :ncols]
        entering = np.flatnonzero(cost < -PIVOT_TOL)
        if entering.size == 0:
            return it
        col = int(entering[0]) if bland else int(entering[np.argmin(cost[entering])])
        a = T[:nrows, col]
        ok = a > PIVOT_TOL
        if not ok.any():
            raise SimplexError("linear program is unbounded")
        ratios = np.full(nrows, np.inf)
        ratios[ok] = np.maximum(T[:nrows, -1][ok], 0.0) / a[ok]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL * max(1.0, abs(best)))
        row = int(min(ties, key=lambda i: basis[i]))
        stalled = stalled + 1 if best <= PIVOT_TOL else 0
        if stalled > nrows:
            bland = True
        _pivot(T, row, col)
        basis[row] = col
    raise SimplexError(f"simplex iteration cap ({cap}) exceeded")


def solve_min_inf(Xt, b, tol_feas: Optional[float] = None) -> MinInfSolution:
    """Minimise ``||z||_inf`` subject to ``Xt z = b``.

    Solved as a linear program over ``z = y - t`` with ``0 <= y_j <= 2t``:

        min t   s.t.  Xt y - (Xt 1) t = b,   y_j - 2t + s_j = 0,   y, t, s >= 0.

    Phase one drives ``m`` artificials out; the final vertex is recomputed from the
    optimal basis against the original data.
    """
    Xt = np.asarray(Xt, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, N = Xt.shape
    if b.shape != (m,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({m},)")
    if not has_full_row_rank(Xt):
        raise RankDeficientError("alignment infeasible / rank-deficient")
    if tol_feas is None:
        tol_feas = 1e-8 * float(np.linalg.norm(b)) + 1e-12
    if not np.any(b):
        return MinInfSolution(np.zeros(N), 0.0, 0.0)

    nv = 2 * N + 1                          # y (N), t, s (N)
    A = np.zeros((m + N, nv))
    A[:m, :N] = Xt
    A[:m, N] = -Xt.sum(axis=1)
    A[m:, :N] = np.eye(N)
    A[m:, N] = -2.0
    A[m:, N + 1:] = np.eye(N)
    rhs = np.concatenate([b, np.zeros(N)])
    sign = np.where(rhs[:m] < 0, -1.0, 1.0)
    A[:m] *= sign[:, None]
    rhs[:m] *= sign

    # tableau: [A | artificials | rhs], last row holds reduced costs
    nrows = m + N
    T = np.zeros((nrows + 1, nv + m + 1))
    T[:nrows, :nv] = A
    T[:m, nv:nv + m] = np.eye(m)
    T[:nrows, -1] = rhs
    basis = list(range(nv, nv + m)) + list(range(N + 1, 2 * N + 1))
    T[-1, :] = -T[:m].sum(axis=0)
    T[-1, nv:nv + m] = 0.0
    cap = 50 * (N + m)
    used = _simplex(T, basis, nv, cap)
    if T[-1, -1] < -1e-9 * max(1.0, float(np.abs(rhs).max())):
        raise SimplexError("phase one found no feasible point")

    # drive remaining artificials out of the basis; drop redundant rows
    keep = []
    for i in range(nrows):
        if basis[i] >= nv:
            cand = np.flatnonzero(np.abs(T[i, :nv]) > PIVOT_TOL)
            if cand.size == 0:
                continue
            _pivot(T, i, int(cand[0]))
            basis[i] = int(cand[0])
        keep.append(i)
    T = np.vstack([T[keep][:, list(range(nv)) + [T.shape[1] - 1]], np.zeros(T.shape[1] - m)])
    basis = [basis[i] for i in keep]

    # phase two: minimise t
    T[-1, :] = 0.0
    T[-1, N] = 1.0
    for i, j in enumerate(basis):
        if T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[i]
    _simplex(T, basis, nv, max(cap - used, 1))

    # recompute the vertex from the basis against the original constraints
    B = A[keep][:, basis]
    xb = np.linalg.lstsq(B, rhs[keep], rcond=None)[0]
    x = np.zeros(nv)
    x[basis] = xb
    z = x[:N] - x[N]
    resid = float(np.linalg.norm(Xt @ z - b))
    if resid > tol_feas:
        raise SimplexError(f"feasibility residual {resid:.3e} exceeds tolerance {tol_feas:.3e}")
    return MinInfSolution(z, float(np.max(np.abs(z))), resid)
