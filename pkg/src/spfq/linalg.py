"""Dense kernels: rank-one orthogonal projections and their products."""

from __future__ import annotations

from typing import Sequence

import numpy as np

RANK_RTOL = 1e-10


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-D vector")
    return v


def project_onto(z, x) -> np.ndarray:
    """``<z, x> z / ||z||^2``."""
    z, x = _as_vector(z), _as_vector(x)
    if z.shape != x.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {x.shape}")
    nz = float(z @ z)
    if nz == 0.0:
        raise ValueError("cannot project onto the zero vector")
    return (float(z @ x) / nz) * z


def project_complement(z, x) -> np.ndarray:
    """``x - P_z(x)``: projection onto the orthogonal complement of ``z``."""
    x = _as_vector(x)
    return x - project_onto(z, x)


class ProjectionProduct:
    """The operator ``P_{z_N perp} ... P_{z_1 perp}`` kept in factored form.

    ``columns`` may be an ``m x N`` matrix (one factor per column) or a sequence of
    vectors; factors apply in column order.
    """

    def __init__(self, columns) -> None:
        if isinstance(columns, np.ndarray) and columns.ndim == 2:
            Z = np.asarray(columns, dtype=np.float64).T
        else:
            Z = np.array([_as_vector(c) for c in columns])
        if Z.ndim != 2 or Z.shape[0] == 0:
            raise ValueError("need at least one column")
        norms = np.einsum("ij,ij->i", Z, Z)
        if np.any(norms == 0.0):
            raise ValueError("projection product needs nonzero columns")
        self._Z = np.ascontiguousarray(Z)
        self._norms = norms

    @property
    def dim(self) -> int:
        return self._Z.shape[1]

    def __len__(self) -> int:
        return self._Z.shape[0]

    def apply(self, x) -> np.ndarray:
        """``P x``; ``x`` may be a vector or an ``m x k`` block."""
        y = np.array(x, dtype=np.float64)
        for z, nz in zip(self._Z, self._norms):
            y -= np.multiply.outer(z, (z @ y) / nz)
        return y

    def apply_transpose(self, x) -> np.ndarray:
        y = np.array(x, dtype=np.float64)
        for z, nz in zip(self._Z[::-1], self._norms[::-1]):
            y -= np.multiply.outer(z, (z @ y) / nz)
        return y

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.dim))


def projection_product_norm(pp: ProjectionProduct | np.ndarray | Sequence, iters: int = 2000,
                            tol: float = 1e-10) -> float:
    """Operator 2-norm of a projection product by power iteration on ``P^T P``.

    The factors are swept once to materialise the ``m x m`` product; the power
    iteration then runs on that small matrix from the normalised all-ones vector and
    stops once successive Rayleigh quotients agree to ``tol`` (relative).
    """
    if not isinstance(pp, ProjectionProduct):
        pp = ProjectionProduct(pp)
    P = pp.matrix()
    G = P.T @ P
    v = np.ones(pp.dim) / np.sqrt(pp.dim)
    rho = float(v @ G @ v)
    for _ in range(iters):
        y = G @ v
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            return 0.0
        v = y / ny
        new = float(v @ G @ v)
        if abs(new - rho) < tol * max(new, np.finfo(float).tiny):
            rho = new
            break
        rho = new
    return float(np.sqrt(max(rho, 0.0)))


def singular_extremes(X) -> tuple[float, float]:
    """Largest and ``m``-th singular values of an ``m x N`` matrix with ``m <= N``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a matrix")
    m, N = X.shape
    if m > N:
        raise ValueError(f"expected a wide or square matrix, got {m}x{N}")
    s = np.linalg.svd(X, compute_uv=False)
    return float(s[0]), float(s[m - 1])


def has_full_row_rank(X) -> bool:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > X.shape[1]:
        return False
    smax, smin = singular_extremes(X)
    return smax > 0 and smin > RANK_RTOL * smax


def hadamard(order: int) -> np.ndarray:
    """Normalised Sylvester Hadamard matrix; ``order`` must be a power of two."""
    if order < 1 or order & (order - 1):
        raise ValueError(f"Hadamard order must be a power of two, got {order}")
    H = np.ones((1, 1))
    while H.shape[0] < order:
        H = np.block([[H, H], [H, -H]])
    return H / np.sqrt(order)
