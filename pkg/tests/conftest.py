"""Shared independent oracles and the acceptance summary hook."""

import itertools

import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def jacobi_eigvals(A, tol=1e-15, sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations (ascending)."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum((A - np.diag(np.diag(A))) ** 2))
        if off <= tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e100:
                    t = 1 / (2 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1))
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))


def explicit_projection_product(Z):
    """``P_{z_N perp} ... P_{z_1 perp}`` as a product of explicit ``m x m`` matrices."""
    Z = np.asarray(Z, dtype=float)
    m = Z.shape[0]
    P = np.eye(m)
    for j in range(Z.shape[1]):
        z = Z[:, j]
        P = (np.eye(m) - np.outer(z, z) / (z @ z)) @ P
    return P


def naive_matmul(A, B):
    n, k = len(A), len(A[0])
    p = len(B[0])
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for r in range(k):
                acc += A[i][r] * B[r][j]
            out[i, j] = acc
    return out


def min_inf_by_vertices(A, b):
    """Optimal value of ``min t s.t. A z = b, |z_j| <= t`` by enumerating every vertex.

    A vertex fixes ``N + 1 - m`` coordinates to ``+t`` or ``-t`` on top of the ``m``
    equalities; each choice gives a square system.
    """
    m, N = A.shape
    best = np.inf
    for S in itertools.combinations(range(N), N + 1 - m):
        for signs in itertools.product((1.0, -1.0), repeat=len(S)):
            M = np.zeros((N + 1, N + 1))
            rhs = np.zeros(N + 1)
            M[:m, :N] = A
            rhs[:m] = b
            for r, (j, s) in enumerate(zip(S, signs)):
                M[m + r, j] = 1.0
                M[m + r, N] = -s
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            x = np.linalg.solve(M, rhs)
            z, t = x[:N], x[N]
            if t >= -1e-12 and np.all(np.abs(z) <= t + 1e-9):
                best = min(best, t)
    return best


def grid_member(values, delta, levels=None, rtol=1e-12):
    k = np.round(np.asarray(values) / delta)
    ok = np.allclose(np.asarray(values), k * delta, rtol=0, atol=rtol * max(1.0, delta))
    if levels is not None:
        ok = ok and np.all(np.abs(k) <= levels)
    return bool(ok)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
