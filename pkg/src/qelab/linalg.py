"""Small dense linear algebra used by the gradient aggregators.

Everything here operates on task-count-sized matrices (a handful of rows
and columns), in float64 throughout. The eigensolver is a cyclic Jacobi
iteration: at these sizes simplicity and auditability beat asymptotics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-10
JACOBI_SWEEP_LIMIT = 100


class NonSymmetric(ValueError):
    """Matrix fails the symmetry tolerance required by the eigensolver."""


class Singular(ValueError):
    """Matrix is not positive definite enough to solve against."""


@dataclass(frozen=True)
class SymEigen:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray  # (n,), sorted descending
    eigenvectors: np.ndarray  # (n, n), orthonormal columns


def _as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise NonSymmetric(f"matrix is {m.shape[0]}x{m.shape[1]}, not square")
    asym = np.max(np.abs(m - m.T))
    scale = max(1.0, float(np.max(np.abs(m))))
    if asym > SYMMETRY_TOL * scale:
        raise NonSymmetric(f"asymmetry {asym:.3e} exceeds tolerance")
    return 0.5 * (m + m.T)


def gram(g) -> np.ndarray:
    """Gram matrix of the columns of ``g``: M[i, j] = column_i . column_j.

    The result is exactly symmetric: the upper triangle is computed once
    and mirrored.
    """
    g = _as_matrix(g)
    m = g.T @ g
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


def eigh_sym(m) -> SymEigen:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues sorted descending with matching orthonormal
    eigenvector columns. Convergence: max off-diagonal below
    1e-12 * ||M||_F. Raises :class:`NonSymmetric` when the input is not
    symmetric within tolerance.
    """
    m = _check_symmetric(_as_matrix(m))
    n = m.shape[0]
    a = m.copy()
    v = np.eye(n)
    norm = float(np.linalg.norm(m))
    if norm > 0.0:
        off_tol = 1e-12 * norm
        for _ in range(JACOBI_SWEEP_LIMIT):
            off = np.abs(a - np.diag(np.diag(a))).max()
            if off < off_tol:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) < off_tol / max(n, 2):
                        continue
                    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = np.sign(tau) if tau != 0.0 else 1.0
                    t = t / (abs(tau) + np.sqrt(1.0 + tau * tau))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    rot_p = c * a[:, p] - s * a[:, q]
                    rot_q = s * a[:, p] + c * a[:, q]
                    a[:, p], a[:, q] = rot_p, rot_q
                    rot_p = c * a[p, :] - s * a[q, :]
                    rot_q = s * a[p, :] + c * a[q, :]
                    a[p, :], a[q, :] = rot_p, rot_q
                    a[p, q] = a[q, p] = 0.0
                    rot_p = c * v[:, p] - s * v[:, q]
                    rot_q = s * v[:, p] + c * v[:, q]
                    v[:, p], v[:, q] = rot_p, rot_q
    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return SymEigen(eigenvalues=eigenvalues[order], eigenvectors=v[:, order])


def solve_spd(m, b) -> np.ndarray:
    """Solve M x = b for symmetric positive definite M.

    Uses the Jacobi eigendecomposition plus one step of iterative
    refinement, which keeps the residual near machine precision for the
    well-conditioned systems this package produces. Raises
    :class:`Singular` when the smallest eigenvalue is below
    1e-12 * largest.
    """
    m = _as_matrix(m)
    b = np.asarray(b, dtype=np.float64)
    eig = eigh_sym(m)
    lam = eig.eigenvalues
    if lam[0] <= 0.0 or lam[-1] <= 1e-12 * lam[0]:
        raise Singular(f"eigenvalue range [{lam[-1]:.3e}, {lam[0]:.3e}] is not positive definite")
    v = eig.eigenvectors
    x = v @ ((v.T @ b) / lam)
    for _ in range(2):
        r = b - m @ x
        x = x + v @ ((v.T @ r) / lam)
    return x
