"""Small dense complex linear algebra.

Matrices are square ``complex128`` numpy arrays. Everything here is sized for
the handful-of-levels systems in this package (N <= ~16); nothing is tuned for
large problems.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
JACOBI_OFFDIAG_TOL = 1e-14


class NotHermitianError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def as_matrix(m) -> np.ndarray:
    """Coerce ``m`` to a square complex matrix, checking shape and finiteness."""
    arr = np.asarray(m, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=complex)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def identity(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=complex)


def mat_vec_mul(m, v) -> np.ndarray:
    m, v = as_matrix(m), as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {m.shape[0]} vs vector {v.shape[0]}")
    return m @ v


def mat_mul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a @ b


def dagger(m) -> np.ndarray:
    """Conjugate transpose."""
    return as_matrix(m).conj().T


def hermiticity_error(m) -> float:
    m = as_matrix(m)
    return float(np.max(np.abs(m - m.conj().T)))


def _offdiag_max(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.max(np.abs(off))) if a.shape[0] > 1 else 0.0


def eig_hermitian(h) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and the
    eigenvector columns permuted to match. Equal eigenvalues keep the order in
    which the sweeps left them, so the output is deterministic.

    Raises
    ------
    NotHermitianError
        If ``max|H - H^dagger|`` exceeds ``1e-10``.
    ConvergenceError
        If the off-diagonal part is not annihilated within 100 sweeps.
    """
    h = as_matrix(h)
    if hermiticity_error(h) > HERMITIAN_TOL:
        raise NotHermitianError(
            f"matrix is not Hermitian (max asymmetry {hermiticity_error(h):.3e})"
        )
    n = h.shape[0]
    a = 0.5 * (h + h.conj().T)
    v = np.eye(n, dtype=complex)
    scale = max(float(np.linalg.norm(a)), 1.0)
    threshold = JACOBI_OFFDIAG_TOL * scale

    for _ in range(JACOBI_MAX_SWEEPS):
        if _offdiag_max(a) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                g = a[p, q]
                mag = abs(g)
                if mag <= threshold * 1e-3:
                    continue
                phase = g / mag
                app, aqq = a[p, p].real, a[q, q].real
                tau = (aqq - app) / (2.0 * mag)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # J = diag(1, conj(phase)) @ [[c, s], [-s, c]] on the (p, q) plane
                j = np.array([[c, s], [-s * phase.conjugate(), c * phase.conjugate()]])
                cols = [p, q]
                a[:, cols] = a[:, cols] @ j
                a[cols, :] = j.conj().T @ a[cols, :]
                v[:, cols] = v[:, cols] @ j
                a[p, q] = a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
    else:
        if _offdiag_max(a) > threshold:
            raise ConvergenceError(
                f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )

    evals = np.diag(a).real.copy()
    order = np.argsort(evals, kind="stable")
    return evals[order], v[:, order]


def expm_hermitian(h, scale: float) -> np.ndarray:
    """``exp(-i * scale * H)`` for Hermitian ``H``, via its eigendecomposition."""
    if not np.isfinite(scale):
        raise ValueError("scale must be finite")
    evals, vecs = eig_hermitian(h)
    phases = np.exp(-1j * scale * evals)
    return (vecs * phases) @ vecs.conj().T


def is_unitary(m, tol: float = 1e-10) -> bool:
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = as_matrix(m)
    err = np.abs(m @ m.conj().T - np.eye(m.shape[0]))
    return bool(np.max(err) <= tol)
