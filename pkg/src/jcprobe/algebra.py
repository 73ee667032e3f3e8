"""Dense complex operator arithmetic and density-matrix hygiene.

Operators are plain ``numpy.ndarray`` of ``complex128`` with square shape.
Density matrices are Hermitian, unit-trace, positive-semidefinite arrays;
:func:`enforce_hygiene` restores the first two properties after an
integration step, positivity is only monitored (projecting onto the
positive cone would bias stochastic dynamics).
"""

from __future__ import annotations

import numpy as np

# Joint Hilbert-space dimensions beyond this are out of scope for the
# dense backend.
MAX_DIM = 2048


class IntegrationDivergenceError(RuntimeError):
    """The integrated state lost its interpretation as a density matrix."""


def _require_square(a: np.ndarray, name: str = "operator") -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tensor product; ordering is oscillator (x) qubit throughout."""
    _require_square(a)
    _require_square(b)
    dim = a.shape[0] * b.shape[0]
    if dim > MAX_DIM:
        raise ValueError(f"tensor-product dimension {dim} exceeds maximum {MAX_DIM}")
    return np.kron(a, b)


def dagger(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return a.conj().T


def expectation(rho: np.ndarray, o: np.ndarray) -> complex:
    """Tr[O rho]."""
    if rho.shape != o.shape:
        raise ValueError(f"dimension mismatch: rho {rho.shape} vs operator {o.shape}")
    return complex(np.einsum("ij,ji->", o, rho))


def purity(rho: np.ndarray) -> float:
    """Tr[rho^2]."""
    return float(np.einsum("ij,ji->", rho, rho).real)


def min_eigenvalue(rho: np.ndarray) -> float:
    """Smallest eigenvalue of the Hermitian part of rho."""
    return float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])


def enforce_hygiene(rho: np.ndarray) -> np.ndarray:
    """Hermitize and renormalize the trace.

    Raises :class:`IntegrationDivergenceError` when the trace is not a
    positive finite number, which indicates a diverged integration.
    """
    rho = 0.5 * (rho + rho.conj().T)
    tr = float(np.trace(rho).real)
    if not np.isfinite(tr) or tr <= 0.0:
        raise IntegrationDivergenceError(
            f"state trace {tr!r} is not positive; integration diverged "
            "(try a smaller dt)"
        )
    return rho / tr


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """(1/2) * sum of absolute eigenvalues of rho - sigma."""
    diff = rho - sigma
    diff = 0.5 * (diff + diff.conj().T)
    return float(0.5 * np.abs(np.linalg.eigvalsh(diff)).sum())


def check_density_matrix(
    rho: np.ndarray,
    hermiticity_tol: float = 1e-10,
    trace_tol: float = 1e-10,
    positivity_tol: float = -1e-8,
) -> None:
    """Raise ``ValueError`` unless rho satisfies the density-matrix invariants."""
    _require_square(rho, "density matrix")
    if not np.all(np.isfinite(rho.view(np.float64))):
        raise ValueError("density matrix has non-finite entries")
    herm = np.abs(rho - rho.conj().T).max()
    if herm > hermiticity_tol:
        raise ValueError(f"not Hermitian: max |rho - rho^dag| = {herm:.3e}")
    tr = complex(np.trace(rho))
    if abs(tr - 1.0) > trace_tol:
        raise ValueError(f"trace {tr} differs from 1 beyond {trace_tol:.1e}")
    lo = min_eigenvalue(rho)
    if lo < positivity_tol:
        raise ValueError(f"minimum eigenvalue {lo:.3e} below {positivity_tol:.1e}")
