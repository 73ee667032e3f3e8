"""Physical operators, Hamiltonian and initial states of the probed system.

The joint Hilbert space is oscillator (x) qubit with the qubit basis ordered
(g, e); the basis index of the product state |n, q> is ``2 n + q``.  The
total excitation number a'a + sigma_ee commutes with the Hamiltonian and its
degenerate eigenspaces are spanned by {|m, g>, |m-1, e>}.  Truncating the
Fock space at n_max leaves |n_max, e> without a Rabi partner; that orphan
state is excluded from the subspace decomposition and tracked as leakage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from jcprobe.algebra import dagger, kron

_QUBIT_INDEX = {"g": 0, "e": 1}


@dataclass(frozen=True)
class ModelConfig:
    """Oscillator-qubit model parameters.

    ``g`` sets the time unit (g = 1 by convention); ``omega`` defaults to the
    rotating frame where the common energy spacing drops out of every
    monitored observable.  ``g = 0`` is allowed and switches the coupling off.
    """

    omega: float = 0.0
    g: float = 1.0
    n_max: int = 25

    def __post_init__(self) -> None:
        if self.g < 0:
            raise ValueError(f"coupling g must be >= 0, got {self.g}")
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")

    @property
    def dim(self) -> int:
        """Joint Hilbert-space dimension 2 (n_max + 1)."""
        return 2 * (self.n_max + 1)


def annihilation(n_max: int) -> np.ndarray:
    """Truncated oscillator annihilation operator, <n-1|a|n> = sqrt(n)."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    return np.diag(np.sqrt(np.arange(1.0, n_max + 1)), 1).astype(complex)


def qubit_sigma(i: str, j: str) -> np.ndarray:
    """|i><j| on the qubit, i, j in {'g', 'e'}, basis order (g, e)."""
    try:
        ii, jj = _QUBIT_INDEX[i], _QUBIT_INDEX[j]
    except KeyError as exc:
        raise ValueError(f"qubit label must be 'g' or 'e', got {exc.args[0]!r}") from None
    m = np.zeros((2, 2), dtype=complex)
    m[ii, jj] = 1.0
    return m


def build_hamiltonian(cfg: ModelConfig) -> np.ndarray:
    """omega (a'a + sigma_ee) + g (a' sigma_ge + a sigma_eg) on the joint space."""
    a = annihilation(cfg.n_max)
    number = dagger(a) @ a
    eye_osc = np.eye(cfg.n_max + 1, dtype=complex)
    eye_q = np.eye(2, dtype=complex)
    h = cfg.omega * (kron(number, eye_q) + kron(eye_osc, qubit_sigma("e", "e")))
    h += cfg.g * (kron(dagger(a), qubit_sigma("g", "e")) + kron(a, qubit_sigma("e", "g")))
    return h


def total_excitation(cfg: ModelConfig) -> np.ndarray:
    """Conserved total excitation number a'a + sigma_ee on the joint space."""
    a = annihilation(cfg.n_max)
    return kron(dagger(a) @ a, np.eye(2, dtype=complex)) + kron(
        np.eye(cfg.n_max + 1, dtype=complex), qubit_sigma("e", "e")
    )


@dataclass(frozen=True)
class SubspaceDecomposition:
    """Projectors onto the total-excitation eigenspaces m = 0 .. n_max.

    The projectors are orthogonal idempotents summing to the identity minus
    the truncation orphan |n_max, e><n_max, e|, available as
    ``orphan_projector``.
    """

    projectors: tuple = field(repr=False)
    dims: tuple = ()
    orphan_projector: np.ndarray = field(default=None, repr=False)


def subspace_decomposition(cfg: ModelConfig) -> SubspaceDecomposition:
    """P_0 = |0,g><0,g|; P_m = |m,g><m,g| + |m-1,e><m-1,e| for 1 <= m <= n_max."""
    dim = cfg.dim
    projectors = []
    dims = []
    for m in range(cfg.n_max + 1):
        p = np.zeros((dim, dim), dtype=complex)
        p[2 * m, 2 * m] = 1.0  # |m, g>
        if m >= 1:
            p[2 * m - 1, 2 * m - 1] = 1.0  # |m-1, e>
        projectors.append(p)
        dims.append(1 if m == 0 else 2)
    orphan = np.zeros((dim, dim), dtype=complex)
    orphan[dim - 1, dim - 1] = 1.0
    return SubspaceDecomposition(
        projectors=tuple(projectors), dims=tuple(dims), orphan_projector=orphan
    )


def thermal_state(n_bar: float, n_max: int) -> np.ndarray:
    """Truncated thermal oscillator state with weights p_n ~ (n_bar/(1+n_bar))^n.

    The weights are renormalized over 0 .. n_max; the discarded tail is
    reported by :func:`thermal_leakage`.
    """
    if n_bar < 0:
        raise ValueError(f"n_bar must be >= 0, got {n_bar}")
    if n_bar == 0:
        weights = np.zeros(n_max + 1)
        weights[0] = 1.0
    else:
        x = n_bar / (1.0 + n_bar)
        weights = x ** np.arange(n_max + 1)
        weights /= weights.sum()
    return np.diag(weights).astype(complex)


def thermal_leakage(n_bar: float, n_max: int) -> float:
    """Probability weight beyond the truncation, (n_bar/(1+n_bar))^(n_max+1)."""
    if n_bar <= 0:
        return 0.0
    return float((n_bar / (1.0 + n_bar)) ** (n_max + 1))


def fock_state(n: int, n_max: int) -> np.ndarray:
    """Oscillator number-state projector |n><n|."""
    if not 0 <= n <= n_max:
        raise ValueError(f"n must lie in [0, {n_max}], got {n}")
    rho = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    rho[n, n] = 1.0
    return rho


def initial_joint_state(rho_osc: np.ndarray, qubit: str) -> np.ndarray:
    """rho_osc (x) |q><q| with q in {'g', 'e'}."""
    return kron(rho_osc, qubit_sigma(qubit, qubit))
