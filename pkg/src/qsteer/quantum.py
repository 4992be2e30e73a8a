"""Pure-state quantum mechanics: states, fidelity, Bloch angles and propagators.

States are 1-D complex numpy arrays of unit norm. hbar = 1 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from qsteer.linalg import as_matrix, as_vector, is_unitary

NORM_TOL = 1e-6
UNITARY_TOL = 1e-10
_POLE_TOL = 1e-12
TWO_PI = 2.0 * math.pi


class BlochAngles(NamedTuple):
    theta: float
    phi: float


@dataclass(frozen=True)
class Propagator:
    """A unitary step operator tagged with the control that generates it."""

    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = as_matrix(self.matrix)
        if not is_unitary(m, UNITARY_TOL):
            raise ValueError(f"propagator {self.label!r} is not unitary")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def as_state(psi, tol: float = NORM_TOL) -> np.ndarray:
    """Validate a unit-norm amplitude vector."""
    psi = as_vector(psi)
    norm = float(np.linalg.norm(psi))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"state is not normalized (norm {norm:.12g})")
    return psi


def normalized(psi) -> np.ndarray:
    psi = as_vector(psi)
    return psi / np.linalg.norm(psi)


def basis_state(dim: int, index: int) -> np.ndarray:
    psi = np.zeros(dim, dtype=complex)
    psi[index] = 1.0
    return psi


def fidelity(a, b) -> float:
    """``|<a|b>|`` for pure states, clamped into [0, 1]."""
    a, b = as_state(a), as_state(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return min(1.0, max(0.0, float(abs(np.vdot(a, b)))))


def bloch_to_state(angles: BlochAngles | tuple[float, float]) -> np.ndarray:
    theta, phi = angles
    return np.array(
        [math.cos(theta / 2.0), complex(math.cos(phi), math.sin(phi)) * math.sin(theta / 2.0)]
    )


def state_to_bloch(psi) -> BlochAngles:
    """Inverse of :func:`bloch_to_state` up to global phase.

    ``c0`` is rotated to be real and non-negative first; at the poles the
    azimuth is undefined and reported as 0.
    """
    psi = as_state(psi)
    if psi.shape[0] != 2:
        raise ValueError(f"Bloch angles need a 2-level state, got dimension {psi.shape[0]}")
    c0, c1 = complex(psi[0]), complex(psi[1])
    r0, r1 = abs(c0), abs(c1)
    theta = 2.0 * math.atan2(r1, r0)
    if r0 <= _POLE_TOL or r1 <= _POLE_TOL:
        return BlochAngles(theta, 0.0)
    phi = math.atan2(c1.imag, c1.real) - math.atan2(c0.imag, c0.real)
    phi %= TWO_PI
    if phi >= TWO_PI:
        phi = 0.0
    return BlochAngles(theta, phi)


def apply(u: Propagator | np.ndarray, psi) -> np.ndarray:
    m = u.matrix if isinstance(u, Propagator) else as_matrix(u)
    psi = as_vector(psi)
    if m.shape[0] != psi.shape[0]:
        raise ValueError(f"dimension mismatch: propagator {m.shape[0]} vs state {psi.shape[0]}")
    return m @ psi


def apply_sequence(pulses: Sequence[Propagator | np.ndarray], psi) -> np.ndarray:
    for u in pulses:
        psi = apply(u, psi)
    return psi


def populations(psi) -> np.ndarray:
    return np.abs(as_vector(psi)) ** 2


def transition_landscape(pulses: Sequence[Propagator | np.ndarray], psi0, psif) -> float:
    """Transition probability ``|<psi_f| U_L ... U_1 |psi_0>|^2`` of a pulse sequence."""
    if len(pulses) == 0:
        raise ValueError("pulse sequence is empty")
    psi0, psif = as_state(psi0), as_state(psif)
    if psi0.shape != psif.shape:
        raise ValueError(f"dimension mismatch: {psi0.shape[0]} vs {psif.shape[0]}")
    final = apply_sequence(pulses, psi0)
    return min(1.0, max(0.0, float(abs(np.vdot(psif, final)) ** 2)))
