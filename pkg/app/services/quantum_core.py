"""Dense complex linear algebra and quantum-information primitives.

Every other service builds on the value types defined here. Matrices are plain
``numpy`` arrays; states are wrapped in :class:`DensityOperator` so that their
subsystem structure travels with them. All functions are pure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from app.utils.errors import (
    NotHermitianError,
    NotUnitaryError,
    NumericalError,
    PositivityError,
    SupportError,
)

logger = logging.getLogger(__name__)

HBAR = 1.0

TAU_HERM = 1e-10
TAU_TR = 1e-10
TAU_PSD = 1e-10
TAU_DEGEN = 1e-9
TAU_UNIT = 1e-9
TAU_EIG = 1e-10
TAU_SUPP = 1e-10
LOG_FLOOR = 1e-14

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.asarray(m)).T


def as_matrix(m: Union[np.ndarray, "DensityOperator"]) -> np.ndarray:
    if isinstance(m, DensityOperator):
        return m.matrix
    return np.asarray(m, dtype=complex)


def hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def hermiticity_residual(m: np.ndarray) -> float:
    m = np.asarray(m)
    return float(np.linalg.norm(m - dagger(m)))


def unitarity_residual(u: np.ndarray) -> float:
    u = np.asarray(u)
    return float(np.linalg.norm(dagger(u) @ u - np.eye(u.shape[0])))


def _fix_phases(vectors: np.ndarray) -> np.ndarray:
    """Rotate each column so its first non-negligible entry is real positive."""
    out = np.array(vectors, dtype=complex)
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size:
            lead = col[nz[0]]
            out[:, j] = col * (np.conj(lead) / abs(lead))
    return out


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Hermitian, unit-trace, positive semidefinite matrix with subsystem dims."""

    matrix: np.ndarray
    dims: Tuple[int, ...]

    @classmethod
    def from_matrix(
        cls,
        matrix: np.ndarray,
        dims: Optional[Sequence[int]] = None,
        *,
        validate: bool = True,
    ) -> "DensityOperator":
        m = np.array(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got shape {m.shape}")
        dims = tuple(int(d) for d in dims) if dims else (m.shape[0],)
        if int(np.prod(dims)) != m.shape[0]:
            raise ValueError(f"dims {dims} do not multiply to {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise NumericalError("density matrix has non-finite entries", "quantum-core")
        if validate:
            herm = hermiticity_residual(m)
            if herm > TAU_HERM:
                raise NotHermitianError(f"density matrix not Hermitian (residual {herm:.3e})")
            m = hermitize(m)
            trace = float(np.real(np.trace(m)))
            if abs(trace - 1.0) > TAU_TR:
                raise NumericalError(f"density matrix trace {trace!r} differs from 1", "quantum-core")
            low = float(np.linalg.eigvalsh(m)[0])
            if low < -TAU_PSD:
                raise PositivityError(f"density matrix has eigenvalue {low:.3e} < 0")
        m.setflags(write=False)
        return cls(m, dims)

    @classmethod
    def pure(cls, vector: np.ndarray, dims: Optional[Sequence[int]] = None) -> "DensityOperator":
        v = np.asarray(vector, dtype=complex).reshape(-1)
        v = v / np.linalg.norm(v)
        return cls.from_matrix(np.outer(v, np.conj(v)), dims)

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityOperator":
        return cls.from_matrix(np.eye(dim) / dim)

    @classmethod
    def diagonal(cls, populations: Sequence[float], dims: Optional[Sequence[int]] = None) -> "DensityOperator":
        p = np.asarray(populations, dtype=float)
        return cls.from_matrix(np.diag(p / p.sum()), dims)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.clip(np.linalg.eigvalsh(self.matrix), 0.0, None)

    def expectation(self, observable: np.ndarray) -> float:
        return float(np.real(np.trace(np.asarray(observable) @ self.matrix)))


@dataclass(frozen=True, eq=False)
class ProjectiveBasis:
    """Rank-1 orthogonal projectors stored as the columns of ``vectors``."""

    vectors: np.ndarray
    complete: bool

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, *, check: bool = True) -> "ProjectiveBasis":
        v = np.array(vectors, dtype=complex)
        if v.ndim != 2:
            raise ValueError("basis vectors must be given as matrix columns")
        if check:
            gram = dagger(v) @ v
            residual = float(np.linalg.norm(gram - np.eye(v.shape[1])))
            if residual > 1e-9:
                raise NumericalError(f"basis vectors are not orthonormal (residual {residual:.3e})", "quantum-core")
        v.setflags(write=False)
        return cls(v, v.shape[1] == v.shape[0])

    @classmethod
    def computational(cls, dim: int) -> "ProjectiveBasis":
        return cls.from_vectors(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.vectors.shape[1]

    def vector(self, i: int) -> np.ndarray:
        return self.vectors[:, i]

    def projector(self, i: int) -> np.ndarray:
        v = self.vectors[:, i]
        return np.outer(v, np.conj(v))

    @property
    def projectors(self) -> List[np.ndarray]:
        return [self.projector(i) for i in range(len(self))]

    def weights(self, rho: Union[np.ndarray, DensityOperator]) -> np.ndarray:
        """Outcome probabilities <v_i|rho|v_i>."""
        m = as_matrix(rho)
        w = np.real(np.einsum("ij,ik,kj->j", np.conj(self.vectors), m, self.vectors))
        return np.clip(w, 0.0, None)

    def conjugated(self) -> "ProjectiveBasis":
        return ProjectiveBasis.from_vectors(np.conj(self.vectors), check=False)

    def tensor(self, other: "ProjectiveBasis") -> "ProjectiveBasis":
        return ProjectiveBasis.from_vectors(np.kron(self.vectors, other.vectors), check=False)

    def diagonalizes(self, rho: Union[np.ndarray, DensityOperator], tol: float = 1e-10) -> bool:
        """True when rho commutes with every projector of the basis."""
        m = as_matrix(rho)
        inner = dagger(self.vectors) @ m @ self.vectors
        off = inner - np.diag(np.diag(inner))
        return bool(np.linalg.norm(off) <= tol)


@dataclass(frozen=True)
class Protocol:
    """Hamiltonian schedule H(t) over [0, duration] sampled on ``n_slices`` midpoints."""

    duration: float
    hamiltonian: Callable[[float], np.ndarray]
    n_slices: int = 200

    def __post_init__(self):
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")

    @classmethod
    def constant(cls, h: np.ndarray, duration: float) -> "Protocol":
        h = np.asarray(h, dtype=complex)
        return cls(duration, lambda t: h, 1)

    def reversed(self, theta: "TimeReversal") -> "Protocol":
        """Backward schedule Theta H(duration - t) Theta^dagger."""
        h, tau = self.hamiltonian, self.duration
        return Protocol(tau, lambda t: time_reverse(theta, h(tau - t)), self.n_slices)


@dataclass(frozen=True)
class TimeReversal:
    """Anti-unitary time reversal. Only complex conjugation is implemented."""

    mode: str = "complex_conjugation"

    MODES = ("complex_conjugation",)

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unsupported time-reversal mode {self.mode!r}")

    def apply(self, m: np.ndarray) -> np.ndarray:
        return np.conj(np.asarray(m, dtype=complex))


CONJUGATION = TimeReversal()


class Spectrum(NamedTuple):
    eigenvalues: np.ndarray
    basis: ProjectiveBasis
    degenerate: bool


def tensor(a, b):
    """Kronecker product, system first. States stay states."""
    product = np.kron(as_matrix(a), as_matrix(b))
    if isinstance(a, DensityOperator) and isinstance(b, DensityOperator):
        return DensityOperator.from_matrix(product, a.dims + b.dims, validate=False)
    return product


def partial_trace(rho: DensityOperator, keep: Union[int, Sequence[int]]) -> DensityOperator:
    dims = list(rho.dims)
    n = len(dims)
    if n < 2:
        raise ValueError("partial trace needs at least two subsystems")
    keep_list = [keep] if isinstance(keep, (int, np.integer)) else list(keep)
    for k in keep_list:
        if not 0 <= k < n:
            raise IndexError(f"subsystem index {k} out of range for dims {tuple(dims)}")
    t = rho.matrix.reshape(dims + dims)
    current = n
    for idx in sorted(set(range(n)) - set(keep_list), reverse=True):
        t = np.trace(t, axis1=idx, axis2=idx + current)
        current -= 1
    kept = [dims[k] for k in sorted(keep_list)]
    d = int(np.prod(kept))
    return DensityOperator.from_matrix(t.reshape(d, d), kept, validate=False)


def eig_hermitian(h: np.ndarray) -> Spectrum:
    """Ascending eigen-decomposition with reproducible phases."""
    m = as_matrix(h)
    herm = hermiticity_residual(m)
    if herm > TAU_HERM * max(1.0, float(np.linalg.norm(m))):
        raise NotHermitianError(f"matrix not Hermitian (residual {herm:.3e})")
    m = hermitize(m)
    w, v = np.linalg.eigh(m)
    v = _fix_phases(v)
    degenerate = bool(np.any(np.diff(w) < TAU_DEGEN)) if w.size > 1 else False
    if degenerate:
        # stable order inside each cluster of equal eigenvalues
        order, start = [], 0
        for stop in range(1, w.size + 1):
            if stop == w.size or w[stop] - w[stop - 1] >= TAU_DEGEN:
                block = list(range(start, stop))
                block.sort(key=lambda j: tuple(-np.round(np.abs(v[:, j]), 12)))
                order.extend(block)
                start = stop
        v = v[:, order]
        w = w[order]
    residual = float(np.linalg.norm(m - (v * w) @ dagger(v)))
    if residual > TAU_EIG * max(1.0, float(np.linalg.norm(m))):
        raise NumericalError(f"eigen-decomposition residual {residual:.3e} too large", "quantum-core")
    return Spectrum(w, ProjectiveBasis.from_vectors(v, check=False), degenerate)


def _eigenvalues(rho) -> np.ndarray:
    w = np.linalg.eigvalsh(hermitize(as_matrix(rho)))
    if w.size and w[0] < -TAU_PSD:
        raise PositivityError(f"state has negative eigenvalue {w[0]:.3e}")
    return np.clip(w, 0.0, None)


def shannon_entropy(p: Sequence[float]) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def von_neumann_entropy(rho) -> float:
    return shannon_entropy(_eigenvalues(rho))


def relative_entropy(rho, sigma) -> float:
    r = hermitize(as_matrix(rho))
    s = hermitize(as_matrix(sigma))
    ws, vs = np.linalg.eigh(s)
    if ws[0] < -TAU_PSD:
        raise PositivityError(f"reference state has negative eigenvalue {ws[0]:.3e}")
    support = ws > TAU_SUPP
    kernel = vs[:, ~support]
    if kernel.size:
        leak = float(np.real(np.trace(dagger(kernel) @ r @ kernel)))
        if leak > TAU_SUPP:
            raise SupportError(f"support of rho not contained in support of sigma (weight {leak:.3e} outside)")
    vs_in = vs[:, support]
    log_sigma = (vs_in * np.log(ws[support])) @ dagger(vs_in)
    value = -shannon_entropy(_eigenvalues(r)) - float(np.real(np.trace(r @ log_sigma)))
    if -1e-12 < value < 0:
        value = 0.0
    return float(value)


def mutual_information(rho: DensityOperator) -> float:
    if len(rho.dims) != 2:
        raise ValueError("mutual information needs a bipartite state")
    return (
        von_neumann_entropy(partial_trace(rho, 0))
        + von_neumann_entropy(partial_trace(rho, 1))
        - von_neumann_entropy(rho)
    )


def clamped_log(rho, floor: float = LOG_FLOOR) -> Tuple[np.ndarray, float]:
    """ln(rho) with eigenvalues clamped at ``floor``; also returns the condition number."""
    w, v = np.linalg.eigh(hermitize(as_matrix(rho)))
    clipped = np.clip(w, floor, None)
    condition = float(clipped.max() / clipped.min())
    return (v * np.log(clipped)) @ dagger(v), condition


def trace_distance(a, b) -> float:
    diff = hermitize(as_matrix(a) - as_matrix(b))
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))


def gibbs_state(h: np.ndarray, beta: float) -> DensityOperator:
    w, v = np.linalg.eigh(hermitize(as_matrix(h)))
    boltzmann = np.exp(-beta * (w - w.min()))
    return DensityOperator.from_matrix((v * (boltzmann / boltzmann.sum())) @ dagger(v))


def time_ordered_unitary(p: Protocol) -> np.ndarray:
    """Midpoint product of slice exponentials, latest slice leftmost."""
    dt = p.duration / p.n_slices
    dim = np.asarray(p.hamiltonian(0.0)).shape[0]
    u = np.eye(dim, dtype=complex)
    for k in range(p.n_slices):
        h = np.asarray(p.hamiltonian((k + 0.5) * dt), dtype=complex)
        if hermiticity_residual(h) > TAU_HERM * max(1.0, float(np.linalg.norm(h))):
            raise NotHermitianError(f"Hamiltonian not Hermitian at t={(k + 0.5) * dt!r}")
        u = linalg.expm(-1j * h * dt / HBAR) @ u
    residual = unitarity_residual(u)
    if residual > TAU_UNIT:
        raise NotUnitaryError(f"assembled propagator violates unitarity (residual {residual:.3e})")
    logger.debug("time-ordered propagator: %d slices, unitarity residual %.2e", p.n_slices, residual)
    return u


def refinement_residual(p: Protocol) -> float:
    """Change of the propagator when the slice count is doubled."""
    finer = Protocol(p.duration, p.hamiltonian, 2 * p.n_slices)
    return float(np.linalg.norm(time_ordered_unitary(finer) - time_ordered_unitary(p)))


def time_reverse(theta: TimeReversal, m: np.ndarray) -> np.ndarray:
    return theta.apply(m)
