"""CPTP maps with labelled Kraus operators.

Covers construction from a global unitary, application, invariant states, the
nonequilibrium potential and ladder condition, the backward / dual-reverse /
dual maps, and concatenations of maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import Any, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from app.services.quantum_core import (
    CONJUGATION,
    DensityOperator,
    ProjectiveBasis,
    TimeReversal,
    as_matrix,
    dagger,
    eig_hermitian,
    hermitize,
    time_reverse,
    unitarity_residual,
    TAU_UNIT,
)
from app.utils.errors import (
    BackwardInvarianceError,
    CompletenessError,
    InconsistentEntropyAssignmentError,
    LadderConditionError,
    MissingEntropyAssignmentError,
    NoFixedPointError,
    NotPositiveDefiniteError,
    NotUnitaryError,
)

logger = logging.getLogger(__name__)

TAU_CPTP = 1e-9
TAU_FIX = 1e-9
TAU_PD = 1e-12
TAU_LADDER = 1e-9
TAU_COEF = 1e-12
POWER_ITERATION_DIM = 16


@dataclass(frozen=True, eq=False)
class KrausOperator:
    matrix: np.ndarray
    label: Hashable
    sigma_e: Optional[float] = None
    dphi: Optional[float] = None
    sigma_e_parts: Optional[Tuple[float, ...]] = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def is_zero(self) -> bool:
        return not np.any(np.abs(self.matrix) > 0)


@dataclass(frozen=True, eq=False)
class KrausMap:
    operators: Tuple[KrausOperator, ...]
    dim: int

    @classmethod
    def build(
        cls,
        operators: Sequence[KrausOperator],
        *,
        tol: float = TAU_CPTP,
        error: type = CompletenessError,
    ) -> "KrausMap":
        ops = tuple(operators)
        if not ops:
            raise ValueError("a Kraus map needs at least one operator")
        dim = ops[0].dim
        for op in ops:
            if op.matrix.shape != (dim, dim):
                raise ValueError(f"operator {op.label!r} has shape {op.matrix.shape}, expected {(dim, dim)}")
        kraus_map = cls(ops, dim)
        residual = kraus_map.completeness_residual()
        if residual > tol:
            raise error(f"Kraus operators are not complete (residual {residual:.3e})")
        return kraus_map

    def completeness_residual(self) -> float:
        total = sum(dagger(op.matrix) @ op.matrix for op in self.operators)
        return float(np.linalg.norm(total - np.eye(self.dim)))

    def unitality_residual(self) -> float:
        total = sum(op.matrix @ dagger(op.matrix) for op in self.operators)
        return float(np.linalg.norm(total - np.eye(self.dim)))

    @property
    def labels(self) -> List[Hashable]:
        return [op.label for op in self.operators]

    def operator(self, label: Hashable) -> KrausOperator:
        for op in self.operators:
            if op.label == label:
                return op
        raise KeyError(label)

    def __len__(self) -> int:
        return len(self.operators)

    def __iter__(self):
        return iter(self.operators)


@dataclass(frozen=True, eq=False)
class NonequilibriumPotential:
    """Phi = -ln(pi) stored through its spectral decomposition."""

    eigenvalues: np.ndarray
    basis: ProjectiveBasis

    @property
    def matrix(self) -> np.ndarray:
        v = self.basis.vectors
        return (v * self.eigenvalues) @ dagger(v)

    @classmethod
    def from_operator(cls, phi: np.ndarray) -> "NonequilibriumPotential":
        spectrum = eig_hermitian(phi)
        return cls(spectrum.eigenvalues, spectrum.basis)


@dataclass(frozen=True)
class ConditionReport:
    satisfied: bool
    dphi: Dict[Hashable, float]
    witness: Optional[Tuple[Hashable, Tuple[int, int], float]] = None


@dataclass(frozen=True, eq=False)
class Concatenation:
    maps: Tuple[KrausMap, ...]
    invariant_states: Tuple[DensityOperator, ...]
    potentials: Tuple[NonequilibriumPotential, ...]

    @property
    def dim(self) -> int:
        return self.maps[0].dim

    def __len__(self) -> int:
        return len(self.maps)


def _basis_vectors(basis) -> np.ndarray:
    if isinstance(basis, ProjectiveBasis):
        return basis.vectors
    return np.asarray(basis, dtype=complex)


def kraus_from_unitary(
    u: np.ndarray,
    env_eigenvalues: Sequence[float],
    env_basis,
    env_final_basis,
    *,
    env_final_weights: Optional[Sequence[float]] = None,
) -> KrausMap:
    """M_{mu nu} = sqrt(q_nu) <phi*_mu| U |phi_nu>, labelled (nu, mu).

    When ``env_final_weights`` (the backward-process environment weights) are
    given, each operator carries sigma_E = ln q_nu - ln q~_mu.
    """
    u = as_matrix(u)
    q = np.asarray(env_eigenvalues, dtype=float)
    initial = _basis_vectors(env_basis)
    final = _basis_vectors(env_final_basis)
    dim_e = initial.shape[0]
    if u.shape[0] % dim_e:
        raise ValueError(f"unitary dimension {u.shape[0]} is not a multiple of environment dimension {dim_e}")
    if q.shape[0] != initial.shape[1]:
        raise ValueError("environment eigenvalues and basis sizes differ")
    if final.shape[0] != dim_e:
        raise ValueError("final environment basis has the wrong dimension")
    residual = unitarity_residual(u)
    if residual > TAU_UNIT:
        raise NotUnitaryError(f"global evolution is not unitary (residual {residual:.3e})", "channels")
    dim_s = u.shape[0] // dim_e
    blocks = u.reshape(dim_s, dim_e, dim_s, dim_e)
    # amp[mu, nu] = <phi*_mu| U |phi_nu> as a system operator
    amp = np.einsum("em,aebf,fn->mnab", np.conj(final), blocks, initial)
    ops = []
    for nu, mu in product(range(initial.shape[1]), range(final.shape[1])):
        sigma = None
        if env_final_weights is not None:
            qt = float(env_final_weights[mu])
            sigma = _log_ratio(q[nu], qt)
        ops.append(KrausOperator(np.sqrt(max(q[nu], 0.0)) * amp[mu, nu], (nu, mu), sigma))
    return KrausMap.build(ops)


def _log_ratio(a: float, b: float) -> float:
    if a <= 0 and b <= 0:
        return 0.0
    if b <= 0:
        return np.inf
    if a <= 0:
        return -np.inf
    return float(np.log(a) - np.log(b))


def kraus_from_multipartite_unitary(
    u: np.ndarray,
    env_states: Sequence[Tuple[Sequence[float], Any]],
    env_final_bases: Sequence[Any],
    *,
    env_final_weights: Optional[Sequence[Sequence[float]]] = None,
) -> KrausMap:
    """Kraus operators for R uncorrelated ancillas.

    Labels are tuples ((nu_1, mu_1), ..., (nu_R, mu_R)); each operator carries
    the per-ancilla entropies in ``sigma_e_parts`` and their sum in ``sigma_e``.
    """
    if len(env_states) != len(env_final_bases):
        raise ValueError("one final basis per ancilla is required")
    q_parts = [np.asarray(q, dtype=float) for q, _ in env_states]
    init_parts = [_basis_vectors(b) for _, b in env_states]
    final_parts = [_basis_vectors(b) for b in env_final_bases]
    q_all = q_parts[0]
    init_all = init_parts[0]
    final_all = final_parts[0]
    for q, vi, vf in zip(q_parts[1:], init_parts[1:], final_parts[1:]):
        q_all = np.kron(q_all, q)
        init_all = np.kron(init_all, vi)
        final_all = np.kron(final_all, vf)
    joint = kraus_from_unitary(u, q_all, init_all, final_all)
    nu_shape = [v.shape[1] for v in init_parts]
    mu_shape = [v.shape[1] for v in final_parts]
    ops = []
    for op in joint.operators:
        nu, mu = op.label
        nus = np.unravel_index(nu, nu_shape)
        mus = np.unravel_index(mu, mu_shape)
        label = tuple((int(a), int(b)) for a, b in zip(nus, mus))
        parts = None
        sigma = None
        if env_final_weights is not None:
            parts = tuple(
                _log_ratio(q_parts[r][nus[r]], float(env_final_weights[r][mus[r]]))
                for r in range(len(q_parts))
            )
            sigma = float(sum(parts))
        ops.append(KrausOperator(op.matrix, label, sigma, None, parts))
    return KrausMap.build(ops)


def apply(kraus_map: KrausMap, rho: DensityOperator) -> DensityOperator:
    m = as_matrix(rho)
    if m.shape[0] != kraus_map.dim:
        raise ValueError(f"state dimension {m.shape[0]} does not match map dimension {kraus_map.dim}")
    out = sum(op.matrix @ m @ dagger(op.matrix) for op in kraus_map.operators)
    dims = rho.dims if isinstance(rho, DensityOperator) else None
    return DensityOperator.from_matrix(hermitize(out), dims, validate=False)


def apply_operation(op: KrausOperator, rho) -> Tuple[np.ndarray, float]:
    m = as_matrix(rho)
    if m.shape[0] != op.dim:
        raise ValueError("operator and state dimensions differ")
    out = op.matrix @ m @ dagger(op.matrix)
    return out, float(np.clip(np.real(np.trace(out)), 0.0, 1.0))


def transfer_matrix(kraus_map: KrausMap) -> np.ndarray:
    """Superoperator acting on row-major vectorised matrices."""
    return sum(np.kron(op.matrix, np.conj(op.matrix)) for op in kraus_map.operators)


def fixed_point(superoperator: np.ndarray, dim: int, *, eigenvalue: float = 1.0, tol: float = TAU_FIX) -> np.ndarray:
    """Hermitised, unit-trace eigenvector of ``superoperator`` at ``eigenvalue``."""
    w, v = linalg.eig(superoperator)
    idx = int(np.argmin(np.abs(w - eigenvalue)))
    if abs(w[idx] - eigenvalue) > tol:
        raise NoFixedPointError(f"no eigenvalue within {tol:g} of {eigenvalue} (closest {w[idx]:.6g})")
    rho = v[:, idx].reshape(dim, dim)
    rho = rho / np.trace(rho)
    return hermitize(rho)


def _power_iteration(kraus_map: KrausMap, max_iter: int = 200000) -> np.ndarray:
    rho = np.eye(kraus_map.dim, dtype=complex) / kraus_map.dim
    for _ in range(max_iter):
        nxt = sum(op.matrix @ rho @ dagger(op.matrix) for op in kraus_map.operators)
        if np.linalg.norm(nxt - rho) < 1e-14:
            return hermitize(nxt)
        rho = nxt
    return hermitize(rho)


def invariant_state(kraus_map: KrausMap) -> DensityOperator:
    if kraus_map.unitality_residual() <= TAU_CPTP:
        pi = np.eye(kraus_map.dim, dtype=complex) / kraus_map.dim
    elif kraus_map.dim > POWER_ITERATION_DIM:
        pi = _power_iteration(kraus_map)
    else:
        pi = fixed_point(transfer_matrix(kraus_map), kraus_map.dim)
    pi = hermitize(pi) / np.real(np.trace(pi))
    image = sum(op.matrix @ pi @ dagger(op.matrix) for op in kraus_map.operators)
    if np.linalg.norm(image - pi) > TAU_FIX:
        raise NoFixedPointError("fixed-point iteration did not converge")
    low = float(np.linalg.eigvalsh(pi)[0])
    if low <= TAU_PD:
        raise NotPositiveDefiniteError(f"invariant state is not positive definite (min eigenvalue {low:.3e})")
    return DensityOperator.from_matrix(pi, validate=False)


def nonequilibrium_potential(pi: DensityOperator) -> NonequilibriumPotential:
    spectrum = eig_hermitian(as_matrix(pi))
    if spectrum.eigenvalues[0] <= TAU_PD:
        raise NotPositiveDefiniteError(
            f"invariant state is singular (min eigenvalue {spectrum.eigenvalues[0]:.3e})"
        )
    return NonequilibriumPotential(-np.log(spectrum.eigenvalues), spectrum.basis)


def check_ladder_condition(kraus_map: KrausMap, phi: NonequilibriumPotential) -> ConditionReport:
    """Does every operator connect pi-levels with a single potential gap phi_j - phi_i?"""
    v = phi.basis.vectors
    gaps = phi.eigenvalues[:, None] - phi.eigenvalues[None, :]  # gaps[j, i] = phi_j - phi_i
    dphi: Dict[Hashable, float] = {}
    for op in kraus_map.operators:
        elements = dagger(v) @ op.matrix @ v  # elements[j, i] = <pi_j| M |pi_i>
        mask = np.abs(elements) > TAU_COEF
        if not mask.any():
            dphi[op.label] = 0.0
            continue
        values = gaps[mask]
        reference = float(values[0])
        spread = float(values.max() - values.min())
        if spread > TAU_LADDER:
            js, is_ = np.nonzero(mask)
            worst = int(np.argmax(np.abs(values - reference)))
            witness = (op.label, (int(is_[worst]), int(js[worst])), float(np.abs(elements[js[worst], is_[worst]])))
            logger.debug("ladder condition violated by %r: gap spread %.3e", op.label, spread)
            return ConditionReport(False, dphi, witness)
        dphi[op.label] = float(np.mean(values))
    return ConditionReport(True, dphi)


def attach_potential_changes(kraus_map: KrausMap, report: ConditionReport) -> KrausMap:
    if not report.satisfied:
        raise LadderConditionError("cannot attach potential changes: ladder condition violated")
    ops = [replace(op, dphi=report.dphi[op.label]) for op in kraus_map.operators]
    return KrausMap(tuple(ops), kraus_map.dim)


def _reversed_label(label: Hashable) -> Hashable:
    if isinstance(label, tuple) and len(label) == 2 and not isinstance(label[0], tuple):
        return (label[1], label[0])
    if isinstance(label, tuple) and label and isinstance(label[0], tuple):
        return tuple((b, a) for a, b in label)
    return label


def backward_map(kraus_map: KrausMap, theta: TimeReversal = CONJUGATION, *, tol: float = TAU_CPTP) -> KrausMap:
    """M~ = exp(-sigma_E / 2) Theta M^dagger Theta^dagger, with sigma~_E = -sigma_E."""
    ops = []
    for op in kraus_map.operators:
        if op.sigma_e is None:
            raise MissingEntropyAssignmentError(f"operator {op.label!r} has no environment entropy")
        if op.is_zero() or op.sigma_e == np.inf:
            continue
        matrix = np.exp(-0.5 * op.sigma_e) * time_reverse(theta, dagger(op.matrix))
        parts = tuple(-s for s in op.sigma_e_parts) if op.sigma_e_parts is not None else None
        dphi = -op.dphi if op.dphi is not None else None
        ops.append(KrausOperator(matrix, _reversed_label(op.label), -op.sigma_e, dphi, parts))
    return KrausMap.build(ops, tol=tol, error=InconsistentEntropyAssignmentError)


def _invariance_residual(kraus_map: KrausMap, pi: np.ndarray) -> float:
    image = sum(op.matrix @ pi @ dagger(op.matrix) for op in kraus_map.operators)
    return float(np.linalg.norm(image - pi))


def _matrix_power(pi: np.ndarray, exponent: float) -> np.ndarray:
    w, v = np.linalg.eigh(hermitize(pi))
    return (v * w ** exponent) @ dagger(v)


def dual_reverse_map(kraus_map: KrausMap, pi: DensityOperator, theta: TimeReversal = CONJUGATION) -> KrausMap:
    """D~ = Theta pi^{1/2} M^dagger pi^{-1/2} Theta^dagger."""
    p = as_matrix(pi)
    residual = _invariance_residual(kraus_map, p)
    if residual > TAU_FIX:
        raise NoFixedPointError(f"pi is not invariant under the map (residual {residual:.3e})")
    if np.linalg.eigvalsh(hermitize(p))[0] <= TAU_PD:
        raise NotPositiveDefiniteError("dual-reverse map needs a positive definite invariant state")
    root = _matrix_power(p, 0.5)
    inv_root = _matrix_power(p, -0.5)
    ops = []
    for op in kraus_map.operators:
        matrix = time_reverse(theta, root @ dagger(op.matrix) @ inv_root)
        dphi = -op.dphi if op.dphi is not None else None
        ops.append(KrausOperator(matrix, _reversed_label(op.label), None, dphi))
    return KrausMap.build(ops)


def dual_map(kraus_map: KrausMap, pi: DensityOperator, theta: TimeReversal = CONJUGATION) -> KrausMap:
    """D = exp(-(sigma_E + dphi) / 2) M."""
    report = check_ladder_condition(kraus_map, nonequilibrium_potential(pi))
    if not report.satisfied:
        label, pair, magnitude = report.witness
        raise LadderConditionError(
            f"ladder condition violated by operator {label!r} between levels {pair} (|m|={magnitude:.3e})"
        )
    backward = backward_map(kraus_map, theta)
    pi_tilde = time_reverse(theta, as_matrix(pi))
    residual = _invariance_residual(backward, pi_tilde)
    if residual > TAU_FIX:
        raise BackwardInvarianceError(
            f"backward map does not leave the time-reversed invariant state fixed (residual {residual:.3e})"
        )
    ops = []
    for op in kraus_map.operators:
        if op.sigma_e == np.inf or op.is_zero():
            continue
        dphi = report.dphi[op.label]
        factor = np.exp(-0.5 * (op.sigma_e + dphi))
        ops.append(KrausOperator(factor * op.matrix, op.label, op.sigma_e, dphi, op.sigma_e_parts))
    return KrausMap.build(ops)


def expected_potential_change(kraus_map: KrausMap, rho, phi: NonequilibriumPotential) -> Tuple[float, float]:
    """<dphi> from outcome weights and from Tr[Phi (E(rho) - rho)]."""
    report = check_ladder_condition(kraus_map, phi)
    if not report.satisfied:
        raise LadderConditionError("potential changes are undefined when the ladder condition fails")
    m = as_matrix(rho)
    weighted = sum(
        float(np.real(np.trace(op.matrix @ m @ dagger(op.matrix)))) * report.dphi[op.label]
        for op in kraus_map.operators
    )
    image = sum(op.matrix @ m @ dagger(op.matrix) for op in kraus_map.operators)
    direct = float(np.real(np.trace(phi.matrix @ (image - m))))
    return weighted, direct


def concatenate(
    maps: Sequence[KrausMap],
    invariant_states: Optional[Sequence[DensityOperator]] = None,
) -> Concatenation:
    maps = tuple(maps)
    if not maps:
        raise ValueError("nothing to concatenate")
    dim = maps[0].dim
    if any(m.dim != dim for m in maps):
        raise ValueError("all maps in a concatenation must act on the same system dimension")
    if invariant_states is None:
        states = tuple(invariant_state(m) for m in maps)
    else:
        if len(invariant_states) != len(maps):
            raise ValueError("one invariant state per map is required")
        states = tuple(invariant_states)
    potentials = tuple(nonequilibrium_potential(pi) for pi in states)
    return Concatenation(maps, states, potentials)


def compose(conc: Concatenation, rho: DensityOperator) -> List[DensityOperator]:
    """States rho(t_0) ... rho(t_N) along the concatenation."""
    states = [rho]
    for kraus_map in conc.maps:
        states.append(apply(kraus_map, states[-1]))
    return states


def potential_change_split(conc: Concatenation, states: Sequence[DensityOperator]) -> Tuple[float, float]:
    """Boundary and path parts of the expected potential change."""
    n = len(conc)
    if len(states) != n + 1:
        raise ValueError(f"expected {n + 1} states, got {len(states)}")
    phis = [p.matrix for p in conc.potentials]
    mats = [as_matrix(s) for s in states]
    boundary = float(np.real(np.trace(mats[-1] @ phis[-1]) - np.trace(mats[0] @ phis[0])))
    path = -sum(
        float(np.real(np.trace(mats[l] @ (phis[l] - phis[l - 1])))) for l in range(1, n)
    )
    return boundary, path


def kraus_map_to_dict(kraus_map: KrausMap) -> Dict[str, Any]:
    return {
        "dim": kraus_map.dim,
        "operators": [
            {
                "label": _label_to_json(op.label),
                "real": np.real(op.matrix).tolist(),
                "imag": np.imag(op.matrix).tolist(),
                "sigma_e": op.sigma_e,
                "dphi": op.dphi,
            }
            for op in kraus_map.operators
        ],
    }


def kraus_map_from_dict(data: Dict[str, Any]) -> KrausMap:
    ops = []
    for entry in data["operators"]:
        matrix = np.asarray(entry["real"], dtype=float) + 1j * np.asarray(entry["imag"], dtype=float)
        ops.append(
            KrausOperator(matrix, _label_from_json(entry["label"]), entry.get("sigma_e"), entry.get("dphi"))
        )
    kraus_map = KrausMap.build(ops)
    if kraus_map.dim != int(data["dim"]):
        raise ValueError("declared dimension does not match operators")
    return kraus_map


def _label_to_json(label: Hashable) -> Any:
    if isinstance(label, tuple):
        return [_label_to_json(x) for x in label]
    return label


def _label_from_json(label: Any) -> Hashable:
    if isinstance(label, list):
        return tuple(_label_from_json(x) for x in label)
    return label
