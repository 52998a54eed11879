"""Trajectory distributions, entropy ledgers and fluctuation-theorem checks.

A trajectory of a bipartite process is the outcome tuple (n, (nu, mu), m) of the
initial and final local measurements. For concatenations of maps the middle
entries are the Kraus labels of every step. Exact enumeration and Monte Carlo
sampling both produce :class:`TrajectoryRecord` objects carrying an
:class:`EntropyLedger`, which is what the integral checks consume.
"""
from __future__ import annotations

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from typing import Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.services import channels
from app.services.channels import Concatenation, KrausMap
from app.services.quantum_core import (
    CONJUGATION,
    DensityOperator,
    ProjectiveBasis,
    Protocol,
    TimeReversal,
    TAU_UNIT,
    as_matrix,
    dagger,
    eig_hermitian,
    mutual_information,
    partial_trace,
    relative_entropy,
    shannon_entropy,
    tensor,
    time_ordered_unitary,
    von_neumann_entropy,
)
from app.utils.errors import (
    DegenerateSpectrumError,
    EnumerationCapError,
    LadderConditionError,
    NumericalError,
    PositivityError,
    ProcessDefinitionError,
    SupportError,
)

logger = logging.getLogger(__name__)

ENUMERATION_CAP = 65536
DROP_BELOW = 1e-300
TAU_FT = 1e-10
TAU_CONS = 1e-10
TAU_COMMUTE = 1e-10


class BackwardInit(str, Enum):
    CORRELATED = "correlated"
    PRODUCT = "product"
    RESET = "reset"
    CUSTOM = "custom"

    @property
    def uncorrelated(self) -> bool:
        return self is not BackwardInit.CORRELATED


@dataclass(frozen=True)
class EntropyLedger:
    sigma_s: float
    sigma_e: float
    i_tilde: float
    delta_s: float
    delta_s_a: Optional[float] = None
    delta_s_na: Optional[float] = None
    split_available: bool = False
    dphi: Optional[float] = None
    sigma_e_parts: Optional[Tuple[float, ...]] = None
    infinite: bool = False

    def value(self, which: str) -> Optional[float]:
        if which == "total":
            return self.delta_s
        if which == "adiabatic":
            return self.delta_s_a
        if which == "nonadiabatic":
            return self.delta_s_na
        raise ValueError(f"unknown entropy component {which!r}")


@dataclass(frozen=True)
class TrajectoryRecord:
    n: int
    env: Tuple[Hashable, ...]
    m: int
    probability: float
    reverse_probability: float
    dual_probability: Optional[float] = None
    dual_reverse_probability: Optional[float] = None
    ledger: Optional[EntropyLedger] = None
    sampled: bool = False

    @property
    def outcomes(self) -> Tuple[Hashable, ...]:
        return (self.n, *self.env, self.m)


class EntropySplit(NamedTuple):
    delta_s_a: Optional[float]
    delta_s_na: Optional[float]
    available: bool
    reason: str = ""


@dataclass(frozen=True)
class IntegralFT:
    which: str
    value: Optional[float]
    stderr: Optional[float]
    available: bool
    mean_entropy: Optional[float] = None
    second_law_ok: Optional[bool] = None
    samples: int = 0
    infinite: int = 0


@dataclass(frozen=True)
class DetailedFTReport:
    max_residual: float
    overruns: Tuple[Tuple[Tuple[Hashable, ...], float], ...]
    dual_max_residual: Optional[float]
    dual_reverse_max_residual: Optional[float]
    split_available: bool
    tolerance: float

    @property
    def passed(self) -> bool:
        if self.max_residual > self.tolerance:
            return False
        if self.split_available:
            return max(self.dual_max_residual, self.dual_reverse_max_residual) <= self.tolerance
        return True


@dataclass(frozen=True)
class EntropyAverages:
    inclusive: float
    non_inclusive: float
    measurement_disturbance: float
    correlation_erasure: float
    mutual_information_final: float
    mutual_information_measured: float
    reset_extra: float
    trajectory_average: float
    adiabatic: Optional[float] = None
    nonadiabatic: Optional[float] = None
    potential_change: Optional[float] = None
    potential_change_direct: Optional[float] = None

    @property
    def reset(self) -> float:
        return self.non_inclusive + self.reset_extra

    @property
    def ordering_holds(self) -> bool:
        return self.non_inclusive >= self.inclusive - TAU_CONS and self.inclusive >= -TAU_CONS


@dataclass(frozen=True, eq=False)
class BipartiteProcess:
    """Two-point measurement protocol on system + environment."""

    rho_s: DensityOperator
    rho_e: DensityOperator
    final_basis_s: ProjectiveBasis
    final_basis_e: ProjectiveBasis
    unitary: Optional[np.ndarray] = None
    protocol: Optional[Protocol] = None
    initial_basis_s: Optional[ProjectiveBasis] = None
    initial_basis_e: Optional[ProjectiveBasis] = None
    theta: TimeReversal = CONJUGATION
    backward_init: BackwardInit = BackwardInit.PRODUCT
    custom_weights: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None

    def __post_init__(self):
        if (self.unitary is None) == (self.protocol is None):
            raise ProcessDefinitionError("give exactly one of an explicit unitary or a protocol")
        object.__setattr__(self, "backward_init", BackwardInit(self.backward_init))
        if self.final_basis_s.dim != self.rho_s.dim or self.final_basis_e.dim != self.rho_e.dim:
            raise ProcessDefinitionError("final measurement bases do not match the local dimensions")
        if self.backward_init is BackwardInit.CUSTOM and self.custom_weights is None:
            raise ProcessDefinitionError("custom backward initialization needs weights")

    @property
    def dim_s(self) -> int:
        return self.rho_s.dim

    @property
    def dim_e(self) -> int:
        return self.rho_e.dim

    @property
    def initial_state(self) -> DensityOperator:
        return tensor(self.rho_s, self.rho_e)

    def with_backward_init(self, init, custom_weights=None) -> "BipartiteProcess":
        return replace(self, backward_init=BackwardInit(init), custom_weights=custom_weights)

    @functools.cached_property
    def forward_unitary(self) -> np.ndarray:
        if self.unitary is not None:
            u = as_matrix(self.unitary)
        else:
            u = time_ordered_unitary(self.protocol)
        if u.shape[0] != self.dim_s * self.dim_e:
            raise ProcessDefinitionError(f"evolution acts on dimension {u.shape[0]}, expected {self.dim_s * self.dim_e}")
        return u

    @functools.cached_property
    def backward_unitary(self) -> np.ndarray:
        if self.protocol is not None:
            u_back = time_ordered_unitary(self.protocol.reversed(self.theta))
        else:
            u_back = self.theta.apply(dagger(self.forward_unitary))
        residual = float(np.linalg.norm(self.theta.apply(u_back) - dagger(self.forward_unitary)))
        if residual > TAU_UNIT:
            raise NumericalError(f"micro-reversibility violated (residual {residual:.3e})", "trajectories")
        return u_back

    @functools.cached_property
    def final_state(self) -> DensityOperator:
        """rho'_SE = U (rho_S x rho_E) U^dagger."""
        u = self.forward_unitary
        return DensityOperator.from_matrix(
            u @ self.initial_state.matrix @ dagger(u), (self.dim_s, self.dim_e), validate=False
        )


def measurement_basis(rho: DensityOperator, basis: Optional[ProjectiveBasis], name: str) -> Tuple[np.ndarray, ProjectiveBasis]:
    """Outcome weights and rank-1 eigenbasis used for an initial measurement."""
    if basis is not None:
        if not basis.diagonalizes(rho, TAU_COMMUTE):
            raise ProcessDefinitionError(f"explicit {name} basis does not commute with the state")
        return basis.weights(rho), basis
    spectrum = eig_hermitian(rho.matrix)
    if spectrum.degenerate:
        computational = ProjectiveBasis.computational(rho.dim)
        if computational.diagonalizes(rho, TAU_COMMUTE):
            return computational.weights(rho), computational
        raise DegenerateSpectrumError(f"{name} state has a degenerate spectrum; supply an explicit basis")
    return np.clip(spectrum.eigenvalues, 0.0, None), spectrum.basis


def _safe_log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class _Tables:
    p: np.ndarray
    q: np.ndarray
    basis_s: ProjectiveBasis
    basis_e: ProjectiveBasis
    forward: np.ndarray  # [n, nu, mu, m]
    reverse: np.ndarray  # [n, nu, mu, m]
    measured: np.ndarray  # rho*_{m mu}
    backward: np.ndarray  # rho~_{m mu}

    @property
    def p_tilde(self) -> np.ndarray:
        return self.backward.sum(axis=1)

    @property
    def q_tilde(self) -> np.ndarray:
        return self.backward.sum(axis=0)


def _check_cap(count: int) -> None:
    if count > ENUMERATION_CAP:
        raise EnumerationCapError(
            f"{count} outcome tuples exceed the enumeration cap of {ENUMERATION_CAP}; use sampling mode"
        )


def _backward_weights(p: BipartiteProcess, measured: np.ndarray) -> np.ndarray:
    p_star = measured.sum(axis=1)
    q_star = measured.sum(axis=0)
    init = p.backward_init
    if init is BackwardInit.CORRELATED:
        return measured.copy()
    if init is BackwardInit.PRODUCT:
        return np.outer(p_star, q_star)
    if init is BackwardInit.RESET:
        if not p.final_basis_e.diagonalizes(p.rho_e, TAU_COMMUTE):
            raise ProcessDefinitionError("reset initialization needs a final environment basis that diagonalizes rho_E")
        return np.outer(p_star, p.final_basis_e.weights(p.rho_e))
    p_custom, q_custom = (np.asarray(w, dtype=float) for w in p.custom_weights)
    if p_custom.shape != p_star.shape or q_custom.shape != q_star.shape:
        raise ProcessDefinitionError("custom backward weights have the wrong length")
    if np.any(p_custom < 0) or np.any(q_custom < 0):
        raise ProcessDefinitionError("custom backward weights must be non-negative")
    return np.outer(p_custom / p_custom.sum(), q_custom / q_custom.sum())


@functools.lru_cache(maxsize=32)
def _tables(p: BipartiteProcess) -> _Tables:
    pw, basis_s = measurement_basis(p.rho_s, p.initial_basis_s, "system")
    qw, basis_e = measurement_basis(p.rho_e, p.initial_basis_e, "environment")
    ns, nus = len(basis_s), len(basis_e)
    ms, mus = len(p.final_basis_s), len(p.final_basis_e)
    _check_cap(ns * nus * mus * ms)
    initial = np.kron(basis_s.vectors, basis_e.vectors)
    final = np.kron(p.final_basis_s.vectors, p.final_basis_e.vectors)
    amp = (dagger(final) @ p.forward_unitary @ initial).reshape(ms, mus, ns, nus)
    forward = np.einsum("n,v,munv->nvum", pw, qw, np.abs(amp) ** 2)
    measured = forward.sum(axis=(0, 1))  # [mu, m]
    measured = measured.T.copy()  # [m, mu]
    backward = _backward_weights(p, measured)
    # reverse amplitudes <Theta e_n, Theta h_nu| U~ |Theta f_m, Theta g_mu>
    back_amp = (dagger(np.conj(initial)) @ p.backward_unitary @ np.conj(final)).reshape(ns, nus, ms, mus)
    reverse = np.einsum("mu,nvmu->nvum", backward, np.abs(back_amp) ** 2)
    logger.debug("enumerated %d bipartite outcome tuples", forward.size)
    return _Tables(pw, qw, basis_s, basis_e, forward, reverse, measured, backward)


@dataclass(frozen=True, eq=False)
class _SplitData:
    available: bool
    reason: str
    dphi: Dict[Hashable, float] = field(default_factory=dict)
    dual: Optional[np.ndarray] = None
    dual_reverse: Optional[np.ndarray] = None
    kraus_map: Optional[KrausMap] = None
    pi: Optional[DensityOperator] = None


def _split_data(p: BipartiteProcess, pi: Optional[DensityOperator] = None) -> _SplitData:
    if pi is None:
        return _cached_split(p)
    return _compute_split(p, pi)


@functools.lru_cache(maxsize=32)
def _cached_split(p: BipartiteProcess) -> _SplitData:
    return _compute_split(p, None)


def _compute_split(p: BipartiteProcess, pi: Optional[DensityOperator]) -> _SplitData:
    if not p.backward_init.uncorrelated:
        return _SplitData(False, "split needs an uncorrelated backward initialization")
    t = _tables(p)
    kraus_map = channels.kraus_from_unitary(
        p.forward_unitary, t.q, t.basis_e, p.final_basis_e, env_final_weights=t.q_tilde
    )
    try:
        if pi is None:
            pi = channels.invariant_state(kraus_map)
        report = channels.check_ladder_condition(kraus_map, channels.nonequilibrium_potential(pi))
        if not report.satisfied:
            return _SplitData(False, f"ladder condition violated by operator {report.witness[0]!r}")
        dual = channels.dual_map(kraus_map, pi, p.theta)
        dual_reverse = channels.dual_reverse_map(kraus_map, pi, p.theta)
    except NumericalError as exc:
        logger.debug("adiabatic split unavailable: %s", exc)
        return _SplitData(False, str(exc))
    ns, nus = t.forward.shape[:2]
    mus, ms = t.forward.shape[2:]
    e_vec = t.basis_s.vectors
    f_vec = p.final_basis_s.vectors
    dual_probs = np.zeros_like(t.forward)
    dual_rev_probs = np.zeros_like(t.forward)
    dual_ops = {op.label: op.matrix for op in dual.operators}
    rev_ops = {op.label: op.matrix for op in dual_reverse.operators}
    for nu, mu in product(range(nus), range(mus)):
        d = dual_ops.get((nu, mu))
        if d is not None:
            dual_probs[:, nu, mu, :] = t.p[:, None] * np.abs(dagger(f_vec) @ d @ e_vec).T ** 2
        dr = rev_ops.get((mu, nu))
        if dr is not None:
            amp = dagger(np.conj(e_vec)) @ dr @ np.conj(f_vec)  # [n, m]
            dual_rev_probs[:, nu, mu, :] = t.p_tilde[None, :] * np.abs(amp) ** 2
    return _SplitData(True, "", dict(report.dphi), dual_probs, dual_rev_probs, kraus_map, pi)


def _ledger_for(p: BipartiteProcess, n: int, nu: int, mu: int, m: int, split: _SplitData) -> EntropyLedger:
    t = _tables(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p, log_q = _safe_log(t.p[n]), _safe_log(t.q[nu])
        log_pt, log_qt = _safe_log(t.p_tilde[m]), _safe_log(t.q_tilde[mu])
        log_joint = _safe_log(t.backward[m, mu])
        sigma_s = float(log_p - log_pt)
        sigma_e = float(log_q - log_qt)
        i_tilde = float(log_joint - (log_pt + log_qt))
        delta_s = float(log_p + log_q - log_joint)
    infinite = not np.isfinite(delta_s)
    if split.available:
        dphi = split.dphi[(nu, mu)]
        return EntropyLedger(
            sigma_s, sigma_e, i_tilde, delta_s, sigma_e + dphi, sigma_s - dphi, True, dphi, infinite=infinite
        )
    return EntropyLedger(sigma_s, sigma_e, i_tilde, delta_s, infinite=infinite)


def forward_distribution(p: BipartiteProcess) -> List[TrajectoryRecord]:
    t = _tables(p)
    split = _split_data(p)
    records = []
    for n, nu, mu, m in product(*(range(s) for s in t.forward.shape)):
        prob = float(t.forward[n, nu, mu, m])
        if prob < DROP_BELOW:
            continue
        records.append(
            TrajectoryRecord(
                n,
                ((nu, mu),),
                m,
                prob,
                float(t.reverse[n, nu, mu, m]),
                float(split.dual[n, nu, mu, m]) if split.available else None,
                float(split.dual_reverse[n, nu, mu, m]) if split.available else None,
                _ledger_for(p, n, nu, mu, m, split),
            )
        )
    return records


def backward_distribution(p: BipartiteProcess) -> List[TrajectoryRecord]:
    """Records indexed by the forward tuple they reverse; ``probability`` is P~."""
    t = _tables(p)
    records = []
    for n, nu, mu, m in product(*(range(s) for s in t.reverse.shape)):
        prob = float(t.reverse[n, nu, mu, m])
        if prob < DROP_BELOW:
            continue
        records.append(TrajectoryRecord(n, ((nu, mu),), m, prob, float(t.forward[n, nu, mu, m])))
    return records


def measured_final_state(p: BipartiteProcess) -> DensityOperator:
    """rho*_SE: the final state dephased in the product of the final bases."""
    weights = _tables(p).measured.ravel()
    vectors = np.kron(p.final_basis_s.vectors, p.final_basis_e.vectors)
    return DensityOperator.from_matrix(
        (vectors * weights) @ dagger(vectors), (p.dim_s, p.dim_e), validate=False
    )


def entropy_ledger(rec: TrajectoryRecord, p: BipartiteProcess) -> EntropyLedger:
    ((nu, mu),) = rec.env
    return _ledger_for(p, rec.n, nu, mu, rec.m, _split_data(p))


def split_entropy(rec: TrajectoryRecord, p: BipartiteProcess, pi: Optional[DensityOperator] = None) -> EntropySplit:
    split = _split_data(p, pi)
    if not split.available:
        return EntropySplit(None, None, False, split.reason)
    ledger = _ledger_for(p, rec.n, rec.env[0][0], rec.env[0][1], rec.m, split)
    return EntropySplit(ledger.delta_s_a, ledger.delta_s_na, True)


def average_entropies(p: BipartiteProcess) -> EntropyAverages:
    t = _tables(p)
    split = _split_data(p)
    rho_final = p.final_state
    s_initial = von_neumann_entropy(p.rho_s) + von_neumann_entropy(p.rho_e)
    p_star = t.measured.sum(axis=1)
    q_star = t.measured.sum(axis=0)
    s_star_s, s_star_e = shannon_entropy(p_star), shannon_entropy(q_star)
    s_star_joint = shannon_entropy(t.measured.ravel())
    s_prime_s = von_neumann_entropy(partial_trace(rho_final, 0))
    s_prime_e = von_neumann_entropy(partial_trace(rho_final, 1))
    info_final = mutual_information(rho_final)
    info_measured = s_star_s + s_star_e - s_star_joint
    rho_e_star = (p.final_basis_e.vectors * q_star) @ dagger(p.final_basis_e.vectors)
    try:
        reset_extra = relative_entropy(rho_e_star, p.rho_e)
    except SupportError:
        reset_extra = float("inf")
    average = adiabatic = nonadiabatic = potential = 0.0
    for rec in forward_distribution(p):
        ledger = rec.ledger
        if np.isfinite(ledger.delta_s):
            average += rec.probability * ledger.delta_s
        if ledger.split_available:
            potential += rec.probability * ledger.dphi
            adiabatic += rec.probability * ledger.delta_s_a
            nonadiabatic += rec.probability * ledger.delta_s_na
    averages = dict(
        inclusive=s_star_joint - s_initial,
        non_inclusive=s_star_s + s_star_e - s_initial,
        measurement_disturbance=(s_star_s - s_prime_s) + (s_star_e - s_prime_e),
        correlation_erasure=info_final - info_measured,
        mutual_information_final=info_final,
        mutual_information_measured=info_measured,
        reset_extra=reset_extra,
        trajectory_average=average,
    )
    if split.available:
        phi = channels.nonequilibrium_potential(split.pi).matrix
        rho_s_final = partial_trace(rho_final, 0).matrix
        direct = float(np.real(np.trace(phi @ (rho_s_final - p.rho_s.matrix))))
        averages.update(
            adiabatic=adiabatic,
            nonadiabatic=nonadiabatic,
            potential_change=potential,
            potential_change_direct=direct,
        )
    return EntropyAverages(**averages)


def detailed_ft_residuals(records: Sequence[TrajectoryRecord], tol: float = TAU_FT) -> DetailedFTReport:
    """Compare log probability ratios with the ledger entries trajectory by trajectory."""
    worst = 0.0
    worst_dual: Optional[float] = None
    worst_rev: Optional[float] = None
    overruns = []
    split = bool(records) and all(r.ledger is not None and r.ledger.split_available for r in records)
    for rec in records:
        ledger = rec.ledger
        if rec.probability < DROP_BELOW or ledger is None:
            continue
        expected = ledger.sigma_s + ledger.sigma_e - ledger.i_tilde
        if rec.reverse_probability <= 0:
            residual = 0.0 if not np.isfinite(expected) else float("inf")
        else:
            residual = abs(float(np.log(rec.probability) - np.log(rec.reverse_probability)) - expected)
        worst = max(worst, residual)
        if residual > tol:
            overruns.append((rec.outcomes, residual))
        if split:
            res_d = _log_ratio_residual(rec.probability, rec.dual_probability, ledger.delta_s_a)
            res_r = _log_ratio_residual(rec.probability, rec.dual_reverse_probability, ledger.delta_s_na)
            worst_dual = max(worst_dual or 0.0, res_d)
            worst_rev = max(worst_rev or 0.0, res_r)
    return DetailedFTReport(worst, tuple(overruns), worst_dual, worst_rev, split, tol)


def _log_ratio_residual(prob: float, other: Optional[float], expected: float) -> float:
    if other is None or other <= 0:
        return float("inf")
    return abs(float(np.log(prob) - np.log(other)) - expected)


def verify_detailed_ft(p: BipartiteProcess, tol: float = TAU_FT) -> DetailedFTReport:
    return detailed_ft_residuals(forward_distribution(p), tol)


def integral_ft_from_ledgers(
    ledgers: Sequence[EntropyLedger],
    which: str = "total",
    weights: Optional[Sequence[float]] = None,
) -> IntegralFT:
    """<exp(-s)>: exact weighted sum when ``weights`` are given, sample mean otherwise."""
    if not ledgers:
        raise ValueError("no trajectories to average over")
    values = [ledger.value(which) for ledger in ledgers]
    if any(v is None for v in values):
        return IntegralFT(which, None, None, False, samples=len(ledgers))
    s = np.asarray(values, dtype=float)
    infinite = int(np.sum(~np.isfinite(s)))
    finite = np.isfinite(s)
    exp_terms = np.where(finite, np.exp(-np.where(finite, s, 0.0)), 0.0)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        value = float(np.sum(w * exp_terms))
        mean = float(np.sum(w[finite] * s[finite]))
        return IntegralFT(which, value, 0.0, True, mean, mean >= -TAU_CONS, len(ledgers), infinite)
    n = len(s)
    value = float(exp_terms.mean())
    stderr = float(exp_terms.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    mean = float(s[finite].mean()) if finite.any() else float("nan")
    mean_err = float(s[finite].std(ddof=1) / np.sqrt(finite.sum())) if finite.sum() > 1 else 0.0
    return IntegralFT(which, value, stderr, True, mean, mean >= -3 * mean_err - TAU_CONS, n, infinite)


def verify_integral_ft(records: Sequence[TrajectoryRecord], which: str = "total") -> IntegralFT:
    if not records:
        raise ValueError("no trajectories to average over")
    ledgers = [rec.ledger for rec in records]
    if any(ledger is None for ledger in ledgers):
        raise ValueError("every record needs an entropy ledger")
    if all(rec.sampled for rec in records):
        return integral_ft_from_ledgers(ledgers, which)
    return integral_ft_from_ledgers(ledgers, which, [rec.probability for rec in records])


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream: the draw for trajectory ``index`` never depends on the others."""
    return np.random.default_rng([int(seed), int(index)])


def run_indexed(worker, n: int, workers: int) -> list:
    if workers <= 1 or n < 2 * workers:
        return [worker(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, range(n), chunksize=max(1, n // (8 * workers))))


def sample_trajectories(
    p: Union[BipartiteProcess, Concatenation],
    n: int,
    seed: int,
    *,
    rho_s: Optional[DensityOperator] = None,
    final_basis: Optional[ProjectiveBasis] = None,
    backward_weights: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> List[TrajectoryRecord]:
    if n < 0:
        raise ValueError("trajectory count must be non-negative")
    if n == 0:
        return []
    if isinstance(p, BipartiteProcess):
        population = forward_distribution(p)
        probs = np.array([rec.probability for rec in population])
        cumulative = np.cumsum(probs / probs.sum())

        def draw(i: int) -> TrajectoryRecord:
            u = trajectory_rng(seed, i).random()
            idx = min(int(np.searchsorted(cumulative, u, side="right")), len(population) - 1)
            return replace(population[idx], sampled=True)

        return run_indexed(draw, n, workers)
    if rho_s is None or final_basis is None:
        raise ValueError("sampling a concatenation needs the initial state and final basis")
    sampler = _ConcatenationSampler(p, rho_s, final_basis, backward_weights)
    return run_indexed(lambda i: sampler.draw(trajectory_rng(seed, i)), n, workers)


class _ConcatenationEngine:
    """Operators and boundary data shared by enumeration and sampling of concatenations."""

    def __init__(
        self,
        conc: Concatenation,
        rho_s: DensityOperator,
        final_basis: ProjectiveBasis,
        backward_weights: Optional[Sequence[float]] = None,
        initial_basis: Optional[ProjectiveBasis] = None,
    ):
        self.conc = conc
        self.final_basis = final_basis
        self.p, self.initial_basis = measurement_basis(rho_s, initial_basis, "system")
        final_state = rho_s
        for kraus_map in conc.maps:
            final_state = channels.apply(kraus_map, final_state)
        self.final_state = final_state
        if backward_weights is None:
            self.p_tilde = final_basis.weights(final_state)
        else:
            w = np.asarray(backward_weights, dtype=float)
            self.p_tilde = w / w.sum()
        self.backward = [channels.backward_map(m) for m in conc.maps]
        self.dphi: List[Dict[Hashable, float]] = []
        self.dual: List[KrausMap] = []
        self.dual_reverse: List[KrausMap] = []
        self.split_reason = ""
        try:
            for kraus_map, pi, phi in zip(conc.maps, conc.invariant_states, conc.potentials):
                report = channels.check_ladder_condition(kraus_map, phi)
                if not report.satisfied:
                    raise LadderConditionError(f"ladder condition violated by {report.witness[0]!r}")
                self.dphi.append(report.dphi)
                self.dual.append(channels.dual_map(kraus_map, pi))
                self.dual_reverse.append(channels.dual_reverse_map(kraus_map, pi))
            self.split = True
        except NumericalError as exc:
            self.split = False
            self.split_reason = str(exc)
            logger.debug("concatenation split unavailable: %s", exc)

    def ledger(self, n: int, labels: Sequence[Hashable], m: int) -> EntropyLedger:
        sigma_s = float(_safe_log(self.p[n]) - _safe_log(self.p_tilde[m]))
        ops = [kraus_map.operator(label) for kraus_map, label in zip(self.conc.maps, labels)]
        sigma_e = float(sum(op.sigma_e for op in ops))
        delta_s = sigma_s + sigma_e
        infinite = not np.isfinite(delta_s)
        if not self.split:
            return EntropyLedger(sigma_s, sigma_e, 0.0, delta_s, infinite=infinite)
        dphi = float(sum(d[label] for d, label in zip(self.dphi, labels)))
        return EntropyLedger(sigma_s, sigma_e, 0.0, delta_s, sigma_e + dphi, sigma_s - dphi, True, dphi, infinite=infinite)

    def _chain(self, maps: Sequence[KrausMap], labels: Sequence[Hashable], reverse: bool) -> np.ndarray:
        chain = np.eye(self.conc.dim, dtype=complex)
        for kraus_map, label in zip(maps, labels):
            try:
                if reverse:
                    # backward-type maps act in reverse order on reversed labels
                    chain = chain @ kraus_map.operator(channels._reversed_label(label)).matrix
                else:
                    chain = kraus_map.operator(label).matrix @ chain
            except KeyError:
                # operator dropped from the derived map: zero weight
                return np.zeros_like(chain)
        return chain

    def probabilities(self, n: int, labels: Sequence[Hashable], m: int) -> Tuple[float, float, Optional[float], Optional[float]]:
        e_n = self.initial_basis.vector(n)
        f_m = self.final_basis.vector(m)
        forward = self.p[n] * abs(np.vdot(f_m, self._chain(self.conc.maps, labels, False) @ e_n)) ** 2
        reverse = self.p_tilde[m] * abs(
            np.vdot(np.conj(e_n), self._chain(self.backward, labels, True) @ np.conj(f_m))
        ) ** 2
        dual = dual_rev = None
        if self.split:
            dual = self.p[n] * abs(np.vdot(f_m, self._chain(self.dual, labels, False) @ e_n)) ** 2
            dual_rev = self.p_tilde[m] * abs(
                np.vdot(np.conj(e_n), self._chain(self.dual_reverse, labels, True) @ np.conj(f_m))
            ) ** 2
        return float(forward), float(reverse), dual, dual_rev


class _ConcatenationSampler(_ConcatenationEngine):
    def __init__(self, conc, rho_s, final_basis, backward_weights=None):
        super().__init__(conc, rho_s, final_basis, backward_weights)
        self.cum_p = np.cumsum(self.p / self.p.sum())

    def draw(self, rng: np.random.Generator) -> TrajectoryRecord:
        n = min(int(np.searchsorted(self.cum_p, rng.random(), side="right")), len(self.p) - 1)
        psi = self.initial_basis.vector(n).astype(complex)
        labels = []
        for kraus_map in self.conc.maps:
            candidates = [op.matrix @ psi for op in kraus_map.operators]
            weights = np.array([np.vdot(c, c).real for c in candidates])
            k = min(int(np.searchsorted(np.cumsum(weights / weights.sum()), rng.random(), side="right")), len(weights) - 1)
            labels.append(kraus_map.operators[k].label)
            psi = candidates[k] / np.sqrt(weights[k])
        final = np.abs(dagger(self.final_basis.vectors) @ psi) ** 2
        m = min(int(np.searchsorted(np.cumsum(final / final.sum()), rng.random(), side="right")), len(final) - 1)
        forward, reverse, dual, dual_rev = self.probabilities(n, labels, m)
        return TrajectoryRecord(n, tuple(labels), m, forward, reverse, dual, dual_rev, self.ledger(n, labels, m), True)


def concatenation_distribution(
    c: Concatenation,
    rho_s: DensityOperator,
    final_basis: ProjectiveBasis,
    *,
    initial_basis: Optional[ProjectiveBasis] = None,
    backward_weights: Optional[Sequence[float]] = None,
) -> List[TrajectoryRecord]:
    count = len(final_basis) * rho_s.dim
    for kraus_map in c.maps:
        count *= len(kraus_map)
    _check_cap(count)
    engine = _ConcatenationEngine(c, rho_s, final_basis, backward_weights, initial_basis)
    label_sets = [kraus_map.labels for kraus_map in c.maps]
    records = []
    for n in range(len(engine.p)):
        if engine.p[n] < DROP_BELOW:
            continue
        for labels in product(*label_sets):
            amplitudes = dagger(final_basis.vectors) @ (
                engine._chain(c.maps, labels, False) @ engine.initial_basis.vector(n)
            )
            for m in range(len(final_basis)):
                if engine.p[n] * abs(amplitudes[m]) ** 2 < DROP_BELOW:
                    continue
                forward, reverse, dual, dual_rev = engine.probabilities(n, labels, m)
                records.append(
                    TrajectoryRecord(n, tuple(labels), m, forward, reverse, dual, dual_rev, engine.ledger(n, labels, m))
                )
    logger.debug("enumerated %d concatenation trajectories over %d maps", len(records), len(c))
    return records


@dataclass(frozen=True, eq=False)
class MultiEnvProcess:
    """Bipartite process whose environment is R uncorrelated ancillas."""

    rho_s: DensityOperator
    env_states: Tuple[DensityOperator, ...]
    unitary: np.ndarray
    final_basis_s: ProjectiveBasis
    final_bases_e: Tuple[ProjectiveBasis, ...]
    theta: TimeReversal = CONJUGATION
    backward_init: BackwardInit = BackwardInit.PRODUCT

    def __post_init__(self):
        object.__setattr__(self, "backward_init", BackwardInit(self.backward_init))
        if not self.backward_init.uncorrelated or self.backward_init is BackwardInit.CUSTOM:
            raise ProcessDefinitionError("multipartite environments support product or reset backward initialization")
        if len(self.env_states) != len(self.final_bases_e):
            raise ProcessDefinitionError("one final basis per ancilla is required")

    @property
    def env_dims(self) -> Tuple[int, ...]:
        return tuple(s.dim for s in self.env_states)

    @functools.cached_property
    def env_spectra(self) -> List[Tuple[np.ndarray, ProjectiveBasis]]:
        return [measurement_basis(s, None, f"ancilla {r}") for r, s in enumerate(self.env_states)]

    def _joint(self, backward_init: BackwardInit, custom_weights=None) -> BipartiteProcess:
        rho_e = self.env_states[0]
        basis_e = self.env_spectra[0][1]
        final_e = self.final_bases_e[0]
        for state, (_, basis), final in zip(self.env_states[1:], self.env_spectra[1:], self.final_bases_e[1:]):
            rho_e = tensor(rho_e, state)
            basis_e = basis_e.tensor(basis)
            final_e = final_e.tensor(final)
        rho_e = DensityOperator.from_matrix(rho_e.matrix, validate=False)
        return BipartiteProcess(
            self.rho_s, rho_e, self.final_basis_s, final_e, unitary=self.unitary,
            initial_basis_e=basis_e, theta=self.theta, backward_init=backward_init, custom_weights=custom_weights,
        )

    @functools.cached_property
    def ancilla_final_weights(self) -> List[np.ndarray]:
        """Backward-process ancilla weights q~^(r)."""
        if self.backward_init is BackwardInit.RESET:
            return [basis.weights(state) for basis, state in zip(self.final_bases_e, self.env_states)]
        measured = _tables(self._joint(BackwardInit.PRODUCT)).measured.sum(axis=0)
        dims = [len(b) for b in self.final_bases_e]
        joint = measured.reshape(dims)
        return [
            joint.sum(axis=tuple(a for a in range(len(dims)) if a != r)) for r in range(len(dims))
        ]

    @functools.cached_property
    def joint_process(self) -> BipartiteProcess:
        measured = _tables(self._joint(BackwardInit.PRODUCT)).measured
        q_tilde = self.ancilla_final_weights[0]
        for w in self.ancilla_final_weights[1:]:
            q_tilde = np.kron(q_tilde, w)
        return self._joint(BackwardInit.CUSTOM, (tuple(measured.sum(axis=1)), tuple(q_tilde)))

    def kraus_map(self) -> KrausMap:
        return channels.kraus_from_multipartite_unitary(
            self.unitary,
            [(w, b) for w, b in self.env_spectra],
            self.final_bases_e,
            env_final_weights=self.ancilla_final_weights,
        )


def multipartite_distribution(p: MultiEnvProcess) -> List[TrajectoryRecord]:
    """Forward records whose ledgers split sigma_E by ancilla."""
    joint = p.joint_process
    nu_shape = [len(b) for _, b in p.env_spectra]
    mu_shape = [len(b) for b in p.final_bases_e]
    q_parts = [w for w, _ in p.env_spectra]
    qt_parts = p.ancilla_final_weights
    records = []
    for rec in forward_distribution(joint):
        ((nu, mu),) = rec.env
        nus = np.unravel_index(nu, nu_shape)
        mus = np.unravel_index(mu, mu_shape)
        parts = tuple(
            float(_safe_log(q_parts[r][nus[r]]) - _safe_log(qt_parts[r][mus[r]])) for r in range(len(q_parts))
        )
        env = tuple((int(a), int(b)) for a, b in zip(nus, mus))
        records.append(replace(rec, env=env, ledger=replace(rec.ledger, sigma_e_parts=parts)))
    return records


def perturbative_relative_entropy_check(
    rho_e: DensityOperator, delta: np.ndarray, eps_list: Sequence[float]
) -> List[float]:
    """S(rho_E + eps delta || rho_E) / eps^2 for each eps."""
    d = as_matrix(delta)
    if abs(np.trace(d)) > 1e-12 or np.linalg.norm(d - dagger(d)) > 1e-12:
        raise ValueError("perturbation must be traceless and Hermitian")
    ratios = []
    for eps in eps_list:
        shifted = rho_e.matrix + eps * d
        low = float(np.linalg.eigvalsh(shifted)[0])
        if low < 0:
            raise PositivityError(f"rho_E + {eps:g} delta is not positive (min eigenvalue {low:.3e})")
        ratios.append(relative_entropy(shifted, rho_e) / eps ** 2)
    return ratios
