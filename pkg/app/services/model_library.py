"""Built-in models with closed-form oracles.

* ``cnot``: system qubit controls a thermal environment qubit.
* ``three_level``: autonomous absorption refrigerator on levels g, A, B.
* ``cavity``: resonantly driven damped mode in the interaction picture.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse, special

from app.models.experiment import CavityParams, CnotParams, MachineParams
from app.services import lindblad
from app.services.lindblad import JumpEvent, JumpOperator, JumpTrajectory, LindbladModel
from app.services.quantum_core import (
    HBAR,
    PAULI_X,
    DensityOperator,
    ProjectiveBasis,
    dagger,
    gibbs_state,
    partial_trace,
    tensor,
    trace_distance,
)
from app.services.trajectories import BipartiteProcess, run_indexed
from app.utils.errors import (
    DegenerateSpectrumError,
    PositivityError,
    ProcessDefinitionError,
    TruncationError,
)

logger = logging.getLogger(__name__)

LEAKAGE_TOL = 1e-8
LEAKAGE_MARGIN = 5
DEFAULT_N_MAX = 80
WEAK_DRIVING = 0.1
STATIONARITY_TOL = 1e-8
STATIONARITY_TARGET = 1e-11
MAX_GROWTH = 30

# ---------------------------------------------------------------------------
# cnot
# ---------------------------------------------------------------------------

_SQRT_HALF = 1 / math.sqrt(2)
_BASES = {
    "energy": np.eye(2, dtype=complex),
    "x": np.array([[1, 1], [1, -1]], dtype=complex) * _SQRT_HALF,
    "y": np.array([[1, 1], [1j, -1j]], dtype=complex) * _SQRT_HALF,
}


def named_basis(name: str) -> ProjectiveBasis:
    try:
        return ProjectiveBasis.from_vectors(_BASES[name])
    except KeyError:
        raise ValueError(f"unknown qubit basis {name!r}") from None


def cnot_gate() -> np.ndarray:
    """Control on the system (first factor), target on the environment."""
    p0 = np.diag([1.0, 0.0]).astype(complex)
    p1 = np.diag([0.0, 1.0]).astype(complex)
    return np.kron(p0, np.eye(2)) + np.kron(p1, PAULI_X)


def cnot_hamiltonian(p: CnotParams) -> np.ndarray:
    """H_S + H_E with each qubit's excited level at energy epsilon."""
    h = np.diag([0.0, p.epsilon]).astype(complex)
    return np.kron(h, np.eye(2)) + np.kron(np.eye(2), h)


def build_cnot(p: CnotParams, backward_init: str = "product", custom_weights=None) -> BipartiteProcess:
    rho_s = DensityOperator.from_matrix(0.5 * (np.eye(2) + p.alpha * PAULI_X))
    rho_e = gibbs_state(np.diag([0.0, p.epsilon]), p.beta)
    if p.initial_basis_s is None and p.alpha == 0.0:
        raise DegenerateSpectrumError("rho_S is maximally mixed at alpha = 0; set initial_basis_s", "models")
    initial_s = named_basis(p.initial_basis_s or "x")
    return BipartiteProcess(
        rho_s,
        rho_e,
        named_basis(p.final_basis_s),
        named_basis(p.final_basis_e),
        unitary=cnot_gate(),
        initial_basis_s=initial_s,
        initial_basis_e=named_basis("energy"),
        backward_init=backward_init,
        custom_weights=custom_weights,
    )


def cnot_first_gate_work(p: CnotParams) -> float:
    """W = epsilon (1/2 - exp(-beta epsilon) / Z_E)."""
    z_e = 1.0 + math.exp(-p.beta_eps)
    return p.epsilon * (0.5 - math.exp(-p.beta_eps) / z_e)


@dataclass(frozen=True)
class SecondGateResult:
    state: DensityOperator
    w_ext: float
    decorrelation_residual: float

    @property
    def decorrelated(self) -> bool:
        return self.decorrelation_residual <= 1e-12


def cnot_second_gate(p: CnotParams, state_after_measurement: DensityOperator) -> SecondGateResult:
    """Apply the CNOT again to rho* and report the work extracted and the residual correlations."""
    u = cnot_gate()
    h = cnot_hamiltonian(p)
    before = state_after_measurement.matrix
    after = u @ before @ dagger(u)
    w_ext = float(np.real(np.trace(h @ (before - after))))
    state = DensityOperator.from_matrix(after, (2, 2), validate=False)
    rho_e = gibbs_state(np.diag([0.0, p.epsilon]), p.beta)
    target = tensor(partial_trace(state_after_measurement, 0), rho_e)
    residual = trace_distance(state, target)
    if residual > 1e-12:
        logger.info("second CNOT leaves residual correlations (trace distance %.3e)", residual)
    return SecondGateResult(state, w_ext, residual)


# ---------------------------------------------------------------------------
# three_level
# ---------------------------------------------------------------------------

LEVELS = ("g", "A", "B")
_TRANSITIONS = {1: (0, 1), 2: (1, 2), 3: (0, 2)}  # r -> (lower, upper)


def _bath(p: MachineParams, r: int) -> Tuple[float, float, float]:
    """(hbar omega_r, beta_r, gamma_r)."""
    return (
        {1: p.hw1, 2: p.hw2, 3: p.hw3}[r],
        {1: p.beta1, 2: p.beta2, 3: p.beta3}[r],
        {1: p.gamma1, 2: p.gamma2, 3: p.gamma3}[r],
    )


def machine_hamiltonian(p: MachineParams) -> np.ndarray:
    return np.diag([0.0, p.hw1, p.hw3]).astype(complex)


def build_machine(p: MachineParams) -> LindbladModel:
    jumps = []
    rates = []
    for r, (lower, upper) in _TRANSITIONS.items():
        hw, beta, gamma = _bath(p, r)
        n_th = 1.0 / math.expm1(beta * hw)
        lowering = np.zeros((3, 3), dtype=complex)
        lowering[lower, upper] = 1.0
        down, up = gamma * (n_th + 1), gamma * n_th
        jumps.append(JumpOperator(f"down{r}", math.sqrt(down) * lowering))
        jumps.append(JumpOperator(f"up{r}", math.sqrt(up) * dagger(lowering)))
        rates.extend([down, up])

    steady = None
    if p.equal_rates:
        populations = np.asarray(machine_steady_state(p))
        steady = DensityOperator.diagonal(populations)

    model = LindbladModel(
        3,
        machine_hamiltonian(p),
        tuple(jumps),
        invariant_state=(lambda t: steady) if steady is not None else None,
        rate_scale=max(rates),
        name="three_level",
    )
    return lindblad.assign_environment_entropies(model)


def _x(p: MachineParams) -> Tuple[float, float, float]:
    return (
        math.exp(p.beta1 * p.hw1),
        math.exp(p.beta2 * p.hw2),
        math.exp(p.beta3 * p.hw3),
    )


def machine_partition(p: MachineParams) -> float:
    x1, x2, x3 = _x(p)
    return 2 * x1 * x2 * x3 + 2 * x2 * x3 + x1 * x2 - 2 * x2 - x3 - 2


def machine_steady_state(p: MachineParams) -> Tuple[float, float, float]:
    """Stationary (pi_g, pi_A, pi_B); closed form for equal rates, numeric otherwise."""
    if not p.equal_rates:
        logger.info("unequal bath rates: using the numeric steady state")
        pi = lindblad.numeric_steady_state(build_machine(p))
        return tuple(float(v) for v in np.real(np.diag(pi.matrix)))
    x1, x2, x3 = _x(p)
    z = machine_partition(p)
    return (
        (2 * x1 * x2 * x3 - x1 * x2 - x3) / z,
        (x1 * x2 - 2 * x2 + 2 * x2 * x3 - x3) / z,
        (x1 * x2 + x3 - 2) / z,
    )


def virtual_temperatures(pi: Sequence[float], p: MachineParams) -> Tuple[float, float, float]:
    g, a, b = (float(v) for v in pi)
    if min(g, a, b) <= 0:
        raise PositivityError("virtual temperatures need strictly positive populations", "models")
    return (
        math.log(g / a) / p.hw1,
        math.log(a / b) / p.hw2,
        math.log(g / b) / p.hw3,
    )


def machine_heat_flows(m: LindbladModel, rho) -> Tuple[float, float, float]:
    """Q_r = Tr[H D_r(rho)] for the dissipator of bath r."""
    r_mat = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    h = lindblad._dense(m.h())
    flows = []
    for r in (1, 2, 3):
        total = 0.0
        for jump in m.jumps:
            if not jump.label.endswith(str(r)):
                continue
            l = lindblad._dense(jump.at())
            k = dagger(l) @ l
            dissipated = l @ r_mat @ dagger(l) - 0.5 * (k @ r_mat + r_mat @ k)
            total += float(np.real(np.trace(h @ dissipated)))
        flows.append(total)
    return tuple(flows)


def machine_stationary_flows(p: MachineParams) -> Tuple[float, float, float]:
    """Q_1 = gamma hw1 Delta / Z, Q_2 = gamma hw2 Delta / Z, Q_3 = -(Q_1 + Q_2)."""
    if not p.equal_rates:
        model = build_machine(p)
        return machine_heat_flows(model, model.pi())
    x1, x2, x3 = _x(p)
    delta = x3 - x1 * x2
    z = machine_partition(p)
    q1 = p.gamma1 * p.hw1 * delta / z
    q2 = p.gamma1 * p.hw2 * delta / z
    return q1, q2, -(q1 + q2)


def refrigerator_efficiency_bound(p: MachineParams) -> float:
    if p.beta1 == p.beta3:
        return math.inf
    return (p.beta3 - p.beta2) / (p.beta1 - p.beta3)


def cooling_window_omega2(p: MachineParams) -> float:
    """omega_2 at which the stationary flows vanish; larger omega_2 cools transition 1."""
    return p.hw1 * (p.beta1 - p.beta3) / (p.beta3 - p.beta2)


def flows_vanish_beta1(p: MachineParams) -> float:
    return (p.beta3 * p.hw3 - p.beta2 * p.hw2) / p.hw1


def machine_cycle_fixture(p: MachineParams, model: Optional[LindbladModel] = None) -> JumpTrajectory:
    """g -> A (bath 1) -> B (bath 2) -> g (bath 3): one refrigeration cycle."""
    model = model or build_machine(p)
    diagnostics = lindblad.split_diagnostics(model)
    sigmas = model.sigma_e()
    events = tuple(
        JumpEvent(label, t, sigmas[label], diagnostics.dphi.get(label))
        for label, t in (("up1", 1.0), ("up2", 2.0), ("down3", 3.0))
    )
    return JumpTrajectory(0, events, 0, diagnostics.available)


@dataclass(frozen=True)
class SweepPoint:
    beta1: float
    virtual: Tuple[float, float, float]
    flows: Tuple[float, float, float]


def machine_beta1_sweep(p: MachineParams, beta1_values: Sequence[float], workers: int = 1) -> List[SweepPoint]:
    """Virtual temperatures and stationary flows as the cold bath is varied."""
    values = [float(b) for b in beta1_values]

    def point(i: int) -> SweepPoint:
        # ordering constraint deliberately not re-validated across the sweep
        q = p.model_copy(update={"beta1": values[i]})
        pi = machine_steady_state(q)
        return SweepPoint(values[i], virtual_temperatures(pi, q), machine_stationary_flows(q))

    return run_indexed(point, len(values), workers)


# ---------------------------------------------------------------------------
# cavity
# ---------------------------------------------------------------------------


def annihilation(dim: int) -> sparse.csr_matrix:
    return sparse.diags(np.sqrt(np.arange(1, dim)), 1, shape=(dim, dim), format="csr", dtype=complex)


def displaced_thermal_photon_distribution(alpha_abs2: float, n_th: float, n_values) -> np.ndarray:
    """P(n) of D(alpha) rho_th D(alpha)^dagger."""
    n = np.asarray(n_values, dtype=int)
    if n_th < 1e-12:
        # zero temperature: Poisson statistics of a coherent state
        if alpha_abs2 == 0:
            return (n == 0).astype(float)
        return np.exp(n * math.log(alpha_abs2) - alpha_abs2 - special.gammaln(n + 1))
    x = -alpha_abs2 / (n_th * (1 + n_th))
    with np.errstate(over="ignore", invalid="ignore"):
        log_prefactor = n * math.log(n_th) - (n + 1) * math.log1p(n_th) - alpha_abs2 / (1 + n_th)
        values = np.exp(log_prefactor) * special.eval_laguerre(n, x)
    if not np.all(np.isfinite(values)):
        raise TruncationError("photon distribution overflowed; temperature too low for the Laguerre form", "models")
    return np.clip(values, 0.0, None)


def photon_tail(p: CavityParams, n_max: int) -> float:
    """Population above level n_max - 5 of the steady state."""
    cut = n_max - LEAKAGE_MARGIN
    if cut < 0:
        return 1.0
    head = displaced_thermal_photon_distribution(abs(p.alpha) ** 2, p.n_thermal, np.arange(cut + 1))
    return max(0.0, 1.0 - float(head.sum()))


def default_n_max(p: CavityParams) -> int:
    n_max = DEFAULT_N_MAX
    while photon_tail(p, n_max) >= LEAKAGE_TOL:
        n_max += 10
        if n_max > 20000:
            raise TruncationError("no admissible Fock truncation below 20000", "models")
    return n_max


def cavity_n_max(p: CavityParams) -> int:
    if p.n_max is None:
        return default_n_max(p)
    tail = photon_tail(p, p.n_max)
    if tail >= LEAKAGE_TOL:
        raise TruncationError(
            f"n_max={p.n_max} leaks {tail:.3e} of the steady-state population; enlarge n_max", "models"
        )
    return p.n_max


def displacement(alpha: complex, dim: int) -> Tuple[np.ndarray, float]:
    """D(alpha) on the first ``dim`` Fock levels and its unitarity defect after cropping."""
    padded = 2 * dim
    a = annihilation(padded).toarray()
    d = linalg.expm(alpha * dagger(a) - np.conj(alpha) * a)[:dim, :dim]
    defect = float(np.linalg.norm(dagger(d) @ d - np.eye(dim)))
    return d, defect


def cavity_thermal_state(p: CavityParams, dim: Optional[int] = None) -> DensityOperator:
    dim = dim or cavity_dimension(p)
    weights = np.exp(-p.beta * p.omega * np.arange(dim))
    return DensityOperator.diagonal(weights / weights.sum())


def cavity_steady_state(p: CavityParams, dim: Optional[int] = None) -> DensityOperator:
    """D(alpha) rho_th D(alpha)^dagger, alpha = 2 epsilon / gamma_0."""
    dim = dim or cavity_dimension(p)
    d, defect = displacement(p.alpha, dim)
    # the cropped edge is judged by the stationarity residual, not by this defect
    logger.debug("displacement unitarity defect %.3e on %d levels", defect, dim)
    rho = d @ cavity_thermal_state(p, dim).matrix @ dagger(d)
    rho = 0.5 * (rho + dagger(rho))
    return DensityOperator.from_matrix(rho / np.real(np.trace(rho)), validate=False)


def cavity_potential(p: CavityParams, dim: int) -> np.ndarray:
    """Phi = beta hbar omega (a^dagger - conj(alpha)) (a - alpha) + ln Z_0."""
    a = annihilation(dim).toarray()
    shifted = a - p.alpha * np.eye(dim)
    ln_z0 = -math.log(-math.expm1(-p.beta * p.omega))
    return p.beta * HBAR * p.omega * (dagger(shifted) @ shifted) + ln_z0 * np.eye(dim)


def cavity_drive(p: CavityParams, dim: int) -> sparse.csr_matrix:
    """V = i hbar (epsilon a^dagger - conj(epsilon) a)."""
    a = annihilation(dim)
    return (1j * HBAR * (p.epsilon * a.conj().T - np.conj(p.epsilon) * a)).tocsr()


def _cavity_model(p: CavityParams, dim: int) -> LindbladModel:
    a = annihilation(dim)
    n_th = p.n_thermal
    down, up = p.gamma0 * (n_th + 1), p.gamma0 * n_th
    steady = cavity_steady_state(p, dim)
    phi = cavity_potential(p, dim)
    return LindbladModel(
        dim,
        cavity_drive(p, dim),
        (
            JumpOperator("down", math.sqrt(down) * a),
            JumpOperator("up", math.sqrt(up) * a.conj().T.tocsr()),
        ),
        invariant_state=lambda t: steady,
        potential=lambda t: phi,
        rate_scale=down,
        name="cavity",
    )


def stationarity_residual(m: LindbladModel) -> float:
    """||L(pi)|| of the truncated generator on its own invariant state."""
    return float(np.linalg.norm(lindblad.liouvillian_apply(m, m.pi())))


def _sized_cavity(p: CavityParams) -> Tuple[LindbladModel, float]:
    n_max = cavity_n_max(p)
    model = _cavity_model(p, n_max + 1)
    residual = stationarity_residual(model)
    if p.n_max is None:
        for _ in range(MAX_GROWTH):
            if residual <= STATIONARITY_TARGET:
                break
            n_max += 10
            model = _cavity_model(p, n_max + 1)
            residual = stationarity_residual(model)
    if residual > STATIONARITY_TOL:
        raise TruncationError(
            f"cropped steady state on {model.dim} levels has ||L(pi)|| = {residual:.3e} > {STATIONARITY_TOL:g}; "
            "enlarge n_max",
            "models",
        )
    return model, residual


def cavity_dimension(p: CavityParams) -> int:
    """Fock dimension build_cavity settles on."""
    return _sized_cavity(p)[0].dim


def build_cavity(p: CavityParams) -> LindbladModel:
    if p.gamma0 > WEAK_DRIVING * p.omega or p.eps_abs > WEAK_DRIVING * p.omega:
        logger.warning("cavity parameters leave the weak-driving regime (gamma0, |eps| << omega)")
    model, residual = _sized_cavity(p)
    logger.debug("cavity model on %d Fock levels, alpha=%s, ||L(pi)||=%.2e", model.dim, p.alpha, residual)
    return lindblad.assign_environment_entropies(model)


def steady_power(p: CavityParams) -> float:
    """W_ss = hbar omega gamma_0 |alpha|^2."""
    return HBAR * p.omega * p.gamma0 * abs(p.alpha) ** 2


def adiabatic_sign_change_time(gamma0: float) -> float:
    return 2 * math.log(2) / gamma0


@dataclass(frozen=True)
class CavityEnergetics:
    w_dot: float
    q_dot: float
    u_dot: float
    x_dot: float
    v_dissipator_rate: float  # Tr[V D(rho)], reported without a heat/work label


def cavity_energetics(m: LindbladModel, p: CavityParams, rho) -> CavityEnergetics:
    r = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    a = annihilation(m.dim)
    a_dag = a.conj().T
    h0 = (HBAR * p.omega * (a_dag @ a)).toarray()
    v = lindblad._dense(m.h())
    drive = lindblad._dense(p.epsilon * a_dag + np.conj(p.epsilon) * a)
    dissipated = lindblad.liouvillian_apply(replace_hamiltonian(m), r)
    rho_dot = lindblad.liouvillian_apply(m, r)
    x_phi = lindblad._dense(a_dag * np.exp(1j * p.eps_phase) + a * np.exp(-1j * p.eps_phase))
    w_dot = HBAR * p.omega * float(np.real(np.trace(drive @ r)))
    heat_h0 = float(np.real(np.trace(h0 @ dissipated)))
    v_term = float(np.real(np.trace(v @ dissipated)))
    q_dot = heat_h0 + v_term
    return CavityEnergetics(
        w_dot,
        q_dot,
        w_dot + q_dot,
        float(np.real(np.trace(x_phi @ rho_dot))),
        v_term,
    )


def replace_hamiltonian(m: LindbladModel, h=None) -> LindbladModel:
    """Same dissipator with a different (default: zero) Hamiltonian."""
    return replace(m, hamiltonian=h if h is not None else sparse.csr_matrix((m.dim, m.dim), dtype=complex))


@dataclass(frozen=True)
class CavityTransients:
    t: float
    w_dot: float
    q_dot: float
    u_dot: float
    x_dot: float
    s_dot_a: float
    s_dot_na: float
    s_dot_i: float
    s_dot: float
    branch: str


def _closed_form(p: CavityParams, t: float) -> CavityTransients:
    e = math.exp(-p.gamma0 * t / 2)
    w_ss = steady_power(p)
    beta = p.beta
    w_dot = w_ss * (1 - e)
    return CavityTransients(
        t,
        w_dot,
        -w_ss * (1 - e) ** 2,
        w_ss * e * (1 - e),
        w_ss * e / (HBAR * p.omega * abs(p.alpha)) if p.alpha else 0.0,
        beta * w_ss * (1 - 2 * e),
        beta * w_ss * e ** 2,
        beta * w_ss * (1 - e) ** 2,
        0.0,
        "closed_form",
    )


def cavity_transients(
    p: CavityParams,
    rho0: DensityOperator,
    t: float,
    *,
    model: Optional[LindbladModel] = None,
    branch: str = "auto",
    dt: Optional[float] = None,
) -> CavityTransients:
    """Energy and entropy rates at time t after starting from rho0."""
    if branch not in ("auto", "closed_form", "numeric"):
        raise ValueError(f"unknown branch {branch!r}")
    gibbs = cavity_thermal_state(p, rho0.dim)
    is_gibbs = trace_distance(rho0, gibbs) <= 1e-12
    if branch == "closed_form" and not is_gibbs:
        raise ProcessDefinitionError("closed-form transients need the Gibbs initial state", "models")
    if branch == "closed_form" or (branch == "auto" and is_gibbs):
        return _closed_form(p, t)
    model = model or build_cavity(p)
    state = rho0 if t == 0 else lindblad.integrate(model, rho0, [0.0, t], dt=dt).final
    return cavity_rates_at(model, p, state, t)


def cavity_rates_at(m: LindbladModel, p: CavityParams, rho, t: float) -> CavityTransients:
    energetics = cavity_energetics(m, p, rho)
    rates = lindblad.entropy_rates(m, rho, t)
    return CavityTransients(
        t,
        energetics.w_dot,
        energetics.q_dot,
        energetics.u_dot,
        energetics.x_dot,
        rates.s_dot_a,
        rates.s_dot_na,
        rates.s_dot_i,
        rates.s_dot,
        "numeric",
    )
