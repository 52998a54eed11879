"""Markovian dynamics: master equation, quantum-jump unraveling and entropy rates.

Operators may be dense arrays, ``scipy.sparse`` matrices or callables of time
(driven models). Only ``operator @ dense`` products are taken, so sparse
operators never get densified on the integration path.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, sparse

from app.services import channels
from app.services.channels import KrausMap, KrausOperator, NonequilibriumPotential
from app.services.quantum_core import (
    HBAR,
    TAU_PSD,
    TAU_TR,
    DensityOperator,
    ProjectiveBasis,
    clamped_log,
    dagger,
    hermitize,
    relative_entropy,
)
from app.services.trajectories import (
    EntropyLedger,
    integral_ft_from_ledgers,
    measurement_basis,
    run_indexed,
    trajectory_rng,
)
from app.utils.errors import (
    InconsistentEntropyAssignmentError,
    MissingEntropyAssignmentError,
    NoFixedPointError,
    QuantumThermoError,
    StepSizeError,
)

logger = logging.getLogger(__name__)

TAU_FIX = 1e-9
TAU_CONS = 1e-10
TAU_ODE = 1e-8
TAU_PAIR = 1e-9
TAU_SPLIT = 1e-9
STEP_WARNING = 0.05
JUMP_STEP = 0.01  # default unraveling step: dt * ||K||
NO_JUMP = "no_jump"

Operator = Any  # ndarray | scipy.sparse matrix | Callable[[float], either]


def _dense(op) -> np.ndarray:
    if sparse.issparse(op):
        return op.toarray().astype(complex)
    return np.asarray(op, dtype=complex)


def _adj(op):
    return op.conj().T


def _mul(op, rho: np.ndarray) -> np.ndarray:
    return np.asarray(op @ rho)


def _spectral_norm(op) -> float:
    m = _dense(op)
    if not m.size:
        return 0.0
    if np.count_nonzero(m - np.diag(np.diag(m))) == 0:
        return float(np.max(np.abs(np.diag(m))))
    return float(np.linalg.norm(m, 2))


@dataclass(frozen=True, eq=False)
class JumpOperator:
    label: str
    operator: Operator
    sigma_e: Optional[float] = None

    def at(self, t: float = 0.0):
        return self.operator(t) if callable(self.operator) else self.operator


@dataclass(frozen=True, eq=False)
class LindbladModel:
    dim: int
    hamiltonian: Operator
    jumps: Tuple[JumpOperator, ...]
    invariant_state: Optional[Callable[[float], DensityOperator]] = None
    potential: Optional[Callable[[float], np.ndarray]] = None
    rate_scale: Optional[float] = None
    name: str = "lindblad"

    @property
    def driven(self) -> bool:
        return callable(self.hamiltonian) or any(callable(j.operator) for j in self.jumps)

    def h(self, t: float = 0.0):
        return self.hamiltonian(t) if callable(self.hamiltonian) else self.hamiltonian

    def jump_operators(self, t: float = 0.0) -> List[Any]:
        return [j.at(t) for j in self.jumps]

    def k_operator(self, t: float = 0.0):
        ops = self.jump_operators(t)
        if not ops:
            return sparse.csr_matrix((self.dim, self.dim), dtype=complex)
        total = _adj(ops[0]) @ ops[0]
        for op in ops[1:]:
            total = total + _adj(op) @ op
        return total

    def sigma_e(self) -> Dict[str, float]:
        missing = [j.label for j in self.jumps if j.sigma_e is None]
        if missing:
            raise MissingEntropyAssignmentError(f"jumps {missing} have no environment entropy", "lindblad")
        return {j.label: float(j.sigma_e) for j in self.jumps}

    def with_sigma(self, sigmas: Dict[str, float]) -> "LindbladModel":
        jumps = tuple(replace(j, sigma_e=sigmas.get(j.label, j.sigma_e)) for j in self.jumps)
        return replace(self, jumps=jumps)

    def pi(self, t: float = 0.0) -> DensityOperator:
        if self.invariant_state is not None:
            return self.invariant_state(t)
        return numeric_steady_state(self, t)

    def phi(self, t: float = 0.0) -> np.ndarray:
        if self.potential is not None:
            return _dense(self.potential(t))
        log_pi, condition = clamped_log(self.pi(t))
        if condition > 1e12:
            logger.warning("invariant state of %s is ill-conditioned (%.2e)", self.name, condition)
        return -log_pi

    def nonequilibrium_potential(self, t: float = 0.0) -> NonequilibriumPotential:
        if self.potential is not None:
            return NonequilibriumPotential.from_operator(hermitize(self.phi(t)))
        return channels.nonequilibrium_potential(self.pi(t))

    def default_dt(self, t: float = 0.0) -> float:
        scale = self.rate_scale or max(_spectral_norm(self.k_operator(t)), 1e-12)
        return 1e-3 / scale

    def unravel_dt(self, t: float = 0.0) -> float:
        """Jump-sampling step; follows ||K||, so it shrinks as the truncation grows."""
        return JUMP_STEP / max(_spectral_norm(self.k_operator(t)), 1e-12)


def _generator(model: LindbladModel):
    """rhs(rho, t) for Hermitian rho; operators frozen once when the model is not driven."""

    def parts(t):
        return model.h(t), model.jump_operators(t), model.k_operator(t)

    frozen = None if model.driven else parts(0.0)

    def rhs(rho: np.ndarray, t: float) -> np.ndarray:
        h, jumps, k = frozen if frozen is not None else parts(t)
        hr = _mul(h, rho)
        kr = _mul(k, rho)
        out = (-1j / HBAR) * (hr - dagger(hr)) - 0.5 * (kr + dagger(kr))
        for op in jumps:
            x = _mul(op, rho)
            out = out + _mul(op, dagger(x))
        return out

    return rhs


def liouvillian_apply(m: LindbladModel, rho, t: float = 0.0) -> np.ndarray:
    r = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    if r.shape != (m.dim, m.dim):
        raise ValueError(f"state shape {r.shape} does not match model dimension {m.dim}")
    return hermitize(_generator(m)(r, t))


def liouvillian_superoperator(m: LindbladModel, t: float = 0.0) -> np.ndarray:
    """Generator on row-major vectorised matrices: vec(A X B) = kron(A, B^T) vec(X)."""
    d = m.dim
    eye = np.eye(d)
    h = _dense(m.h(t))
    k = _dense(m.k_operator(t))
    out = (-1j / HBAR) * (np.kron(h, eye) - np.kron(eye, h.T))
    out = out - 0.5 * (np.kron(k, eye) + np.kron(eye, k.T))
    for op in m.jump_operators(t):
        l = _dense(op)
        out = out + np.kron(l, np.conj(l))
    return out


def numeric_steady_state(m: LindbladModel, t: float = 0.0, *, method: str = "null_space") -> DensityOperator:
    if method == "one_step":
        return channels.invariant_state(one_step_map(m, m.default_dt(t) * 100, t))
    if method != "null_space":
        raise ValueError(f"unknown steady-state method {method!r}")
    kernel = linalg.null_space(liouvillian_superoperator(m, t), rcond=1e-10)
    if kernel.shape[1] != 1:
        raise NoFixedPointError(f"Liouvillian kernel has dimension {kernel.shape[1]}", "lindblad")
    rho = kernel[:, 0].reshape(m.dim, m.dim)
    rho = hermitize(rho / np.trace(rho))
    return DensityOperator.from_matrix(rho)


@dataclass(frozen=True)
class IntegrationResult:
    times: np.ndarray
    states: Tuple[DensityOperator, ...]
    dt: float
    steps: int
    min_eigenvalue: float
    max_trace_error: float
    richardson_residual: Optional[float] = None

    @property
    def final(self) -> DensityOperator:
        return self.states[-1]


def _within_psd_tolerance(rho: np.ndarray, shift: np.ndarray) -> bool:
    """Cholesky of rho + tau I exists exactly when no eigenvalue lies below -tau."""
    try:
        np.linalg.cholesky(rho + shift)
    except np.linalg.LinAlgError:
        return False
    return True


def _propagate(rhs, rho0: np.ndarray, grid: np.ndarray, dt: float, check_positivity: bool):
    rho = rho0.copy()
    out = [rho.copy()]
    steps = 0
    min_eig = float(np.linalg.eigvalsh(hermitize(rho))[0])
    max_trace = 0.0
    shift = TAU_PSD * np.eye(rho.shape[0])
    for t0, t1 in zip(grid[:-1], grid[1:]):
        n_sub = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
        h = (t1 - t0) / n_sub
        t = t0
        for _ in range(n_sub):
            k1 = rhs(rho, t)
            k2 = rhs(rho + 0.5 * h * k1, t + 0.5 * h)
            k3 = rhs(rho + 0.5 * h * k2, t + 0.5 * h)
            k4 = rhs(rho + h * k3, t + h)
            rho = hermitize(rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
            t += h
            steps += 1
            max_trace = max(max_trace, abs(float(np.real(np.trace(rho))) - 1.0))
            # every substep, not only the output grid
            if check_positivity and not _within_psd_tolerance(rho, shift):
                low = float(np.linalg.eigvalsh(rho)[0])
                raise StepSizeError(f"state lost positivity at t={t:g} (eigenvalue {low:.3e}); reduce dt", "lindblad")
        if check_positivity:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(rho)[0]))
        out.append(rho.copy())
    return out, steps, min_eig, max_trace


def integrate(
    m: LindbladModel,
    rho0: DensityOperator,
    t_grid: Sequence[float],
    *,
    dt: Optional[float] = None,
    richardson: bool = False,
) -> IntegrationResult:
    """Fixed-step RK4 with outputs on ``t_grid``; the first grid point is the start time."""
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    if rho0.dim != m.dim:
        raise ValueError("initial state does not match the model dimension")
    dt = dt or m.default_dt(grid[0])
    rhs = _generator(m)
    states, steps, min_eig, max_trace = _propagate(rhs, rho0.matrix, grid, dt, True)
    if max_trace > TAU_TR:
        logger.warning("trace drifted by %.2e during integration of %s", max_trace, m.name)
    residual = None
    if richardson and grid.size > 1:
        finer, _, _, _ = _propagate(rhs, rho0.matrix, grid[[0, -1]], dt / 2, False)
        residual = float(np.linalg.norm(finer[-1] - states[-1]))
        if residual > TAU_ODE:
            logger.warning("step halving moved the endpoint by %.2e (> %.0e)", residual, TAU_ODE)
    logger.debug("integrated %s over %d RK4 steps (dt=%g)", m.name, steps, dt)
    dims = rho0.dims
    return IntegrationResult(
        grid,
        tuple(DensityOperator.from_matrix(s, dims, validate=False) for s in states),
        dt,
        steps,
        min_eig,
        max_trace,
        residual,
    )


def trace_preservation_residual(m: LindbladModel, t: float = 0.0) -> float:
    """|| sum_k (L_k^dagger L_k - L_k L_k^dagger exp(-sigma_k)) ||."""
    sigmas = m.sigma_e()
    total = np.zeros((m.dim, m.dim), dtype=complex)
    for jump in m.jumps:
        l = _dense(jump.at(t))
        total += dagger(l) @ l - l @ dagger(l) * np.exp(-sigmas[jump.label])
    return float(np.linalg.norm(total))


def assign_environment_entropies(
    m: LindbladModel, t: float = 0.0, sigma_e: Optional[Dict[str, float]] = None
) -> LindbladModel:
    """Pair L_j ~ L_i^dagger and set sigma_i = ln(Gamma_i / Gamma_j); user values fill the rest."""
    given = dict(sigma_e or {})
    ops = {j.label: _dense(j.at(t)) for j in m.jumps}
    norms = {label: float(np.linalg.norm(op)) for label, op in ops.items()}
    assigned: Dict[str, float] = {}
    for label, op in ops.items():
        if label in given:
            assigned[label] = float(given[label])
            continue
        if norms[label] == 0.0:
            assigned[label] = 0.0
            continue
        unit_adj = dagger(op) / norms[label]
        for other, candidate in ops.items():
            if norms[other] == 0.0:
                continue
            overlap = abs(np.vdot(unit_adj, candidate / norms[other]))
            if overlap >= 1 - TAU_PAIR:
                assigned[label] = 2.0 * (math.log(norms[label]) - math.log(norms[other]))
                break
    missing = [j.label for j in m.jumps if j.label not in assigned]
    if missing:
        raise MissingEntropyAssignmentError(
            f"jumps {missing} have no partner; supply their environment entropies", "lindblad"
        )
    model = m.with_sigma(assigned)
    residual = trace_preservation_residual(model, t)
    scale = max(1.0, _spectral_norm(model.k_operator(t)))
    if residual > TAU_CONS * scale:
        raise InconsistentEntropyAssignmentError(
            f"environment entropies break trace preservation of the backward dynamics (residual {residual:.3e})",
            "lindblad",
        )
    logger.debug("assigned environment entropies for %s: %s", m.name, assigned)
    return model


@dataclass(frozen=True)
class SplitDiagnostics:
    h_k_commutator: float
    h_phi_commutator: float
    ladder_satisfied: bool
    dphi: Dict[str, float]
    witness: Optional[Tuple[Any, Tuple[int, int], float]] = None

    @property
    def available(self) -> bool:
        return (
            self.ladder_satisfied
            and self.h_k_commutator <= TAU_SPLIT
            and self.h_phi_commutator <= TAU_SPLIT
        )


def split_diagnostics(m: LindbladModel, t: float = 0.0) -> SplitDiagnostics:
    """Commutator norms and per-jump potential changes deciding whether dphi_0 = 0 holds."""
    h = _dense(m.h(t))
    k = _dense(m.k_operator(t))
    phi = m.nonequilibrium_potential(t)
    phi_matrix = phi.matrix
    jumps = KrausMap(tuple(KrausOperator(_dense(j.at(t)), j.label) for j in m.jumps), m.dim)
    report = channels.check_ladder_condition(jumps, phi)
    return SplitDiagnostics(
        float(np.linalg.norm(h @ k - k @ h)),
        float(np.linalg.norm(h @ phi_matrix - phi_matrix @ h)),
        report.satisfied,
        dict(report.dphi) if report.satisfied else {},
        report.witness,
    )


def no_jump_operator(m: LindbladModel, dt: float, t: float = 0.0) -> np.ndarray:
    """M_0 = exp(-iH dt) (I - dt K)^{1/2}."""
    k = _dense(m.k_operator(t))
    if dt * _spectral_norm(k) >= 1.0:
        raise StepSizeError(f"dt={dt:g} too large for the one-step map (dt*||K|| >= 1)", "lindblad")
    h = _dense(m.h(t))
    return np.asarray(linalg.expm(-1j * dt * h / HBAR) @ linalg.sqrtm(np.eye(m.dim) - dt * k), dtype=complex)


def one_step_map(m: LindbladModel, dt: float, t: float = 0.0) -> KrausMap:
    """M_0 = exp(-iH dt) (I - dt K)^{1/2}, M_k = sqrt(dt) L_k; exactly trace preserving."""
    ops = [KrausOperator(no_jump_operator(m, dt, t), NO_JUMP, 0.0)]
    for jump in m.jumps:
        ops.append(KrausOperator(np.sqrt(dt) * _dense(jump.at(t)), jump.label, jump.sigma_e))
    kraus_map = KrausMap.build(ops)
    try:
        report = channels.check_ladder_condition(kraus_map, m.nonequilibrium_potential(t))
    except QuantumThermoError as exc:  # no usable invariant state: leave dphi unset
        logger.debug("one-step map of %s carries no potential changes: %s", m.name, exc)
        return kraus_map
    if report.satisfied:
        kraus_map = channels.attach_potential_changes(kraus_map, report)
    return kraus_map


@dataclass(frozen=True)
class JumpEvent:
    label: str
    time: float
    sigma_e: float
    dphi: Optional[float] = None


@dataclass(frozen=True)
class JumpTrajectory:
    n: int
    events: Tuple[JumpEvent, ...]
    m: int
    split_available: bool = False
    path: Optional[Tuple[Tuple[np.ndarray, np.ndarray], ...]] = None
    final_vector: Optional[np.ndarray] = None

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("jump times must be strictly increasing")

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(e.label for e in self.events)


class _WaitingTimes:
    """No-jump propagation under H_eff via its eigen-decomposition."""

    def __init__(self, h_eff: np.ndarray):
        self.h_eff = h_eff
        self.w, self.v = np.linalg.eig(h_eff)
        self.v_inv = np.linalg.inv(self.v)

    def evolve(self, psi: np.ndarray, tau: float) -> np.ndarray:
        return self.v @ (np.exp(-1j * self.w * tau / HBAR) * (self.v_inv @ psi))

    def survival(self, psi: np.ndarray, tau: float) -> float:
        phi = self.evolve(psi, tau)
        return float(np.real(np.vdot(phi, phi)))

    def next_jump(self, psi: np.ndarray, horizon: float, target: float) -> Optional[float]:
        hp = self.h_eff @ psi
        lam = np.vdot(psi, hp)
        if np.linalg.norm(hp - lam * psi) < 1e-12:
            rate = -2.0 * float(np.imag(lam)) / HBAR
            if rate <= 0:
                return None
            tau = -math.log(target) / rate
            return tau if tau <= horizon else None
        if self.survival(psi, horizon) > target:
            return None
        return optimize.brentq(lambda s: self.survival(psi, s) - target, 0.0, horizon, xtol=1e-13)


def _choose(weights: np.ndarray, u: float) -> int:
    cumulative = np.cumsum(weights / weights.sum())
    return min(int(np.searchsorted(cumulative, u, side="right")), len(weights) - 1)


def unravel(
    m: LindbladModel,
    rho0: DensityOperator,
    t_f: float,
    dt: float,
    n: int,
    seed: int,
    *,
    final_basis: Optional[ProjectiveBasis] = None,
    initial_basis: Optional[ProjectiveBasis] = None,
    method: str = "step",
    workers: int = 1,
    record_path: bool = False,
) -> List[JumpTrajectory]:
    if method not in ("step", "waiting_time"):
        raise ValueError(f"unknown unraveling method {method!r}")
    if method == "waiting_time" and m.driven:
        raise ValueError("waiting-time sampling needs a model with frozen parameters")
    if n == 0:
        return []
    p_init, basis_init = measurement_basis(rho0, initial_basis, "initial")
    basis_final = final_basis or basis_init
    max_rate = max((_spectral_norm(_adj(op) @ op) for op in m.jump_operators(0.0)), default=0.0)
    if method == "step":
        if dt * max_rate > 1.0:
            raise StepSizeError(f"dt={dt:g} gives jump probabilities above one", "lindblad")
        if dt * max_rate > STEP_WARNING:
            logger.warning("unraveling step dt*max||L^dagger L|| = %.3f exceeds %.2f", dt * max_rate, STEP_WARNING)
    sigmas = m.sigma_e()
    diagnostics = split_diagnostics(m) if not m.driven else None
    split = bool(diagnostics and diagnostics.available)
    dphi = diagnostics.dphi if split else {}
    n_steps = max(1, int(round(t_f / dt)))
    cum_init = np.cumsum(p_init / p_init.sum())
    labels = [j.label for j in m.jumps]

    if method == "waiting_time":
        jumps = [_dense(op) for op in m.jump_operators(0.0)]
        h_eff = _dense(m.h(0.0)) - 0.5j * HBAR * _dense(m.k_operator(0.0))
        waits = _WaitingTimes(h_eff)
    else:
        # shared by all trajectories; a frozen model only ever asks for step 0
        @lru_cache(maxsize=None)
        def step_operators(s: int):
            t = s * dt
            return no_jump_operator(m, dt, t), [_dense(op) for op in m.jump_operators(t)]

        step_operators(0)

    def event(label: str, time: float) -> JumpEvent:
        return JumpEvent(label, time, sigmas[label], dphi.get(label) if split else None)

    def run_waiting(rng: np.random.Generator, psi: np.ndarray):
        events, path, t = [], [], 0.0
        while True:
            tau = waits.next_jump(psi, t_f - t, 1.0 - rng.random())
            if tau is None:
                psi = waits.evolve(psi, t_f - t)
                return events, path, psi / np.linalg.norm(psi)
            before = waits.evolve(psi, tau)
            before = before / np.linalg.norm(before)
            candidates = [op @ before for op in jumps]
            weights = np.array([np.real(np.vdot(c, c)) for c in candidates])
            k = _choose(weights, rng.random())
            psi = candidates[k] / np.sqrt(weights[k])
            t += tau
            events.append(event(labels[k], t))
            if record_path:
                path.append((before, psi))

    def run_steps(rng: np.random.Generator, psi: np.ndarray):
        events, path = [], []
        for s in range(n_steps):
            t = s * dt
            m0, ops = step_operators(s if m.driven else 0)
            candidates = [op @ psi for op in ops]
            weights = np.array([dt * np.real(np.vdot(c, c)) for c in candidates])
            total = weights.sum()
            if total > 1.0:
                raise StepSizeError(f"jump probability {total:.3f} exceeds one at t={t:g}", "lindblad")
            u = rng.random()
            if u < total:
                k = _choose(weights, u / total)
                after = candidates[k] / np.linalg.norm(candidates[k])
                events.append(event(labels[k], (s + 1) * dt))
                if record_path:
                    path.append((psi, after))
                psi = after
            else:
                psi = m0 @ psi
                norm = np.linalg.norm(psi)
                if norm == 0.0:
                    raise StepSizeError("no-jump evolution annihilated the state", "lindblad")
                psi = psi / norm
        return events, path, psi

    def draw(i: int) -> JumpTrajectory:
        rng = trajectory_rng(seed, i)
        start = min(int(np.searchsorted(cum_init, rng.random(), side="right")), len(p_init) - 1)
        psi = basis_init.vector(start).astype(complex)
        runner = run_waiting if method == "waiting_time" else run_steps
        events, path, psi = runner(rng, psi)
        final = np.abs(dagger(basis_final.vectors) @ psi) ** 2
        end = _choose(final, rng.random())
        if record_path:
            return JumpTrajectory(start, tuple(events), end, split, tuple(path), psi)
        return JumpTrajectory(start, tuple(events), end, split)

    trajectories = run_indexed(draw, n, workers)
    logger.debug(
        "unraveled %d trajectories of %s (%s, %d jumps)",
        n, m.name, method, sum(len(tr.events) for tr in trajectories),
    )
    return trajectories


def trajectory_entropies(
    traj: JumpTrajectory, m: LindbladModel, boundary: Tuple[Sequence[float], Sequence[float]]
) -> EntropyLedger:
    """Ledger of one jump trajectory; ``boundary`` holds (p_n, p~_m) weight vectors."""
    p_initial, p_final = boundary
    with np.errstate(divide="ignore"):
        sigma_s = float(np.log(p_initial[traj.n]) - np.log(p_final[traj.m]))
    sigmas = m.sigma_e()
    sigma_e = float(sum(sigmas[e.label] for e in traj.events))
    delta_s = sigma_s + sigma_e
    infinite = not math.isfinite(delta_s)
    if not traj.split_available or any(e.dphi is None for e in traj.events):
        return EntropyLedger(sigma_s, sigma_e, 0.0, delta_s, infinite=infinite)
    dphi = float(sum(e.dphi for e in traj.events))
    return EntropyLedger(sigma_s, sigma_e, 0.0, delta_s, sigma_e + dphi, sigma_s - dphi, True, dphi, infinite=infinite)


@dataclass(frozen=True)
class JumpEnsemble:
    trajectories: Tuple[JumpTrajectory, ...]
    ledgers: Tuple[EntropyLedger, ...]
    p_initial: np.ndarray
    p_final: np.ndarray
    final_state: DensityOperator

    def integral(self, which: str = "total"):
        return integral_ft_from_ledgers(self.ledgers, which)


def jump_ensemble(
    m: LindbladModel,
    rho0: DensityOperator,
    t_f: float,
    dt: float,
    n: int,
    seed: int,
    *,
    final_basis: Optional[ProjectiveBasis] = None,
    method: str = "step",
    workers: int = 1,
) -> JumpEnsemble:
    """Unravel and attach ledgers; backward weights p~_m are the final populations of rho(t_f)."""
    p_initial, basis_init = measurement_basis(rho0, None, "initial")
    basis_final = final_basis or basis_init
    final_state = integrate(m, rho0, [0.0, t_f]).final
    p_final = basis_final.weights(final_state)
    trajectories = unravel(
        m, rho0, t_f, dt, n, seed, final_basis=basis_final, initial_basis=basis_init, method=method, workers=workers
    )
    ledgers = tuple(trajectory_entropies(tr, m, (p_initial, p_final)) for tr in trajectories)
    return JumpEnsemble(tuple(trajectories), ledgers, p_initial, p_final, final_state)


def ensemble_state(trajectory_states: Sequence[np.ndarray]) -> Tuple[np.ndarray, float]:
    """Average of pure states and a trace-norm standard error estimate."""
    states = [np.outer(psi, np.conj(psi)) for psi in trajectory_states]
    mean = sum(states) / len(states)
    spread = np.sqrt(sum(np.abs(s - mean) ** 2 for s in states) / max(1, len(states) - 1))
    return mean, float(np.sum(spread) / np.sqrt(len(states)))


@dataclass(frozen=True)
class RatesSample:
    t: float
    s_dot: float
    phi_dot: float
    sigma_e_dot: float
    s_dot_i: float
    s_dot_a: float
    s_dot_na: float
    condition: float = 1.0


def entropy_rates(m: LindbladModel, rho, t: float = 0.0) -> RatesSample:
    r = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    rho_dot = liouvillian_apply(m, r, t)
    log_rho, condition = clamped_log(r)
    s_dot = -float(np.real(np.trace(rho_dot @ log_rho)))
    phi_dot = float(np.real(np.trace(rho_dot @ m.phi(t))))
    sigmas = m.sigma_e()
    sigma_e_dot = 0.0
    for jump in m.jumps:
        x = _mul(jump.at(t), r)
        sigma_e_dot += float(np.real(np.trace(_mul(jump.at(t), dagger(x))))) * sigmas[jump.label]
    s_dot_na = s_dot - phi_dot
    s_dot_a = sigma_e_dot + phi_dot
    return RatesSample(t, s_dot, phi_dot, sigma_e_dot, s_dot_na + s_dot_a, s_dot_a, s_dot_na, condition)


def spohn_relaxation(rho0, rho_t, pi) -> float:
    return relative_entropy(rho0, pi) - relative_entropy(rho_t, pi)


def relaxation_curve(
    m: LindbladModel, rho0: DensityOperator, t_grid: Sequence[float], pi: Optional[DensityOperator] = None
) -> List[float]:
    pi = pi or m.pi(float(t_grid[0]))
    result = integrate(m, rho0, t_grid)
    return [spohn_relaxation(rho0, state, pi) for state in result.states]


def potential_rate_split(m: LindbladModel, rho, t: float, dt: float) -> Tuple[float, float]:
    """(boundary, path) rates with boundary = d/dt Tr[rho Phi] and path = -Tr[rho dPhi/dt]."""
    r = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    phi = m.phi(t)
    phi_dot = (m.phi(t + dt) - m.phi(t - dt)) / (2 * dt) if m.driven else np.zeros_like(phi)
    rho_dot = liouvillian_apply(m, r, t)
    path = -float(np.real(np.trace(r @ phi_dot)))
    boundary = float(np.real(np.trace(rho_dot @ phi))) - path
    return boundary, path
