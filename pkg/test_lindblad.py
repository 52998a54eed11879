from dataclasses import replace

import numpy as np
import pytest

from app.models.experiment import CavityParams, MachineParams
from app.services import lindblad, model_library
from app.services.lindblad import JumpEvent, JumpOperator, JumpTrajectory, LindbladModel
from app.services.quantum_core import DensityOperator, ProjectiveBasis, relative_entropy, trace_distance
from app.utils.errors import (
    InconsistentEntropyAssignmentError,
    MissingEntropyAssignmentError,
    StepSizeError,
)
from conftest import random_state


@pytest.fixture
def warm_machine():
    # hot baths keep exp(-delta_s) light-tailed for Monte Carlo checks
    return model_library.build_machine(MachineParams(hw1=1.0, hw2=1.0, beta1=1.0, beta2=0.5, beta3=0.8))


def _lowering():
    return np.array([[0, 1], [0, 0]], dtype=complex)


def test_superoperator_matches_generator(machine, cavity, rng):
    for model in (machine, cavity):
        rho = random_state(rng, model.dim).matrix
        image = lindblad.liouvillian_superoperator(model) @ rho.reshape(-1)
        assert np.allclose(image.reshape(model.dim, model.dim), lindblad.liouvillian_apply(model, rho), atol=1e-12)


def test_numeric_steady_state_matches_closed_form(machine):
    exact = machine.pi().matrix
    assert np.allclose(lindblad.numeric_steady_state(machine).matrix, exact, atol=1e-10)
    assert np.allclose(lindblad.numeric_steady_state(machine, method="one_step").matrix, exact, atol=1e-9)
    with pytest.raises(ValueError):
        lindblad.numeric_steady_state(machine, method="power")


def test_machine_environment_entropies(machine, machine_params):
    sigmas = machine.sigma_e()
    p = machine_params
    assert sigmas["down1"] == pytest.approx(p.beta1 * p.hw1, rel=1e-12)
    assert sigmas["up1"] == pytest.approx(-p.beta1 * p.hw1, rel=1e-12)
    assert sigmas["down2"] == pytest.approx(p.beta2 * p.hw2, rel=1e-12)
    assert sigmas["down3"] == pytest.approx(p.beta3 * p.hw3, rel=1e-12)
    assert lindblad.trace_preservation_residual(machine) <= 1e-10


def test_unpaired_jump_needs_an_entropy():
    model = LindbladModel(2, np.zeros((2, 2), dtype=complex), (JumpOperator("decay", _lowering()),))
    with pytest.raises(MissingEntropyAssignmentError):
        lindblad.assign_environment_entropies(model)
    with pytest.raises(MissingEntropyAssignmentError):
        model.sigma_e()
    # a supplied value that breaks backward trace preservation
    with pytest.raises(InconsistentEntropyAssignmentError):
        lindblad.assign_environment_entropies(model, sigma_e={"decay": 1.0})


def test_hermitian_jump_pairs_with_itself():
    model = LindbladModel(2, np.zeros((2, 2), dtype=complex), (JumpOperator("dephase", np.diag([0.3, -0.3])),))
    assigned = lindblad.assign_environment_entropies(model)
    assert assigned.sigma_e() == {"dephase": 0.0}


def test_split_is_available_for_the_machine(machine):
    diagnostics = lindblad.split_diagnostics(machine)
    assert diagnostics.available
    pi = np.real(np.diag(machine.pi().matrix))
    # down1 takes A to g: potential change phi_g - phi_A
    assert diagnostics.dphi["down1"] == pytest.approx(np.log(pi[1] / pi[0]), abs=1e-9)
    assert diagnostics.dphi["up3"] == pytest.approx(np.log(pi[0] / pi[2]), abs=1e-9)


def test_split_is_unavailable_for_the_driven_cavity(cavity):
    diagnostics = lindblad.split_diagnostics(cavity)
    assert not diagnostics.ladder_satisfied
    assert not diagnostics.available
    assert diagnostics.witness is not None
    assert diagnostics.h_k_commutator > 1e-9


def test_relaxation_to_the_steady_state(machine):
    ground = DensityOperator.diagonal([1.0, 0.0, 0.0])
    result = lindblad.integrate(machine, ground, np.linspace(0.0, 30.0, 31), dt=0.01, richardson=True)
    assert result.steps == 3000
    assert trace_distance(result.final, machine.pi()) <= 1e-9
    assert result.max_trace_error <= 1e-10
    assert result.min_eigenvalue >= -1e-12
    assert result.richardson_residual <= 1e-8
    for state in result.states[1:]:
        rates = lindblad.entropy_rates(machine, state)
        assert rates.s_dot_na >= -1e-9
        assert rates.s_dot_a >= -1e-9
        assert rates.s_dot_i == pytest.approx(rates.s_dot + rates.sigma_e_dot, abs=1e-10)
    stationary = lindblad.entropy_rates(machine, machine.pi())
    assert stationary.s_dot == pytest.approx(0.0, abs=1e-10)
    assert stationary.s_dot_na == pytest.approx(0.0, abs=1e-10)
    assert stationary.s_dot_a > 0


def test_integrate_rejects_unstable_steps(machine):
    ground = DensityOperator.diagonal([1.0, 0.0, 0.0])
    with pytest.raises(StepSizeError):
        lindblad.integrate(machine, ground, np.linspace(0.0, 20.0, 11), dt=2.0)
    with pytest.raises(StepSizeError):
        lindblad.one_step_map(machine, 1.0)
    with pytest.raises(ValueError):
        lindblad.integrate(machine, ground, [0.0, 0.0])


def test_relaxation_curve_is_monotone(machine):
    rho0 = DensityOperator.diagonal([0.2, 0.3, 0.5])
    curve = lindblad.relaxation_curve(machine, rho0, np.linspace(0.0, 4.0, 9))
    assert curve[0] == pytest.approx(0.0, abs=1e-14)
    assert all(b >= a - 1e-12 for a, b in zip(curve, curve[1:]))
    # fully relaxed: the whole initial distance to pi has been produced
    full = lindblad.spohn_relaxation(rho0, machine.pi(), machine.pi())
    assert full == pytest.approx(relative_entropy(rho0, machine.pi()), abs=1e-12)
    assert curve[-1] <= full + 1e-12


def test_potential_rate_split_for_frozen_models(machine, rng):
    rho = random_state(rng, 3)
    boundary, path = lindblad.potential_rate_split(machine, rho, 0.0, 1e-4)
    assert path == 0.0
    assert boundary == pytest.approx(lindblad.entropy_rates(machine, rho).phi_dot, abs=1e-12)


def test_unraveling_is_reproducible(warm_machine):
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    first = lindblad.unravel(warm_machine, rho0, 2.0, 0.01, 60, 5, method="waiting_time")
    second = lindblad.unravel(warm_machine, rho0, 2.0, 0.01, 60, 5, method="waiting_time", workers=3)
    assert [(t.n, t.labels, t.m) for t in first] == [(t.n, t.labels, t.m) for t in second]
    for traj in first:
        times = [e.time for e in traj.events]
        assert all(0.0 < t <= 2.0 for t in times)
        assert traj.split_available
    assert lindblad.unravel(warm_machine, rho0, 2.0, 0.01, 0, 5) == []


def test_step_unraveling_jumps_on_the_grid(warm_machine):
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    trajs = lindblad.unravel(warm_machine, rho0, 0.5, 0.01, 200, 9)
    labels = {j.label for j in warm_machine.jumps}
    for traj in trajs:
        for e in traj.events:
            assert e.label in labels
            assert e.time / 0.01 == pytest.approx(round(e.time / 0.01), abs=1e-9)


def test_unravel_guards(warm_machine):
    rho0 = warm_machine.pi()
    with pytest.raises(StepSizeError):
        lindblad.unravel(warm_machine, rho0, 1.0, 1.0, 1, 0)
    driven = replace(warm_machine, hamiltonian=lambda t: warm_machine.h())
    with pytest.raises(ValueError):
        lindblad.unravel(driven, rho0, 1.0, 0.01, 1, 0, method="waiting_time")
    with pytest.raises(ValueError):
        lindblad.unravel(warm_machine, rho0, 1.0, 0.01, 1, 0, method="euler")


def test_jump_times_must_increase():
    with pytest.raises(ValueError):
        JumpTrajectory(0, (JumpEvent("up1", 2.0, -1.0), JumpEvent("down1", 1.0, 1.0)), 0)


def test_ensemble_average_reproduces_the_master_equation(warm_machine):
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    n = 2000
    trajs = lindblad.unravel(
        warm_machine, rho0, 1.0, 0.01, n, 17,
        method="waiting_time", record_path=True, final_basis=ProjectiveBasis.computational(3),
    )
    mean, err = lindblad.ensemble_state([t.final_vector for t in trajs])
    assert err > 0
    exact = np.real(np.diag(lindblad.integrate(warm_machine, rho0, [0.0, 1.0]).final.matrix))
    sampled = np.real(np.diag(mean))
    for p, q in zip(exact, sampled):
        assert abs(p - q) <= 4 * np.sqrt(p * (1 - p) / n)
    for traj in trajs:
        assert len(traj.path) == len(traj.events)


def test_jump_ledgers_add_up(warm_machine):
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    ensemble = lindblad.jump_ensemble(warm_machine, rho0, 1.0, 0.01, 300, 4, method="waiting_time")
    assert len(ensemble.ledgers) == 300
    assert ensemble.p_final.sum() == pytest.approx(1.0)
    sigmas = warm_machine.sigma_e()
    for traj, ledger in zip(ensemble.trajectories, ensemble.ledgers):
        assert ledger.sigma_e == pytest.approx(sum(sigmas[e.label] for e in traj.events), abs=1e-12)
        assert ledger.delta_s == pytest.approx(ledger.sigma_s + ledger.sigma_e, abs=1e-12)
        assert ledger.delta_s == pytest.approx(ledger.delta_s_a + ledger.delta_s_na, abs=1e-10)


@pytest.mark.slow
def test_jump_integral_fts_within_three_standard_errors(warm_machine):
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    ensemble = lindblad.jump_ensemble(warm_machine, rho0, 1.5, 0.01, 20000, 2024, method="waiting_time", workers=4)
    for which in ("total", "adiabatic", "nonadiabatic"):
        result = ensemble.integral(which)
        assert result.available
        assert abs(result.value - 1.0) <= 3 * result.stderr, which


def test_cavity_unraveling_reports_total_only(cavity, cavity_params):
    rho0 = model_library.cavity_thermal_state(cavity_params, cavity.dim)
    ensemble = lindblad.jump_ensemble(cavity, rho0, 10.0, 0.5, 20, 3, method="waiting_time")
    assert ensemble.integral("total").available
    assert not ensemble.integral("adiabatic").available
    assert not ensemble.integral("nonadiabatic").available


def test_positivity_is_checked_on_every_substep(machine, monkeypatch):
    calls = []
    original = lindblad._within_psd_tolerance

    def counting(rho, shift):
        calls.append(rho)
        return original(rho, shift)

    monkeypatch.setattr(lindblad, "_within_psd_tolerance", counting)
    ground = DensityOperator.diagonal([1.0, 0.0, 0.0])
    # one output interval spanning many substeps
    result = lindblad.integrate(machine, ground, [0.0, 1.0], dt=0.01)
    assert result.steps == 100
    assert len(calls) == result.steps


def test_positivity_loss_between_grid_points_is_reported(machine, monkeypatch):
    seen = []

    def fails_third(rho, shift):
        seen.append(rho)
        return len(seen) < 3

    monkeypatch.setattr(lindblad, "_within_psd_tolerance", fails_third)
    with pytest.raises(StepSizeError, match="t=0.03"):
        lindblad.integrate(machine, DensityOperator.diagonal([1.0, 0.0, 0.0]), [0.0, 1.0], dt=0.01)


def test_psd_tolerance_matches_the_eigenvalue_floor():
    shift = lindblad.TAU_PSD * np.eye(2)
    assert lindblad._within_psd_tolerance(np.diag([1.0, -0.5 * lindblad.TAU_PSD]), shift)
    assert not lindblad._within_psd_tolerance(np.diag([1.0, -2 * lindblad.TAU_PSD]), shift)


def test_driven_unraveling_builds_each_step_once(warm_machine, monkeypatch):
    calls = []
    original = lindblad.no_jump_operator

    def counting(m, dt, t=0.0):
        calls.append(t)
        return original(m, dt, t)

    monkeypatch.setattr(lindblad, "no_jump_operator", counting)
    rho0 = DensityOperator.diagonal([0.5, 0.3, 0.2])
    driven = replace(warm_machine, hamiltonian=lambda t: warm_machine.h())
    assert driven.driven
    trajs = lindblad.unravel(driven, rho0, 0.2, 0.01, 10, 5)
    # 20 steps shared across all 10 trajectories
    assert len(calls) == 20
    assert sorted(calls) == pytest.approx([s * 0.01 for s in range(20)])
    calls.clear()
    frozen = lindblad.unravel(warm_machine, rho0, 0.2, 0.01, 10, 5)
    assert len(calls) == 1
    assert [(t.n, t.labels, t.m) for t in trajs] == [(t.n, t.labels, t.m) for t in frozen]


def _machine_case():
    model = model_library.build_machine(MachineParams(hw1=1.0, hw2=1.0, beta1=1.0, beta2=0.5, beta3=0.8))
    return model, DensityOperator.diagonal([0.5, 0.3, 0.2]), 1.0, 0.02


def _cavity_case():
    p = CavityParams(eps_abs=0.005, gamma0=0.01, beta=2.0, n_max=30)
    model = model_library.build_cavity(p)
    return model, model_library.cavity_thermal_state(p, model.dim), p.gamma0, 0.5


@pytest.mark.slow
@pytest.mark.parametrize(
    "case, method",
    [(_machine_case, "step"), (_cavity_case, "step"), (_cavity_case, "waiting_time")],
    ids=["machine-step", "cavity-step", "cavity-waiting"],
)
def test_unraveling_tracks_the_master_equation(case, method):
    model, rho0, gamma, dt = case()
    n = 800
    for scale in (1.0, 5.0, 20.0):
        t_f = scale / gamma
        trajs = lindblad.unravel(model, rho0, t_f, dt, n, 31, method=method, record_path=True, workers=4)
        mean, err = lindblad.ensemble_state([t.final_vector for t in trajs])
        exact = lindblad.integrate(model, rho0, [0.0, t_f]).final
        distance = trace_distance(DensityOperator.from_matrix(mean, validate=False), exact)
        assert distance <= max(5 * err, 10 * dt * gamma), (scale, distance, err)
