import numpy as np
import pytest

from app.services import channels, lindblad
from app.services.channels import KrausMap, KrausOperator
from app.services.quantum_core import (
    CONJUGATION,
    DensityOperator,
    ProjectiveBasis,
    gibbs_state,
    partial_trace,
    tensor,
)
from app.utils.errors import (
    CompletenessError,
    LadderConditionError,
    MissingEntropyAssignmentError,
    NotPositiveDefiniteError,
)
from conftest import random_state, random_unitary


def _thermal_env(dim=3, beta=0.7):
    rho_e = gibbs_state(np.diag(np.arange(dim, dtype=float)), beta)
    return np.real(np.diag(rho_e.matrix)), ProjectiveBasis.computational(dim)


def test_kraus_from_unitary_matches_partial_trace(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis)
    assert kraus_map.completeness_residual() <= 1e-9
    assert len(kraus_map) == 9
    rho_s = random_state(rng, 2)
    rho_e = DensityOperator.diagonal(q)
    joint = u @ tensor(rho_s, rho_e).matrix @ u.conj().T
    expected = partial_trace(DensityOperator.from_matrix(joint, (2, 3), validate=False), 0)
    assert np.allclose(channels.apply(kraus_map, rho_s).matrix, expected.matrix, atol=1e-12)


def test_operation_probabilities_sum_to_one(rng):
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(random_unitary(rng, 6), q, basis, basis)
    rho_s = random_state(rng, 2)
    outcomes = [channels.apply_operation(op, rho_s) for op in kraus_map.operators]
    assert sum(p for _, p in outcomes) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(sum(m for m, _ in outcomes), channels.apply(kraus_map, rho_s).matrix, atol=1e-12)
    with pytest.raises(ValueError):
        channels.apply_operation(kraus_map.operators[0], random_state(rng, 3))


def test_kraus_labels_carry_environment_entropy(rng):
    u = random_unitary(rng, 4)
    q = np.array([0.8, 0.2])
    q_tilde = np.array([0.6, 0.4])
    basis = ProjectiveBasis.computational(2)
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis, env_final_weights=q_tilde)
    op = kraus_map.operator((0, 1))
    assert op.sigma_e == pytest.approx(np.log(0.8) - np.log(0.4))


def test_incomplete_map_is_rejected():
    with pytest.raises(CompletenessError):
        KrausMap.build([KrausOperator(0.5 * np.eye(2), "half")])


def test_transfer_matrix_is_row_major(rng):
    u = random_unitary(rng, 4)
    q, basis = _thermal_env(2)
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis)
    rho = random_state(rng, 2)
    image = channels.transfer_matrix(kraus_map) @ rho.matrix.reshape(-1)
    assert np.allclose(image.reshape(2, 2), channels.apply(kraus_map, rho).matrix, atol=1e-12)


def test_invariant_state_is_fixed(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis)
    pi = channels.invariant_state(kraus_map)
    assert np.allclose(channels.apply(kraus_map, pi).matrix, pi.matrix, atol=1e-9)
    assert np.real(np.trace(pi.matrix)) == pytest.approx(1.0)


def test_unital_map_has_maximally_mixed_invariant_state():
    ops = [KrausOperator(np.sqrt(0.5) * np.eye(2), "id"), KrausOperator(np.sqrt(0.5) * np.diag([1, -1]), "z")]
    pi = channels.invariant_state(KrausMap.build(ops))
    assert np.allclose(pi.matrix, np.eye(2) / 2)


def test_singular_invariant_state_is_rejected():
    # amplitude damping to the ground state
    g = 0.3
    ops = [
        KrausOperator(np.array([[1, 0], [0, np.sqrt(1 - g)]], dtype=complex), 0),
        KrausOperator(np.array([[0, np.sqrt(g)], [0, 0]], dtype=complex), 1),
    ]
    with pytest.raises(NotPositiveDefiniteError):
        channels.invariant_state(KrausMap.build(ops))


def test_ladder_condition_holds_for_machine_step(machine):
    step = lindblad.one_step_map(machine, 0.01)
    phi = machine.nonequilibrium_potential()
    report = channels.check_ladder_condition(step, phi)
    assert report.satisfied
    for op in step.operators:
        commutator = phi.matrix @ op.matrix - op.matrix @ phi.matrix
        assert np.linalg.norm(commutator - report.dphi[op.label] * op.matrix) <= 1e-9
    assert report.dphi[lindblad.NO_JUMP] == pytest.approx(0.0)
    assert report.dphi["down1"] == pytest.approx(-report.dphi["up1"])


def test_ladder_condition_violation_has_witness(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis)
    phi = channels.nonequilibrium_potential(channels.invariant_state(kraus_map))
    report = channels.check_ladder_condition(kraus_map, phi)
    assert not report.satisfied
    label, (i, j), magnitude = report.witness
    assert label in kraus_map.labels
    assert magnitude > 1e-12
    with pytest.raises(LadderConditionError):
        channels.attach_potential_changes(kraus_map, report)


def test_backward_map_is_complete_for_any_final_weights(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis, env_final_weights=[0.5, 0.3, 0.2])
    backward = channels.backward_map(kraus_map)
    assert backward.completeness_residual() <= 1e-9
    op = kraus_map.operator((0, 2))
    assert backward.operator((2, 0)).sigma_e == pytest.approx(-op.sigma_e)


def test_backward_map_needs_entropies(rng):
    q, basis = _thermal_env(2)
    kraus_map = channels.kraus_from_unitary(random_unitary(rng, 4), q, basis, basis)
    with pytest.raises(MissingEntropyAssignmentError):
        channels.backward_map(kraus_map)


def test_dual_reverse_map_fixes_reversed_invariant_state(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis)
    pi = channels.invariant_state(kraus_map)
    dual_reverse = channels.dual_reverse_map(kraus_map, pi)
    assert dual_reverse.completeness_residual() <= 1e-9
    reversed_pi = CONJUGATION.apply(pi.matrix)
    assert np.allclose(channels.apply(dual_reverse, reversed_pi).matrix, reversed_pi, atol=1e-9)


def test_dual_maps_of_machine_step(machine):
    step = lindblad.one_step_map(machine, 0.01)
    pi = machine.pi()
    dual = channels.dual_map(step, pi)
    dual_reverse = channels.dual_reverse_map(step, pi)
    assert dual.completeness_residual() <= 1e-9
    assert dual_reverse.completeness_residual() <= 1e-9
    for op in dual.operators:
        original = step.operator(op.label)
        factor = np.exp(-0.5 * (original.sigma_e + op.dphi))
        assert np.allclose(op.matrix, factor * original.matrix)
    # Theta^dagger D~ Theta = exp(dphi / 2) M^dagger on every label
    for op in step.operators:
        rev = dual_reverse.operator(op.label)
        assert np.allclose(np.conj(rev.matrix), np.exp(0.5 * op.dphi) * op.matrix.conj().T, atol=1e-10)


def test_dual_map_requires_ladder_condition(rng):
    u = random_unitary(rng, 6)
    q, basis = _thermal_env()
    kraus_map = channels.kraus_from_unitary(u, q, basis, basis, env_final_weights=q)
    with pytest.raises(LadderConditionError):
        channels.dual_map(kraus_map, channels.invariant_state(kraus_map))


def test_expected_potential_change_two_ways(machine, rng):
    step = lindblad.one_step_map(machine, 0.02)
    phi = machine.nonequilibrium_potential()
    rho = random_state(rng, 3)
    weighted, direct = channels.expected_potential_change(step, rho, phi)
    assert weighted == pytest.approx(direct, abs=1e-9)


def test_concatenation_potential_split(machine):
    step = lindblad.one_step_map(machine, 0.05)
    conc = channels.concatenate([step, step, step], [machine.pi()] * 3)
    states = channels.compose(conc, DensityOperator.diagonal([1.0, 0.0, 0.0]))
    assert len(states) == 4
    boundary, path = channels.potential_change_split(conc, states)
    assert path == pytest.approx(0.0, abs=1e-12)
    phi = conc.potentials[0]
    total = sum(channels.expected_potential_change(step, s, phi)[1] for s in states[:-1])
    assert boundary == pytest.approx(total, abs=1e-9)


def test_concatenate_rejects_mismatched_maps(machine):
    step = lindblad.one_step_map(machine, 0.05)
    qubit = KrausMap.build([KrausOperator(np.eye(2, dtype=complex), "id")])
    with pytest.raises(ValueError):
        channels.concatenate([step, qubit], [machine.pi(), DensityOperator.maximally_mixed(2)])


def test_kraus_map_json_form(machine):
    step = lindblad.one_step_map(machine, 0.01)
    data = channels.kraus_map_to_dict(step)
    assert data["dim"] == 3
    restored = channels.kraus_map_from_dict(data)
    assert restored.labels == step.labels
    assert restored.operator("down2").sigma_e == pytest.approx(step.operator("down2").sigma_e)


def test_multipartite_entropies_add_up(rng):
    u = random_unitary(rng, 8)
    basis = ProjectiveBasis.computational(2)
    env = [([0.9, 0.1], basis), ([0.7, 0.3], basis)]
    final_weights = [[0.6, 0.4], [0.5, 0.5]]
    kraus_map = channels.kraus_from_multipartite_unitary(u, env, [basis, basis], env_final_weights=final_weights)
    assert kraus_map.completeness_residual() <= 1e-9
    assert len(kraus_map) == 16
    for op in kraus_map.operators:
        (nu1, mu1), (nu2, mu2) = op.label
        expected = (
            np.log(env[0][0][nu1]) - np.log(final_weights[0][mu1])
            + np.log(env[1][0][nu2]) - np.log(final_weights[1][mu2])
        )
        assert op.sigma_e == pytest.approx(expected)
        assert op.sigma_e == pytest.approx(sum(op.sigma_e_parts))
