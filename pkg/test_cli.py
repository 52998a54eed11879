"""End-to-end checks of the command line and the experiment service."""
import json

import numpy as np
import pytest
import yaml

from app.api import cli
from app.models.experiment import CavityParams
from app.services import model_library
from app.services.experiment_service import (
    ExperimentService,
    apply_overrides,
    binned_histogram,
    exact_histogram,
    parse_config,
    requested_outputs,
    validate_config,
)
from app.services.result_writer import HISTOGRAM_HEADER, LEDGER_HEADER, RATES_HEADER, SWEEP_HEADER
from app.utils.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, ConfigValidationError
from app.utils.formatting import canonical_json, config_hash, pretty_json

CNOT_ENUMERATE = {
    "model": "cnot",
    "params": {"alpha": 0.8, "beta_eps": 2.5},
    "run": {"mode": "enumerate"},
    "outputs": ["histogram", "ft_report", "ledger"],
}

MACHINE = {"hw1": 1.0, "hw2": 1.5, "beta1": 6.0, "beta2": 0.5, "beta3": 4.0}


def _lines(path):
    return path.read_text(encoding="utf-8").splitlines()


def test_validation_reports_every_violation():
    data = {"model": "cnot", "params": {"alpha": 2.0, "beta_eps": 1.0}, "run": {"mode": "enumerate", "seed": -1}}
    with pytest.raises(ConfigValidationError) as info:
        validate_config(data)
    joined = "\n".join(info.value.violations)
    assert len(info.value.violations) == 2
    assert "run.seed" in joined and "params.alpha" in joined


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({**CNOT_ENUMERATE, "run": {"mode": "unravel", "t_final": 1.0, "trajectories": 5}}, "run.mode"),
        ({**CNOT_ENUMERATE, "outputs": ["rates"]}, "outputs"),
        ({"model": "three_level", "params": MACHINE, "run": {"mode": "integrate"}}, "run.t_final"),
        ({"model": "cnot", "params": {"alpha": 0.0, "beta_eps": 1.0}, "run": {"mode": "enumerate"}}, "initial_basis_s"),
        (
            {"model": "cnot", "params": {"alpha": 0.5, "beta_eps": 1.0, "final_basis_e": "x"},
             "run": {"mode": "enumerate", "backward_init": "reset"}},
            "reset",
        ),
        ({"model": "cnot", "params": {"alpha": 0.5, "beta_eps": 1.0}, "run": {"mode": "sample"}}, "run.trajectories"),
        (
            {"model": "cavity", "params": {"eps_abs": 0.005, "gamma0": 0.01, "beta": 2.0, "n_max": 5},
             "run": {"mode": "integrate", "t_final": 1.0}},
            "params.n_max",
        ),
        ({"model": "three_level", "params": {**MACHINE, "beta1": 1.0}, "run": {"mode": "integrate", "t_final": 1.0}},
         "params"),
        ({"model": "cavity", "params": {"eps_abs": 0.005, "gamma0": 0.01, "beta": 2.0, "n_max": 30},
          "run": {"mode": "integrate", "t_final": 1.0, "initial_state": "ground"}}, "run.initial_state"),
    ],
)
def test_cross_field_checks(data, fragment):
    with pytest.raises(ConfigValidationError) as info:
        validate_config(data)
    assert any(fragment in v for v in info.value.violations), info.value.violations


def test_parse_config_rejects_bad_json():
    with pytest.raises(ConfigValidationError):
        parse_config("{not json")
    with pytest.raises(ConfigValidationError):
        parse_config("[1, 2]")


def test_default_outputs_follow_the_mode():
    integrate = parse_config(json.dumps({
        "model": "three_level", "params": MACHINE, "run": {"mode": "integrate", "t_final": 1.0},
    }))
    assert requested_outputs(integrate) == ["rates"]
    assert requested_outputs(parse_config(json.dumps(CNOT_ENUMERATE))) == ["histogram", "ft_report", "ledger"]


def test_overrides_are_recorded_without_touching_the_input():
    data = {"model": "cnot", "params": {}, "run": {"mode": "sample", "seed": 1}}
    updated, overrides = apply_overrides(data, seed=5, trajectories_count=100)
    assert overrides == {"seed": 5, "trajectories": 100}
    assert updated["run"]["seed"] == 5 and updated["run"]["trajectories"] == 100
    assert data["run"] == {"mode": "sample", "seed": 1}
    assert apply_overrides(data)[1] == {}


def test_histogram_helpers():
    centres, probs = exact_histogram([0.5, 0.5 + 1e-14, -1.0], [0.25, 0.25, 0.5])
    assert centres == [-1.0, 0.5]
    assert probs == pytest.approx([0.5, 0.5])
    centres, probs = binned_histogram([0.0, 0.1, 0.2, 1.0, 1.1, 5.0], bin_width=0.5)
    assert sum(probs) == pytest.approx(1.0)
    # bin centres sit half a width above multiples of the width
    assert all(abs((c - 0.25) / 0.5 - round((c - 0.25) / 0.5)) < 1e-9 for c in centres)
    centres, probs = binned_histogram([2.0] * 10)
    assert centres == [2.0] and probs == pytest.approx([1.0])


def test_cnot_enumeration_end_to_end(write_config, tmp_path, capsys):
    path = write_config(CNOT_ENUMERATE)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == [
        "ft_report.json", "histogram.csv", "histogram_correlated.csv", "ledger.csv", "provenance.json",
    ]
    provenance = json.loads((out / "provenance.json").read_text(encoding="utf-8"))
    digest = provenance["config_hash"]
    assert provenance["version"] == "0.1.0"

    histogram = _lines(out / "histogram.csv")
    assert histogram[0] == ",".join(HISTOGRAM_HEADER)
    assert histogram[-1] == f"# config_hash={digest}"
    probabilities = [float(line.split(",")[1]) for line in histogram[1:-1]]
    assert sum(probabilities) == pytest.approx(1.0, abs=1e-12)
    assert _lines(out / "ledger.csv")[0] == ",".join(LEDGER_HEADER)

    report = json.loads((out / "ft_report.json").read_text(encoding="utf-8"))
    assert report["config_hash"] == digest
    assert report["integral_total"]["value"] == pytest.approx(1.0, abs=1e-12)
    assert report["integral_adiabatic"]["available"]
    assert report["detailed_max_residual"] <= 1e-10
    assert report["averages"]["non_inclusive"] >= report["averages"]["inclusive"]
    assert "config_hash" in capsys.readouterr().out


def test_reruns_are_byte_identical(write_config, tmp_path):
    path = write_config(CNOT_ENUMERATE)
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / name)]) == EXIT_OK
    for first in (tmp_path / "a").iterdir():
        assert first.read_bytes() == (tmp_path / "b" / first.name).read_bytes(), first.name


def test_sampling_with_overrides(write_config, tmp_path):
    data = {"model": "cnot", "params": {"alpha": 0.8, "beta_eps": 2.5}, "run": {"mode": "sample", "trajectories": 10}}
    out = tmp_path / "out"
    args = ["run", "--config", str(write_config(data)), "--out", str(out), "--seed", "3", "--trajectories", "500"]
    assert cli.main(args) == EXIT_OK
    provenance = json.loads((out / "provenance.json").read_text(encoding="utf-8"))
    assert provenance["seed"] == 3
    assert provenance["overrides"] == {"seed": 3, "trajectories": 500}
    report = json.loads((out / "ft_report.json").read_text(encoding="utf-8"))
    assert report["samples"] == 500
    assert report["integral_total"]["stderr"] > 0


def test_invalid_config_exits_with_validation_code(write_config, tmp_path, capsys):
    data = {"model": "cnot", "params": {"alpha": 2.0}, "run": {"mode": "enumerate"}}
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(write_config(data)), "--out", str(out)]) == EXIT_VALIDATION
    assert "params.alpha" in capsys.readouterr().err
    assert not out.exists()
    missing = tmp_path / "missing.json"
    assert cli.main(["run", "--config", str(missing), "--out", str(out)]) == EXIT_VALIDATION
    assert cli.main(["run", "--config", str(missing)]) == EXIT_VALIDATION
    assert cli.main(["run", "--config", str(missing), "--out", str(out), "--seed", "-2"]) == EXIT_VALIDATION


def test_numerical_failure_exits_with_code_two(write_config, tmp_path, capsys):
    data = {
        "model": "three_level",
        "params": MACHINE,
        "run": {"mode": "integrate", "t_final": 20.0, "dt": 2.0, "grid_points": 11},
    }
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(write_config(data)), "--out", str(out)]) == EXIT_NUMERICAL
    assert "lindblad:" in capsys.readouterr().err
    assert not out.exists()


def test_machine_integration_with_sweep(write_config, tmp_path):
    data = {
        "model": "three_level",
        "params": MACHINE,
        "run": {
            "mode": "integrate", "t_final": 5.0, "dt": 0.01, "grid_points": 6,
            "sweep": {"beta1_min": 4.0, "beta1_max": 14.0, "points": 5},
        },
        "outputs": ["rates", "sweep"],
    }
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(write_config(data)), "--out", str(out), "--format", "json"]) == EXIT_OK
    rates = _lines(out / "rates.csv")
    assert rates[0] == ",".join(RATES_HEADER)
    assert len(rates) == 1 + 6 + 1
    sweep = _lines(out / "sweep.csv")
    assert sweep[0] == ",".join(SWEEP_HEADER)
    assert len(sweep) == 1 + 5 + 1
    diagnostics = json.loads((out / "provenance.json").read_text(encoding="utf-8"))["step_diagnostics"]
    assert diagnostics["steps"] == 500


def test_machine_enumeration_satisfies_the_fluctuation_theorems():
    cfg = parse_config(json.dumps({
        "model": "three_level", "params": MACHINE, "run": {"mode": "enumerate", "steps": 2, "dt": 0.05},
        "outputs": ["ft_report", "ledger"],
    }))
    bundle = ExperimentService(1).run(cfg)
    report = bundle.ft_report
    for ft in (report.integral_total, report.integral_adiabatic, report.integral_nonadiabatic):
        assert ft.available
        assert ft.value == pytest.approx(1.0, abs=1e-8)
    assert report.detailed_max_residual <= 1e-8
    assert sum(row.probability for row in bundle.ledger) == pytest.approx(1.0, abs=1e-10)


def test_cavity_integration_reports_energetics():
    cfg = parse_config(json.dumps({
        "model": "cavity",
        "params": {"eps_abs": 0.005, "gamma0": 0.01, "beta": 2.0, "n_max": 30},
        "run": {"mode": "integrate", "t_final": 20.0, "grid_points": 3},
    }))
    bundle = ExperimentService(1).run(cfg)
    assert len(bundle.rates) == 3
    first = bundle.rates[0]
    assert first.W_dot == pytest.approx(0.0, abs=1e-12)
    for row in bundle.rates:
        assert row.U_dot == pytest.approx(row.W_dot + row.Q_dot, abs=1e-12)
    diagnostics = bundle.provenance.step_diagnostics
    assert diagnostics["fock_levels"] == 31
    assert diagnostics["max_edge_population"] < 1e-8


def test_summary_formats():
    data = {"model": "cnot", "mode": "enumerate", "integral_total": 1.0, "files": ["a.csv", "b.json"], "x": None}
    assert json.loads(cli.format_summary(data, "json")) == data
    assert yaml.safe_load(cli.format_summary(data, "yaml")) == data
    table = cli.format_summary(data).splitlines()
    assert table[0] == "KEY\tVALUE"
    assert "files\ta.csv,b.json" in table
    assert "x\t-" in table


def test_help_exits_cleanly(capsys):
    assert cli.main(["--help"]) == EXIT_OK
    assert "quantum-ft" in capsys.readouterr().out


def test_json_emission_round_trips_floats():
    value = {"b": np.float64(0.1) + np.float64(0.2), "a": [np.int64(3), -0.0, float("inf")], "c": np.bool_(True)}
    compact = canonical_json(value)
    assert compact.index('"a"') < compact.index('"b"') < compact.index('"c"')
    restored = json.loads(pretty_json(value))
    assert restored["b"] == 0.1 + 0.2
    assert restored["a"] == [3, 0.0, "inf"]
    assert restored["c"] is True
    assert pretty_json(value).endswith("}\n")
    assert config_hash(value) == config_hash(json.loads(compact))


@pytest.mark.slow
def test_wide_cavity_unravels_with_the_default_step(write_config, tmp_path):
    # hot bath and strong drive: hundreds of Fock levels, so ||K|| dwarfs gamma0 (n_th + 1)
    data = {
        "model": "cavity",
        "params": {"omega": 1.0, "eps_abs": 0.02, "gamma0": 0.01, "beta": 0.1},
        "run": {"mode": "unravel", "trajectories": 3, "t_final": 0.5, "seed": 1},
    }
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(write_config(data)), "--out", str(out)]) == EXIT_OK
    diagnostics = json.loads((out / "provenance.json").read_text(encoding="utf-8"))["step_diagnostics"]
    model = model_library.build_cavity(CavityParams(**data["params"]))
    assert diagnostics["fock_levels"] == model.dim
    assert diagnostics["dt"] == pytest.approx(model.unravel_dt(), rel=1e-12)
    assert diagnostics["dt"] * np.linalg.norm(model.k_operator().toarray(), 2) <= 0.01 + 1e-12
