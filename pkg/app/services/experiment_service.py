import copy
import json
import logging
import math
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.config import config
from app.models.experiment import (
    MODES_BY_MODEL,
    PARAMS_BY_MODEL,
    CavityParams,
    CnotParams,
    ExperimentConfig,
    MachineParams,
)
from app.models.results import (
    FTReport,
    FTValue,
    HistogramSeries,
    LedgerRow,
    Provenance,
    RatesRow,
    ResultBundle,
    SweepRow,
)
from app.services import channels, lindblad, model_library, trajectories
from app.services.quantum_core import DensityOperator, ProjectiveBasis
from app.utils.errors import ConfigValidationError, TruncationError
from app.utils.formatting import config_hash

logger = logging.getLogger(__name__)

MERGE_TOL = 1e-12
# the machine relaxes from |g> when integrated; fluctuation-theorem runs start full rank
DEFAULT_INITIAL_STATE = {
    ("three_level", "integrate"): "ground",
    ("three_level", "unravel"): "steady",
    ("three_level", "enumerate"): "steady",
    ("cavity", "integrate"): "gibbs",
    ("cavity", "unravel"): "gibbs",
}
INITIAL_STATES = {"three_level": ("ground", "steady"), "cavity": ("gibbs", "steady")}
OUTPUTS_BY_MODE = {
    "enumerate": {"histogram", "ft_report", "ledger"},
    "sample": {"histogram", "ft_report"},
    "integrate": {"rates", "sweep"},
    "unravel": {"histogram", "ft_report"},
}
DEFAULT_OUTPUTS = {
    "enumerate": ["ft_report", "histogram"],
    "sample": ["ft_report", "histogram"],
    "integrate": ["rates"],
    "unravel": ["ft_report", "histogram"],
}


def requested_outputs(cfg: ExperimentConfig) -> List[str]:
    """Explicit outputs, or the natural set for the run mode when none were given."""
    if "outputs" in cfg.model_fields_set:
        return list(cfg.outputs)
    return list(DEFAULT_OUTPUTS[cfg.run.mode])


def _messages(error: ValidationError, prefix: str = "") -> List[str]:
    out = []
    for item in error.errors():
        loc = ".".join(str(part) for part in item["loc"])
        out.append(f"{prefix}{loc}: {item['msg']}")
    return out


def load_config_data(text: str) -> Dict[str, Any]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"invalid JSON: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigValidationError(["configuration must be a JSON object"])
    return data


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate everything and report every violation at once."""
    violations: List[str] = []
    cfg: Optional[ExperimentConfig] = None
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        violations.extend(_messages(exc))

    params = None
    model = data.get("model")
    if model in PARAMS_BY_MODEL and isinstance(data.get("params"), dict):
        try:
            params = PARAMS_BY_MODEL[model].model_validate(data["params"])
        except ValidationError as exc:
            violations.extend(_messages(exc, "params."))

    if cfg is not None and params is not None:
        violations.extend(_cross_checks(cfg, params))
    if violations:
        raise ConfigValidationError(violations)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    return validate_config(load_config_data(text))


def _cross_checks(cfg: ExperimentConfig, params) -> List[str]:
    out = []
    run = cfg.run
    if run.mode not in MODES_BY_MODEL[cfg.model]:
        out.append(f"run.mode: mode {run.mode!r} is not available for model {cfg.model!r}")
    outputs = requested_outputs(cfg)
    for name in outputs:
        if name not in OUTPUTS_BY_MODE[run.mode]:
            out.append(f"outputs: {name!r} is not produced in {run.mode!r} mode")
    if "sweep" in outputs and (cfg.model != "three_level" or run.sweep is None):
        out.append("run.sweep: the sweep output needs a three_level model with run.sweep settings")
    if run.mode in ("sample", "unravel") and run.trajectories < 1:
        out.append(f"run.trajectories: {run.mode} mode needs at least one trajectory")
    if run.mode in ("integrate", "unravel") and run.t_final is None:
        out.append(f"run.t_final: required in {run.mode} mode")
    if cfg.model in INITIAL_STATES and run.initial_state is not None:
        if run.initial_state not in INITIAL_STATES[cfg.model]:
            out.append(f"run.initial_state: {run.initial_state!r} is not available for model {cfg.model!r}")
    if isinstance(params, CnotParams):
        if params.alpha == 0 and params.initial_basis_s is None:
            out.append("params.initial_basis_s: required when alpha = 0 (degenerate system state)")
        if run.backward_init == "reset" and params.final_basis_e != "energy":
            out.append("run.backward_init: reset needs the environment measured in the energy basis")
        if run.backward_init == "custom":
            for key in ("custom_p_tilde", "custom_q_tilde"):
                weights = getattr(run, key)
                if weights is None or len(weights) != 2:
                    out.append(f"run.{key}: custom initialization needs two weights")
                elif min(weights) < 0 or sum(weights) <= 0:
                    out.append(f"run.{key}: weights must be non-negative with a positive sum")
    if isinstance(params, CavityParams) and params.n_max is not None:
        try:
            model_library.cavity_n_max(params)
        except TruncationError as exc:
            out.append(f"params.n_max: truncation too small: {exc.args[0]}")
    return out


def apply_overrides(
    data: Dict[str, Any], seed: Optional[int] = None, trajectories_count: Optional[int] = None
) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Command-line overrides of run fields; returns the new data and what changed."""
    data = copy.deepcopy(data)
    overrides: Dict[str, Any] = {}
    run = data.setdefault("run", {})
    if not isinstance(run, dict):
        return data, overrides
    if seed is not None:
        run["seed"] = seed
        overrides["seed"] = seed
    if trajectories_count is not None:
        run["trajectories"] = trajectories_count
        overrides["trajectories"] = trajectories_count
    return data, overrides


def exact_histogram(values: Sequence[float], weights: Sequence[float], tol: float = MERGE_TOL) -> Tuple[List[float], List[float]]:
    """Group equal values (within ``tol``) and sum their weights."""
    pairs = sorted((float(v), float(w)) for v, w in zip(values, weights) if math.isfinite(v))
    centres: List[float] = []
    probs: List[float] = []
    anchor = None
    for v, w in pairs:
        if anchor is not None and abs(v - anchor) <= tol * max(1.0, abs(anchor)):
            probs[-1] += w
        else:
            anchor = v
            centres.append(v)
            probs.append(w)
    return centres, probs


def binned_histogram(values: Sequence[float], bin_width: Optional[float] = None) -> Tuple[List[float], List[float]]:
    """Histogram of samples; Freedman-Diaconis width unless ``bin_width`` is given."""
    x = np.asarray([v for v in values if math.isfinite(v)], dtype=float)
    if x.size == 0:
        return [], []
    if bin_width is None:
        q75, q25 = np.percentile(x, [75, 25])
        if q75 == q25:
            return exact_histogram(x, np.full(x.size, 1.0 / x.size))
        bin_width = 2 * (q75 - q25) * x.size ** (-1 / 3)
    start = math.floor(x.min() / bin_width) * bin_width
    n_bins = max(1, int(math.ceil((x.max() - start) / bin_width)) + 1)
    counts, edges = np.histogram(x, bins=n_bins, range=(start, start + n_bins * bin_width))
    centres = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    return centres[keep].tolist(), (counts[keep] / x.size).tolist()


def _ft_value(result: trajectories.IntegralFT) -> FTValue:
    return FTValue(value=result.value, stderr=result.stderr, available=result.available)


def _ft_report(ledgers, weights=None, detailed: Optional[float] = None, averages=None) -> FTReport:
    results = {which: trajectories.integral_ft_from_ledgers(ledgers, which, weights)
               for which in ("total", "adiabatic", "nonadiabatic")}
    return FTReport(
        integral_total=_ft_value(results["total"]),
        integral_adiabatic=_ft_value(results["adiabatic"]),
        integral_nonadiabatic=_ft_value(results["nonadiabatic"]),
        detailed_max_residual=detailed,
        samples=0 if weights is not None else len(ledgers),
        averages=averages or {},
    )


def _ledger_rows(records) -> List[LedgerRow]:
    return [
        LedgerRow(
            probability=rec.probability,
            delta_s=rec.ledger.delta_s,
            delta_s_a=rec.ledger.delta_s_a,
            delta_s_na=rec.ledger.delta_s_na,
            sigma_s=rec.ledger.sigma_s,
            sigma_e=rec.ledger.sigma_e,
            i_tilde=rec.ledger.i_tilde,
        )
        for rec in records
    ]


class ExperimentService:
    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or config.WORKERS

    def run(self, cfg: ExperimentConfig, overrides: Optional[Dict[str, Any]] = None) -> ResultBundle:
        """Dispatch a validated configuration to the model it names."""
        started = time.perf_counter()
        params = cfg.resolved_params()
        handler = {
            "cnot": self._run_cnot,
            "three_level": self._run_machine,
            "cavity": self._run_cavity,
        }[cfg.model]
        logger.info("running %s in %s mode", cfg.model, cfg.run.mode)
        fields, diagnostics = handler(cfg, params)
        provenance = Provenance(
            config_hash=config_hash(cfg.model_dump(mode="json")),
            seed=cfg.run.seed,
            version=config.VERSION,
            overrides=overrides or {},
            step_diagnostics=diagnostics,
        )
        elapsed = time.perf_counter() - started
        logger.info("finished %s/%s in %.3f s", cfg.model, cfg.run.mode, elapsed)
        return ResultBundle(
            model=cfg.model,
            mode=cfg.run.mode,
            outputs=requested_outputs(cfg),
            provenance=provenance,
            wall_clock_seconds=elapsed,
            **fields,
        )

    # cnot

    def _run_cnot(self, cfg: ExperimentConfig, params: CnotParams):
        run = cfg.run
        custom = None
        if run.backward_init == "custom":
            custom = (tuple(run.custom_p_tilde), tuple(run.custom_q_tilde))
        process = model_library.build_cnot(params, run.backward_init, custom)
        if run.mode == "sample":
            records = trajectories.sample_trajectories(process, run.trajectories, run.seed, workers=self.workers)
            ledgers = [rec.ledger for rec in records]
            centres, probs = binned_histogram([l.delta_s for l in ledgers], run.bin_width)
            return (
                {
                    "ft_report": _ft_report(ledgers),
                    "histograms": [HistogramSeries(label=run.backward_init, values=centres, probabilities=probs)],
                },
                {"trajectories_sampled": len(records)},
            )

        records = trajectories.forward_distribution(process)
        weights = [rec.probability for rec in records]
        detailed = trajectories.verify_detailed_ft(process)
        averages = trajectories.average_entropies(process)
        centres, probs = exact_histogram([rec.ledger.delta_s for rec in records], weights)
        histograms = [HistogramSeries(label=run.backward_init, values=centres, probabilities=probs)]
        if run.backward_init != "correlated":
            inclusive = trajectories.forward_distribution(process.with_backward_init("correlated"))
            centres, probs = exact_histogram(
                [rec.ledger.delta_s for rec in inclusive], [rec.probability for rec in inclusive]
            )
            histograms.append(HistogramSeries(label="correlated", values=centres, probabilities=probs))
        average_fields = {
            "inclusive": averages.inclusive,
            "non_inclusive": averages.non_inclusive,
            "reset": averages.reset,
            "mutual_information_final": averages.mutual_information_final,
            "trajectory_average": averages.trajectory_average,
            "adiabatic": averages.adiabatic,
            "nonadiabatic": averages.nonadiabatic,
            "first_gate_work": model_library.cnot_first_gate_work(params),
        }
        return (
            {
                "ft_report": _ft_report([r.ledger for r in records], weights, detailed.max_residual, average_fields),
                "histograms": histograms,
                "ledger": _ledger_rows(records),
            },
            {"trajectories_enumerated": len(records), "split_available": detailed.split_available},
        )

    # three_level

    def _machine_initial_state(self, run, model) -> DensityOperator:
        choice = run.initial_state or DEFAULT_INITIAL_STATE[("three_level", run.mode)]
        if choice == "steady":
            return model.pi()
        if run.mode != "integrate":
            logger.warning(
                "initial state |g> is not full rank; the integral theorems only count backward paths "
                "that have a forward counterpart"
            )
        return DensityOperator.diagonal([1.0, 0.0, 0.0])

    def _run_machine(self, cfg: ExperimentConfig, params: MachineParams):
        run = cfg.run
        model = model_library.build_machine(params)
        rho0 = self._machine_initial_state(run, model)
        if run.mode == "integrate":
            grid = np.linspace(0.0, run.t_final, run.grid_points)
            result = lindblad.integrate(model, rho0, grid, dt=run.dt, richardson=True)
            rows = []
            for t, state in zip(result.times, result.states):
                rates = lindblad.entropy_rates(model, state, float(t))
                heat = sum(model_library.machine_heat_flows(model, state))
                rows.append(RatesRow(
                    t=float(t), S_dot=rates.s_dot, S_dot_i=rates.s_dot_i, S_dot_a=rates.s_dot_a,
                    S_dot_na=rates.s_dot_na, W_dot=0.0, Q_dot=heat, U_dot=heat, X_dot=float("nan"),
                ))
            fields: Dict[str, Any] = {"rates": rows}
            if run.sweep is not None:
                values = np.linspace(run.sweep.beta1_min, run.sweep.beta1_max, run.sweep.points)
                points = model_library.machine_beta1_sweep(params, values, self.workers)
                fields["sweep"] = [
                    SweepRow(
                        beta1=pt.beta1, beta1_virtual=pt.virtual[0], beta2_virtual=pt.virtual[1],
                        beta3_virtual=pt.virtual[2], Q1=pt.flows[0], Q2=pt.flows[1], Q3=pt.flows[2],
                    )
                    for pt in points
                ]
            return fields, _integration_diagnostics(result)

        if run.mode == "unravel":
            dt = run.dt or model.unravel_dt()
            ensemble = lindblad.jump_ensemble(
                model, rho0, run.t_final, dt, run.trajectories, run.seed, method=run.method, workers=self.workers
            )
            centres, probs = binned_histogram([l.delta_s for l in ensemble.ledgers], run.bin_width)
            return (
                {
                    "ft_report": _ft_report(list(ensemble.ledgers)),
                    "histograms": [HistogramSeries(label="unravel", values=centres, probabilities=probs)],
                },
                {
                    "dt": dt,
                    "method": run.method,
                    "jumps": sum(len(tr.events) for tr in ensemble.trajectories),
                },
            )

        dt = run.dt or 100 * model.default_dt()
        step = lindblad.one_step_map(model, dt)
        conc = channels.concatenate([step] * run.steps, [model.pi()] * run.steps)
        basis = ProjectiveBasis.computational(3)
        records = trajectories.concatenation_distribution(conc, rho0, basis)
        weights = [rec.probability for rec in records]
        detailed = trajectories.detailed_ft_residuals(records)
        centres, probs = exact_histogram([rec.ledger.delta_s for rec in records], weights)
        return (
            {
                "ft_report": _ft_report([r.ledger for r in records], weights, detailed.max_residual),
                "histograms": [HistogramSeries(label="product", values=centres, probabilities=probs)],
                "ledger": _ledger_rows(records),
            },
            {"dt": dt, "steps": run.steps, "trajectories_enumerated": len(records)},
        )

    # cavity

    def _run_cavity(self, cfg: ExperimentConfig, params: CavityParams):
        run = cfg.run
        model = model_library.build_cavity(params)
        if (run.initial_state or DEFAULT_INITIAL_STATE[("cavity", run.mode)]) == "steady":
            rho0 = model.pi()
        else:
            rho0 = model_library.cavity_thermal_state(params, model.dim)
        if run.mode == "integrate":
            grid = np.linspace(0.0, run.t_final, run.grid_points)
            result = lindblad.integrate(model, rho0, grid, dt=run.dt, richardson=True)
            rows = []
            edge = 0.0
            for t, state in zip(result.times, result.states):
                tr = model_library.cavity_rates_at(model, params, state, float(t))
                rows.append(RatesRow(
                    t=float(t), S_dot=tr.s_dot, S_dot_i=tr.s_dot_i, S_dot_a=tr.s_dot_a, S_dot_na=tr.s_dot_na,
                    W_dot=tr.w_dot, Q_dot=tr.q_dot, U_dot=tr.u_dot, X_dot=tr.x_dot,
                ))
                cut = model.dim - 1 - model_library.LEAKAGE_MARGIN
                edge = max(edge, float(np.real(np.diag(state.matrix))[cut + 1:].sum()))
            diagnostics = _integration_diagnostics(result)
            diagnostics["max_edge_population"] = edge
            diagnostics["fock_levels"] = model.dim
            if edge >= model_library.LEAKAGE_TOL:
                logger.warning("population %.2e reached the Fock truncation edge", edge)
            return {"rates": rows}, diagnostics

        dt = run.dt or model.unravel_dt()
        ensemble = lindblad.jump_ensemble(
            model, rho0, run.t_final, dt, run.trajectories, run.seed, method=run.method, workers=self.workers
        )
        centres, probs = binned_histogram([l.delta_s for l in ensemble.ledgers], run.bin_width)
        return (
            {
                "ft_report": _ft_report(list(ensemble.ledgers)),
                "histograms": [HistogramSeries(label="unravel", values=centres, probabilities=probs)],
            },
            {"dt": dt, "method": run.method, "fock_levels": model.dim},
        )


def _integration_diagnostics(result: lindblad.IntegrationResult) -> Dict[str, Any]:
    return {
        "dt": result.dt,
        "steps": result.steps,
        "min_eigenvalue": result.min_eigenvalue,
        "max_trace_error": result.max_trace_error,
        "richardson_residual": result.richardson_residual,
    }
