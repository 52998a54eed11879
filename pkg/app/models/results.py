from pydantic import BaseModel
from typing import Any, Dict, List, Optional


class FTValue(BaseModel):
    value: Optional[float] = None
    stderr: Optional[float] = None
    available: bool = False


class FTReport(BaseModel):
    integral_total: FTValue
    integral_adiabatic: FTValue
    integral_nonadiabatic: FTValue
    detailed_max_residual: Optional[float] = None
    samples: int = 0  # 0 for exact enumeration
    averages: Dict[str, Optional[float]] = {}


class HistogramSeries(BaseModel):
    label: str  # backward initialization the values belong to
    values: List[float]
    probabilities: List[float]


class RatesRow(BaseModel):
    t: float
    S_dot: float
    S_dot_i: float
    S_dot_a: float
    S_dot_na: float
    W_dot: float
    Q_dot: float
    U_dot: float
    X_dot: float


class SweepRow(BaseModel):
    beta1: float
    beta1_virtual: float
    beta2_virtual: float
    beta3_virtual: float
    Q1: float
    Q2: float
    Q3: float


class LedgerRow(BaseModel):
    probability: float
    delta_s: float
    delta_s_a: Optional[float] = None
    delta_s_na: Optional[float] = None
    sigma_s: float
    sigma_e: float
    i_tilde: float


class Provenance(BaseModel):
    config_hash: str
    seed: int
    version: str
    overrides: Dict[str, Any] = {}
    step_diagnostics: Dict[str, Any] = {}


class ResultBundle(BaseModel):
    model: str
    mode: str
    outputs: List[str] = []
    provenance: Provenance
    ft_report: Optional[FTReport] = None
    histograms: List[HistogramSeries] = []
    rates: List[RatesRow] = []
    sweep: List[SweepRow] = []
    ledger: List[LedgerRow] = []
    wall_clock_seconds: float = 0.0  # stdout summary only, never written to files
